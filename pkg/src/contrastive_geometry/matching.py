"""Positive/negative pair construction for dense features.

Three strategies are provided:

* ``index_wise``: positives share the spatial index across the two views.
* ``cosine_argmax``: each anchor takes the most cosine-similar vector of the
  other view (one-to-many; ties go to the lowest index).
* ``optimal_transport``: an entropic OT plan between the two views, solved with
  Sinkhorn-Knopp scaling, reduced to a hard top-1 match per row/column.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, NumericalDegeneracyError
from .features import FeatureMap, ViewPairBatch, pairwise_cos_matrix

STRATEGIES = ("index_wise", "cosine_argmax", "optimal_transport")

DEFAULT_REG = 0.1
DEFAULT_ITERATIONS = 10
MAX_ITERATIONS = 10_000


@dataclass(frozen=True)
class NegativePolicy:
    """Which vectors enter an anchor's negative set.

    exclude_own_view: drop the anchor's own feature map entirely.
    partner_view: keep the other view of the same instance, minus the positive.
    cross_instance: keep both views of every other instance in the batch.
    """

    exclude_own_view: bool = True
    partner_view: bool = True
    cross_instance: bool = True

    def negatives_per_anchor(self, n: int, hw: int) -> int:
        count = 0
        if not self.exclude_own_view:
            count += hw - 1
        if self.partner_view:
            count += hw - 1
        if self.cross_instance:
            count += (n - 1) * 2 * hw
        return count

    def describe(self) -> str:
        return (
            f"exclude_own_view={int(self.exclude_own_view)} "
            f"partner_view={int(self.partner_view)} cross_instance={int(self.cross_instance)}"
        )


INDEX_POLICY = NegativePolicy()
CROSS_INSTANCE_POLICY = NegativePolicy(partner_view=False)


@dataclass(frozen=True, eq=False)
class PairAssignment:
    """Resolved positives for a batch.

    ``forward[i, p]`` is the view-b index matched to anchor ``p`` of view a in
    instance ``i``; ``backward[i, p]`` is the view-a index matched to anchor
    ``p`` of view b.
    """

    strategy: str
    forward: np.ndarray
    backward: np.ndarray
    negative_policy: NegativePolicy = field(default_factory=NegativePolicy)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidParameterError(f"unknown strategy {self.strategy!r}")
        for name in ("forward", "backward"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.forward.shape != self.backward.shape or self.forward.ndim != 2:
            raise InvalidInputError("forward/backward matches must both be (N, HW)")
        hw = self.forward.shape[1]
        if self.forward.size and (self.forward.min() < 0 or self.forward.max() >= hw
                                  or self.backward.min() < 0 or self.backward.max() >= hw):
            raise InvalidInputError("match index out of range")

    @property
    def n(self) -> int:
        return self.forward.shape[0]

    @property
    def hw(self) -> int:
        return self.forward.shape[1]

    def positives(self) -> list:
        """``(i, p, q)`` triples for view-a anchors."""
        return [(i, p, int(self.forward[i, p])) for i in range(self.n) for p in range(self.hw)]

    def negatives_per_anchor(self) -> int:
        return self.negative_policy.negatives_per_anchor(self.n, self.hw)

    def counts(self) -> dict:
        return {
            "positives_per_anchor": 1,
            "negatives_per_anchor": self.negatives_per_anchor(),
            "cross_instance_pool": (self.n - 1) * 2 * self.hw if self.negative_policy.cross_instance else 0,
        }

    def check_batch(self, batch: ViewPairBatch) -> None:
        if (self.n, self.hw) != (batch.n, batch.hw):
            raise InvalidInputError(
                f"assignment is for N={self.n}, HW={self.hw} but batch has N={batch.n}, HW={batch.hw}"
            )

    def to_csv(self) -> str:
        buf = io.StringIO(newline="")
        buf.write(f"# strategy={self.strategy} {self.negative_policy.describe()}\n")
        buf.write("i,p,q\n")
        for i, p, q in self.positives():
            buf.write(f"{i},{p},{q}\n")
        return buf.getvalue()


def index_wise_pairs(batch: ViewPairBatch) -> PairAssignment:
    idx = np.broadcast_to(np.arange(batch.hw), (batch.n, batch.hw))
    return PairAssignment("index_wise", idx, idx, INDEX_POLICY)


def cosine_argmax_pairs(batch: ViewPairBatch) -> PairAssignment:
    forward = np.empty((batch.n, batch.hw), dtype=np.int64)
    backward = np.empty_like(forward)
    for i, (a, b) in enumerate(batch.instances):
        sim = pairwise_cos_matrix(a, b)
        # np.argmax returns the first maximum, i.e. the lowest index on ties
        forward[i] = np.argmax(sim, axis=1)
        backward[i] = np.argmax(sim, axis=0)
    return PairAssignment("cosine_argmax", forward, backward, CROSS_INSTANCE_POLICY)


def cost_map(a: FeatureMap, b: FeatureMap) -> np.ndarray:
    """Cosine-distance cost ``1 - cos(a_p, b_q)``, entries in ``[0, 2]``."""
    return 1.0 - pairwise_cos_matrix(a, b)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    cost: np.ndarray
    reg_strength: float
    iterations_run: int
    marginal_residual: float

    @property
    def ot_lambda(self) -> float:
        return 1.0 / self.reg_strength

    def to_dict(self, inline_limit: int = 64) -> dict:
        out = {
            "reg_strength": self.reg_strength,
            "ot_lambda": self.ot_lambda,
            "iterations_run": self.iterations_run,
            "marginal_residual": self.marginal_residual,
            "ot_distance": ot_distance(self),
            "shape": list(self.plan.shape),
        }
        if self.plan.shape[0] <= inline_limit:
            out["plan"] = self.plan.tolist()
            out["row_marginals"] = self.row_marginals.tolist()
            out["col_marginals"] = self.col_marginals.tolist()
        return out


def marginal_residual(plan, r, c) -> float:
    return float(max(np.max(np.abs(plan.sum(axis=1) - r)), np.max(np.abs(plan.sum(axis=0) - c))))


def sinkhorn_plan(
    cost,
    reg: float = DEFAULT_REG,
    iterations: Optional[int] = None,
    r=None,
    c=None,
    tol: Optional[float] = None,
) -> TransportPlan:
    """Entropic OT plan by Sinkhorn-Knopp scaling.

    Runs exactly ``iterations`` row/column scaling sweeps (default
    :data:`DEFAULT_ITERATIONS`). With ``tol`` set, stops as soon as the
    marginal residual drops to ``tol``; ``iterations`` then acts as a cap,
    default :data:`MAX_ITERATIONS`.

    The kernel is ``exp(-(cost - min cost) / reg)``; the constant shift only
    rescales the kernel and is absorbed by the scaling vectors.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise InvalidInputError(f"cost must be a non-empty matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)) or cost.min() < 0:
        raise InvalidInputError("cost entries must be finite and >= 0")
    if not reg > 0:
        raise InvalidParameterError(f"reg must be > 0, got {reg}")
    if iterations is None:
        iterations = DEFAULT_ITERATIONS if tol is None else MAX_ITERATIONS
    if iterations < 1:
        raise InvalidParameterError(f"iterations must be >= 1, got {iterations}")
    rows, cols = cost.shape
    r = np.full(rows, 1.0 / rows) if r is None else np.asarray(r, dtype=np.float64)
    c = np.full(cols, 1.0 / cols) if c is None else np.asarray(c, dtype=np.float64)
    if r.shape != (rows,) or c.shape != (cols,):
        raise InvalidParameterError("marginal lengths do not match the cost matrix")
    if np.any(r <= 0) or np.any(c <= 0):
        raise InvalidParameterError("marginals must be strictly positive")
    if abs(r.sum() - c.sum()) > 1e-9 * max(r.sum(), c.sum()):
        raise InvalidParameterError(f"marginal sums differ: {r.sum()} vs {c.sum()}")

    lam = 1.0 / reg
    kernel = np.exp(-lam * (cost - cost.min()))
    dead = np.flatnonzero(~np.any(kernel > 0, axis=1))
    if dead.size:
        raise NumericalDegeneracyError(f"kernel row {int(dead[0])} underflowed to zero; increase reg")
    dead = np.flatnonzero(~np.any(kernel > 0, axis=0))
    if dead.size:
        raise NumericalDegeneracyError(f"kernel column {int(dead[0])} underflowed to zero; increase reg")

    u = np.ones(cols)
    run = 0
    residual = np.inf
    for run in range(1, iterations + 1):
        v = r / (kernel @ u)
        u = c / (kernel.T @ v)
        if tol is not None:
            # columns are exact after the u update, so only rows can be off
            residual = float(np.max(np.abs(v * (kernel @ u) - r)))
            if residual <= tol:
                break
    plan = v[:, None] * kernel * u[None, :]
    if not np.all(np.isfinite(plan)):
        raise NumericalDegeneracyError("Sinkhorn scaling produced non-finite entries")
    return TransportPlan(
        plan=plan,
        row_marginals=r,
        col_marginals=c,
        cost=cost,
        reg_strength=float(reg),
        iterations_run=run,
        marginal_residual=marginal_residual(plan, r, c),
    )


def ot_distance(plan: TransportPlan) -> float:
    """Frobenius inner product of the plan with its cost map."""
    if plan.plan.shape != plan.cost.shape:
        raise InvalidInputError("plan and cost shapes differ")
    return float(np.sum(plan.plan * plan.cost))


def transport_plans(batch: ViewPairBatch, reg: float = DEFAULT_REG, iterations: Optional[int] = None,
                    tol: Optional[float] = None) -> list:
    """One view-a to view-b plan per instance, in instance order."""
    return [sinkhorn_plan(cost_map(a, b), reg, iterations, tol=tol) for a, b in batch.instances]


def optimal_transport_pairs(batch: ViewPairBatch, reg: float = DEFAULT_REG,
                            iterations: int = DEFAULT_ITERATIONS) -> PairAssignment:
    """Hard top-1 extraction from per-instance OT plans (row argmax / column argmax)."""
    plans = transport_plans(batch, reg, iterations)
    forward = np.stack([np.argmax(tp.plan, axis=1) for tp in plans])
    backward = np.stack([np.argmax(tp.plan, axis=0) for tp in plans])
    return PairAssignment("optimal_transport", forward, backward, CROSS_INSTANCE_POLICY)


def match(batch: ViewPairBatch, strategy: str = "index_wise", reg: float = DEFAULT_REG,
          iterations: int = DEFAULT_ITERATIONS) -> PairAssignment:
    if strategy == "index_wise":
        return index_wise_pairs(batch)
    if strategy == "cosine_argmax":
        return cosine_argmax_pairs(batch)
    if strategy == "optimal_transport":
        return optimal_transport_pairs(batch, reg, iterations)
    raise InvalidParameterError(f"unknown matching strategy {strategy!r}")
