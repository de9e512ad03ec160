"""Projected gradient descent of contrastive objectives over free unit vectors.

Both views of every instance are free parameters. Each step takes a plain
gradient step and projects every vector back onto the unit sphere.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .features import ViewPairBatch
from .losses import LossConfig, alignment_loss, combined_loss, uniformity_loss
from .matching import index_wise_pairs

DEFAULT_NOISE = 0.1


@dataclass(frozen=True, eq=False)
class OptimState:
    embeddings: ViewPairBatch
    step: int = 0
    lr: float = 0.05
    history: tuple = ()  # (step, l_a, l_u, loss)

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidParameterError(f"lr must be > 0, got {self.lr}")

    def history_csv(self) -> str:
        buf = io.StringIO(newline="")
        buf.write("step,l_a,l_u,loss\n")
        for step, la, lu, loss in self.history:
            buf.write(f"{step},{la!r},{lu!r},{loss!r}\n")
        return buf.getvalue()

    def mean_positive_cosine(self) -> float:
        flat = self.embeddings.flat()
        return float(np.mean(np.sum(flat[:, 0] * flat[:, 1], axis=-1)))


def _project(flat: np.ndarray) -> np.ndarray:
    # a blown-up step yields nan here, which the next loss check reports as divergence
    with np.errstate(invalid="ignore", over="ignore"):
        return flat / np.linalg.norm(flat, axis=-1, keepdims=True)


def init_random(n: int, hw: int, d: int, seed: int = 0, lr: float = 0.05,
                noise: float = DEFAULT_NOISE, height: Optional[int] = None) -> OptimState:
    """Gaussian unit vectors for view a; view b is view a plus seeded noise, renormalized."""
    if n < 2 or hw < 1:
        raise InvalidParameterError(f"need n >= 2 and hw >= 1, got n={n}, hw={hw}")
    if d < 2:
        raise InvalidParameterError("d must be >= 2: no spread is possible on the 0-sphere")
    if noise < 0:
        raise InvalidParameterError("noise scale must be >= 0")
    height = height or 1
    if hw % height:
        raise InvalidParameterError(f"hw={hw} is not divisible by height={height}")
    rng = np.random.default_rng(seed)
    a = _project(rng.standard_normal((n, hw, d)))
    b = a if noise == 0 else _project(a + noise * rng.standard_normal((n, hw, d)))
    flat = np.stack([a, b], axis=1)
    batch = ViewPairBatch.from_flat(flat, height, hw // height, normalized=True)
    return OptimState(batch, 0, lr)


def _metrics(flat: np.ndarray, cfg: LossConfig) -> tuple:
    la = alignment_loss(flat, replace(cfg, alignment_convention="sq_distance"))
    lu = uniformity_loss(flat, cfg)
    return la, lu


def run(state: OptimState, steps: int, w_a: float, w_u: float, w_c: float,
        cfg: LossConfig = LossConfig(), contrastive: str = "dense") -> OptimState:
    """Run ``steps`` projected-gradient steps on ``w_a L_a + w_u L_u + w_c InfoNCE``.

    History rows record the measured ``L_a`` (squared distance) and ``L_u``
    together with the objective value, before each step and once at the end.
    """
    if steps < 1:
        raise InvalidParameterError("steps must be >= 1")
    batch = state.embeddings
    height, width = batch.height, batch.width
    flat = np.array(batch.flat())
    pairs = index_wise_pairs(batch) if w_c > 0 and contrastive == "dense" else None
    history = list(state.history)
    step = state.step

    def record(rep):
        if history and history[-1][0] == step:
            return
        la, lu = _metrics(flat, cfg)
        history.append((step, la, lu, rep.value))

    for _ in range(steps):
        rep = combined_loss(flat, w_a, w_u, w_c, cfg, pairs=pairs, contrastive=contrastive, gradient=True)
        if not np.isfinite(rep.value) or not np.all(np.isfinite(rep.gradient)):
            raise DivergenceError(f"non-finite loss or gradient at step {step}", step=step)
        record(rep)
        flat = _project(flat - state.lr * rep.gradient)
        step += 1
    rep = combined_loss(flat, w_a, w_u, w_c, cfg, pairs=pairs, contrastive=contrastive)
    if not np.isfinite(rep.value):
        raise DivergenceError(f"non-finite loss at step {step}", step=step)
    record(rep)
    out = ViewPairBatch.from_flat(flat, height, width, normalized=True)
    return OptimState(out, step, state.lr, tuple(history))
