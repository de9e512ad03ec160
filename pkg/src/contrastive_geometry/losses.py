"""Contrastive losses, alignment/uniformity metrics and their gradients.

Layout conventions
------------------
Pair-based functions take a :class:`ViewPairBatch` or a raw ``(N, 2, HW, d)``
array ("flat" layout). Raw arrays are treated as free points: nothing is
checked or renormalized, which is what finite-difference checks need.
Gradients come back in the layout of the input.

Every loss is an average over anchors. InfoNCE anchors are all ``2 N HW``
dense vectors (both views act as anchors), each contributing
``-s_pos / T + logsumexp(s_neg / T)``; the two sums are reported separately
as ``alignment_term`` and ``distribution_term``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InsufficientBatchError,
    InvalidInputError,
    InvalidParameterError,
    InvalidStateError,
)
from .features import DEFAULT_EPS, FeatureMap, InstanceVector, ViewPairBatch
from .matching import PairAssignment, index_wise_pairs

ALIGNMENT_CONVENTIONS = ("neg_cosine", "sq_distance")
UNIFORMITY_SCOPES = ("inter_instance_all_pairs", "positive_pairs_literal")
LOSS_SELECTORS = ("alignment", "uniformity", "dense_info_nce", "instance_info_nce")
DEFAULT_PAIR_CAP = 100_000


@dataclass(frozen=True)
class LossConfig:
    """Loss hyper-parameters.

    ``include_positive_in_denominator=None`` picks each loss's standard form:
    the instance loss keeps the positive in its denominator, the dense loss
    drops it.
    """

    temperature: float = 0.19
    kernel_t: float = 2.0
    include_positive_in_denominator: Optional[bool] = None
    alignment_convention: str = "neg_cosine"
    uniformity_scope: str = "inter_instance_all_pairs"
    pair_subsample: Optional[int] = DEFAULT_PAIR_CAP
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidParameterError(f"temperature must be > 0, got {self.temperature}")
        if not self.kernel_t > 0:
            raise InvalidParameterError(f"kernel_t must be > 0, got {self.kernel_t}")
        if self.alignment_convention not in ALIGNMENT_CONVENTIONS:
            raise InvalidParameterError(f"unknown alignment convention {self.alignment_convention!r}")
        if self.uniformity_scope not in UNIFORMITY_SCOPES:
            raise InvalidParameterError(f"unknown uniformity scope {self.uniformity_scope!r}")
        if self.pair_subsample is not None and self.pair_subsample < 2:
            raise InvalidParameterError("pair_subsample must be >= 2 when set")

    def positive_in_denominator(self, dense: bool) -> bool:
        if self.include_positive_in_denominator is None:
            return not dense
        return self.include_positive_in_denominator

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "kernel_t": self.kernel_t,
            "include_positive_in_denominator": self.include_positive_in_denominator,
            "alignment_convention": self.alignment_convention,
            "uniformity_scope": self.uniformity_scope,
            "pair_subsample": self.pair_subsample,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class LossReport:
    value: float
    alignment_term: float
    distribution_term: float
    gradient: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "alignment_term": self.alignment_term,
            "distribution_term": self.distribution_term,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# helpers

def _pair_flat(batch) -> tuple:
    """Return ``(flat, batch_or_None)`` with flat shaped ``(N, 2, HW, d)``."""
    if isinstance(batch, ViewPairBatch):
        if not batch.normalized:
            raise InvalidInputError("batch must be L2-normalized first (see l2_normalize)")
        return batch.flat(), batch
    flat = np.asarray(batch, dtype=np.float64)
    if flat.ndim != 4 or flat.shape[1] != 2:
        raise InvalidInputError(f"expected an (N, 2, HW, d) array, got shape {flat.shape}")
    return flat, None


def _restore_layout(grad_flat: np.ndarray, batch: Optional[ViewPairBatch]) -> np.ndarray:
    return grad_flat if batch is None else batch.unflatten(grad_flat)


def _unit_rows(x: np.ndarray) -> tuple:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms = np.maximum(norms, DEFAULT_EPS)
    return x / norms, norms


def _cos_backprop(g_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain rule through ``u = x / |x|``."""
    radial = np.sum(g_unit * unit, axis=-1, keepdims=True)
    return (g_unit - radial * unit) / norms


def _masked_logsumexp(logits: np.ndarray, mask: np.ndarray) -> tuple:
    """Row-wise logsumexp over ``mask`` with max shift; also returns the softmax."""
    shifted = np.where(mask, logits, -np.inf)
    top = shifted.max(axis=1, keepdims=True)
    expd = np.where(mask, np.exp(shifted - top), 0.0)
    total = expd.sum(axis=1, keepdims=True)
    return (np.log(total) + top)[:, 0], expd / total


def _check_pairs(pairs: PairAssignment, n: int, hw: int) -> None:
    if (pairs.n, pairs.hw) != (n, hw):
        raise InvalidInputError(f"assignment is for N={pairs.n}, HW={pairs.hw}, batch has N={n}, HW={hw}")


# ---------------------------------------------------------------------------
# InfoNCE

def _instance_vectors(batch) -> tuple:
    """Instance input as a ``(N, 2, d)`` array plus the original container."""
    if isinstance(batch, ViewPairBatch):
        if batch.hw != 1:
            raise InvalidInputError("instance loss needs one vector per view; pool the maps first")
        flat, _ = _pair_flat(batch)
        return flat[:, :, 0, :], batch
    if isinstance(batch, (list, tuple)):
        vecs = []
        for pair in batch:
            za, zb = pair
            if isinstance(za, InstanceVector):
                if not (za.normalized and zb.normalized):
                    raise InvalidInputError("instance vectors must be normalized first")
                za, zb = za.data, zb.data
            vecs.append(np.stack([np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)]))
        return np.stack(vecs), None
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[1:3] == (2, 1):
        return arr[:, :, 0, :], None
    if arr.ndim != 3 or arr.shape[1] != 2:
        raise InvalidInputError(f"expected (N, 2, d) or (N, 2, 1, d) instance pairs, got shape {arr.shape}")
    return arr, None


def instance_info_nce(batch, cfg: LossConfig = LossConfig(), gradient: bool = False) -> LossReport:
    """Instance-level InfoNCE over ``2N`` view vectors.

    Each vector is an anchor; its partner view is the positive and every
    other vector except itself forms the denominator (the positive included
    unless the config says otherwise).
    """
    z, container = _instance_vectors(batch)
    n = z.shape[0]
    if n < 2:
        raise InsufficientBatchError("instance InfoNCE needs at least 2 instances")
    lam = cfg.temperature
    keep_pos = cfg.positive_in_denominator(dense=False)
    flat = z.reshape(2 * n, -1)
    unit, norms = _unit_rows(flat)
    sim = unit @ unit.T
    partner = np.arange(2 * n) ^ 1  # rows ordered (i, a), (i, b), ...
    mask = ~np.eye(2 * n, dtype=bool)
    if not keep_pos:
        mask[np.arange(2 * n), partner] = False
    pos = sim[np.arange(2 * n), partner]
    lse, soft = _masked_logsumexp(sim / lam, mask)
    align = float(np.sum(-pos / lam) / (2 * n))
    dist = float(np.sum(lse) / (2 * n))
    grad = None
    if gradient:
        w = soft.copy()
        w[np.arange(2 * n), partner] -= 1.0
        w /= lam * 2 * n
        g_unit = w @ unit + w.T @ unit
        grad = _cos_backprop(g_unit, unit, norms).reshape(z.shape)
        if container is not None:
            grad = container.unflatten(grad[:, :, None, :])
        elif isinstance(batch, np.ndarray):
            grad = grad.reshape(batch.shape)
    return LossReport(align + dist, align, dist, grad)


def dense_info_nce(batch, pairs: Optional[PairAssignment] = None, cfg: LossConfig = LossConfig(),
                   gradient: bool = False) -> LossReport:
    """Dense InfoNCE over ``2 N HW`` anchors with the negative set of ``pairs``.

    Anchor ``(i, view, p)`` is paired with its matched vector in the other
    view of instance ``i``. Negatives follow ``pairs.negative_policy``; the
    positive joins the denominator only if the config asks for it.
    """
    if pairs is None:
        raise InvalidStateError("dense InfoNCE needs a PairAssignment (run a matching strategy first)")
    flat, container = _pair_flat(batch)
    n, _, hw, d = flat.shape
    _check_pairs(pairs, n, hw)
    lam = cfg.temperature
    keep_pos = cfg.positive_in_denominator(dense=True)
    policy = pairs.negative_policy

    unit, norms = _unit_rows(flat)
    all_u = unit.reshape(-1, d)
    block = 2 * hw
    total = all_u.shape[0]
    g_all = np.zeros_like(all_u) if gradient else None
    anchors = np.arange(block)
    same_view = (anchors[:, None] // hw) == (anchors[None, :] // hw)

    own_mask = np.zeros((block, block), dtype=bool)
    if not policy.exclude_own_view:
        own_mask |= same_view
    if policy.partner_view:
        own_mask |= ~same_view
    own_mask[anchors, anchors] = False

    align_sum = 0.0
    dist_sum = 0.0
    for i in range(n):
        lo = i * block
        rows = all_u[lo:lo + block]
        sim = rows @ all_u.T
        pos_col = np.concatenate([hw + pairs.forward[i], pairs.backward[i]])
        mask = np.full((block, total), policy.cross_instance, dtype=bool)
        mask[:, lo:lo + block] = own_mask
        mask[anchors, lo + pos_col] = keep_pos
        if not np.all(mask.any(axis=1)):
            raise InsufficientBatchError("an anchor has an empty denominator (need N >= 2 or a wider policy)")
        pos = sim[anchors, lo + pos_col]
        lse, soft = _masked_logsumexp(sim / lam, mask)
        align_sum += float(np.sum(-pos / lam))
        dist_sum += float(np.sum(lse))
        if gradient:
            w = soft
            w[anchors, lo + pos_col] -= 1.0
            w /= lam * n * block
            g_all[lo:lo + block] += w @ all_u
            g_all += w.T @ rows

    count = n * block
    align = align_sum / count
    dist = dist_sum / count
    grad = None
    if gradient:
        grad = _cos_backprop(g_all.reshape(flat.shape), unit, norms)
        grad = _restore_layout(grad, container)
    return LossReport(align + dist, align, dist, grad)


# ---------------------------------------------------------------------------
# alignment / uniformity

def alignment_loss(batch, cfg: LossConfig = LossConfig(), gradient: bool = False):
    """Mean over index-wise positive pairs of ``-cos`` or ``||a - b||^2``.

    Returns a float, or ``(value, grad)`` with ``gradient=True``.
    """
    flat, container = _pair_flat(batch)
    a, b = flat[:, 0], flat[:, 1]
    count = a.shape[0] * a.shape[1]
    if cfg.alignment_convention == "sq_distance":
        diff = a - b
        value = float(np.sum(diff * diff) / count)
        if not gradient:
            return value
        g = np.stack([2.0 * diff, -2.0 * diff], axis=1) / count
        return value, _restore_layout(g, container)
    ua, na = _unit_rows(a)
    ub, nb = _unit_rows(b)
    cos = np.sum(ua * ub, axis=-1)
    value = float(-np.sum(cos) / count)
    if not gradient:
        return value
    g = np.stack([_cos_backprop(-ub / count, ua, na), _cos_backprop(-ua / count, ub, nb)], axis=1)
    return value, _restore_layout(g, container)


def _single_view_flat(features) -> tuple:
    """One view as ``(N, HW, d)``; accepts FeatureMaps or a raw array."""
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], FeatureMap):
        shape = features[0].shape
        if any(f.shape != shape for f in features):
            raise InvalidInputError("feature maps differ in shape")
        if not all(f.normalized for f in features):
            raise InvalidInputError("feature maps must be L2-normalized first")
        return np.stack([f.columns() for f in features]), features
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (N, HW, d) features, got shape {arr.shape}")
    return arr, None


def _inter_instance_pairs(n: int, hw: int, cap: Optional[int], seed: int) -> tuple:
    """Pairs of vector indices from different instances, all of them or a seeded sample."""
    total = n * hw
    count = (total * total - n * hw * hw) // 2
    if count < 1:
        raise InsufficientBatchError("uniformity needs vectors from at least 2 instances")
    if cap is None or count <= cap:
        ii, jj = np.triu_indices(total, k=1)
        keep = (ii // hw) != (jj // hw)
        return ii[keep], jj[keep]
    rng = np.random.default_rng(seed)
    ii = rng.integers(total, size=cap)
    jj = rng.integers(total - hw, size=cap)
    start = (ii // hw) * hw
    jj = jj + hw * (jj >= start)
    return ii, jj


def _log_mean_potential(x, y, t, gradient):
    diff = x - y
    expo = -t * np.sum(diff * diff, axis=-1)
    top = expo.max()
    weights = np.exp(expo - top)
    total = weights.sum()
    value = float(np.log(total) + top - np.log(expo.shape[0]))
    if not gradient:
        return value, None
    w = (weights / total)[:, None]
    return value, -2.0 * t * w * diff


def _uniformity_view(x: np.ndarray, cfg: LossConfig, gradient: bool):
    n, hw, d = x.shape
    pts = x.reshape(-1, d)
    ii, jj = _inter_instance_pairs(n, hw, cfg.pair_subsample, cfg.seed)
    value, g_pair = _log_mean_potential(pts[ii], pts[jj], cfg.kernel_t, gradient)
    if not gradient:
        return value, None
    g = np.zeros_like(pts)
    np.add.at(g, ii, g_pair)
    np.add.at(g, jj, -g_pair)
    return value, g.reshape(x.shape)


def uniformity_loss(features, cfg: LossConfig = LossConfig(), gradient: bool = False):
    """Log of the mean Gaussian potential ``exp(-t ||x - y||^2)``.

    ``inter_instance_all_pairs`` averages over every pair of vectors taken from
    different instances (a seeded sample of ``cfg.pair_subsample`` pairs when
    there are more). Given a :class:`ViewPairBatch` the two views are scored
    separately and averaged. ``positive_pairs_literal`` averages over the
    index-wise positive pairs of a batch instead.

    Returns a float, or ``(value, grad)`` with ``gradient=True``.
    """
    literal = cfg.uniformity_scope == "positive_pairs_literal"
    is_pair = isinstance(features, ViewPairBatch) or (
        not isinstance(features, (list, tuple)) and np.ndim(features) == 4
    )
    if literal:
        if not is_pair:
            raise InvalidInputError("positive_pairs_literal scope needs both views (a ViewPairBatch)")
        flat, container = _pair_flat(features)
        d = flat.shape[-1]
        a = flat[:, 0].reshape(-1, d)
        b = flat[:, 1].reshape(-1, d)
        value, g_pair = _log_mean_potential(a, b, cfg.kernel_t, gradient)
        if not gradient:
            return value
        g = np.stack([g_pair.reshape(flat[:, 0].shape), -g_pair.reshape(flat[:, 0].shape)], axis=1)
        return value, _restore_layout(g, container)
    if is_pair:
        flat, container = _pair_flat(features)
        va, ga = _uniformity_view(flat[:, 0], cfg, gradient)
        vb, gb = _uniformity_view(flat[:, 1], cfg, gradient)
        value = 0.5 * (va + vb)
        if not gradient:
            return value
        return value, _restore_layout(0.5 * np.stack([ga, gb], axis=1), container)
    x, _ = _single_view_flat(features)
    value, g = _uniformity_view(x, cfg, gradient)
    return (value, g) if gradient else value


# ---------------------------------------------------------------------------
# combination and gradient dispatch

def combined_loss(batch, w_a: float, w_u: float, w_c: float, cfg: LossConfig = LossConfig(),
                  pairs: Optional[PairAssignment] = None, contrastive: str = "dense",
                  gradient: bool = False) -> LossReport:
    """``w_a * L_a + w_u * L_u + w_c * InfoNCE``.

    The alignment/distribution split folds ``L_a`` into the alignment side and
    ``L_u`` into the distribution side, so the report identity still holds.
    """
    weights = (w_a, w_u, w_c)
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise InvalidParameterError(f"weights must be >= 0 and not all zero, got {weights}")
    if contrastive not in ("dense", "instance"):
        raise InvalidParameterError(f"contrastive must be 'dense' or 'instance', got {contrastive!r}")
    align = dist = 0.0
    grad = None

    def add(g, w):
        nonlocal grad
        if g is not None:
            grad = w * g if grad is None else grad + w * g

    if w_a > 0:
        out = alignment_loss(batch, cfg, gradient)
        la, g = out if gradient else (out, None)
        align += w_a * la
        add(g, w_a)
    if w_u > 0:
        out = uniformity_loss(batch, cfg, gradient)
        lu, g = out if gradient else (out, None)
        dist += w_u * lu
        add(g, w_u)
    if w_c > 0:
        if contrastive == "dense":
            rep = dense_info_nce(batch, pairs, cfg, gradient)
        else:
            rep = instance_info_nce(batch, cfg, gradient)
        align += w_c * rep.alignment_term
        dist += w_c * rep.distribution_term
        add(rep.gradient, w_c)
    return LossReport(align + dist, align, dist, grad)


def loss_gradient(batch, which: str, cfg: LossConfig = LossConfig(),
                  pairs: Optional[PairAssignment] = None) -> np.ndarray:
    """Analytical gradient of one loss with respect to every input vector."""
    if which == "alignment":
        return alignment_loss(batch, cfg, gradient=True)[1]
    if which == "uniformity":
        return uniformity_loss(batch, cfg, gradient=True)[1]
    if which == "dense_info_nce":
        if pairs is None:
            raise InvalidStateError("dense_info_nce gradient requested before any matching was computed")
        return dense_info_nce(batch, pairs, cfg, gradient=True).gradient
    if which == "instance_info_nce":
        return instance_info_nce(batch, cfg, gradient=True).gradient
    raise InvalidParameterError(f"unknown loss selector {which!r}; choose from {LOSS_SELECTORS}")


def with_overrides(cfg: LossConfig, **kwargs) -> LossConfig:
    return replace(cfg, **kwargs)
