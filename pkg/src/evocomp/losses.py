"""Imbalance-aware training objectives for the retention classifier.

Tokens are reweighted inversely to the density of their gradient norm
g = |p - y|, either with the exact sliding-window density or its unit-region
(histogram) approximation. A cosine-similarity regularizer pushes the
representations of retained and dropped tokens apart. Cross-entropy and focal
losses exist as ablation comparators.

Density weights are treated as constants in differentiation: every gradient
here is the gradient of the loss with the weights frozen at their current
values, which is also the target the finite-difference checks use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evocomp.core import DataError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class GhmConfig:
    """Density estimator selection: ``unit_region`` histograms with ``bins``
    regions (the default), or ``exact`` with window width ``epsilon``
    (defaulting to 1/bins so the two modes stay comparable). ``momentum``
    blends running bin counts into the histogram; 0 disables it."""

    mode: str = "unit_region"
    bins: int = 100
    epsilon: float | None = None
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("unit_region", "exact"):
            raise DataError(f"unknown ghm mode {self.mode!r}")
        if self.bins < 1:
            raise DataError("bins must be >= 1")
        if self.epsilon is not None and not 0.0 < self.epsilon <= 1.0:
            raise DataError("epsilon must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError("momentum must lie in [0, 1)")
        if self.momentum > 0.0 and self.mode != "unit_region":
            raise DataError("momentum requires unit_region mode (it runs on bin counts)")

    @property
    def eps(self) -> float:
        return self.epsilon if self.epsilon is not None else 1.0 / self.bins


@dataclass
class GhmState:
    """Running bin counts for the momentum variant; one per training loop."""

    ema_counts: np.ndarray | None = None


@dataclass(frozen=True)
class LossBatch:
    """One pool of tokens: clamped probabilities, binary labels, and (when the
    cosine term is used) the token representations."""

    probs: np.ndarray
    labels: np.ndarray
    reps: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.clip(np.asarray(self.probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
        labels = np.asarray(self.labels, dtype=np.float64)
        if probs.shape != labels.shape or probs.ndim != 1:
            raise DataError("probs and labels must be 1-D and the same length")
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise DataError("labels must be binary")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)
        if self.reps is not None:
            reps = np.asarray(self.reps, dtype=np.float64)
            if reps.shape[0] != probs.shape[0]:
                raise DataError("one representation row per token required")
            object.__setattr__(self, "reps", reps)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0.0)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1.0)


def gradient_norms(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """g_i = |p_i - y_i|, in [0, 1]."""
    return np.abs(np.asarray(probs, dtype=np.float64) - np.asarray(labels, dtype=np.float64))


def gradient_density_exact(g: np.ndarray, eps: float) -> np.ndarray:
    """Sliding-window density: the count of tokens with gradient norm in
    [g_i - eps/2, g_i + eps/2), divided by the window width clipped to [0, 1]."""
    if not 0.0 < eps <= 1.0:
        raise DataError("eps must lie in (0, 1]")
    g = np.asarray(g, dtype=np.float64)
    widths = np.minimum(g + eps / 2, 1.0) - np.maximum(g - eps / 2, 0.0)
    ordered = np.sort(g)
    hi = np.searchsorted(ordered, g + eps / 2, side="left")
    lo = np.searchsorted(ordered, g - eps / 2, side="left")
    counts = hi - lo
    return counts / widths


def unit_regions(g: np.ndarray, bins: int) -> np.ndarray:
    """Histogram region per token: floor(g * bins), with g = 1 clamped into
    the last region."""
    g = np.asarray(g, dtype=np.float64)
    return np.minimum(np.floor(g * bins).astype(np.int64), bins - 1)


def ghm_weights_unit_region(
    g: np.ndarray, bins: int, state: GhmState | None = None, momentum: float = 0.0
) -> np.ndarray:
    """beta_i = n / GD(g_i) with GD approximated as region_count * bins."""
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[0]
    regions = unit_regions(g, bins)
    counts = np.bincount(regions, minlength=bins).astype(np.float64)
    if state is not None and momentum > 0.0:
        if state.ema_counts is None:
            state.ema_counts = counts
        else:
            state.ema_counts = momentum * state.ema_counts + (1.0 - momentum) * counts
        counts = state.ema_counts
    gd = counts[regions] * bins
    return n / gd


def ghm_weights(g: np.ndarray, cfg: GhmConfig, state: GhmState | None = None) -> np.ndarray:
    """Dispatch on the configured density mode; beta_i = n / GD(g_i)."""
    g = np.asarray(g, dtype=np.float64)
    if cfg.mode == "unit_region":
        return ghm_weights_unit_region(g, cfg.bins, state=state, momentum=cfg.momentum)
    return g.shape[0] / gradient_density_exact(g, cfg.eps)


def bce_elementwise(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def ghm_c_loss(
    batch: LossBatch,
    cfg: GhmConfig,
    beta: np.ndarray | None = None,
    state: GhmState | None = None,
) -> float:
    """(1/n) sum_i beta_i * bce(p_i, y_i); pass ``beta`` to reuse frozen weights."""
    if beta is None:
        beta = ghm_weights(gradient_norms(batch.probs, batch.labels), cfg, state=state)
    return float(np.mean(beta * bce_elementwise(batch.probs, batch.labels)))


def ghm_c_grad_probs(batch: LossBatch, cfg: GhmConfig, beta: np.ndarray | None = None) -> np.ndarray:
    """d ghm_c_loss / d probs with the weights held constant."""
    if beta is None:
        beta = ghm_weights(gradient_norms(batch.probs, batch.labels), cfg)
    p, y = batch.probs, batch.labels
    return beta * (p - y) / (p * (1.0 - p)) / batch.n


def _row_normalize(reps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return reps / safe, norms[:, 0]


def cs_loss(batch: LossBatch) -> float:
    """Mean cosine similarity over all (negative, positive) representation
    pairs; 0 when either side is empty."""
    if batch.reps is None:
        raise DataError("cs_loss needs token representations")
    i0, i1 = batch.negatives, batch.positives
    if i0.size == 0 or i1.size == 0:
        return 0.0
    unit, _ = _row_normalize(batch.reps)
    return float(np.mean(unit[i0] @ unit[i1].T))


def cs_grad_reps(batch: LossBatch) -> np.ndarray:
    """d cs_loss / d reps; zero rows for tokens outside both index sets."""
    if batch.reps is None:
        raise DataError("cs_loss needs token representations")
    grads = np.zeros_like(np.asarray(batch.reps, dtype=np.float64))
    i0, i1 = batch.negatives, batch.positives
    if i0.size == 0 or i1.size == 0:
        return grads
    unit, norms = _row_normalize(batch.reps)
    scale = 1.0 / (i0.size * i1.size)
    cos = unit[i0] @ unit[i1].T  # (|I0|, |I1|)
    # d cos(a, b) / d a = (b_hat - cos * a_hat) / |a|
    sum_pos = unit[i1].sum(axis=0)
    grads[i0] = scale * (sum_pos[None, :] - cos.sum(axis=1, keepdims=True) * unit[i0]) / norms[i0, None]
    sum_neg = unit[i0].sum(axis=0)
    grads[i1] = scale * (sum_neg[None, :] - cos.sum(axis=0)[:, None] * unit[i1]) / norms[i1, None]
    return grads


def total_loss(
    batch: LossBatch,
    cfg: GhmConfig,
    alpha: float = 1.0,
    beta: np.ndarray | None = None,
) -> float:
    """ghm_c_loss + alpha * cs_loss."""
    value = ghm_c_loss(batch, cfg, beta=beta)
    if alpha != 0.0:
        value = value + alpha * cs_loss(batch)
    return value


def ce_loss(batch: LossBatch) -> float:
    """Plain mean binary cross-entropy."""
    return float(np.mean(bce_elementwise(batch.probs, batch.labels)))


def focal_loss(batch: LossBatch, gamma: float = 2.0, alpha_f: float = 0.25) -> float:
    """mean alpha_f * (1 - p_t)^gamma * (-log p_t), p_t the true-class probability."""
    p, y = batch.probs, batch.labels
    p_t = np.where(y == 1.0, p, 1.0 - p)
    return float(np.mean(alpha_f * (1.0 - p_t) ** gamma * (-np.log(p_t))))


def focal_grad_probs(batch: LossBatch, gamma: float = 2.0, alpha_f: float = 0.25) -> np.ndarray:
    """d focal_loss / d probs."""
    p, y = batch.probs, batch.labels
    p_t = np.where(y == 1.0, p, 1.0 - p)
    d_pt = alpha_f * (gamma * (1.0 - p_t) ** (gamma - 1.0) * np.log(p_t) - (1.0 - p_t) ** gamma / p_t)
    sign = np.where(y == 1.0, 1.0, -1.0)
    return d_pt * sign / batch.n
