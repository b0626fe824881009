"""Differentiable objectives for waveform translation.

The hybrid objective combines three terms on a predicted/reference pair:
a reconstruction term (RMSE blended with an RMSE over five summary
statistics), a correlation penalty mapping Pearson r into [0, inf), and a
soft-DTW alignment term. A cohort aggregate adds the weighted population
standard deviation of per-subject losses to their sum so pretraining does
not overfit the observed subjects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray

__all__ = [
    "StatFeatures",
    "LossConfig",
    "HybridBreakdown",
    "rmse",
    "stat_features",
    "waveform_loss",
    "correlation_loss",
    "softdtw_loss",
    "hybrid_loss",
    "hybrid_loss_mean",
    "cohort_regularized_loss",
]

STAT_FEATURE_ORDER = ("mean", "std", "skewness", "min", "max")


@dataclass(frozen=True)
class StatFeatures:
    """The five waveform summary statistics used as the penalty vector."""

    mean: float
    std: float
    skewness: float
    minimum: float
    maximum: float

    @classmethod
    def from_array(cls, values: np.ndarray) -> "StatFeatures":
        m, s, k, lo, hi = (float(v) for v in np.asarray(values).reshape(5))
        return cls(m, s, k, lo, hi)


@dataclass(frozen=True)
class LossConfig:
    """Scalar hyperparameters of the hybrid and cohort objectives.

    alpha blends waveform RMSE against the statistics penalty, c keeps the
    correlation reciprocal finite, gamma smooths the alignment soft
    minimum, (phi_w, phi_r, phi_a) weight the three hybrid terms, and
    omega scales the cohort deviation penalty.
    """

    alpha: float = 0.3
    c: float = 1e-8
    gamma: float = 0.1
    phi_w: float = 1.0
    phi_r: float = 10.0
    phi_a: float = 0.01
    omega: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.c <= 0.0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        for name in ("phi_w", "phi_r", "phi_a", "omega"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class HybridBreakdown:
    """Weighted term values of one hybrid-loss evaluation, for logging."""

    waveform: float
    correlation: float
    alignment: float
    total: float


def _as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def rmse(yhat, y) -> DiffArray:
    """Root-mean-square error; gradient at exact equality is 0."""
    yhat, y = _as_diff(yhat), _as_diff(y)
    if yhat.shape != y.shape:
        raise ad.ShapeMismatch("rmse", yhat.shape, y.shape)
    if yhat.size == 0:
        raise ValueError("rmse: empty input")
    d = yhat - y
    return ad.sqrt(ad.amean(d * d))


def stat_features(y) -> DiffArray:
    """[mean, population std, skewness, min, max] as a 5-vector.

    Skewness is Fisher-Pearson m3 / m2^1.5, defined as 0 when m2 = 0.
    Min/max route their gradient to the first attaining index.
    """
    y = _as_diff(y)
    if y.size < 2:
        raise ValueError(f"stat_features: need at least 2 samples, got {y.size}")
    mu = ad.amean(y)
    centered = y - mu
    m2 = ad.amean(centered * centered)
    std = ad.sqrt(m2)
    if float(m2.values) == 0.0:
        skew = DiffArray(0.0)  # constant by convention, so zero gradient
    else:
        m3 = ad.amean(centered * centered * centered)
        skew = m3 / ad.power(m2, 1.5)
    parts = [ad.reshape(v, (1,)) for v in (mu, std, skew, ad.amin(y), ad.amax(y))]
    return ad.concat(parts, axis=0)


def waveform_loss(yhat, y, alpha: float = 0.3) -> DiffArray:
    """(1 - alpha) * rmse(yhat, y) + alpha * rmse over the five statistics."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"waveform_loss: alpha must be in [0, 1], got {alpha}")
    base = rmse(yhat, y)
    penalty = rmse(stat_features(yhat), stat_features(y))
    return (1.0 - alpha) * base + alpha * penalty


def correlation_loss(yhat, y, c: float = 1e-8) -> DiffArray:
    """1 / (2*(r + 1) + c) with r the Pearson correlation of the pair.

    Minimum 1/(4 + c) at r = 1, maximum 1/c at r = -1. Constant inputs
    have no defined correlation and raise.
    """
    yhat, y = _as_diff(yhat), _as_diff(y)
    if yhat.shape != y.shape:
        raise ad.ShapeMismatch("correlation_loss", yhat.shape, y.shape)
    if yhat.size < 2:
        raise ValueError("correlation_loss: need at least 2 samples")
    if c <= 0.0:
        raise ValueError("correlation_loss: c must be positive")
    if np.ptp(yhat.values) == 0.0 or np.ptp(y.values) == 0.0:
        raise ValueError("correlation_loss: correlation undefined for constant input")
    xc = yhat - ad.amean(yhat)
    yc = y - ad.amean(y)
    num = ad.asum(xc * yc)
    den = ad.sqrt(ad.asum(xc * xc) * ad.asum(yc * yc))
    r = num / den
    return 1.0 / (2.0 * (r + 1.0) + c)


def _softdtw_forward_numpy(costs: np.ndarray, gamma: float) -> np.ndarray:
    """Smoothed-min DP over (batch, n, m) cost tensors, by anti-diagonals.

    Returns the padded (batch, n+1, m+1) table; the loss sits at [-1, -1].
    """
    b, n, m = costs.shape
    r = np.full((b, n + 1, m + 1), np.inf)
    r[:, 0, 0] = 0.0
    for k in range(2, n + m + 1):
        i_lo, i_hi = max(1, k - m), min(n, k - 1)
        if i_lo > i_hi:
            continue
        ii = np.arange(i_lo, i_hi + 1)
        jj = k - ii
        r0 = r[:, ii - 1, jj]
        r1 = r[:, ii, jj - 1]
        r2 = r[:, ii - 1, jj - 1]
        lo = np.minimum(np.minimum(r0, r1), r2)  # finite for every reachable cell
        z = (
            np.exp((lo - r0) / gamma)
            + np.exp((lo - r1) / gamma)
            + np.exp((lo - r2) / gamma)
        )
        r[:, ii, jj] = costs[:, ii - 1, jj - 1] + lo - gamma * np.log(z)
    return r


def _softdtw_cost_grad_numpy(costs: np.ndarray, r: np.ndarray, gamma: float) -> np.ndarray:
    """d(loss)/d(cost[i,j]) via the smoothed-DP backward recursion."""
    b, n, m = costs.shape
    e = np.zeros((b, n + 2, m + 2))
    e[:, n + 1, m + 1] = 1.0
    rp = np.full((b, n + 2, m + 2), -np.inf)
    rp[:, 1 : n + 1, 1 : m + 1] = r[:, 1:, 1:]
    rp[:, n + 1, m + 1] = r[:, n, m]
    dp = np.zeros((b, n + 2, m + 2))
    dp[:, 1 : n + 1, 1 : m + 1] = costs
    for k in range(n + m, 1, -1):
        i_lo, i_hi = max(1, k - m), min(n, k - 1)
        if i_lo > i_hi:
            continue
        ii = np.arange(i_lo, i_hi + 1)
        jj = k - ii
        rij = rp[:, ii, jj]
        wa = np.exp((rp[:, ii + 1, jj] - rij - dp[:, ii + 1, jj]) / gamma)
        wb = np.exp((rp[:, ii, jj + 1] - rij - dp[:, ii, jj + 1]) / gamma)
        wc = np.exp((rp[:, ii + 1, jj + 1] - rij - dp[:, ii + 1, jj + 1]) / gamma)
        e[:, ii, jj] = (
            wa * e[:, ii + 1, jj] + wb * e[:, ii, jj + 1] + wc * e[:, ii + 1, jj + 1]
        )
    return e[:, 1 : n + 1, 1 : m + 1]


try:  # jit-compiled DP loops; the numpy versions above stay as the fallback
    from numba import njit as _njit
    from numba import prange as _prange

    # Batch elements are independent and write disjoint slices, so the
    # parallel loops stay bitwise deterministic.
    @_njit(cache=True, parallel=True)
    def _softdtw_forward_nb(costs, gamma):  # pragma: no cover - exercised via wrapper
        b, n, m = costs.shape
        inv_g = 1.0 / gamma
        r = np.full((b, n + 1, m + 1), np.inf)
        for bi in _prange(b):
            r[bi, 0, 0] = 0.0
            for i in range(1, n + 1):
                for j in range(1, m + 1):
                    r0 = r[bi, i - 1, j]
                    r1 = r[bi, i, j - 1]
                    r2 = r[bi, i - 1, j - 1]
                    lo = min(r0, r1, r2)
                    # values at the minimum contribute exp(0) = 1 without an exp call
                    z = 0.0
                    z += np.exp((lo - r0) * inv_g) if r0 > lo else 1.0
                    z += np.exp((lo - r1) * inv_g) if r1 > lo else 1.0
                    z += np.exp((lo - r2) * inv_g) if r2 > lo else 1.0
                    r[bi, i, j] = costs[bi, i - 1, j - 1] + lo - gamma * np.log(z)
        return r

    @_njit(cache=True, parallel=True)
    def _softdtw_cost_grad_nb(costs, r, gamma):  # pragma: no cover
        b, n, m = costs.shape
        inv_g = 1.0 / gamma
        e = np.zeros((b, n + 2, m + 2))
        rp = np.full((b, n + 2, m + 2), -np.inf)
        dp = np.zeros((b, n + 2, m + 2))
        for bi in _prange(b):
            e[bi, n + 1, m + 1] = 1.0
            rp[bi, 1 : n + 1, 1 : m + 1] = r[bi, 1:, 1:]
            rp[bi, n + 1, m + 1] = r[bi, n, m]
            dp[bi, 1 : n + 1, 1 : m + 1] = costs[bi]
            for i in range(n, 0, -1):
                for j in range(m, 0, -1):
                    rij = rp[bi, i, j]
                    wa = np.exp((rp[bi, i + 1, j] - rij - dp[bi, i + 1, j]) * inv_g)
                    wb = np.exp((rp[bi, i, j + 1] - rij - dp[bi, i, j + 1]) * inv_g)
                    wc = np.exp(
                        (rp[bi, i + 1, j + 1] - rij - dp[bi, i + 1, j + 1]) * inv_g
                    )
                    e[bi, i, j] = (
                        wa * e[bi, i + 1, j]
                        + wb * e[bi, i, j + 1]
                        + wc * e[bi, i + 1, j + 1]
                    )
        return e[:, 1 : n + 1, 1 : m + 1]

    _softdtw_forward = _softdtw_forward_nb
    _softdtw_cost_grad = _softdtw_cost_grad_nb
except ImportError:  # pragma: no cover
    _softdtw_forward = _softdtw_forward_numpy
    _softdtw_cost_grad = _softdtw_cost_grad_numpy


def softdtw_loss(yhat, y, gamma: float = 0.1) -> DiffArray:
    """Soft-DTW alignment loss with squared pointwise cost.

    Computes -gamma * log sum over monotone alignment paths of
    exp(-path cost / gamma) via the smoothed-min recursion
    R[i,j] = cost(i,j) + softmin_gamma(R[i-1,j], R[i,j-1], R[i-1,j-1]),
    with the log-sum-exp max-subtracted for stability. 1-D inputs give a
    scalar; (batch, len) inputs give the per-pair loss vector.
    """
    if gamma <= 0.0:
        raise ValueError(f"softdtw_loss: gamma must be positive, got {gamma}")
    yhat, y = _as_diff(yhat), _as_diff(y)
    if yhat.ndim != y.ndim or yhat.ndim not in (1, 2):
        raise ad.ShapeMismatch("softdtw_loss", yhat.shape, y.shape)
    batched = yhat.ndim == 2
    xv = yhat.values if batched else yhat.values[None, :]
    yv = y.values if batched else y.values[None, :]
    if batched and xv.shape[0] != yv.shape[0]:
        raise ad.ShapeMismatch("softdtw_loss", yhat.shape, y.shape)
    if xv.shape[1] == 0 or yv.shape[1] == 0:
        raise ValueError("softdtw_loss: sequences must be non-empty")

    diff = xv[:, :, None] - yv[:, None, :]
    costs = diff * diff
    r = _softdtw_forward(costs, gamma)
    loss = r[:, -1, -1]
    out = loss if batched else loss[0]
    need_x = yhat.node_id is not None
    need_y = y.node_id is not None

    def backward(g):
        e = _softdtw_cost_grad(costs, r, gamma)
        gb = np.asarray(g).reshape(-1, 1, 1)
        weighted = e * (2.0 * diff) * gb
        gx = weighted.sum(axis=2) if need_x else None
        gy = -weighted.sum(axis=1) if need_y else None
        if not batched:
            gx = gx[0] if need_x else None
            gy = gy[0] if need_y else None
        return gx, gy

    return ad.record("softdtw", out, (yhat, y), backward)


def hybrid_loss(yhat, y, config: LossConfig) -> tuple[DiffArray, HybridBreakdown]:
    """Weighted sum of the waveform, correlation, and alignment terms.

    Returns the scalar loss plus a breakdown of the three weighted terms.
    """
    lw = waveform_loss(yhat, y, config.alpha)
    lr = correlation_loss(yhat, y, config.c)
    la = softdtw_loss(yhat, y, config.gamma)
    total = config.phi_w * lw + config.phi_r * lr + config.phi_a * la
    breakdown = HybridBreakdown(
        waveform=config.phi_w * float(lw.values),
        correlation=config.phi_r * float(lr.values),
        alignment=config.phi_a * float(la.values),
        total=float(total.values),
    )
    return total, breakdown


def hybrid_loss_mean(
    yhat_batch, y_batch, config: LossConfig
) -> tuple[DiffArray, HybridBreakdown]:
    """Hybrid loss averaged over a (batch, len) stack of window pairs.

    The waveform and correlation terms are evaluated per window; the
    alignment term runs as one batched DP for speed. Equivalent to
    averaging hybrid_loss over the rows.
    """
    yhat_batch, y_batch = _as_diff(yhat_batch), _as_diff(y_batch)
    if yhat_batch.shape != y_batch.shape or yhat_batch.ndim != 2:
        raise ad.ShapeMismatch("hybrid_loss_mean", yhat_batch.shape, y_batch.shape)
    n = yhat_batch.shape[0]
    lw_terms = []
    lr_terms = []
    for i in range(n):
        yh = yhat_batch[i]
        yy = y_batch[i]
        lw_terms.append(ad.reshape(waveform_loss(yh, yy, config.alpha), (1,)))
        lr_terms.append(ad.reshape(correlation_loss(yh, yy, config.c), (1,)))
    lw = ad.amean(ad.concat(lw_terms, axis=0))
    lr = ad.amean(ad.concat(lr_terms, axis=0))
    la = ad.amean(softdtw_loss(yhat_batch, y_batch, config.gamma))
    total = config.phi_w * lw + config.phi_r * lr + config.phi_a * la
    breakdown = HybridBreakdown(
        waveform=config.phi_w * float(lw.values),
        correlation=config.phi_r * float(lr.values),
        alignment=config.phi_a * float(la.values),
        total=float(total.values),
    )
    return total, breakdown


def cohort_regularized_loss(losses, omega: float = 1.0) -> DiffArray:
    """omega * population-std of per-subject losses, plus their sum.

    With equal losses the deviation term is 0 and its gradient is defined
    as 0 (square-root convention); a singleton reduces to the lone loss.
    """
    if omega < 0.0:
        raise ValueError(f"cohort_regularized_loss: omega must be >= 0, got {omega}")
    losses = [_as_diff(l) for l in losses]
    if not losses:
        raise ValueError("cohort_regularized_loss: empty loss list")
    for l in losses:
        if l.size != 1:
            raise ValueError("cohort_regularized_loss: losses must be scalars")
    vec = ad.concat([ad.reshape(l, (1,)) for l in losses], axis=0)
    total = ad.asum(vec)
    centered = vec - ad.amean(vec)
    deviation = ad.sqrt(ad.amean(centered * centered))
    return omega * deviation + total
