"""Binary losses with a Gaussian logit: value plus analytic partials in (mu, log_var).

Every elementwise function broadcasts over numpy arrays.  The network predicts a
mean ``mu`` and a log-variance ``s = log sigma^2`` per pixel; all functions clamp
``s`` to ``[-30, 30]`` before use.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 30.0
PROB_EPS = 1e-12


class RegionMode(str, enum.Enum):
    UNC_ALL = "UncAll"
    UNC_BOX_ONLY = "UncBoxOnly"


@dataclass(frozen=True)
class BootstrapParams:
    tau: float = 2.5
    slope: float = 0.2

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.slope > 0:
            raise ValueError(f"slope must be > 0, got {self.slope}")


@dataclass
class LossValueGrad:
    value: np.ndarray
    d_mu: np.ndarray
    d_log_var: np.ndarray


@dataclass
class GaussianLogitMap:
    """Per-pixel Gaussian logits, arrays of shape (N, C, H, W)."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self) -> None:
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu shape {self.mu.shape} != log_var shape {self.log_var.shape}")
        if self.mu.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) logits, got shape {self.mu.shape}")

    @property
    def n_classes(self) -> int:
        return self.mu.shape[1]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(clamp_log_var(self.log_var))


@dataclass
class TargetMask:
    """Targets of shape (N, H, W).

    ``y`` holds class ids (0 = background), ``in_box`` marks pixels inside any
    bounding box and ``pixel_perfect`` marks pixels whose label came from a true
    mask rather than from rasterized boxes.
    """

    y: np.ndarray
    in_box: np.ndarray
    pixel_perfect: np.ndarray

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.int64)
        self.in_box = np.asarray(self.in_box, dtype=bool)
        self.pixel_perfect = np.broadcast_to(np.asarray(self.pixel_perfect, dtype=bool), self.y.shape)
        if self.in_box.shape != self.y.shape:
            raise ValueError(f"in_box shape {self.in_box.shape} != y shape {self.y.shape}")


@dataclass
class LossBreakdown:
    """Mean loss over pixels with per-pixel diagnostics.

    ``d_mu`` / ``d_log_var`` are gradients of ``value`` (already divided by the
    pixel count) with gating applied.  ``weight`` is the bootstrap weight map
    (1 where no bootstrapping applies) and ``flip`` marks pixels whose target is
    replaced; both share the logits' (N, C, H, W) shape.
    """

    value: float
    per_pixel: np.ndarray
    d_mu: np.ndarray
    d_log_var: np.ndarray
    weight: np.ndarray
    flip: np.ndarray


def clamp_log_var(log_var):
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce(p_hat, y):
    """Non-negative binary cross-entropy of a probability against a 0/1 target."""
    p = np.clip(p_hat, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_logits(mu, y) -> LossValueGrad:
    """Plain BCE on ``sigmoid(mu)``; the variance is ignored."""
    p = sigmoid(mu)
    return LossValueGrad(bce(p, y), p - y, np.zeros_like(p))


def l2_uncertainty(mu, log_var, y) -> LossValueGrad:
    """Attenuated squared error ``(y - mu)^2 / (2 sigma^2) + s / 2``.

    The constant ``log(2 pi) / 2`` of the Gaussian NLL is dropped, so the value
    can be negative.
    """
    s = clamp_log_var(np.asarray(log_var, dtype=float))
    inv_var = np.exp(-s)
    r = np.asarray(y, dtype=float) - mu
    half_sq = 0.5 * r * r * inv_var
    return LossValueGrad(half_sq + 0.5 * s, -r * inv_var, 0.5 - half_sq)


def _shrink(log_var):
    # k = 1 / sqrt(1 + pi sigma^2 / 8)
    var = np.exp(clamp_log_var(np.asarray(log_var, dtype=float)))
    return 1.0 / np.sqrt(1.0 + np.pi * var / 8.0), var


def expected_sigmoid(mu, log_var):
    """Probit-style approximation of E[sigmoid(l)] for l ~ N(mu, sigma^2)."""
    k, _ = _shrink(log_var)
    return sigmoid(k * mu)


def bce_uncertainty(mu, log_var, y) -> LossValueGrad:
    k, var = _shrink(log_var)
    p = sigmoid(k * mu)
    err = p - y
    return LossValueGrad(bce(p, y), err * k, err * mu * (-np.pi * var / 16.0) * k**3)


def bootstrap_weight(log_var, params: BootstrapParams = BootstrapParams()):
    var = np.exp(clamp_log_var(np.asarray(log_var, dtype=float)))
    return sigmoid((params.tau - var) / params.slope)


def bootstrap_loss(mu, log_var, y, params: BootstrapParams = BootstrapParams()) -> LossValueGrad:
    """Mix of BCE toward ``y`` and toward ``1 - y`` weighted by the variance.

    The weight is a constant here: no gradient reaches ``log_var``.
    """
    w = bootstrap_weight(log_var, params)
    p = sigmoid(mu)
    value = w * bce(p, y) + (1.0 - w) * bce(p, 1.0 - y)
    d_mu = w * (p - y) + (1.0 - w) * (p - (1.0 - y))
    return LossValueGrad(value, d_mu, np.zeros_like(d_mu))


def _check_binary_inputs(logits: GaussianLogitMap, targets: TargetMask) -> None:
    if logits.n_classes != 1:
        raise ValueError(f"binary loss needs a single foreground channel, got C={logits.n_classes}")
    n, _, h, w = logits.mu.shape
    if targets.y.shape != (n, h, w):
        raise ValueError(f"target shape {targets.y.shape} does not match logits {(n, h, w)}")
    if logits.mu.size == 0:
        raise ValueError("empty logit map")


def _finish(per_pixel, d_mu, d_log_var, weight, flip) -> LossBreakdown:
    n = per_pixel.size
    return LossBreakdown(
        value=float(per_pixel.sum() / n),
        per_pixel=per_pixel,
        d_mu=d_mu / n,
        d_log_var=d_log_var / n,
        weight=weight,
        flip=flip,
    )


def plain_binary_loss(logits: GaussianLogitMap, targets: TargetMask) -> LossBreakdown:
    """Mean BCE on the mean logit for every pixel, whatever its label kind."""
    _check_binary_inputs(logits, targets)
    y = (targets.y[:, None] > 0).astype(float)
    t = bce_logits(logits.mu, y)
    return _finish(t.value, t.d_mu, t.d_log_var, np.ones_like(t.value), np.zeros(y.shape, dtype=bool))


def l2_binary_loss(
    logits: GaussianLogitMap,
    targets: TargetMask,
    region_mode: RegionMode = RegionMode.UNC_BOX_ONLY,
) -> LossBreakdown:
    """Squared error on pixel-perfect pixels, attenuated L2 on box-derived ones.

    No gating and no bootstrapping: the attenuated term trains both heads.
    """
    _check_binary_inputs(logits, targets)
    mu, s = logits.mu, logits.log_var
    y = (targets.y[:, None] > 0).astype(float)
    active = _uncertainty_region(targets, RegionMode(region_mode))[:, None]
    unc = l2_uncertainty(mu, s, y)
    r = mu - y
    value = np.where(active, unc.value, r * r)
    d_mu = np.where(active, unc.d_mu, 2.0 * r)
    d_s = np.where(active, unc.d_log_var, 0.0)
    return _finish(value, d_mu, d_s, np.ones_like(value), np.zeros(y.shape, dtype=bool))


def _uncertainty_region(targets: TargetMask, region_mode: RegionMode) -> np.ndarray:
    box_derived = ~targets.pixel_perfect
    if region_mode is RegionMode.UNC_ALL:
        return box_derived
    return box_derived & targets.in_box


def composite_binary_loss(
    logits: GaussianLogitMap,
    targets: TargetMask,
    params: BootstrapParams = BootstrapParams(),
    region_mode: RegionMode = RegionMode.UNC_BOX_ONLY,
    detached: GaussianLogitMap | None = None,
) -> LossBreakdown:
    """Uncertainty loss plus uncertainty-weighted bootstrapping, with gating.

    Pixel-perfect pixels, and box-derived pixels outside the uncertainty region,
    get plain BCE on ``mu``.  Inside the region the value is
    ``bce_uncertainty + bootstrap_loss``: the first term only trains ``log_var``
    and the second only trains ``mu``.

    ``detached`` supplies the constants standing in for the detached inputs
    (``mu`` in the uncertainty term, ``log_var`` in the bootstrap weight).  It
    defaults to ``logits`` itself; passing a frozen copy turns the gated
    gradient into the true gradient of the returned value, which is what the
    finite-difference checks rely on.
    """
    _check_binary_inputs(logits, targets)
    if detached is None:
        detached = logits
    region_mode = RegionMode(region_mode)
    mu, s = logits.mu, logits.log_var
    y = (targets.y[:, None] > 0).astype(float)
    active = _uncertainty_region(targets, region_mode)[:, None]

    plain = bce_logits(mu, y)
    unc = bce_uncertainty(detached.mu, s, y)
    boot = bootstrap_loss(mu, detached.log_var, y, params)
    weight = np.where(active, bootstrap_weight(detached.log_var, params), 1.0)

    value = np.where(active, unc.value + boot.value, plain.value)
    d_mu = np.where(active, boot.d_mu, plain.d_mu)
    d_s = np.where(active, unc.d_log_var, 0.0)
    return _finish(value, d_mu, d_s, weight, active & (weight < 0.5))
