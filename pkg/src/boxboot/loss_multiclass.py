"""Multi-class cross-entropy with Gaussian logits estimated by Monte-Carlo sampling.

Logit vectors are sampled with the reparameterization ``l_t = mu + sigma * eps_t``
(``eps_t ~ N(0, I)``, diagonal covariance) and the expected softmax probability
of the target class is averaged in log space.  Vector functions take the class
axis last; map-level functions use the (N, C, H, W) layout of
:class:`~boxboot.loss_core.GaussianLogitMap`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from boxboot.loss_core import (
    GaussianLogitMap,
    LossBreakdown,
    LossValueGrad,
    TargetMask,
    clamp_log_var,
)


@dataclass(frozen=True)
class McConfig:
    t_samples: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.t_samples < 1:
            raise ValueError(f"t_samples must be >= 1, got {self.t_samples}")


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def keyed_normals(seed: int, step: int, keys, t_samples: int, n_classes: int) -> np.ndarray:
    """Standard normals of shape (T, len(keys), C) keyed by (seed, step, key).

    Each value is a pure function of its coordinates, so the noise seen by a
    pixel does not depend on which other pixels are evaluated alongside it.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    with np.errstate(over="ignore"):
        base = _splitmix64(np.array([seed], dtype=np.uint64) & _MASK64)
        base = _splitmix64(base ^ np.uint64(step))
        t = np.arange(t_samples, dtype=np.uint64)[:, None, None]
        c = np.arange(n_classes, dtype=np.uint64)[None, None, :]
        k = keys[None, :, None]
        lane = (k * np.uint64(t_samples) + t) * np.uint64(n_classes) + c
        h1 = _splitmix64(base ^ _splitmix64(lane * np.uint64(2)))
        h2 = _splitmix64(base ^ _splitmix64(lane * np.uint64(2) + np.uint64(1)))
    # 53-bit uniforms; u1 in (0, 1] keeps the log finite
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def standard_normals(mc: McConfig, rng: np.random.Generator, batch_shape: tuple, n_classes: int) -> np.ndarray:
    return rng.standard_normal((mc.t_samples, *batch_shape, n_classes))


def sample_logits(mu, log_var, eps) -> np.ndarray:
    """``mu + sigma * eps`` with ``eps`` of shape (T, ..., C)."""
    sigma = np.exp(0.5 * clamp_log_var(np.asarray(log_var, dtype=float)))
    return mu + sigma * eps


def mc_expected_ce(mu, log_var, y, eps) -> LossValueGrad:
    """Negative log of the Monte-Carlo expected softmax probability of class ``y``.

    ``mu`` and ``log_var`` have shape (..., C), ``y`` shape (...), ``eps`` shape
    (T, ..., C).  Gradients are taken through the samples with ``eps`` fixed.
    """
    mu = np.asarray(mu, dtype=float)
    s = clamp_log_var(np.asarray(log_var, dtype=float))
    y = np.asarray(y)
    t_samples = eps.shape[0]
    sigma = np.exp(0.5 * s)
    logits = mu + sigma * eps
    log_p = log_softmax(logits, axis=-1)
    onehot = np.eye(mu.shape[-1])[y]
    log_p_y = np.take_along_axis(log_p, np.broadcast_to(y[..., None], log_p.shape[:-1] + (1,)), axis=-1)[..., 0]
    log_mean = logsumexp(log_p_y, axis=0) - np.log(t_samples)
    # sample weights: softmax over t of log p_y
    w = np.exp(log_p_y - logsumexp(log_p_y, axis=0, keepdims=True))
    d_logits = -w[..., None] * (onehot - np.exp(log_p))
    d_mu = d_logits.sum(axis=0)
    d_s = (d_logits * eps).sum(axis=0) * 0.5 * sigma
    return LossValueGrad(-log_mean, d_mu, d_s)


def cross_entropy(mu, y) -> LossValueGrad:
    """Plain softmax cross-entropy on the mean logits, class axis last."""
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y)
    log_p = log_softmax(mu, axis=-1)
    value = -np.take_along_axis(log_p, y[..., None], axis=-1)[..., 0]
    d_mu = softmax(mu, axis=-1) - np.eye(mu.shape[-1])[y]
    return LossValueGrad(value, d_mu, np.zeros_like(d_mu))


def flip_target(mu, log_var, y, tau: float = 2.5):
    """Replace ``y`` by ``argmax(mu)`` wherever some class variance exceeds ``tau``."""
    var = np.exp(clamp_log_var(np.asarray(log_var, dtype=float)))
    return np.where(var.max(axis=-1) > tau, np.argmax(mu, axis=-1), y)


def pixel_keys(image_ids, height: int, width: int) -> np.ndarray:
    """Stable per-pixel RNG keys of shape (N, H, W) from image ids."""
    ids = np.asarray(image_ids, dtype=np.int64)
    return ids[:, None, None] * (height * width) + np.arange(height * width).reshape(height, width)


def composite_multiclass_loss(
    logits: GaussianLogitMap,
    targets: TargetMask,
    tau: float = 2.5,
    mc: McConfig = McConfig(),
    step: int = 0,
    image_ids=None,
    detached: GaussianLogitMap | None = None,
) -> LossBreakdown:
    """Gated multi-class loss.

    Pixel-perfect pixels and box-derived pixels outside boxes get plain
    cross-entropy on ``mu``.  Box-derived pixels inside a box get the sampled
    uncertainty term (trains ``log_var`` only) plus cross-entropy toward the
    flipped target (trains ``mu`` only).  Noise is keyed by
    ``(mc.seed, step, image id, pixel)``; ``image_ids`` defaults to ``0..N-1``.
    ``detached`` works as in :func:`~boxboot.loss_core.composite_binary_loss`.
    """
    n, c, h, w = logits.mu.shape
    if c < 2:
        raise ValueError(f"multi-class loss needs C >= 2, got {c}")
    if targets.y.shape != (n, h, w):
        raise ValueError(f"target shape {targets.y.shape} does not match logits {(n, h, w)}")
    if logits.mu.size == 0:
        raise ValueError("empty logit map")
    if targets.y.min(initial=0) < 0 or targets.y.max(initial=0) >= c:
        raise ValueError(f"target class out of range [0, {c})")
    if detached is None:
        detached = logits
    if image_ids is None:
        image_ids = np.arange(n)

    mu = np.moveaxis(logits.mu, 1, -1)
    s = np.moveaxis(logits.log_var, 1, -1)
    mu0 = np.moveaxis(detached.mu, 1, -1)
    s0 = np.moveaxis(detached.log_var, 1, -1)
    y = targets.y
    active = ~targets.pixel_perfect & targets.in_box

    y_star = np.where(active, flip_target(mu0, s0, y, tau), y)
    boot = cross_entropy(mu, y_star)
    value = boot.value.copy()
    d_mu = boot.d_mu
    d_s = np.zeros_like(d_mu)

    if active.any():
        keys = pixel_keys(image_ids, h, w)[active]
        eps = keyed_normals(mc.seed, step, keys, mc.t_samples, c)
        unc = mc_expected_ce(mu0[active], s[active], y[active], eps)
        value[active] += unc.value
        d_s[active] = unc.d_log_var

    high_var = np.exp(clamp_log_var(s0)).max(axis=-1) > tau
    flipped = active & high_var
    flip = flipped[:, None] & (y[:, None] == np.arange(c)[None, :, None, None])
    weight = np.broadcast_to(np.where(flipped, 0.0, 1.0)[:, None], logits.mu.shape).copy()
    count = value.size
    return LossBreakdown(
        value=float(value.sum() / count),
        per_pixel=value[:, None],
        d_mu=np.moveaxis(d_mu, -1, 1) / count,
        d_log_var=np.moveaxis(d_s, -1, 1) / count,
        weight=weight,
        flip=flip,
    )


def plain_multiclass_loss(logits: GaussianLogitMap, targets: TargetMask) -> LossBreakdown:
    """Mean softmax cross-entropy on ``mu`` for every pixel."""
    n, c, h, w = logits.mu.shape
    if targets.y.shape != (n, h, w):
        raise ValueError(f"target shape {targets.y.shape} does not match logits {(n, h, w)}")
    if targets.y.min(initial=0) < 0 or targets.y.max(initial=0) >= c:
        raise ValueError(f"target class out of range [0, {c})")
    t = cross_entropy(np.moveaxis(logits.mu, 1, -1), targets.y)
    count = t.value.size
    return LossBreakdown(
        value=float(t.value.sum() / count),
        per_pixel=t.value[:, None],
        d_mu=np.moveaxis(t.d_mu, -1, 1) / count,
        d_log_var=np.zeros_like(logits.log_var),
        weight=np.ones_like(logits.mu),
        flip=np.zeros(logits.mu.shape, dtype=bool),
    )
