"""Finite-difference gradient suites, one per loss variant.

Each suite checks the pointwise loss primitives on random (mu, s, y) draws and
then the whole pipeline (network forward -> loss -> backward) on 8x8 inputs.
Functions are looked up on their modules at call time, so a patched primitive
is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from boxboot import diffnet, loss_core, loss_multiclass
from boxboot.loss_core import GaussianLogitMap, TargetMask

TOL = 1e-4
MC_TOL = 1e-3
N_POINTS = 1000
N_MC_POINTS = 200
MU_RANGE = (-6.0, 6.0)
S_RANGE = (-4.0, 2.0)
SUITE_NAMES = ("BcePlain", "L2Unc", "BceUncBootstrap", "MultiClass")


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        # NaN fails too
        return bool(self.max_rel_err <= self.tol)

    def line(self) -> str:
        return f"{self.name:<28} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} {'ok' if self.ok else 'FAIL'}"


def rel_err(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _draw(rng: np.random.Generator, n: int):
    mu = rng.uniform(*MU_RANGE, size=n)
    s = rng.uniform(*S_RANGE, size=n)
    y = rng.integers(0, 2, size=n).astype(float)
    return mu, s, y


def pointwise_error(fn: Callable, mu, s, y, h: float = 1e-6, detach_s: bool = False) -> float:
    """Worst relative error of ``fn``'s (d_mu, d_log_var) against central differences.

    With ``detach_s`` the log-variance is a constant of the loss, so the
    numeric d_log_var is 0 by definition.
    """
    out = fn(mu, s, y)
    num_mu = (fn(mu + h, s, y).value - fn(mu - h, s, y).value) / (2 * h)
    if detach_s:
        num_s = np.zeros_like(s)
    else:
        num_s = (fn(mu, s + h, y).value - fn(mu, s - h, y).value) / (2 * h)
    err = max(rel_err(out.d_mu, num_mu).max(), rel_err(out.d_log_var, num_s).max())
    return float(err) if np.all(np.isfinite([out.d_mu, out.d_log_var])) else float("nan")


def _bootstrap_frozen_w(mu, s, y):
    # W depends on s only as a constant; the detached loss never varies with s
    return loss_core.bootstrap_loss(mu, s, y)


def mc_pointwise_error(n_points: int = N_MC_POINTS, h: float = 1e-5, seed: int = 0, t_samples: int = 20) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in (2, 3):
        n = n_points // 2
        mu = rng.uniform(*MU_RANGE, size=(n, c))
        s = rng.uniform(*S_RANGE, size=(n, c))
        y = rng.integers(0, c, size=n)
        eps = rng.standard_normal((t_samples, n, c))
        out = loss_multiclass.mc_expected_ce(mu, s, y, eps)
        for j in range(c):
            step = np.zeros(c)
            step[j] = h
            f = lambda m, v: loss_multiclass.mc_expected_ce(m, v, y, eps).value  # noqa: E731
            num_mu = (f(mu + step, s) - f(mu - step, s)) / (2 * h)
            num_s = (f(mu, s + step) - f(mu, s - step)) / (2 * h)
            worst = max(worst, rel_err(out.d_mu[:, j], num_mu).max(), rel_err(out.d_log_var[:, j], num_s).max())
    return float(worst)


def _random_params(n_classes: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = diffnet.init_params(n_classes, seed=int(rng.integers(2**31)))
    # non-zero biases keep pre-activations away from the ReLU kink
    for name in diffnet.LAYERS:
        params[f"{name}.bias"] = rng.normal(0, 0.3, size=params[f"{name}.bias"].shape)
    return params


def _random_targets(rng: np.random.Generator, n: int, size: int, classes: int) -> TargetMask:
    in_box = np.zeros((n, size, size), dtype=bool)
    for i in range(n):
        x0, y0 = rng.integers(0, size // 2, size=2)
        x1, y1 = rng.integers(size // 2, size, size=2)
        in_box[i, y0 : y1 + 1, x0 : x1 + 1] = True
    y = np.where(in_box, rng.integers(1, classes + 1, size=in_box.shape), 0)
    # one box-derived image, one pixel-perfect image
    kinds = np.arange(n) % 2 == 1
    return TargetMask(y=y, in_box=in_box, pixel_perfect=kinds[:, None, None])


def network_error(loss_fn: Callable, n_classes: int, seed: int = 0, n_probes: int = 20, size: int = 8) -> float:
    """Gradient check of ``loss_fn(logits, targets, detached)`` through the network.

    The detached inputs are frozen at the unperturbed parameters, which turns
    the gated gradient into the exact gradient of the returned value.
    """
    rng = np.random.default_rng(seed)
    params = _random_params(n_classes, rng)
    images = rng.random((2, 3, size, size))
    targets = _random_targets(rng, 2, size, max(n_classes - 1, 1))
    frozen, _ = diffnet.forward(params, images)
    frozen = GaussianLogitMap(frozen.mu.copy(), frozen.log_var.copy())

    def f(p):
        logits, cache = diffnet.forward(p, images)
        loss = loss_fn(logits, targets, frozen)
        return loss.value, diffnet.backward(p, cache, loss.d_mu, loss.d_log_var)

    return diffnet.finite_diff_check(f, params, n_probes=n_probes, h=1e-6, seed=seed)


def _binary_suite(name: str, primitives: list[tuple[Callable, bool]], network_loss: Callable, seed: int) -> list[SuiteResult]:
    mu, s, y = _draw(np.random.default_rng(seed), N_POINTS)
    point = max(pointwise_error(fn, mu, s, y, detach_s=detach) for fn, detach in primitives)
    net = max(network_error(network_loss, 1, seed=seed + k) for k in range(3))
    return [SuiteResult(f"{name}/pointwise", point, TOL), SuiteResult(f"{name}/network C=1", net, TOL)]


def suite_bce_plain(seed: int = 0) -> list[SuiteResult]:
    results = _binary_suite(
        "BcePlain",
        [(lambda m, v, t: loss_core.bce_logits(m, t), True)],
        lambda logits, targets, frozen: loss_core.plain_binary_loss(logits, targets),
        seed,
    )
    multi = max(
        network_error(lambda lg, t, fr: loss_multiclass.plain_multiclass_loss(lg, t), c, seed=seed + c) for c in (2, 3)
    )
    return results + [SuiteResult("BcePlain/network C=2,3", multi, TOL)]


def suite_l2_unc(seed: int = 0) -> list[SuiteResult]:
    return _binary_suite(
        "L2Unc",
        [(loss_core.l2_uncertainty, False)],
        lambda logits, targets, frozen: loss_core.l2_binary_loss(logits, targets),
        seed,
    )


def suite_bce_unc_bootstrap(seed: int = 0) -> list[SuiteResult]:
    results = _binary_suite(
        "BceUncBootstrap",
        [(loss_core.bce_uncertainty, False), (_bootstrap_frozen_w, True)],
        lambda logits, targets, frozen: loss_core.composite_binary_loss(logits, targets, detached=frozen),
        seed,
    )
    unc_all = network_error(
        lambda lg, t, fr: loss_core.composite_binary_loss(lg, t, region_mode=loss_core.RegionMode.UNC_ALL, detached=fr),
        1,
        seed=seed + 7,
    )
    results[1].max_rel_err = max(results[1].max_rel_err, unc_all)
    return results


def suite_multiclass(seed: int = 0) -> list[SuiteResult]:
    point = mc_pointwise_error(seed=seed)

    def composite(logits, targets, frozen):
        # tau = 0.5 puts some active pixels on each side of the flip rule
        return loss_multiclass.composite_multiclass_loss(logits, targets, tau=0.5, step=3, detached=frozen)

    net = max(network_error(composite, c, seed=seed + c) for c in (2, 3))
    return [SuiteResult("MultiClass/pointwise", point, MC_TOL), SuiteResult("MultiClass/network C=2,3", net, TOL)]


SUITES: dict[str, Callable[[int], list[SuiteResult]]] = {
    "BcePlain": suite_bce_plain,
    "L2Unc": suite_l2_unc,
    "BceUncBootstrap": suite_bce_unc_bootstrap,
    "MultiClass": suite_multiclass,
}


def run_suites(names=None, seed: int = 0) -> list[SuiteResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    results = []
    for name in names:
        results.extend(SUITES[name](seed))
    return results
