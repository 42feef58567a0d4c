"""A three-layer fully-convolutional net with mean and log-variance heads.

Parameters live in a plain ``dict[str, np.ndarray]``; conv weights use the
(out, in, 3, 3) layout.  Convolutions run on a zero-padded, flattened copy of
the batch so that each of the nine kernel taps is a contiguous slice and one
matrix product; rows and columns that straddle the padding are computed and
then discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from boxboot.loss_core import GaussianLogitMap

LAYERS = ("conv1", "conv2", "conv3")
HIDDEN = 16
LOG_VAR_BIAS = -2.0
CKPT_MAGIC = b"BOXBOOT1"


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def init_params(n_classes: int, seed: int = 0, in_channels: int = 3, hidden: int = HIDDEN) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, log-variance bias at -2."""
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    rng = np.random.default_rng(seed)
    shapes = [(hidden, in_channels), (hidden, hidden), (2 * n_classes, hidden)]
    params = {}
    for name, (co, ci) in zip(LAYERS, shapes):
        a = np.sqrt(6.0 / (9 * ci + 9 * co))
        params[f"{name}.weight"] = rng.uniform(-a, a, size=(co, ci, 3, 3))
        params[f"{name}.bias"] = np.zeros(co)
    params["conv3.bias"][n_classes:] = LOG_VAR_BIAS
    return params


def n_classes_of(params: dict[str, np.ndarray]) -> int:
    return params["conv3.weight"].shape[0] // 2


@dataclass
class _Grid:
    """Index bookkeeping for the padded flat layout of an (N, H, W) batch."""

    n: int
    h: int
    w: int

    @property
    def wp(self) -> int:
        return self.w + 2

    @property
    def size(self) -> int:
        return self.n * (self.h + 2) * (self.w + 2)

    @property
    def span(self) -> int:
        # number of output positions: every padded position whose 3x3 window fits
        return self.size - 2 * self.wp - 2

    @property
    def offsets(self) -> list[int]:
        return [dy * self.wp + dx for dy in range(3) for dx in range(3)]

    def pad(self, x: np.ndarray) -> np.ndarray:
        """(C, N, H, W) -> (C, size) with a zero ring around every image."""
        c = x.shape[0]
        out = np.zeros((c, self.n, self.h + 2, self.w + 2), dtype=x.dtype)
        out[:, :, 1:-1, 1:-1] = x
        return out.reshape(c, self.size)

    def span_to_padded(self, y: np.ndarray) -> np.ndarray:
        out = np.zeros((y.shape[0], self.size), dtype=y.dtype)
        out[:, self.wp + 1 : self.wp + 1 + self.span] = y
        view = out.reshape(-1, self.n, self.h + 2, self.w + 2)
        view[:, :, 0, :] = 0
        view[:, :, -1, :] = 0
        view[:, :, :, 0] = 0
        view[:, :, :, -1] = 0
        return out

    def span_to_images(self, y: np.ndarray) -> np.ndarray:
        """(C, span) -> (N, C, H, W)."""
        return self.span_to_padded(y).reshape(-1, self.n, self.h + 2, self.w + 2)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)

    def images_to_span(self, g: np.ndarray) -> np.ndarray:
        """(N, C, H, W) -> (C, span), zero outside image interiors."""
        padded = self.pad(g.transpose(1, 0, 2, 3))
        return padded[:, self.wp + 1 : self.wp + 1 + self.span]


def _taps(weight: np.ndarray) -> np.ndarray:
    co, ci = weight.shape[:2]
    # contiguous taps keep the products on the BLAS path
    return np.ascontiguousarray(weight.transpose(2, 3, 0, 1).reshape(9, co, ci))


def _conv_forward(grid: _Grid, xp: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    taps = _taps(weight)
    span = grid.span
    offs = grid.offsets
    out = taps[0] @ xp[:, :span]
    for k in range(1, 9):
        out += taps[k] @ xp[:, offs[k] : offs[k] + span]
    out += bias[:, None]
    return out


def _conv_backward(grid: _Grid, xp: np.ndarray, weight: np.ndarray, g: np.ndarray, need_input: bool):
    taps = _taps(weight)
    span = grid.span
    offs = grid.offsets
    d_taps = np.empty_like(taps)
    for k in range(9):
        d_taps[k] = g @ xp[:, offs[k] : offs[k] + span].T
    co, ci = weight.shape[:2]
    d_weight = d_taps.reshape(3, 3, co, ci).transpose(2, 3, 0, 1)
    d_bias = g.sum(axis=1)
    d_xp = None
    if need_input:
        d_xp = np.zeros((ci, grid.size), dtype=g.dtype)
        for k in range(9):
            d_xp[:, offs[k] : offs[k] + span] += taps[k].T @ g
    return d_weight, d_bias, d_xp


@dataclass
class ForwardCache:
    grid: _Grid
    inputs: list = field(default_factory=list)  # padded layer inputs, (C, size)
    n_classes: int = 1


def forward(params: dict[str, np.ndarray], images: np.ndarray) -> tuple[GaussianLogitMap, ForwardCache]:
    """Run the net on (N, 3, H, W) or (3, H, W) images.

    Returns the (N, C, H, W) mean and log-variance maps and the activation cache
    needed by :func:`backward`.
    """
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != params["conv1.weight"].shape[1]:
        raise ValueError(f"image has {c} channels, first layer expects {params['conv1.weight'].shape[1]}")
    if h < 3 or w < 3:
        raise ValueError(f"images must be at least 3x3, got {h}x{w}")
    dtype = params["conv1.weight"].dtype
    grid = _Grid(n, h, w)
    cache = ForwardCache(grid=grid, n_classes=n_classes_of(params))
    a = grid.pad(x.transpose(1, 0, 2, 3).astype(dtype, copy=False))
    for i, name in enumerate(LAYERS):
        cache.inputs.append(a)
        z = _conv_forward(grid, a, params[f"{name}.weight"], params[f"{name}.bias"])
        if i < len(LAYERS) - 1:
            np.maximum(z, 0, out=z)
            a = grid.span_to_padded(z)
    out = grid.span_to_images(z)
    k = cache.n_classes
    return GaussianLogitMap(mu=out[:, :k], log_var=out[:, k:]), cache


def backward(
    params: dict[str, np.ndarray], cache: ForwardCache, d_mu: np.ndarray, d_log_var: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss given its gradients w.r.t. the outputs."""
    grid = cache.grid
    expected = (grid.n, cache.n_classes, grid.h, grid.w)
    if d_mu.shape != expected or d_log_var.shape != expected:
        raise ValueError(f"output gradients {d_mu.shape}/{d_log_var.shape} do not match forward output {expected}")
    if len(cache.inputs) != len(LAYERS):
        raise ValueError("incomplete forward cache")
    dtype = params["conv1.weight"].dtype
    g = grid.images_to_span(np.concatenate([d_mu, d_log_var], axis=1).astype(dtype, copy=False))
    grads = {}
    for i in reversed(range(len(LAYERS))):
        name = LAYERS[i]
        xp = cache.inputs[i]
        dw, db, dxp = _conv_backward(grid, xp, params[f"{name}.weight"], g, need_input=i > 0)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
        if i > 0:
            # ReLU: the padded input is the post-activation, zero on the ring and
            # wherever the pre-activation was <= 0
            inner = slice(grid.wp + 1, grid.wp + 1 + grid.span)
            g = dxp[:, inner] * (xp[:, inner] > 0)
    return grads


def finite_diff_check(f, params: dict[str, np.ndarray], n_probes: int = 20, h: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)``.  ``n_probes`` coordinates are
    drawn uniformly over all parameter entries.
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    value, grads = f(params)
    if not np.isfinite(value):
        raise NonFiniteError(f"function value is not finite: {value}")
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for flat in rng.choice(sizes.sum(), size=min(n_probes, sizes.sum()), replace=False):
        i = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[i]
        idx = np.unravel_index(flat - (sizes[:i].sum()), params[name].shape)
        probe = {k: v.copy() for k, v in params.items()}
        base = probe[name][idx]
        probe[name][idx] = base + h
        f_plus = f(probe)[0]
        probe[name][idx] = base - h
        f_minus = f(probe)[0]
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"function value is not finite near {name}{list(idx)}")
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write parameters as magic + (name, 3-int shape, float64 LE data) records.

    Conv weights (out, in, 3, 3) are stored with shape (out, in, 9), biases as
    (out, 1, 1).
    """
    chunks = [CKPT_MAGIC]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        if arr.ndim == 4:
            shape = (arr.shape[0], arr.shape[1], arr.shape[2] * arr.shape[3])
        elif arr.ndim == 1:
            shape = (arr.shape[0], 1, 1)
        else:
            raise ValueError(f"cannot store parameter {name} of shape {arr.shape}")
        raw = name.encode("ascii")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<3I", *shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CKPT_MAGIC)
    params = {}
    while pos < len(data):
        if pos + 4 > len(data):
            raise CheckpointError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n + 12 > len(data):
            raise CheckpointError(f"{path}: truncated record header at byte {pos}")
        name = data[pos : pos + n].decode("ascii")
        pos += n
        shape = struct.unpack_from("<3I", data, pos)
        pos += 12
        nbytes = 8 * shape[0] * shape[1] * shape[2]
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64)
        pos += nbytes
        if name.endswith(".weight"):
            side = int(round(np.sqrt(shape[2])))
            if side * side != shape[2]:
                raise CheckpointError(f"{path}: {name} kernel size {shape[2]} is not square")
            arr = arr.reshape(shape[0], shape[1], side, side)
        else:
            arr = arr.reshape(shape[0])
        params[name] = arr
    missing = {f"{layer}.{kind}" for layer in LAYERS for kind in ("weight", "bias")} - params.keys()
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return params
