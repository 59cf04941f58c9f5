"""Minimal dense-network core: MLP forward/backward, Gaussian policy head,
bounded [0,1] output, Adam, and bit-exact checkpoints.

Parameters live in one flat float64 vector laid out layer by layer as
``W (out, in) row-major, then b (out)``; a Gaussian head appends per-output
``log_std`` at the tail.  The layout is shared with the compiled episode
kernel (:func:`balancekit._kernels.mlp_forward_flat`).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

HEADS = ("linear", "bounded01", "gaussian")
LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    """Input/parameter shape does not match the network spec."""


@dataclass(frozen=True)
class MlpSpec:
    """Network shape: sizes per layer plus the output head."""

    layer_sizes: tuple
    output_head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown head {self.output_head!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def n_params(self) -> int:
        n = sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if self.output_head == "gaussian":
            n += self.n_out
        return n

    def shapes_array(self) -> np.ndarray:
        """(n_in, n_out) per layer, as consumed by the episode kernel."""
        return np.array(list(zip(self.layer_sizes[:-1], self.layer_sizes[1:])),
                        dtype=np.int64)


@dataclass
class MlpParams:
    """Flat parameter vector with per-layer views."""

    spec: MlpSpec
    flat: np.ndarray
    _views: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.flat.shape != (self.spec.n_params(),):
            raise ShapeError("flat vector length does not match spec")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameters")
        self._views = []
        off = 0
        for nin, nout in zip(self.spec.layer_sizes[:-1], self.spec.layer_sizes[1:]):
            W = self.flat[off:off + nout * nin].reshape(nout, nin)
            off += nout * nin
            b = self.flat[off:off + nout]
            off += nout
            self._views.append((W, b))

    @property
    def layers(self):
        return self._views

    @property
    def log_std(self) -> np.ndarray:
        if self.spec.output_head != "gaussian":
            raise ShapeError("log_std only exists for a gaussian head")
        return self.flat[-self.spec.n_out:]

    def weights_flat(self) -> np.ndarray:
        """Layer parameters only (log_std tail stripped), for the episode kernel."""
        if self.spec.output_head == "gaussian":
            return self.flat[:-self.spec.n_out]
        return self.flat

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())


def init_params(spec: MlpSpec, rng: np.random.Generator,
                hidden_gain: float = 1.0, out_gain: float = 0.01,
                log_std_init: float = float(np.log(0.05))) -> MlpParams:
    """Orthogonal-style init: gain 1 hidden, small output layer, zero biases."""
    flat = np.zeros(spec.n_params())
    params = MlpParams(spec, flat)
    nl = spec.n_layers
    for l, (W, b) in enumerate(params.layers):
        a = rng.normal(size=(max(W.shape), max(W.shape)))
        qmat, _ = np.linalg.qr(a)
        gain = out_gain if l == nl - 1 else hidden_gain
        W[:] = gain * qmat[: W.shape[0], : W.shape[1]]
        b[:] = 0.0
    if spec.output_head == "gaussian":
        params.log_std[:] = log_std_init
    return params


def bounded01(x):
    """max(0, tanh(x)) elementwise: output in [0, 1]."""
    return np.maximum(0.0, np.tanh(x))


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"expected input size {n_in}, got {x.shape}")
    return x, squeeze


def forward(spec: MlpSpec, params: MlpParams, x):
    """Deterministic forward pass; 1D input gives 1D output."""
    y, _ = forward_cached(spec, params, x)
    return y


def forward_cached(spec: MlpSpec, params: MlpParams, x):
    """Forward pass keeping activations for backprop. Returns (y, cache)."""
    if params.spec != spec:
        raise ShapeError("params built for a different spec")
    xb, squeeze = _as_batch(x, spec.n_in)
    hs = [xb]
    zs = []
    h = xb
    nl = spec.n_layers
    for l, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        zs.append(z)
        h = np.tanh(z) if l < nl - 1 else z
        hs.append(h)
    z_out = zs[-1]
    if spec.output_head == "bounded01":
        y = bounded01(z_out)
    else:
        y = z_out
    cache = (hs, zs, squeeze)
    return (y[0] if squeeze else y), cache


def backward(spec: MlpSpec, params: MlpParams, cache, upstream_grad) -> np.ndarray:
    """Gradient of sum(upstream_grad * y) w.r.t. the flat parameter vector.

    The log_std tail of a gaussian head is left zero; policy losses fill it
    directly.
    """
    hs, zs, squeeze = cache
    g = np.asarray(upstream_grad, dtype=np.float64)
    if squeeze:
        g = g[np.newaxis, :]
    if g.shape != zs[-1].shape:
        raise ShapeError("upstream gradient shape mismatch")
    if spec.output_head == "bounded01":
        z = zs[-1]
        th = np.tanh(z)
        g = g * np.where(z > 0.0, 1.0 - th * th, 0.0)
    grad = np.zeros_like(params.flat)
    gparams = MlpParams(spec, grad)
    gz = g
    for l in range(spec.n_layers - 1, -1, -1):
        W, _ = params.layers[l]
        gW, gb = gparams.layers[l]
        gW += gz.T @ hs[l]
        gb += gz.sum(axis=0)
        if l > 0:
            gh = gz @ W
            gz = gh * (1.0 - hs[l] ** 2)
    return grad


def gaussian_sample(params: MlpParams, mean_out, rng: np.random.Generator):
    """Sample a diagonal-Gaussian action around the mean; returns (action, log_prob)."""
    log_std = params.log_std
    if not np.all(np.isfinite(log_std)):
        raise ValueError("non-finite log_std")
    std = np.exp(log_std)
    eps = rng.standard_normal(len(std))
    action = np.asarray(mean_out, dtype=np.float64) + std * eps
    return action, gaussian_log_prob(action, mean_out, log_std)


def gaussian_log_prob(action, mean, log_std):
    """Diagonal-Gaussian log density; batched along the first axis if 2D."""
    a = np.asarray(action, dtype=np.float64)
    m = np.asarray(mean, dtype=np.float64)
    z = (a - m) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * LOG_2PI * len(log_std)


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: MlpParams, grad: np.ndarray):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        params.flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float = 1.0) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# checkpoints (bit-exact round trip via base64-encoded little-endian float64)
# ---------------------------------------------------------------------------

CHECKPOINT_SCHEMA = "balancekit/checkpoint-v1"


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(text: str, n: int) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f8").copy()
    if arr.shape != (n,):
        raise ValueError("checkpoint payload length mismatch")
    return arr


def params_to_dict(params: MlpParams) -> dict:
    return {
        "layer_sizes": list(params.spec.layer_sizes),
        "output_head": params.spec.output_head,
        "data": _encode(params.flat),
    }


def params_from_dict(d: dict) -> MlpParams:
    spec = MlpSpec(tuple(d["layer_sizes"]), d["output_head"])
    return MlpParams(spec, _decode(d["data"], spec.n_params()))


def save_checkpoint(path, nets: dict, meta: dict | None = None):
    """Write named parameter sets plus metadata; round-trips bit-exactly."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "meta": meta or {},
        "nets": {name: params_to_dict(p) for name, p in nets.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (nets, meta)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    nets = {name: params_from_dict(d) for name, d in payload["nets"].items()}
    return nets, payload.get("meta", {})
