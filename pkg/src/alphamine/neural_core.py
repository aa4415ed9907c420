"""MLP feature extractor with hand-written forward/backward passes, Adam, and a
finite-difference gradient checker.

Layers are ``l_i = act(l_{i-1} @ W_i + b_i)`` for the hidden layers; the last
layer is linear and has a single output unit (the factor value). Weights are
stored as (fan_in, fan_out) so a batch of rows multiplies from the left.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    input_size: int = 150
    layer_count: int = 4
    width: int = 128
    activation: str = "tanh"
    dropout_rate: float = 0.5
    l2_coeff: float = 1e-3
    output_size: int = 1

    def __post_init__(self):
        if self.layer_count < 1 or self.width < 1 or self.input_size < 1:
            raise ValueError("layer_count, width and input_size must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be >= 0")

    def layer_sizes(self) -> list[int]:
        return [self.input_size] + [self.width] * (self.layer_count - 1) + [self.output_size]


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Flat list [W1, b1, W2, b2, ...]; gradients use the same order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


# PruneMask: one {0,1} float array per weight matrix (biases are never masked)
PruneMask = list


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu_grad(z, a):
    return (z > 0).astype(np.float64)


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), _relu_grad),
}


def init_params(cfg: MlpConfig, seed) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = cfg.layer_sizes()
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zero_params(cfg: MlpConfig) -> MlpParams:
    sizes = cfg.layer_sizes()
    return MlpParams(
        [np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])], [np.zeros(o) for o in sizes[1:]]
    )


def apply_mask(params: MlpParams, mask: PruneMask | None) -> MlpParams:
    if mask is None:
        return params
    return MlpParams([np.where(m > 0, w, 0.0) for w, m in zip(params.weights, mask)], list(params.biases))


@dataclass
class Cache:
    cfg: MlpConfig
    params: MlpParams  # effective (masked) weights used in the pass
    mask: PruneMask | None
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer (post-dropout)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    drops: list[np.ndarray | None] = field(default_factory=list)
    consumed: bool = False


def forward(
    cfg: MlpConfig,
    params: MlpParams,
    x: np.ndarray,
    mask: PruneMask | None = None,
    train_mode: bool = False,
    rng_seed=None,
) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match input size {params.weights[0].shape[0]}")
    act, _ = _ACTIVATIONS[cfg.activation]
    eff = apply_mask(params, mask)
    cache = Cache(cfg, eff, mask)
    rng = np.random.default_rng(rng_seed) if train_mode and cfg.dropout_rate > 0 else None
    h = x
    last = len(eff.weights) - 1
    for i, (w, b) in enumerate(zip(eff.weights, eff.biases)):
        drop = None
        if rng is not None and i > 0:
            keep = 1.0 - cfg.dropout_rate
            drop = (rng.random(h.shape) < keep) / keep
            h = h * drop
        cache.drops.append(drop)
        cache.inputs.append(h)
        z = h @ w + b
        a = z if i == last else act(z)
        cache.pre.append(z)
        cache.post.append(a)
        h = a
    return h, cache


def backward(cache: Cache, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients [dW1, db1, ...] and d(input) for a scalar with d/d(output) = upstream.

    The L2 penalty ``0.5 * l2_coeff * sum(W**2)`` is included in the weight
    gradients; masked entries come back exactly zero.
    """
    if cache.consumed:
        raise RuntimeError("stale cache: backward already run for this forward pass")
    cache.consumed = True
    cfg = cache.cfg
    _, dact = _ACTIVATIONS[cfg.activation]
    g = np.asarray(upstream, dtype=np.float64).reshape(cache.post[-1].shape)
    n_layers = len(cache.params.weights)
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            g = g * dact(cache.pre[i], cache.post[i])
        w = cache.params.weights[i]
        dw = cache.inputs[i].T @ g
        if cfg.l2_coeff:
            dw = dw + cfg.l2_coeff * w
        if cache.mask is not None:
            dw = np.where(cache.mask[i] > 0, dw, 0.0)
        grads[2 * i] = dw
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ w.T
        if cache.drops[i] is not None:
            g = g * cache.drops[i]
    return grads, g


def l2_penalty(cfg: MlpConfig, params: MlpParams, mask: PruneMask | None = None) -> float:
    if not cfg.l2_coeff:
        return 0.0
    eff = apply_mask(params, mask)
    return 0.5 * cfg.l2_coeff * sum(float(np.sum(w * w)) for w in eff.weights)


class FeatureExtractor(Protocol):
    """Anything mapping a day's (m, 5*n) inputs to (m, 1) factor values, differentiably."""

    def forward(self, x: np.ndarray, train_mode: bool = False, rng_seed=None): ...

    def backward(self, cache, upstream: np.ndarray): ...


@dataclass
class Mlp:
    """Bundles config, params and an optional mask behind the extractor interface."""

    cfg: MlpConfig
    params: MlpParams
    mask: PruneMask | None = None

    def forward(self, x, train_mode=False, rng_seed=None):
        return forward(self.cfg, self.params, x, self.mask, train_mode, rng_seed)

    def backward(self, cache, upstream):
        return backward(cache, upstream)

    def predict(self, x, chunk: int = 8192) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], chunk):
            out[s : s + chunk] = forward(self.cfg, self.params, x[s : s + chunk], self.mask)[0][:, 0]
        return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def optimizer_step(
    state: AdamState,
    params: MlpParams,
    grads: list[np.ndarray],
    lr: float | None = None,
    mask: PruneMask | None = None,
) -> MlpParams:
    """One Adam update (bias-corrected). Mutates ``state``; returns new params."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ShapeError("gradient list does not match parameters")
    for k, (a, g) in enumerate(zip(arrays, grads)):
        if g.shape != a.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {a.shape} at index {k}")
        if not np.all(np.isfinite(g)):
            kind = "weight" if k % 2 == 0 else "bias"
            raise FloatingPointError(f"non-finite gradient in layer {k // 2 + 1} {kind}")
    lr = state.lr if lr is None else lr
    if state.m is None:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    new = []
    for k, (a, g) in enumerate(zip(arrays, grads)):
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        step = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        updated = a - step
        if mask is not None and k % 2 == 0:
            updated = np.where(mask[k // 2] > 0, updated, 0.0)
        new.append(updated)
    return MlpParams(new[0::2], new[1::2])


def gradient_check(
    params: MlpParams,
    loss_and_grad: Callable[[MlpParams], tuple[float, list[np.ndarray]]],
    probes: int,
    seed=0,
    step: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probes`` coordinates are drawn uniformly over all parameter entries.
    Relative error is ``|a - f| / max(|a|, |f|, floor)`` so coordinates whose
    true gradient is ~0 are judged on absolute error instead.
    """
    if probes <= 0:
        return 0.0
    _, grads = loss_and_grad(params)
    sizes = [a.size for a in params.arrays()]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        local = fi - offsets[k]
        probe = params.copy()
        target = probe.arrays()[k].reshape(-1)
        orig = target[local]
        target[local] = orig + step
        up = loss_and_grad(probe)[0]
        target[local] = orig - step
        down = loss_and_grad(probe)[0]
        fd = (up - down) / (2.0 * step)
        an = grads[k].reshape(-1)[local]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
    return worst


# ---------------------------------------------------------------------------
# serialization: a zip holding meta.json plus one .npy per array
# ---------------------------------------------------------------------------


def save_model(path, cfg: MlpConfig, params: MlpParams, mask: PruneMask | None, provenance: dict) -> None:
    meta = {"format_version": FORMAT_VERSION, "config": asdict(cfg), "provenance": provenance}
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
        if mask is not None:
            arrays[f"m{i}"] = mask[i]
    # fixed timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", (1980, 1, 1, 0, 0, 0)), json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", (1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_model(path) -> tuple[MlpConfig, MlpParams, PruneMask | None, dict]:
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {meta.get('format_version')}")
        cfg = MlpConfig(**meta["config"])
        names = set(zf.namelist())
        n = cfg.layer_count

        def arr(name):
            return np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)

        params = MlpParams([arr(f"w{i}") for i in range(n)], [arr(f"b{i}") for i in range(n)])
        mask = [arr(f"m{i}") for i in range(n)] if "m0.npy" in names else None
    return cfg, params, mask, meta["provenance"]
