"""Small float64 network toolkit: dense/conv2d/relu/flatten layers with
hand-written backward passes, gradient descent or Adam updates, and gradient checking.

Parameters are a list aligned with the layer specs; parameter-free layers
hold ``None``. Dense weights are stored (out, in) so that y = x @ W.T + b.
Conv weights are (out_ch, in_ch, kh, kw) with "valid" padding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = "phasegate-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | relu | flatten
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        expected = {"dense": 2, "conv2d": 5, "relu": 0, "flatten": 0}
        if self.kind not in expected:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if len(self.dims) != expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} dims, got {self.dims}")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv2d(in_ch: int, out_ch: int, kh: int, kw: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", (in_ch, out_ch, kh, kw, stride))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    clip_norm: float | None = 5.0
    method: str = "adam"  # "adam" or "sgd" (plain clipped gradient descent)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        # zero is accepted as a degenerate no-op step
        if not 0 <= self.learning_rate <= 1:
            raise ValueError("learning rate must lie in [0, 1]")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")


def output_shape(specs: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of the chain for a per-sample input shape."""
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        if spec.kind == "dense":
            if shape != (spec.dims[0],):
                raise ShapeError(i, f"dense expects ({spec.dims[0]},), got {shape}")
            shape = (spec.dims[1],)
        elif spec.kind == "conv2d":
            c_in, c_out, kh, kw, s = spec.dims
            if len(shape) != 3 or shape[0] != c_in or shape[1] < kh or shape[2] < kw:
                raise ShapeError(i, f"conv2d expects ({c_in}, >={kh}, >={kw}), got {shape}")
            shape = (c_out, (shape[1] - kh) // s + 1, (shape[2] - kw) // s + 1)
        elif spec.kind == "flatten":
            shape = (math.prod(shape),)
    return shape


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> list[dict | None]:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    params: list[dict | None] = []
    for spec in specs:
        if spec.kind == "dense":
            n_in, n_out = spec.dims
            bound = math.sqrt(6.0 / (n_in + n_out))
            params.append({"W": rng.uniform(-bound, bound, (n_out, n_in)), "b": np.zeros(n_out)})
        elif spec.kind == "conv2d":
            c_in, c_out, kh, kw, _ = spec.dims
            fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params.append({"W": rng.uniform(-bound, bound, (c_out, c_in, kh, kw)),
                           "b": np.zeros(c_out)})
        else:
            params.append(None)
    return params


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _forward_layer(i: int, spec: LayerSpec, p: dict | None, x: np.ndarray) -> np.ndarray:
    if spec.kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.dims[0]:
            raise ShapeError(i, f"dense expects (N, {spec.dims[0]}), got {x.shape}")
        return x @ p["W"].T + p["b"]
    if spec.kind == "conv2d":
        c_in, _, kh, kw, s = spec.dims
        if x.ndim != 4 or x.shape[1] != c_in or x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(i, f"conv2d expects (N, {c_in}, >={kh}, >={kw}), got {x.shape}")
        win = _windows(x, kh, kw, s)
        return np.tensordot(win, p["W"], axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) \
            + p["b"][None, :, None, None]
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    return x.reshape(x.shape[0], -1)


def forward(params: Sequence[dict | None], specs: Sequence[LayerSpec],
            x: np.ndarray) -> list[np.ndarray]:
    """Evaluate the chain on a batch; returns [input, out_0, ..., out_last]."""
    if len(params) != len(specs):
        raise ValueError("params and specs differ in length")
    acts = [np.asarray(x, dtype=float)]
    for i, (spec, p) in enumerate(zip(specs, params)):
        acts.append(_forward_layer(i, spec, p, acts[-1]))
    return acts


def backward(params: Sequence[dict | None], specs: Sequence[LayerSpec],
             activations: Sequence[np.ndarray], output_gradient: np.ndarray
             ) -> tuple[list[dict | None], np.ndarray]:
    """Reverse-mode pass. Returns (parameter gradients, gradient w.r.t. input)."""
    if len(activations) != len(specs) + 1:
        raise ValueError(f"expected {len(specs) + 1} activations, got {len(activations)}")
    g = np.asarray(output_gradient, dtype=float)
    if g.shape != activations[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {activations[-1].shape}")
    grads: list[dict | None] = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        spec, p, x = specs[i], params[i], activations[i]
        if spec.kind == "dense":
            grads[i] = {"W": g.T @ x, "b": g.sum(axis=0)}
            g = g @ p["W"]
        elif spec.kind == "conv2d":
            _, _, kh, kw, s = spec.dims
            win = _windows(x, kh, kw, s)
            grads[i] = {"W": np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])),
                        "b": g.sum(axis=(0, 2, 3))}
            dx = np.zeros_like(x)
            ho, wo = g.shape[2], g.shape[3]
            W = p["W"]
            for a in range(kh):
                for b in range(kw):
                    dx[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += \
                        np.einsum("nfhw,fc->nchw", g, W[:, :, a, b])
            g = dx
        elif spec.kind == "relu":
            g = g * (x > 0)
        else:
            g = g.reshape(x.shape)
    return grads, g


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient."""
    diff = prediction - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def grad_norm(grads: Sequence[dict | None]) -> float:
    return math.sqrt(sum(float(np.sum(v ** 2)) for gd in grads if gd for v in gd.values()))


def _clip_scale(grads: Sequence[dict | None], clip_norm: float | None) -> float:
    if clip_norm is None:
        return 1.0
    norm = grad_norm(grads)
    return clip_norm / norm if norm > clip_norm else 1.0


def apply_update(params: Sequence[dict | None], grads: Sequence[dict | None],
                 cfg: OptimizerConfig) -> list[dict | None]:
    """theta - lr * g, with g rescaled to at most `clip_norm` in global L2 norm."""
    scale = _clip_scale(grads, cfg.clip_norm)
    out: list[dict | None] = []
    for p, gd in zip(params, grads, strict=True):
        if p is None:
            out.append(None)
            continue
        if gd is None:
            out.append({k: v.copy() for k, v in p.items()})
            continue
        for k in p:
            if p[k].shape != gd[k].shape:
                raise ValueError(f"gradient shape {gd[k].shape} != parameter shape {p[k].shape}")
        out.append({k: p[k] - cfg.learning_rate * scale * gd[k] for k in p})
    return out


class Adam:
    """Adam moment state for one parameter list; ``step`` returns new params."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m: list[dict | None] | None = None
        self.v: list[dict | None] | None = None

    def step(self, params: Sequence[dict | None], grads: Sequence[dict | None]) -> list[dict | None]:
        cfg = self.cfg
        if self.m is None:
            self.m = [None if p is None else {k: np.zeros_like(a) for k, a in p.items()} for p in params]
            self.v = [None if p is None else {k: np.zeros_like(a) for k, a in p.items()} for p in params]
        scale = _clip_scale(grads, cfg.clip_norm)
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        out: list[dict | None] = []
        for p, gd, m, v in zip(params, grads, self.m, self.v, strict=True):
            if p is None:
                out.append(None)
                continue
            new = {}
            for k in p:
                g = scale * gd[k]
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                new[k] = p[k] - cfg.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.eps)
            out.append(new)
        return out


def loss_and_grads(params, specs, x, target):
    acts = forward(params, specs, x)
    loss, g = mse_loss(acts[-1], target)
    grads, _ = backward(params, specs, acts, g)
    return loss, grads


def finite_difference_check(params: Sequence[dict | None], specs: Sequence[LayerSpec],
                            x: np.ndarray, target: np.ndarray, h: float = 1e-5,
                            floor: float = 1e-8) -> float:
    """Worst relative error between analytic and central-difference gradients
    of the mean squared error. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    _, analytic = loss_and_grads(params, specs, x, target)
    probe = [None if p is None else {k: v.copy() for k, v in p.items()} for p in params]
    worst = 0.0
    for i, p in enumerate(probe):
        if p is None:
            continue
        for k, arr in p.items():
            flat = arr.reshape(-1)
            ga = analytic[i][k].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                plus = mse_loss(forward(probe, specs, x)[-1], target)[0]
                flat[j] = orig - h
                minus = mse_loss(forward(probe, specs, x)[-1], target)[0]
                flat[j] = orig
                num = (plus - minus) / (2 * h)
                err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), floor)
                worst = max(worst, err)
    return worst


def relu_margin(params: Sequence[dict | None], specs: Sequence[LayerSpec], x: np.ndarray) -> float:
    """Smallest |pre-activation| feeding any relu; small values mean a kink is near."""
    acts = forward(params, specs, x)
    margins = [np.min(np.abs(acts[i])) for i, s in enumerate(specs) if s.kind == "relu"]
    return float(min(margins)) if margins else math.inf


def save_params(path: str | Path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON shape manifest to an ``.npz`` file."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": [{"name": k, "shape": list(v.shape), "dtype": "float64"} for k, v in named.items()],
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in named.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=np.array(json.dumps(manifest, sort_keys=True)), **arrays)


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data["__manifest__"]))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        named = {}
        for entry in manifest["arrays"]:
            arr = data[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"{path}: {entry['name']} has shape {arr.shape}, "
                                 f"manifest says {entry['shape']}")
            named[entry["name"]] = arr
    return named, manifest["meta"]
