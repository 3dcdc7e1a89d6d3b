"""Bottleneck adapter ``out = W2 @ gelu(layernorm(W1 @ v + b1)) + b2``.

Forward and backward accept a single vector ``(d,)`` or a batch ``(n, d)``.
There is no residual path: the adapter output replaces the embedding.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import BadFormat, DimensionMismatch, InputError, StaleCache, VersionMismatch

FORMAT_VERSION = 1
LN_VAR_GUARD = 1e-5
HIDDEN_MULT = 4
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

BLOCKS = ("W1", "b1", "ln_scale", "ln_shift", "W2", "b2")


@dataclass
class AdapterParams:
    W1: np.ndarray
    b1: np.ndarray
    ln_scale: np.ndarray
    ln_shift: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.d
        h = HIDDEN_MULT * d
        expected = {"W1": (h, d), "b1": (h,), "ln_scale": (h,), "ln_shift": (h,), "W2": (d, h), "b2": (d,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} contains non-finite entries")

    @property
    def d(self):
        return self.W1.shape[1]

    def blocks(self):
        return [(name, getattr(self, name)) for name in BLOCKS]

    def copy(self):
        return AdapterParams(**{name: arr.copy() for name, arr in self.blocks()})

    def zeros_like(self):
        return AdapterParams(**{name: np.zeros_like(arr) for name, arr in self.blocks()})

    def flat(self):
        return np.concatenate([arr.ravel() for _, arr in self.blocks()])

    @classmethod
    def zeros(cls, d):
        h = HIDDEN_MULT * d
        return cls(np.zeros((h, d)), np.zeros(h), np.zeros(h), np.zeros(h), np.zeros((d, h)), np.zeros(d))


# gradients share the container
AdapterGradients = AdapterParams


def init_params(d, seed):
    """Xavier-uniform weights, zero biases, identity layer-norm affine."""
    if d < 1:
        raise InputError("d must be >= 1")
    rng = np.random.default_rng(seed)
    h = HIDDEN_MULT * d
    bound = math.sqrt(6.0 / (d + h))
    W1 = rng.uniform(-bound, bound, size=(h, d))
    W2 = rng.uniform(-bound, bound, size=(d, h))
    return AdapterParams(W1, np.zeros(h), np.ones(h), np.zeros(h), W2, np.zeros(d))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def layer_norm(h):
    """Normalize each row to zero mean and unit variance.

    The variance is floored at ``LN_VAR_GUARD`` rather than shifted by it, so a
    row whose variance exceeds the guard is normalized exactly.
    Returns ``(xhat, denom, guarded)``.
    """
    centered = h - h.mean(axis=-1, keepdims=True)
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    guarded = var < LN_VAR_GUARD
    denom = np.sqrt(np.where(guarded, LN_VAR_GUARD, var))
    return centered / denom, denom, guarded


def adapter_forward(p, v):
    """Returns ``(out, cache)``; ``cache`` feeds :func:`adapter_backward`."""
    x = np.asarray(v, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != p.d:
        raise DimensionMismatch(f"input has shape {x.shape}, adapter expects last dim {p.d}")
    pre = X @ p.W1.T + p.b1
    xhat, denom, guarded = layer_norm(pre)
    y = xhat * p.ln_scale + p.ln_shift
    act = gelu(y)
    out = act @ p.W2.T + p.b2
    cache = {"x": X, "xhat": xhat, "denom": denom, "guarded": guarded, "y": y, "act": act, "single": single}
    return (out[0] if single else out), cache


def adapter_backward(p, cache, upstream):
    """Reverse-mode pass.  Returns ``(AdapterGradients, input_grad)``."""
    X = cache["x"]
    G = np.asarray(upstream, dtype=np.float64)
    G = G[None, :] if G.ndim == 1 else G
    if G.shape != (X.shape[0], p.d) or cache["act"].shape[1] != p.W2.shape[1]:
        raise StaleCache(f"upstream {G.shape} / cache {X.shape} do not match adapter d={p.d}")
    act, xhat, y = cache["act"], cache["xhat"], cache["y"]

    gW2 = G.T @ act
    gb2 = G.sum(axis=0)
    dy = (G @ p.W2) * gelu_grad(y)
    g_scale = np.sum(dy * xhat, axis=0)
    g_shift = dy.sum(axis=0)
    dxhat = dy * p.ln_scale

    mean_dx = dxhat.mean(axis=1, keepdims=True)
    mean_dxx = np.mean(dxhat * xhat, axis=1, keepdims=True)
    full = (dxhat - mean_dx - xhat * mean_dxx) / cache["denom"]
    floored = (dxhat - mean_dx) / cache["denom"]
    dpre = np.where(cache["guarded"], floored, full)

    gW1 = dpre.T @ X
    gb1 = dpre.sum(axis=0)
    dX = dpre @ p.W1
    grads = AdapterParams(gW1, gb1, g_scale, g_shift, gW2, gb2)
    return grads, (dX[0] if cache["single"] else dX)


def params_to_dict(p):
    doc = {"format_version": FORMAT_VERSION, "d": int(p.d)}
    for name, arr in p.blocks():
        doc[name] = arr.tolist()
    return doc


def params_from_dict(doc, expected_d=None):
    if not isinstance(doc, dict):
        raise BadFormat("adapter document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format_version {doc.get('format_version')!r}")
    missing = [k for k in ("d",) + BLOCKS if k not in doc]
    if missing:
        raise BadFormat(f"adapter document missing keys: {missing}")
    try:
        p = AdapterParams(**{name: np.asarray(doc[name], dtype=np.float64) for name in BLOCKS})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DimensionMismatch):
            raise BadFormat(str(exc)) from exc
        raise BadFormat(f"bad adapter arrays: {exc}") from exc
    if p.d != doc["d"]:
        raise BadFormat(f"declared d={doc['d']} but arrays imply d={p.d}")
    if expected_d is not None and p.d != expected_d:
        raise DimensionMismatch(f"adapter has d={p.d}, embeddings have d={expected_d}")
    return p


def save_params(p, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params_to_dict(p), fh)
        fh.write("\n")


def load_params(path, expected_d=None):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BadFormat(f"{path}: not valid JSON ({exc})") from exc
    return params_from_dict(doc, expected_d)
