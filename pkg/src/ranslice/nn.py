"""Small numpy MLPs with hand-written reverse mode, Adam, and a Gaussian
policy head over softmax logits.

Parameters live in one flat float64 vector; :class:`MlpSpec` describes how
it is cut into per-layer weights ``W`` of shape ``(fan_in, fan_out)``
followed by biases.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_FORMAT = "ranslice-mlp"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"bad layer sizes {self.layer_sizes}")
        if self.activation != "relu":
            raise ShapeError(f"unsupported activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layout(self) -> list[dict]:
        """Offsets of every weight/bias block inside the flat vector."""
        out, off = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append({"W": [off, (a, b)], "b": [off + a * b, (b,)]})
            off += a * b + b
        return out


def unpack(params: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W, b)`` views into ``params`` (no copies)."""
    if params.shape != (spec.n_params,):
        raise ShapeError(f"param vector has shape {params.shape}, spec needs ({spec.n_params},)")
    layers, off = [], 0
    for a, b in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[off:off + a * b].reshape(a, b)
        off += a * b
        layers.append((W, params[off:off + b]))
        off += b
    return layers


def init_params(spec: MlpSpec, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
    params = np.empty(spec.n_params)
    layers = unpack(params, spec)
    for i, (W, b) in enumerate(layers):
        bound = 1.0 / math.sqrt(W.shape[0])
        if i == len(layers) - 1:
            bound *= out_scale
        W[...] = rng.uniform(-bound, bound, W.shape)
        b[...] = rng.uniform(-bound, bound, b.shape)
    return params


def _as_batch(x: np.ndarray, spec: MlpSpec) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.layer_sizes[0]:
        raise ShapeError(f"input shape {x.shape} does not match input size {spec.layer_sizes[0]}")
    return x, single


def forward_with_cache(params: np.ndarray, spec: MlpSpec, x: np.ndarray):
    """Forward pass returning ``(output, cache)`` for :func:`backward`."""
    h, single = _as_batch(x, spec)
    layers = unpack(params, spec)
    acts = [h]
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h[0] if single else h), (acts, single)


def mlp_forward(params: np.ndarray, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    return forward_with_cache(params, spec, x)[0]


def backward(params, spec, x, upstream, cache=None, want_params: bool = True):
    """Reverse-mode gradient of ``sum(upstream * mlp(x))``.

    Returns ``(param_grad, input_grad)``; ``param_grad`` is a flat vector
    with the same layout as ``params`` (``None`` when ``want_params`` is
    false, which skips the weight products).
    """
    if cache is None:
        _, cache = forward_with_cache(params, spec, x)
    acts, single = cache
    g = np.asarray(upstream, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} does not match output {acts[-1].shape}")
    layers = unpack(params, spec)
    grad = np.zeros_like(params) if want_params else None
    glayers = unpack(grad, spec) if want_params else None
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (acts[i + 1] > 0.0)
        if want_params:
            gW, gb = glayers[i]
            np.matmul(acts[i].T, g, out=gW)
            gb[...] = g.sum(axis=0)
        g = g @ W.T
    return grad, (g[0] if single else g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def zeros(cls, n: int, lr: float = 3e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), lr=lr, **kw)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step, applied to ``params`` in place."""
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    log_prob: np.ndarray
    action: np.ndarray
    raw_log_std: np.ndarray = field(repr=False, default=None)
    cache: tuple = field(repr=False, default=None)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(action: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``softmax(z)`` back to ``z``."""
    return action * (upstream - (upstream * action).sum(axis=-1, keepdims=True))


def gaussian_log_prob(z, mean, log_std) -> np.ndarray:
    """Diagonal Gaussian log-density of ``z``, summed over the last axis."""
    xi = (z - mean) * np.exp(-log_std)
    return np.sum(-0.5 * xi * xi - log_std - _HALF_LOG_2PI, axis=-1)


def policy_sample(params, spec: MlpSpec, obs, rng: np.random.Generator | None, deterministic: bool = False) -> PolicyOutput:
    """Reparameterised draw ``z = mean + std * noise``, action ``softmax(z)``.

    The network output holds ``[mean, raw_log_std]``; the log-std is clamped
    to ``[LOG_STD_MIN, LOG_STD_MAX]``.  The density is that of ``z`` (the
    simplex action has none).
    """
    out, cache = forward_with_cache(params, spec, obs)
    n = out.shape[-1] // 2
    mean, raw = out[..., :n], out[..., n:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    if deterministic or rng is None:
        noise = np.zeros_like(mean)
    else:
        noise = rng.standard_normal(mean.shape)
    z = mean + np.exp(log_std) * noise
    log_prob = np.sum(-0.5 * noise * noise - log_std - _HALF_LOG_2PI, axis=-1)
    return PolicyOutput(mean, log_std, noise, z, log_prob, softmax(z), raw, cache)


def policy_backward(params, spec: MlpSpec, obs, out: PolicyOutput, grad_z, grad_log_prob):
    """Gradient w.r.t. policy params of ``sum(grad_z * z + grad_log_prob * log_prob)``
    with ``z`` and ``log_prob`` taken as reparameterised functions of the params.

    Holding the noise fixed, ``d z / d mean = 1``, ``d z / d log_std = std * noise``
    and ``d log_prob / d log_std = -1``; nothing flows through the clamp.
    """
    grad_z = np.asarray(grad_z, dtype=float)
    g_lp = np.asarray(grad_log_prob, dtype=float)[..., None]
    g_mean = grad_z
    g_logstd = grad_z * np.exp(out.log_std) * out.noise - g_lp
    inside = (out.raw_log_std >= LOG_STD_MIN) & (out.raw_log_std <= LOG_STD_MAX)
    upstream = np.concatenate([g_mean, g_logstd * inside], axis=-1)
    grad, _ = backward(params, spec, obs, upstream, cache=out.cache)
    return grad


def policy_score_backward(params, spec: MlpSpec, obs, out: PolicyOutput, weight):
    """Gradient of ``sum(weight * log_prob(z))`` with ``z`` held fixed (score function)."""
    w = np.asarray(weight, dtype=float)[..., None]
    inv_var = np.exp(-2.0 * out.log_std)
    diff = out.z - out.mean
    g_mean = w * diff * inv_var
    g_logstd = w * (diff * diff * inv_var - 1.0)
    inside = (out.raw_log_std >= LOG_STD_MIN) & (out.raw_log_std <= LOG_STD_MAX)
    grad, _ = backward(params, spec, obs, np.concatenate([g_mean, g_logstd * inside], axis=-1), cache=out.cache)
    return grad


def save_checkpoint(path, params: dict[str, np.ndarray], specs: dict[str, MlpSpec], meta: dict | None = None) -> None:
    """Write named flat parameter vectors to an ``.npz`` file.

    Layout: one float64 array per name plus a ``header`` JSON string with the
    format tag, version, each vector's layer sizes and block offsets, and any
    extra ``meta``.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": {k: {"layer_sizes": list(s.layer_sizes), "activation": s.activation,
                         "layout": s.layout()} for k, s in specs.items()},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in params.items()}
    with open(Path(path), "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, MlpSpec], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {header.get('format')} v{header.get('version')}")
        specs = {k: MlpSpec(tuple(v["layer_sizes"]), v["activation"]) for k, v in header["networks"].items()}
        params = {k: data[k].copy() for k in specs}
    for k, s in specs.items():
        if params[k].shape != (s.n_params,):
            raise ShapeError(f"checkpoint vector {k} does not match its layout")
    return params, specs, header["meta"]
