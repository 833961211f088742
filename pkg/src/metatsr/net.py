"""Task network with hand-written forward and backward passes.

Architecture: stacked LSTM layers read a window of shape ``(delta, C)``; the
last hidden state of the top layer goes through a dense projection to the
feature vector ``phi`` of size ``F``; a linear head gives the prediction::

    y_hat = (gamma * w + beta) . phi + b

``(gamma, beta)`` are FiLM parameters (identity when absent). The head bias
``b`` is not modulated.

LSTM cell, gate order ``i, f, o, g``::

    z = [x_t, h_{t-1}] @ W + bias
    i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o);  g = tanh(z_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

Everything runs in float64.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .config import NetConfig
from .errors import DataError

Params = dict[str, np.ndarray]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# layers


def lstm_init(rng: np.random.Generator, in_dim: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_dim + hidden)
    return rng.uniform(-bound, bound, size=(in_dim + hidden, 4 * hidden)), np.zeros(4 * hidden)


def lstm_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Run an LSTM over ``x`` of shape ``(B, T, D)``; returns all hidden states and a cache."""
    B, T, D = x.shape
    H = W.shape[1] // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xh = np.empty((T, B, D + H))
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T + 1, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((B, T, H))
    cs[0] = c
    for t in range(T):
        xh[t, :, :D] = x[:, t]
        xh[t, :, D:] = h
        z = xh[t] @ W + b
        a = gates[t]
        a[:, : 3 * H] = sigmoid(z[:, : 3 * H])
        a[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cs[t + 1] = c
        tcs[t] = tc
        hs[:, t] = h
    return hs, (xh, gates, cs, tcs, D, H)


def lstm_backward(dhs: np.ndarray, cache, W: np.ndarray):
    """Backpropagation through time. ``dhs`` is ``dL/dh_t`` for every step, ``(B, T, H)``."""
    xh, gates, cs, tcs, D, H = cache
    T, B, _ = xh.shape
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dx = np.empty((B, T, D))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in range(T - 1, -1, -1):
        a = gates[t]
        i, f, o, g = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        dh = dhs[:, t] + dh_next
        tc = tcs[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dW += xh[t].T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ W.T
        dx[:, t] = dxh[:, :D]
        dh_next = dxh[:, D:]
    return dx, dW, db


def dense_init(rng: np.random.Generator, in_dim: int, out_dim: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(in_dim, out_dim)), np.zeros(out_dim)


# --------------------------------------------------------------------------
# task network


def _readonly(params: Mapping[str, np.ndarray]) -> Params:
    out = {}
    for k, v in params.items():
        a = np.array(v, dtype=np.float64, copy=True)
        a.flags.writeable = False
        out[k] = a
    return out


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in params:
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FilmParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.shape != b.shape or g.ndim != 1:
            raise DataError("FiLM gamma and beta must be vectors of equal length")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @classmethod
    def identity(cls, dim: int) -> "FilmParams":
        return cls(np.ones(dim), np.zeros(dim))


def film(theta: np.ndarray, film_params: Optional[FilmParams]) -> np.ndarray:
    """``gamma * theta + beta``; ``theta`` itself when no modulation is given."""
    if film_params is None:
        return theta
    return film_params.gamma * theta + film_params.beta


@dataclass(frozen=True, eq=False)
class TaskNetwork:
    config: NetConfig
    params: Params = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "params", _readonly(self.params))
        expected = self.param_shapes(self.config)
        actual = {k: v.shape for k, v in self.params.items()}
        if actual != expected:
            raise DataError(f"parameter shapes {actual} do not match config {expected}")

    @staticmethod
    def param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
        shapes = {}
        d = config.input_dim
        for k, h in enumerate(config.hidden_sizes):
            shapes[f"lstm{k}.W"] = (d + h, 4 * h)
            shapes[f"lstm{k}.b"] = (4 * h,)
            d = h
        shapes["proj.W"] = (d, config.feature_dim)
        shapes["proj.b"] = (config.feature_dim,)
        shapes["head.w"] = (config.feature_dim,)
        shapes["head.b"] = ()
        return shapes

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator) -> "TaskNetwork":
        params: Params = {}
        d = config.input_dim
        for k, h in enumerate(config.hidden_sizes):
            params[f"lstm{k}.W"], params[f"lstm{k}.b"] = lstm_init(rng, d, h)
            d = h
        params["proj.W"], params["proj.b"] = dense_init(rng, d, config.feature_dim)
        params["head.w"] = np.zeros(config.feature_dim)
        params["head.b"] = np.zeros(())
        return cls(config, params)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def head(self) -> tuple[np.ndarray, float]:
        return self.params["head.w"], float(self.params["head.b"])

    def extractor_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "TaskNetwork":
        unknown = set(updates) - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        return TaskNetwork(self.config, {**self.params, **updates})

    def with_head(self, w: np.ndarray, b: float) -> "TaskNetwork":
        return self.with_params({"head.w": w, "head.b": np.asarray(b, dtype=np.float64)})

    def hash(self) -> str:
        return params_hash(self.params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _check_inputs(net: TaskNetwork, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    cfg = net.config
    if X.ndim != 3 or X.shape[1:] != (cfg.window_size, cfg.input_dim):
        raise DataError(
            f"expected windows of shape (B, {cfg.window_size}, {cfg.input_dim}), got {X.shape}"
        )
    return X


def extract(net: TaskNetwork, X: np.ndarray):
    """Feature extractor ``phi`` for a batch of windows ``(B, delta, C)`` -> ``(B, F)``."""
    X = _check_inputs(net, X)
    p = net.params
    caches = []
    h = X
    for k in range(len(net.config.hidden_sizes)):
        W = p[f"lstm{k}.W"]
        hs, cache = lstm_forward(h, W, p[f"lstm{k}.b"])
        caches.append(cache)
        h = hs
    last = h[:, -1]
    a = last @ p["proj.W"] + p["proj.b"]
    phi = np.tanh(a) if net.config.projection == "tanh" else a
    return phi, (caches, last, phi, h.shape)


def extract_backward(net: TaskNetwork, cache, dphi: np.ndarray) -> Params:
    """Gradients of the extractor parameters given ``dL/dphi``."""
    caches, last, phi, top_shape = cache
    p = net.params
    grads: Params = {}
    da = dphi * (1.0 - phi * phi) if net.config.projection == "tanh" else dphi
    grads["proj.W"] = last.T @ da
    grads["proj.b"] = da.sum(axis=0)
    dh = np.zeros(top_shape)
    dh[:, -1] = da @ p["proj.W"].T
    for k in range(len(net.config.hidden_sizes) - 1, -1, -1):
        dh, grads[f"lstm{k}.W"], grads[f"lstm{k}.b"] = lstm_backward(dh, caches[k], p[f"lstm{k}.W"])
    return grads


def features(net: TaskNetwork, X: np.ndarray) -> np.ndarray:
    return extract(net, X)[0]


def head_predict(phi: np.ndarray, w: np.ndarray, b: float, film_params: Optional[FilmParams] = None) -> np.ndarray:
    return phi @ film(w, film_params) + b


def predict(net: TaskNetwork, X: np.ndarray, film_params: Optional[FilmParams] = None) -> np.ndarray:
    w, b = net.head
    return head_predict(features(net, X), w, b, film_params)


def forward(net: TaskNetwork, x: np.ndarray, film_params: Optional[FilmParams] = None) -> float:
    """Prediction for a single window ``(delta, C)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("forward expects one window of shape (delta, C)")
    return float(predict(net, x[None], film_params)[0])


# --------------------------------------------------------------------------
# losses and gradients


def loss_and_grad(pred: np.ndarray, y: np.ndarray, loss: str = "mae") -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its derivative w.r.t. each prediction.

    MAE uses the subgradient ``-sign(y - pred)`` with ``sign(0) = 0``.
    """
    r = np.asarray(y, dtype=np.float64) - pred
    n = r.shape[-1]
    if loss == "mae":
        return float(np.abs(r).mean()), -np.sign(r) / n
    if loss == "mse":
        return float((r * r).mean()), -2.0 * r / n
    raise ValueError(f"unknown loss {loss!r}")


@dataclass(frozen=True)
class GradientBundle:
    """Gradients keyed like the network parameters, plus ``film.gamma``/``film.beta`` when modulated."""

    grads: Params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def keys(self):
        return self.grads.keys()

    def items(self):
        return self.grads.items()


def backward(
    net: TaskNetwork,
    X: np.ndarray,
    y: np.ndarray,
    loss: str = "mae",
    film_params: Optional[FilmParams] = None,
) -> tuple[float, GradientBundle]:
    """Mean batch loss and its analytic gradient w.r.t. every parameter."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] == 0:
        raise DataError("backward needs a non-empty batch")
    phi, cache = extract(net, X)
    w, b = net.head
    theta = film(w, film_params)
    value, dpred = loss_and_grad(phi @ theta + b, y, loss)
    dtheta = dpred @ phi
    grads = extract_backward(net, cache, np.outer(dpred, theta))
    if film_params is None:
        grads["head.w"] = dtheta
    else:
        grads["head.w"] = film_params.gamma * dtheta
        grads["film.gamma"] = w * dtheta
        grads["film.beta"] = dtheta
    grads["head.b"] = np.asarray(dpred.sum())
    return value, GradientBundle(grads)


def head_gradient(net: TaskNetwork, meta_window, loss: str = "mae", film_params: Optional[FilmParams] = None) -> np.ndarray:
    """Summed (not averaged) loss gradient w.r.t. the head weights over one meta-window.

    For MAE this is ``-sum_i sign(y_i - pred_i) * gamma * phi(x_i)``.
    """
    phi = features(net, meta_window.inputs)
    w, b = net.head
    r = meta_window.labels - head_predict(phi, w, b, film_params)
    err = np.sign(r) if loss == "mae" else 2.0 * r
    if loss not in ("mae", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    gamma = 1.0 if film_params is None else film_params.gamma
    return -gamma * (err @ phi)


# --------------------------------------------------------------------------
# finite-difference verification


def finite_difference(
    loss_fn: Callable[[Params], float], params: Mapping[str, np.ndarray], h: float = 1e-5, names=None
) -> Params:
    """Central differences of ``loss_fn`` w.r.t. each entry of the named parameters."""
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out: Params = {}
    for name in names if names is not None else list(params):
        p = params[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def relative_errors(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray], floor: float = 1e-6) -> dict[str, float]:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)`` per parameter."""
    out = {}
    for k, n in numeric.items():
        a = np.asarray(analytic[k], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        out[k] = float((np.abs(a - n) / denom).max()) if n.size else 0.0
    return out


@dataclass(frozen=True)
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def gradient_check(
    net: TaskNetwork,
    tolerance: float = 1e-4,
    *,
    X: Optional[np.ndarray] = None,
    y: Optional[np.ndarray] = None,
    loss: str = "mse",
    film_params: Optional[FilmParams] = None,
    batch: int = 4,
    h: float = 1e-5,
    seed: int = 0,
    corrupt: Optional[Callable[[Params], Params]] = None,
) -> GradCheckReport:
    """Compare :func:`backward` with central finite differences on every parameter.

    ``corrupt`` may alter the analytic gradients before comparison (fault injection).
    """
    if net.n_params() > 5000:
        raise ValueError("gradient_check is meant for small networks (<= 5000 parameters)")
    rng = np.random.default_rng(seed)
    if X is None:
        X = rng.normal(size=(batch, net.config.window_size, net.config.input_dim))
    if y is None:
        y = rng.normal(size=X.shape[0])
    _, bundle = backward(net, X, y, loss, film_params)
    analytic = dict(bundle.grads)
    if corrupt is not None:
        analytic = corrupt({k: v.copy() for k, v in analytic.items()})

    all_params = dict(net.params)
    if film_params is not None:
        all_params["film.gamma"] = film_params.gamma
        all_params["film.beta"] = film_params.beta

    def loss_fn(p: Params) -> float:
        fp = FilmParams(p["film.gamma"], p["film.beta"]) if film_params is not None else None
        inner = TaskNetwork(net.config, {k: v for k, v in p.items() if not k.startswith("film.")})
        w, b = inner.head
        return loss_and_grad(head_predict(features(inner, X), w, b, fp), y, loss)[0]

    numeric = finite_difference(loss_fn, all_params, h)
    return GradCheckReport(relative_errors(analytic, numeric), tolerance)
