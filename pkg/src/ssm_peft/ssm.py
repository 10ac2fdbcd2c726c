"""Diagonal S4 channels, deep S4 layers, a simplified S6 block and stacks of them.

Two layers of API live here:

* numpy reference routines (``discretize``, ``s4_scan``, ``s4_kernel``,
  ``s4_conv_forward``, ``deep_s4_layer_forward``, ``s6_forward``) that loop
  explicitly and serve as oracles;
* graph forwards (``model_graph``) built from :mod:`ssm_peft.num` nodes that
  training and the adapters differentiate through.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import num

ZOH = "zoh"
BILINEAR = "bilinear"
ACTIVATIONS = ("relu", "linear")


# ---------------------------------------------------------------- discretization


def discretize(a, b, dt, method=ZOH):
    """Map continuous (a, b) with step dt to discrete (abar, bbar), elementwise.

    zoh: abar = exp(dt a), bbar = (exp(dt a) - 1) / a * b, with the a = 0 limit
    bbar = dt b. bilinear: abar = (1 + dt a / 2) / (1 - dt a / 2),
    bbar = dt b / (1 - dt a / 2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt <= 0):
        raise ValueError(f"discretize: step size must be positive, got {dt}")
    x = dt * a
    if method == ZOH:
        abar = np.exp(x)
        nz = x != 0
        ratio = np.where(nz, np.expm1(np.where(nz, x, 1.0)) / np.where(nz, x, 1.0), 1.0)
        bbar = ratio * dt * b
    elif method == BILINEAR:
        den = 1.0 - x / 2.0
        if np.any(den == 0):
            raise ZeroDivisionError("discretize: bilinear rule is singular at dt * a = 2")
        abar = (1.0 + x / 2.0) / den
        bbar = dt * b / den
    else:
        raise ValueError(f"unknown discretization method {method!r}")
    if abar.ndim == 0:
        return float(abar), float(bbar)
    return abar, np.broadcast_to(bbar, abar.shape).copy()


@dataclass(frozen=True)
class S4ChannelParams:
    """One diagonal SSM channel: continuous a, b, c, log step size, h0."""

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    log_dt: float
    h0: np.ndarray | None = None

    def __post_init__(self):
        for name in ("a_diag", "b", "c"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not (self.a_diag.shape == self.b.shape == self.c.shape) or self.a_diag.ndim != 1:
            raise ValueError("a_diag, b, c must be 1-D of equal length H >= 1")
        h0 = np.zeros(self.H) if self.h0 is None else np.asarray(self.h0, dtype=np.float64)
        object.__setattr__(self, "h0", h0)
        object.__setattr__(self, "log_dt", float(self.log_dt))

    @property
    def H(self):
        return self.a_diag.shape[0]

    @property
    def dt(self):
        return math.exp(self.log_dt)

    def discretized(self, method=ZOH):
        return discretize(self.a_diag, self.b, self.dt, method)


def scan_discrete(abar, bbar, c, x, h0=None):
    """h_t = abar * h_{t-1} + bbar x_t, y_t = c . h_t; returns (y, h_N)."""
    abar, bbar, c = (np.asarray(v, dtype=np.float64) for v in (abar, bbar, c))
    h = np.zeros_like(abar) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = abar * h + bbar * xt
        y[t] = c @ h
    return y, h


def kernel_discrete(abar, bbar, c, n):
    out = np.empty(n)
    p = np.asarray(bbar, dtype=np.float64) * c
    for k in range(n):
        out[k] = p.sum()
        p = p * abar
    return out


def s4_scan(params, x, h0=None, method=ZOH):
    """Recurrent S4 pass over scalar sequence x. Returns (y, h_N)."""
    if len(x) < 1:
        raise ValueError("s4_scan: need N >= 1")
    abar, bbar = params.discretized(method)
    return scan_discrete(abar, bbar, params.c, x, params.h0 if h0 is None else h0)


def s4_kernel(params, n, method=ZOH):
    """K = (c.bbar, c.(abar bbar), ..., c.(abar^{n-1} bbar))."""
    if n < 1:
        raise ValueError("s4_kernel: need N >= 1")
    abar, bbar = params.discretized(method)
    return kernel_discrete(abar, bbar, params.c, n)


def s4_conv_forward(kernel, x):
    """Direct causal convolution y_t = sum_{m <= t} K_{t - m} x_m."""
    kernel = np.asarray(kernel, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kernel.shape != x.shape:
        raise ValueError(f"s4_conv_forward: kernel {kernel.shape} vs input {x.shape}")
    n = len(x)
    y = np.zeros(n)
    for t in range(n):
        for m in range(t + 1):
            y[t] += kernel[t - m] * x[m]
    return y


# ---------------------------------------------------------------- layers


@dataclass(frozen=True)
class DeepS4Layer:
    """D diagonal channels stacked as (D, H) arrays plus W, beta, u.

    ``h0`` is a buffer (not counted as a parameter); initial-state tuning
    makes it trainable.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    log_dt: np.ndarray
    W: np.ndarray
    beta: np.ndarray
    u: np.ndarray
    h0: np.ndarray | None = None

    kind = "s4"
    param_names = ("a", "b", "c", "log_dt", "W", "beta", "u")
    ssm_names = ("a", "b", "c", "log_dt")
    matrix_names = ("a", "b", "c", "W")
    bias_names = ("beta",)

    def __post_init__(self):
        D, H = np.shape(self.a)
        if np.shape(self.b) != (D, H) or np.shape(self.c) != (D, H):
            raise ValueError("a, b, c must share shape (D, H)")
        if np.shape(self.log_dt) != (D,) or np.shape(self.W) != (D, D):
            raise ValueError("log_dt must be (D,) and W (D, D)")
        if np.shape(self.beta) != (D,) or np.shape(self.u) != (D,):
            raise ValueError("beta and u must be (D,)")
        if self.h0 is None:
            object.__setattr__(self, "h0", np.zeros((D, H)))
        _freeze(self)

    @property
    def D(self):
        return self.a.shape[0]

    @property
    def H(self):
        return self.a.shape[1]

    def channel(self, d):
        return S4ChannelParams(self.a[d], self.b[d], self.c[d], self.log_dt[d], self.h0[d])

    def discretized(self):
        return discretize(self.a, self.b, np.exp(self.log_dt)[:, None])


@dataclass(frozen=True)
class S6Block:
    """Selective SSM with an input projection: y = S6(W_in x).

    Step size uses the low-rank form softplus(w_dt_up @ (w_dt_down @ z) + beta_dt),
    with w_dt_down (r, D) and w_dt_up (D, r).
    """

    a: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    w_dt_down: np.ndarray
    w_dt_up: np.ndarray
    beta_dt: np.ndarray
    w_in: np.ndarray
    h0: np.ndarray | None = None

    kind = "s6"
    param_names = ("a", "w_b", "w_c", "w_dt_down", "w_dt_up", "beta_dt", "w_in")
    ssm_names = ("a", "w_b", "w_c", "w_dt_down", "w_dt_up", "beta_dt")
    matrix_names = ("a", "w_b", "w_c", "w_dt_down", "w_dt_up", "w_in")
    bias_names = ("beta_dt",)

    def __post_init__(self):
        D, H = np.shape(self.a)
        r = np.shape(self.w_dt_down)[0]
        if r < 1:
            raise ValueError("S6 step-size rank r must be >= 1")
        expected = {
            "w_b": (H, D),
            "w_c": (H, D),
            "w_dt_down": (r, D),
            "w_dt_up": (D, r),
            "beta_dt": (D,),
            "w_in": (D, D),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"S6Block.{name} must have shape {shape}, got {np.shape(getattr(self, name))}")
        if self.h0 is None:
            object.__setattr__(self, "h0", np.zeros((D, H)))
        _freeze(self)

    @property
    def D(self):
        return self.a.shape[0]

    @property
    def H(self):
        return self.a.shape[1]

    @property
    def rank(self):
        return self.w_dt_down.shape[0]


def _freeze(obj):
    for f in dataclasses.fields(obj):
        arr = np.array(getattr(obj, f.name), dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(obj, f.name, arr)


@dataclass(frozen=True)
class StackedModel:
    """Layers applied in order, each followed by its activation; optional head.

    The head maps the final token's D features to K logits: head_w is (D, K).
    """

    layers: tuple
    activations: tuple
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layers) != len(self.activations):
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {ACTIVATIONS}")
        dims = {layer.D for layer in self.layers}
        if len(dims) > 1:
            raise ValueError(f"consecutive layers disagree on D: {sorted(dims)}")
        for name in ("head_w", "head_b"):
            v = getattr(self, name)
            if v is not None:
                arr = np.array(v, dtype=np.float64)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def D(self):
        return self.layers[0].D

    @property
    def L(self):
        return len(self.layers)

    def named_parameters(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        if self.head_w is not None:
            out["head.w"] = self.head_w
            out["head.b"] = self.head_b
        return out

    def named_buffers(self):
        return OrderedDict((f"layers.{i}.h0", layer.h0) for i, layer in enumerate(self.layers))

    def num_parameters(self):
        return int(sum(v.size for v in self.named_parameters().values()))

    def replace(self, values):
        """New model with parameters/buffers overridden from a name -> array map."""
        layers = [dict() for _ in self.layers]
        head = {}
        for name, v in values.items():
            parts = name.split(".")
            if parts[0] == "layers":
                layers[int(parts[1])][parts[2]] = np.asarray(v, dtype=np.float64)
            elif parts[0] == "head":
                head["head_" + parts[1]] = np.asarray(v, dtype=np.float64)
            else:
                raise KeyError(name)
        new_layers = tuple(
            dataclasses.replace(layer, **upd) if upd else layer for layer, upd in zip(self.layers, layers)
        )
        return dataclasses.replace(self, layers=new_layers, **head)


# ---------------------------------------------------------------- init


def init_s4_layer(rng, D, H, residual=True):
    """S4D-real style init: a_h = -(h + 1), B, C ~ N(0, 1/H), log dt ~ U[ln 1e-3, ln 1e-1]."""
    a = -np.tile(np.arange(1, H + 1, dtype=np.float64), (D, 1))
    b = rng.normal((D, H)) / math.sqrt(H)
    c = rng.normal((D, H)) / math.sqrt(H)
    log_dt = rng.uniform((D,), math.log(1e-3), math.log(1e-1))
    W = rng.normal((D, D)) * math.sqrt(2.0 / (D + D))
    u = np.ones(D) if residual else np.zeros(D)
    return DeepS4Layer(a, b, c, log_dt, W, np.zeros(D), u)


def init_s6_block(rng, D, H, r):
    a = -np.tile(np.arange(1, H + 1, dtype=np.float64), (D, 1))
    return S6Block(
        a=a,
        w_b=rng.normal((H, D)) / math.sqrt(D),
        w_c=rng.normal((H, D)) / math.sqrt(D),
        w_dt_down=rng.normal((r, D)) / math.sqrt(D),
        w_dt_up=rng.normal((D, r)) / math.sqrt(r),
        beta_dt=np.log(np.expm1(rng.uniform((D,), 1e-3, 1e-1))),
        w_in=rng.normal((D, D)) / math.sqrt(D),
    )


def init_model(rng, L, D, H, activation="relu", residual=True, kind="s4", r=1, classes=None):
    layers = []
    for i in range(L):
        sub = rng.spawn(i)
        layers.append(init_s4_layer(sub, D, H, residual) if kind == "s4" else init_s6_block(sub, D, H, r))
    head_w = head_b = None
    if classes:
        head_w = rng.spawn(L).normal((D, classes)) / math.sqrt(D)
        head_b = np.zeros(classes)
    return StackedModel(tuple(layers), (activation,) * L, head_w, head_b)


# ---------------------------------------------------------------- numpy reference forwards


def _act(x, tag):
    return np.maximum(x, 0.0) if tag == "relu" else x


def deep_s4_layer_forward(layer, X, activation="relu", pre_mix=False):
    """Reference forward of one deep S4 layer on X (D, N) via per-channel scans.

    With ``pre_mix`` the per-channel S4 outputs (before W, beta, u) are returned.
    """
    X = np.asarray(X, dtype=np.float64)
    S = np.stack([s4_scan(layer.channel(d), X[d])[0] for d in range(layer.D)])
    if pre_mix:
        return S
    return _act(layer.W @ S + layer.beta[:, None] + layer.u[:, None] * X, activation)


def s6_step_sizes(block, Z):
    """Delta (D, N) = softplus(up @ (down @ Z) + beta)."""
    pre = block.w_dt_up @ (block.w_dt_down @ Z) + block.beta_dt[:, None]
    return np.logaddexp(0.0, pre)


def s6_parameters(block, X):
    """Input-dependent (abar, bbar, C) sequences: (N, D, H), (N, D, H), (N, H)."""
    Z = block.w_in @ np.asarray(X, dtype=np.float64)
    delta = s6_step_sizes(block, Z)
    Bt = block.w_b @ Z
    Ct = block.w_c @ Z
    abar = np.exp(delta.T[:, :, None] * block.a[None])
    bbar = delta.T[:, :, None] * Bt.T[:, None, :]
    return abar, bbar, Ct.T


def s6_forward(block, X, h0=None):
    """Reference S6 forward on X (D, N) with an explicit time loop."""
    X = np.asarray(X, dtype=np.float64)
    Z = block.w_in @ X
    abar, bbar, C = s6_parameters(block, X)
    h = np.array(block.h0 if h0 is None else h0, dtype=np.float64)
    Y = np.empty_like(X)
    for t in range(X.shape[1]):
        h = abar[t] * h + bbar[t] * Z[:, t][:, None]
        Y[:, t] = h @ C[t]
    return Y


def model_forward(model, X):
    """Reference stacked forward on X (D, N). Returns (per-token outputs, logits)."""
    Z = np.asarray(X, dtype=np.float64)
    for layer, act in zip(model.layers, model.activations):
        if layer.kind == "s4":
            Z = deep_s4_layer_forward(layer, Z, act)
        else:
            Z = _act(s6_forward(layer, Z), act)
    logits = None
    if model.head_w is not None:
        logits = Z[:, -1] @ model.head_w + model.head_b
    return Z, logits


# ---------------------------------------------------------------- graph forwards


class LoRAWeight:
    """Frozen matrix plus a low-rank branch, applied as W x + s * up (down x)."""

    def __init__(self, base, down, up, scale, dropout=0.0, rng=None):
        self.base = num.as_node(base)
        self.down = num.as_node(down)
        self.up = num.as_node(up)
        self.scale = float(scale)
        self.dropout = float(dropout)
        self.rng = rng

    def materialize(self):
        return self.base + num.scale(self.up @ self.down, self.scale)

    def apply(self, x):
        xin = x
        if self.dropout > 0 and self.rng is not None:
            keep = (self.rng.uniform(x.shape) >= self.dropout) / (1.0 - self.dropout)
            xin = x * keep
        return self.base @ x + num.scale(self.up @ (self.down @ xin), self.scale)


def _mat(w):
    return w.materialize() if isinstance(w, LoRAWeight) else num.as_node(w)


def _linear(w, x):
    return w.apply(x) if isinstance(w, LoRAWeight) else num.as_node(w) @ x


def _activate(x, tag):
    return num.relu(x) if tag == "relu" else x


def s4_layer_graph(p, X, activation, h0=None):
    """Graph forward of a deep S4 layer on X (B, D, N)."""
    a, b, c = _mat(p["a"]), _mat(p["b"]), _mat(p["c"])
    D = a.shape[0]
    n = X.shape[-1]
    dt = num.exp(num.as_node(p["log_dt"])).reshape(D, 1)
    x = a * dt
    abar = num.exp(x)
    bbar = num.expm1_ratio(x) * dt * b
    kernel = num.ssm_kernel(abar, bbar * c, n)
    S = num.causal_conv(kernel, X)
    if h0 is not None:
        free = num.ssm_kernel(abar, c * num.as_node(h0), n + 1)[:, 1:]
        S = S + free
    pre = _linear(p["W"], S) + num.as_node(p["beta"]).reshape(D, 1) + num.as_node(p["u"]).reshape(D, 1) * X
    return _activate(pre, activation)


def s6_block_graph(p, X, activation, h0=None):
    """Graph forward of the S6 block on X (B, D, N)."""
    a = _mat(p["a"])
    D, H = a.shape
    B_, _, n = X.shape
    Z = _linear(p["w_in"], X)  # (B, D, N)
    low = _linear(p["w_dt_down"], Z)
    delta = num.softplus(_linear(p["w_dt_up"], low) + num.as_node(p["beta_dt"]).reshape(D, 1))
    Bt = _linear(p["w_b"], Z)  # (B, H, N)
    Ct = _linear(p["w_c"], Z)
    delta_t = delta.transpose(0, 2, 1).reshape(B_, n, D, 1)
    abar = num.exp(delta_t * a.reshape(1, 1, D, H))
    Bt_t = Bt.transpose(0, 2, 1).reshape(B_, n, 1, H)
    Z_t = Z.transpose(0, 2, 1).reshape(B_, n, D, 1)
    u = delta_t * Bt_t * Z_t
    if h0 is None:
        h0n = num.constant(np.zeros((B_, D, H)))
    else:
        h0n = num.as_node(h0).reshape(1, D, H) + num.constant(np.zeros((B_, 1, 1)))
    hs = num.diag_scan(abar, u, h0n)
    Y = (hs * Ct.transpose(0, 2, 1).reshape(B_, n, 1, H)).sum(axis=3)  # (B, N, D)
    return _activate(Y.transpose(0, 2, 1), activation)


def _tile_batch(P, batch):
    P = num.as_node(P)
    return P.reshape(1, *P.shape) + num.constant(np.zeros((batch, 1, 1)))


def model_graph(model, values, X, h0s=None, prefixes=None, prompt=None):
    """Differentiable forward of ``model`` with parameter values from ``values``.

    values: name -> node/array/LoRAWeight for every model parameter.
    X: (B, D, N) array or node. h0s: layer -> (D, H) initial states.
    prefixes: layer -> (D, M) sequences prepended to that layer's input stream.
    prompt: (D, M) sequence prepended once at the model input.
    Returns (per-token outputs (B, D, N), logits (B, K) or None).
    """
    Z = num.as_node(X)
    if Z.ndim == 2:
        Z = Z.reshape(1, *Z.shape)
    batch, n = Z.shape[0], Z.shape[-1]
    if prompt is not None:
        Z = num.concat([_tile_batch(prompt, batch), Z], axis=2)
    h0s = h0s or {}
    prefixes = prefixes or {}
    for i, (layer, act) in enumerate(zip(model.layers, model.activations)):
        p = {name: values[f"layers.{i}.{name}"] for name in layer.param_names}
        h0 = h0s.get(i)
        if h0 is None and np.any(layer.h0):
            h0 = layer.h0
        inp = Z
        m = 0
        if i in prefixes:
            P = num.as_node(prefixes[i])
            m = P.shape[1]
            inp = num.concat([_tile_batch(P, batch), Z], axis=2)
        fwd = s4_layer_graph if layer.kind == "s4" else s6_block_graph
        Z = fwd(p, inp, act, h0)
        if m:
            Z = Z[:, :, m:]
    if prompt is not None:
        Z = Z[:, :, Z.shape[-1] - n :]
    logits = None
    if model.head_w is not None:
        logits = Z[:, :, -1] @ _mat(values["head.w"]) + num.as_node(values["head.b"])
    return Z, logits


def frozen_values(model):
    return {k: num.constant(v) for k, v in model.named_parameters().items()}
