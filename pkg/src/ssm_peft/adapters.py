"""PEFT adapters over :class:`~ssm_peft.ssm.StackedModel`.

Every adapter is an :class:`Adapter`: a (possibly edited) frozen base model, an
ordered map of trainable leaves with their initial values, and a binding
function that turns trainable nodes into the arguments of
:func:`ssm_peft.ssm.model_graph`. Counting trainables is therefore just summing
leaf sizes.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import num
from .errors import AdapterError, ConfigError
from .ssm import LoRAWeight, frozen_values, model_graph

S6_MASKED_A = -1e4


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class Full:
    kind = "full"


@dataclass(frozen=True)
class LoRA:
    targets: tuple = ("W",)
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.0
    kind = "lora"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if int(self.rank) < 1:
            raise AdapterError("LoRA rank must be >= 1")
        if not self.alpha > 0:
            raise AdapterError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise AdapterError("LoRA dropout must lie in [0, 1)")
        if not self.targets:
            raise AdapterError("LoRA needs at least one target")


@dataclass(frozen=True)
class BitFit:
    kind = "bitfit"


@dataclass(frozen=True)
class PromptTuning:
    M: int = 1
    init_std: float = 0.0
    kind = "prompt"

    def __post_init__(self):
        if int(self.M) < 1:
            raise AdapterError("prompt length M must be >= 1")


@dataclass(frozen=True)
class PrefixTuning:
    M: int = 1
    reparam: str = "direct"
    width: int | None = None
    init_std: float = 0.0
    kind = "prefix"

    def __post_init__(self):
        if int(self.M) < 1:
            raise AdapterError("prefix length M must be >= 1")
        if self.reparam not in ("direct", "mlp"):
            raise AdapterError(f"prefix reparam must be 'direct' or 'mlp', got {self.reparam!r}")


@dataclass(frozen=True)
class InitialStateTuning:
    kind = "initial_state"


@dataclass(frozen=True)
class SDLoRA:
    keep_channel_fraction: float = 1.0
    keep_state_fraction: float = 1.0
    update_channel_fraction: float = 1.0
    update_state_fraction: float = 1.0
    proj_lora_rank: int = 1
    warmup_batches: int = 1
    tune_residual_bias: bool = True
    sdt: bool = False
    lora_alpha: float | None = None
    warmup_lr: float = 1e-2
    kind = "sdlora"

    def __post_init__(self):
        for name in ("keep_channel_fraction", "keep_state_fraction", "update_channel_fraction", "update_state_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise AdapterError(f"{name} must lie in (0, 1], got {v}")
        if int(self.proj_lora_rank) < 1:
            raise AdapterError("proj_lora_rank must be >= 1")
        if int(self.warmup_batches) < 1:
            raise AdapterError("warmup_batches must be >= 1")


SPEC_TYPES = {cls.kind: cls for cls in (Full, LoRA, BitFit, PromptTuning, PrefixTuning, InitialStateTuning, SDLoRA)}


def spec_to_dict(spec):
    out = {"type": spec.kind}
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def spec_from_dict(d, path="adapter"):
    if not isinstance(d, dict):
        raise ConfigError(path, "adapter spec must be an object")
    kind = d.get("type")
    if kind not in SPEC_TYPES:
        raise ConfigError(f"{path}.type", f"unknown adapter type {kind!r}; choose from {sorted(SPEC_TYPES)}")
    cls = SPEC_TYPES[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k == "type":
            continue
        if k not in names:
            raise ConfigError(f"{path}.{k}", f"unknown key for adapter type {kind!r}")
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (AdapterError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


# ---------------------------------------------------------------- masks


def round_half_up(x):
    return int(math.floor(x + 0.5))


def fraction_count(fraction, total):
    """round_half_up(fraction * total), at least 1 for positive fractions."""
    if fraction <= 0:
        return 0
    return min(total, max(1, round_half_up(fraction * total)))


@dataclass(frozen=True)
class LayerMask:
    zeroed_channels: tuple = ()
    zeroed_states: dict = field(default_factory=dict)
    trainable_channels: tuple = ()
    trainable_states: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "zeroed_channels", tuple(sorted(int(d) for d in self.zeroed_channels)))
        object.__setattr__(self, "trainable_channels", tuple(sorted(int(d) for d in self.trainable_channels)))
        for name in ("zeroed_states", "trainable_states"):
            src = getattr(self, name)
            object.__setattr__(self, name, {int(k): tuple(sorted(int(h) for h in v)) for k, v in sorted(src.items())})

    def trainable_pairs(self):
        return [(d, h) for d in self.trainable_channels for h in self.trainable_states.get(d, ())]

    def validate(self, D, H):
        zc = set(self.zeroed_channels)
        if any(not 0 <= d < D for d in zc | set(self.trainable_channels)):
            raise AdapterError("mask channel index out of range")
        for d in self.trainable_channels:
            if d in zc:
                raise AdapterError(f"channel {d} is both zeroed and trainable")
            zs = set(self.zeroed_states.get(d, ()))
            for h in self.trainable_states.get(d, ()):
                if not 0 <= h < H:
                    raise AdapterError("mask state index out of range")
                if h in zs:
                    raise AdapterError(f"state {h} of channel {d} is both zeroed and trainable")

    def to_dict(self):
        return {
            "zeroed_channels": list(self.zeroed_channels),
            "zeroed_states": {str(k): list(v) for k, v in self.zeroed_states.items()},
            "trainable_channels": list(self.trainable_channels),
            "trainable_states": {str(k): list(v) for k, v in self.trainable_states.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["zeroed_channels"],
            {int(k): v for k, v in d["zeroed_states"].items()},
            d["trainable_channels"],
            {int(k): v for k, v in d["trainable_states"].items()},
        )


@dataclass(frozen=True)
class DimensionMask:
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_dict(self):
        return {"layers": [m.to_dict() for m in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerMask.from_dict(m) for m in d["layers"]))

    @classmethod
    def full(cls, model):
        return cls(
            tuple(
                LayerMask((), {}, range(layer.D), {d: range(layer.H) for d in range(layer.D)})
                for layer in model.layers
            )
        )


def mask_from_fractions(model, spec):
    """Mask with the configured sizes picking the lowest indices (count-only use)."""
    out = []
    for layer in model.layers:
        D, H = layer.D, layer.H
        kc = fraction_count(spec.keep_channel_fraction, D)
        ks = fraction_count(spec.keep_state_fraction, H)
        tc = fraction_count(spec.update_channel_fraction, kc)
        ts = fraction_count(spec.update_state_fraction, ks)
        out.append(
            LayerMask(
                range(kc, D),
                {d: range(ks, H) for d in range(kc)},
                range(tc),
                {d: range(ts) for d in range(tc)},
            )
        )
    return DimensionMask(tuple(out))


# ---------------------------------------------------------------- LoRA


@dataclass(frozen=True)
class LoRAFactors:
    down: np.ndarray
    up: np.ndarray
    alpha: float

    @property
    def rank(self):
        return self.down.shape[0]

    @property
    def scale(self):
        return self.alpha / self.rank


def lora_merge(W, factors):
    """W + (alpha / r) up @ down."""
    W = np.asarray(W, dtype=np.float64)
    down, up = np.asarray(factors.down), np.asarray(factors.up)
    if up.shape[0] != W.shape[0] or down.shape[1] != W.shape[1] or up.shape[1] != down.shape[0]:
        raise AdapterError(f"lora_merge: W {W.shape} incompatible with up {up.shape} / down {down.shape}")
    return W + factors.scale * (up @ down)


# ---------------------------------------------------------------- adapter object


class Adapter:
    """Frozen base model plus trainable leaves and how they enter the forward."""

    def __init__(self, spec, model, init, bind, mask=None):
        self.spec = spec
        self.model = model
        self.init = OrderedDict((k, np.array(v, dtype=np.float64)) for k, v in init.items())
        self._bind = bind
        self.mask = mask
        for v in self.init.values():
            v.setflags(write=False)

    @property
    def count(self):
        return int(sum(v.size for v in self.init.values()))

    @property
    def names(self):
        return list(self.init)

    def leaves(self, values=None):
        values = self.init if values is None else values
        return OrderedDict((k, num.parameter(values[k], k)) for k in self.init)

    def bind(self, nodes, rng=None):
        """Keyword arguments for :func:`model_graph` given trainable nodes."""
        base = frozen_values(self.model)
        return self._bind(base, nodes, rng)

    def graph(self, nodes, X, rng=None):
        return model_graph(self.model, X=X, **self.bind(nodes, rng))

    def forward(self, X, values=None):
        nodes = {k: num.constant(v) for k, v in (self.init if values is None else values).items()}
        Y, logits = self.graph(nodes, X)
        return Y.value, None if logits is None else logits.value

    def materialize(self, values=None):
        """Fold trainables into an ordinary StackedModel (not possible for prompts/prefixes)."""
        nodes = {k: num.constant(v) for k, v in (self.init if values is None else values).items()}
        kw = self.bind(nodes)
        if kw.get("prefixes") or kw.get("prompt") is not None:
            raise AdapterError(f"{self.spec.kind} adapters prepend tokens and cannot be merged into weights")
        out = {}
        for name, v in kw["values"].items():
            out[name] = v.materialize().value if isinstance(v, LoRAWeight) else num.as_node(v).value
        for i, h0 in (kw.get("h0s") or {}).items():
            out[f"layers.{i}.h0"] = num.as_node(h0).value
        return self.model.replace(out)


def _head_leaves(model, init):
    if model.head_w is not None:
        init["head.w"] = model.head_w
        init["head.b"] = model.head_b


def _bind_head(values, nodes):
    for k in ("head.w", "head.b"):
        if k in nodes:
            values[k] = nodes[k]


def matrix_targets(model):
    names = [k for k, v in model.named_parameters().items() if v.ndim == 2 and not k.startswith("head")]
    return names


def resolve_targets(model, targets):
    valid = matrix_targets(model)
    short = sorted({n.split(".")[-1] for n in valid})
    out = []
    for t in targets:
        hits = [n for n in valid if n == t or n.split(".")[-1] == t]
        if not hits:
            raise AdapterError(f"unknown LoRA target {t!r}; valid names: {short + valid}")
        out.extend(h for h in hits if h not in out)
    return out


def _lora_init(rng, name, shape, rank):
    m, n = shape
    sub = rng.spawn(zlib.crc32(name.encode()))
    return sub.normal((rank, n)) / math.sqrt(n), np.zeros((m, rank))


def build_adapter(model, spec, rng=None, mask=None):
    """Construct the :class:`Adapter` described by ``spec``.

    For SDLoRA, ``mask`` is the :class:`DimensionMask` from selection; without
    one, a size-equivalent mask from the fractions is used.
    When the model has a classification head, every adapter also trains it.
    """
    rng = num.RngStream(0) if rng is None else rng
    params = model.named_parameters()
    init = OrderedDict()

    if isinstance(spec, Full):
        init.update(params)

        def bind(base, nodes, rng_):
            return {"values": {**base, **nodes}}

        return Adapter(spec, model, init, bind)

    if isinstance(spec, LoRA):
        targets = resolve_targets(model, spec.targets)
        for t in targets:
            down, up = _lora_init(rng, t, params[t].shape, spec.rank)
            init[t + ".lora_down"] = down
            init[t + ".lora_up"] = up
        _head_leaves(model, init)
        scale = spec.alpha / spec.rank

        def bind(base, nodes, rng_):
            values = dict(base)
            for t in targets:
                drop_rng = rng_.spawn(len(t)) if (rng_ is not None and spec.dropout > 0) else None
                values[t] = LoRAWeight(base[t], nodes[t + ".lora_down"], nodes[t + ".lora_up"], scale, spec.dropout, drop_rng)
            _bind_head(values, nodes)
            return {"values": values}

        return Adapter(spec, model, init, bind)

    if isinstance(spec, BitFit):
        for i, layer in enumerate(model.layers):
            for b in layer.bias_names:
                init[f"layers.{i}.{b}"] = params[f"layers.{i}.{b}"]
        _head_leaves(model, init)

        def bind(base, nodes, rng_):
            return {"values": {**base, **nodes}}

        return Adapter(spec, model, init, bind)

    if isinstance(spec, InitialStateTuning):
        for i, layer in enumerate(model.layers):
            init[f"layers.{i}.h0"] = layer.h0
        _head_leaves(model, init)

        def bind(base, nodes, rng_):
            values = dict(base)
            _bind_head(values, nodes)
            return {"values": values, "h0s": {i: nodes[f"layers.{i}.h0"] for i in range(model.L)}}

        return Adapter(spec, model, init, bind)

    if isinstance(spec, PromptTuning):
        init["prompt"] = rng.spawn(101).normal((model.D, spec.M)) * spec.init_std
        _head_leaves(model, init)

        def bind(base, nodes, rng_):
            values = dict(base)
            _bind_head(values, nodes)
            return {"values": values, "prompt": nodes["prompt"]}

        return Adapter(spec, model, init, bind)

    if isinstance(spec, PrefixTuning):
        return inject_prefix(model, spec, rng)

    if isinstance(spec, SDLoRA):
        return sdlora_apply(model, mask if mask is not None else mask_from_fractions(model, spec), spec, rng)

    raise AdapterError(f"unsupported adapter spec {spec!r}")


def inject_prefix(model, spec, rng=None):
    """Per-layer prefix tuning (direct or MLP-reparameterized)."""
    rng = num.RngStream(0) if rng is None else rng
    D, L, M = model.D, model.L, spec.M
    init = OrderedDict()
    if spec.reparam == "direct":
        for i in range(L):
            init[f"prefix.{i}"] = rng.spawn(200 + i).normal((D, M)) * spec.init_std
    else:
        w = spec.width or 4 * D
        init["prefix.emb"] = rng.spawn(300).normal((M, D))
        init["prefix.w1"] = rng.spawn(301).normal((D, w)) / math.sqrt(D)
        init["prefix.b1"] = np.zeros(w)
        init["prefix.w2"] = rng.spawn(302).normal((w, L * D)) * spec.init_std
        init["prefix.b2"] = np.zeros(L * D)
    _head_leaves(model, init)

    def bind(base, nodes, rng_):
        values = dict(base)
        _bind_head(values, nodes)
        if spec.reparam == "direct":
            prefixes = {i: nodes[f"prefix.{i}"] for i in range(L)}
        else:
            hidden = num.tanh(nodes["prefix.emb"] @ nodes["prefix.w1"] + nodes["prefix.b1"])
            flat = hidden @ nodes["prefix.w2"] + nodes["prefix.b2"]  # (M, L*D)
            stacked = flat.reshape(M, L, D).transpose(1, 2, 0)  # (L, D, M)
            prefixes = {i: stacked[i] for i in range(L)}
        return {"values": values, "prefixes": prefixes}

    return Adapter(spec, model, init, bind)


def initial_state_adapter(model):
    return build_adapter(model, InitialStateTuning())


# ---------------------------------------------------------------- SDLoRA


def apply_zeroing(model, mask):
    """Mask unimportant dimensions: C = 0 for S4 layers, A = -1e4 for S6 layers."""
    if len(mask.layers) != model.L:
        raise AdapterError(f"mask has {len(mask.layers)} layers, model has {model.L}")
    updates = {}
    for i, (layer, lm) in enumerate(zip(model.layers, mask.layers)):
        lm.validate(layer.D, layer.H)
        if layer.kind == "s4":
            c = layer.c.copy()
            c[list(lm.zeroed_channels), :] = 0.0
            for d, hs in lm.zeroed_states.items():
                c[d, list(hs)] = 0.0
            updates[f"layers.{i}.c"] = c
        else:
            a = layer.a.copy()
            a[list(lm.zeroed_channels), :] = S6_MASKED_A
            for d, hs in lm.zeroed_states.items():
                a[d, list(hs)] = S6_MASKED_A
            updates[f"layers.{i}.a"] = a
    return model.replace(updates)


def _flat(shape, rows, cols):
    return np.array([r * shape[1] + c for r, c in zip(rows, cols)], dtype=np.intp)


def sdlora_apply(model, mask, spec, rng=None):
    """Selective dimension tuning on SSM parameters plus LoRA (or SDT columns) on projections."""
    rng = num.RngStream(0) if rng is None else rng
    base_model = apply_zeroing(model, mask)
    init = OrderedDict()
    plan = []  # (param name, leaf name, shape, flat index)
    lora = []
    rank = int(spec.proj_lora_rank)
    alpha = float(spec.lora_alpha if spec.lora_alpha is not None else rank)
    for i, (layer, lm) in enumerate(zip(base_model.layers, mask.layers)):
        D, H = layer.D, layer.H
        pairs = lm.trainable_pairs()
        rows = [d for d, _ in pairs]
        cols = [h for _, h in pairs]
        pre = f"layers.{i}"
        if layer.kind == "s4":
            for nm in ("a", "b", "c"):
                if pairs:
                    idx = _flat((D, H), rows, cols)
                    plan.append((f"{pre}.{nm}", f"{pre}.{nm}.delta", (D, H), idx))
            if lm.trainable_channels:
                idx = np.array(lm.trainable_channels, dtype=np.intp)
                plan.append((f"{pre}.log_dt", f"{pre}.log_dt.delta", (D,), idx))
            if spec.sdt:
                chans = list(lm.trainable_channels)
                idx = np.array([r * D + c for r in range(D) for c in chans], dtype=np.intp)
                plan.append((f"{pre}.W", f"{pre}.W.cols", (D, D), idx))
            else:
                lora.append(f"{pre}.W")
            if spec.tune_residual_bias:
                init[f"{pre}.u"] = layer.u
                init[f"{pre}.beta"] = layer.beta
        else:
            if pairs:
                plan.append((f"{pre}.a", f"{pre}.a.delta", (D, H), _flat((D, H), rows, cols)))
            wmask = np.zeros((H, D), dtype=bool)
            wmask[:, list(lm.trainable_channels)] = True
            states = sorted({h for d in lm.trainable_channels for h in lm.trainable_states.get(d, ())})
            wmask[states, :] = True
            idx = np.flatnonzero(wmask.reshape(-1))
            if idx.size:
                plan.append((f"{pre}.w_b", f"{pre}.w_b.delta", (H, D), idx))
                plan.append((f"{pre}.w_c", f"{pre}.w_c.delta", (H, D), idx))
            if spec.sdt:
                chans = list(lm.trainable_channels)
                idx = np.array([r * D + c for r in range(D) for c in chans], dtype=np.intp)
                plan.append((f"{pre}.w_in", f"{pre}.w_in.cols", (D, D), idx))
            else:
                lora.append(f"{pre}.w_in")
            if spec.tune_residual_bias:
                init[f"{pre}.beta_dt"] = layer.beta_dt
    for _, leaf, _, idx in plan:
        init[leaf] = np.zeros(idx.size)
    params = base_model.named_parameters()
    for t in lora:
        down, up = _lora_init(rng, t, params[t].shape, rank)
        init[t + ".lora_down"] = down
        init[t + ".lora_up"] = up
    _head_leaves(base_model, init)
    direct = [k for k in init if k in params]

    def bind(base, nodes, rng_):
        values = dict(base)
        for k in direct:
            values[k] = nodes[k]
        for pname, leaf, shape, idx in plan:
            values[pname] = num.as_node(values[pname]) + num.scatter(nodes[leaf], shape, idx)
        for t in lora:
            values[t] = LoRAWeight(values[t], nodes[t + ".lora_down"], nodes[t + ".lora_up"], alpha / rank)
        return {"values": values}

    return Adapter(spec, base_model, init, bind, mask=mask)


def enumerate_trainables(model, spec, mask=None):
    """Independent closed-form count of an adapter's trainables (oracle for Adapter.count)."""
    total = 0
    P = model.named_parameters()
    head = 0 if model.head_w is None else model.head_w.size + model.head_b.size
    if isinstance(spec, Full):
        return sum(v.size for v in P.values())
    if isinstance(spec, LoRA):
        names = set()
        for t in spec.targets:
            names |= {n for n in matrix_targets(model) if n == t or n.endswith("." + t)}
        return sum(spec.rank * (P[n].shape[0] + P[n].shape[1]) for n in names) + head
    if isinstance(spec, BitFit):
        return sum(model.D for layer in model.layers for _ in layer.bias_names) + head
    if isinstance(spec, InitialStateTuning):
        return sum(layer.D * layer.H for layer in model.layers) + head
    if isinstance(spec, PromptTuning):
        return model.D * spec.M + head
    if isinstance(spec, PrefixTuning):
        if spec.reparam == "direct":
            return model.L * model.D * spec.M + head
        w = spec.width or 4 * model.D
        return spec.M * model.D + model.D * w + w + w * model.L * model.D + model.L * model.D + head
    if isinstance(spec, SDLoRA):
        mask = mask if mask is not None else mask_from_fractions(model, spec)
        r = spec.proj_lora_rank
        for layer, lm in zip(model.layers, mask.layers):
            D, H = layer.D, layer.H
            n_pairs = sum(len(lm.trainable_states.get(d, ())) for d in lm.trainable_channels)
            proj = D * len(lm.trainable_channels) if spec.sdt else r * 2 * D
            if layer.kind == "s4":
                total += 3 * n_pairs + len(lm.trainable_channels) + proj + (2 * D if spec.tune_residual_bias else 0)
            else:
                states = {h for d in lm.trainable_channels for h in lm.trainable_states.get(d, ())}
                cols = len(lm.trainable_channels)
                wb = cols * H + len(states) * D - cols * len(states)
                total += n_pairs + 2 * wb + proj + (D if spec.tune_residual_bias else 0)
        return total + head
    raise AdapterError(f"unsupported adapter spec {spec!r}")


def param_fraction(model, spec, mask=None):
    """Percent of the frozen model's parameters that the adapter trains."""
    return 100.0 * build_adapter(model, spec, mask=mask).count / model.num_parameters()
