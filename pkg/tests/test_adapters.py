import numpy as np
import pytest

from ssm_peft import num
from ssm_peft.adapters import (
    SPEC_TYPES,
    Adapter,
    BitFit,
    DimensionMask,
    Full,
    InitialStateTuning,
    LayerMask,
    LoRA,
    LoRAFactors,
    PrefixTuning,
    PromptTuning,
    SDLoRA,
    apply_zeroing,
    build_adapter,
    enumerate_trainables,
    fraction_count,
    initial_state_adapter,
    lora_merge,
    mask_from_fractions,
    param_fraction,
    round_half_up,
    spec_from_dict,
    spec_to_dict,
)
from ssm_peft.errors import AdapterError, ConfigError
from ssm_peft.num import RngStream
from ssm_peft.ssm import deep_s4_layer_forward, frozen_values, init_model, model_forward, model_graph
from ssm_peft.theory import prefix_to_initial_state

ALL_SPECS = [
    Full(),
    LoRA(),
    LoRA(targets=("W", "b"), rank=2, alpha=4),
    BitFit(),
    PromptTuning(M=3),
    PrefixTuning(M=2),
    PrefixTuning(M=2, reparam="mlp", width=5),
    InitialStateTuning(),
    SDLoRA(0.5, 0.5, 0.5, 1.0, proj_lora_rank=2),
    SDLoRA(0.5, 0.5, 1.0, 0.5, sdt=True, tune_residual_bias=False),
]


def _model(kind="s4", classes=None, seed=0):
    return init_model(RngStream(seed), 2, 6, 4, activation="relu", kind=kind, r=2, classes=classes)


def _for_kind(spec, kind):
    if kind == "s6" and isinstance(spec, LoRA):
        return LoRA(targets=tuple("w_in" if t == "W" else t for t in spec.targets if t != "b"), rank=spec.rank, alpha=spec.alpha)
    return spec


def _perturb(adapter, rng, scale=0.3):
    return {k: v + scale * rng.spawn(i).normal(v.shape) for i, (k, v) in enumerate(adapter.init.items())}


def test_full_counts_everything():
    m = _model()
    a = build_adapter(m, Full())
    assert a.count == m.num_parameters()
    assert param_fraction(m, Full()) == 100.0


def test_lora_rank8_on_one_64x64_matrix():
    m = init_model(RngStream(0), 1, 64, 4)
    a = build_adapter(m, LoRA(targets=("W",), rank=8, alpha=8))
    assert a.count == 8 * (64 + 64) == 1024


def test_lora_all_projections_fraction():
    m = init_model(RngStream(0), 3, 16, 4)
    expected = 100.0 * 3 * 8 * 2 * 16 / m.num_parameters()
    assert param_fraction(m, LoRA(targets=("W",))) == pytest.approx(expected, rel=1e-15)


def test_bitfit_trains_exactly_biases():
    for kind in ("s4", "s6"):
        m = _model(kind)
        a = build_adapter(m, BitFit())
        expected = [f"layers.{i}.{b}" for i, layer in enumerate(m.layers) for b in layer.bias_names]
        assert a.names == expected
        assert set(n.split(".")[-1] for n in a.names) == ({"beta"} if kind == "s4" else {"beta_dt"})


def test_unknown_lora_target_lists_valid_names():
    with pytest.raises(AdapterError) as exc:
        build_adapter(_model(), LoRA(targets=("Q",)))
    assert "'W'" in str(exc.value) and "layers.0.W" in str(exc.value)


def test_spec_validation():
    with pytest.raises(AdapterError):
        LoRA(rank=0)
    with pytest.raises(AdapterError):
        LoRA(dropout=1.0)
    with pytest.raises(AdapterError):
        PromptTuning(M=0)
    with pytest.raises(AdapterError):
        PrefixTuning(M=0)
    with pytest.raises(AdapterError):
        SDLoRA(keep_channel_fraction=0.0)
    with pytest.raises(AdapterError):
        SDLoRA(proj_lora_rank=0)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind)
def test_spec_dict_round_trip(spec):
    assert spec_from_dict(spec_to_dict(spec)) == spec


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(ConfigError) as exc:
        spec_from_dict({"type": "lora", "rnak": 3})
    assert exc.value.key == "adapter.rnak"
    with pytest.raises(ConfigError):
        spec_from_dict({"type": "adapterfusion"})
    assert set(SPEC_TYPES) == {"full", "lora", "bitfit", "prompt", "prefix", "initial_state", "sdlora"}


# ---------------------------------------------------------------- LoRA merge


def test_lora_merge_zero_up():
    W = np.arange(6.0).reshape(2, 3)
    f = LoRAFactors(np.ones((4, 3)), np.zeros((2, 4)), 4.0)
    assert np.array_equal(lora_merge(W, f), W)


def test_lora_scale_rank8_alpha8():
    assert LoRAFactors(np.zeros((8, 3)), np.zeros((2, 8)), 8.0).scale == 1.0


def test_lora_merge_shape_error():
    with pytest.raises(AdapterError):
        lora_merge(np.zeros((2, 3)), LoRAFactors(np.zeros((1, 2)), np.zeros((2, 1)), 1.0))


def test_merge_identity_100_draws():
    m = _model()
    X = RngStream(9).normal((2, 6, 12))
    worst = 0.0
    for t in range(100):
        a = build_adapter(m, LoRA(targets=("W",), rank=3, alpha=5), rng=RngStream(t))
        vals = _perturb(a, RngStream(t, (1,)))
        Y, _ = a.forward(X, vals)
        merged = a.materialize(vals)
        W0 = m.layers[0].W
        f = LoRAFactors(vals["layers.0.W.lora_down"], vals["layers.0.W.lora_up"], 5.0)
        assert np.allclose(merged.layers[0].W, lora_merge(W0, f), atol=1e-15)
        for s in range(2):
            worst = max(worst, float(np.max(np.abs(model_forward(merged, X[s])[0] - Y[s]))))
    assert worst <= 1e-12


# ---------------------------------------------------------------- neutrality and counts


@pytest.mark.parametrize("kind", ["s4", "s6"])
@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.kind}-{id(s) % 97}")
def test_zero_init_neutrality(spec, kind):
    if kind == "s6" and isinstance(spec, SDLoRA):
        pytest.skip("SDLoRA masks S6 states with A = -1e4; covered separately")
    m = _model(kind, classes=3)
    spec = _for_kind(spec, kind)
    if isinstance(spec, SDLoRA):
        spec = SDLoRA(1.0, 1.0, spec.update_channel_fraction, spec.update_state_fraction, sdt=spec.sdt)
    a = build_adapter(m, spec, rng=RngStream(4))
    X = RngStream(5).normal((2, 6, 10))
    Y, logits = a.forward(X)
    for s in range(2):
        Yr, lr = model_forward(m, X[s])
        assert np.allclose(Y[s], Yr, atol=1e-12)
        assert np.allclose(logits[s], lr, atol=1e-12)


@pytest.mark.parametrize("kind", ["s4", "s6"])
@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.kind}-{id(s) % 97}")
@pytest.mark.parametrize("classes", [None, 3])
def test_count_matches_enumeration(spec, kind, classes):
    m = _model(kind, classes)
    spec = _for_kind(spec, kind)
    a = build_adapter(m, spec, rng=RngStream(1))
    assert a.count == enumerate_trainables(m, spec)
    assert a.count == sum(v.size for v in a.init.values())


def test_gradients_reach_every_trainable_leaf():
    m = _model(classes=3)
    X = RngStream(2).normal((1, 6, 8))
    for spec in ALL_SPECS:
        a = build_adapter(m, spec, rng=RngStream(3))
        vals = _perturb(a, RngStream(6), 0.1)
        leaves = a.leaves(vals)
        Y, logits = a.graph(leaves, X)
        loss = num.mean(Y * Y) + num.mean(logits * logits)
        g = num.backward(loss, leaves)
        assert set(g) == set(a.names)
        dead = [k for k, v in g.items() if not np.any(v)]
        assert not dead, (spec.kind, dead)


# ---------------------------------------------------------------- prefix / prompt / initial state


def test_zero_prefix_is_neutral_on_suffix():
    m = _model()
    a = build_adapter(m, PrefixTuning(M=1))
    X = RngStream(1).normal((1, 6, 9))
    assert np.allclose(a.forward(X)[0][0], model_forward(m, X[0])[0], atol=1e-13)


def test_prompt_equals_initial_state_single_linear_layer():
    """One linear layer without residual: a prompt acts only through the state it leaves behind."""
    m = init_model(RngStream(2), 1, 4, 3, activation="linear", residual=False)
    P = RngStream(3).normal((4, 5))
    X = RngStream(4).normal((1, 4, 11))
    prompt = build_adapter(m, PromptTuning(M=5))
    Yp, _ = prompt.forward(X, {"prompt": P})
    layer = m.layers[0]
    abar, bbar = layer.discretized()
    h0 = np.stack([prefix_to_initial_state(abar[d], bbar[d], P[d]) for d in range(4)])
    init = initial_state_adapter(m)
    Yi, _ = init.forward(X, {"layers.0.h0": h0})
    assert np.max(np.abs(Yp - Yi)) <= 1e-9 * max(1.0, np.max(np.abs(Yi)))


def test_prefix_equals_initial_state_per_layer():
    """Per-layer prefixes on a multi-layer model match per-layer injected states."""
    m = init_model(RngStream(7), 2, 3, 2, activation="relu", residual=True)
    prefix = build_adapter(m, PrefixTuning(M=4))
    vals = {k: RngStream(8, (i,)).normal(v.shape) for i, (k, v) in enumerate(prefix.init.items())}
    X = RngStream(9).normal((1, 3, 10))
    Yp, _ = prefix.forward(X, vals)
    h0 = {}
    for i, layer in enumerate(m.layers):
        abar, bbar = layer.discretized()
        P = vals[f"prefix.{i}"]
        h0[f"layers.{i}.h0"] = np.stack([prefix_to_initial_state(abar[d], bbar[d], P[d]) for d in range(3)])
    Yi, _ = initial_state_adapter(m).forward(X, h0)
    assert np.allclose(Yp, Yi, atol=1e-12)


def test_initial_state_count_example():
    m = init_model(RngStream(0), 1, 64, 16)
    assert initial_state_adapter(m).count == 1 * 64 * 16 == 1024


def test_initial_state_zero_is_frozen():
    m = _model()
    X = RngStream(0).normal((1, 6, 7))
    assert np.allclose(initial_state_adapter(m).forward(X)[0][0], model_forward(m, X[0])[0], atol=1e-13)


def test_initial_state_grad_check():
    m = init_model(RngStream(1), 2, 3, 2, activation="linear")
    a = initial_state_adapter(m)
    X = RngStream(2).normal((1, 3, 9))
    Y = RngStream(3).normal((1, 3, 9))

    def loss(nodes):
        out, _ = a.graph(nodes, X)
        d = out - num.constant(Y)
        return num.mean(d * d)

    assert num.grad_check(loss, {k: RngStream(4).normal(v.shape) for k, v in a.init.items()}) <= 1e-4


def test_materialize_rejects_prompt():
    with pytest.raises(AdapterError):
        build_adapter(_model(), PromptTuning(M=2)).materialize()


# ---------------------------------------------------------------- masks and SDLoRA apply


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]
    assert fraction_count(0.01, 10) == 1
    assert fraction_count(1.0, 7) == 7
    assert fraction_count(0.01, 1536) == 15


def test_layer_mask_validation():
    with pytest.raises(AdapterError):
        LayerMask([0], {}, [0], {0: [0]}).validate(4, 4)
    with pytest.raises(AdapterError):
        LayerMask([], {1: [2]}, [1], {1: [2]}).validate(4, 4)
    with pytest.raises(AdapterError):
        LayerMask([], {}, [9], {9: [0]}).validate(4, 4)


def test_mask_dict_round_trip():
    m = _model()
    mask = mask_from_fractions(m, SDLoRA(0.5, 0.5, 0.5, 0.5))
    assert DimensionMask.from_dict(mask.to_dict()) == mask


def test_zeroed_channel_contributes_nothing():
    m = init_model(RngStream(3), 1, 4, 3, activation="linear")
    mask = DimensionMask((LayerMask([1, 3], {0: [], 2: []}, [0], {0: [0, 1, 2]}),))
    z = apply_zeroing(m, mask)
    S = deep_s4_layer_forward(z.layers[0], RngStream(4).normal((4, 10)), pre_mix=True)
    assert np.all(S[[1, 3]] == 0)
    assert np.any(S[[0, 2]] != 0)


def test_s6_zeroing_uses_large_negative_a():
    m = _model("s6")
    mask = DimensionMask(tuple(LayerMask([0], {1: [3]}, [1], {1: [0]}) for _ in range(2)))
    z = apply_zeroing(m, mask)
    assert np.all(z.layers[0].a[0] == -1e4)
    assert z.layers[0].a[1, 3] == -1e4
    assert z.layers[0].a[1, 0] == m.layers[0].a[1, 0]


def test_sdlora_full_mask_trains_every_ssm_entry():
    m = _model()
    spec = SDLoRA(proj_lora_rank=1)
    a = build_adapter(m, spec, mask=DimensionMask.full(m))
    D, H = 6, 4
    per_layer = 3 * D * H + D + 1 * 2 * D + 2 * D
    assert a.count == 2 * per_layer


def test_sdlora_updates_touch_only_selected_entries():
    m = _model()
    mask = DimensionMask(tuple(LayerMask([4, 5], {d: [3] for d in range(4)}, [1, 2], {1: [0], 2: [1, 2]}) for _ in range(2)))
    spec = SDLoRA(proj_lora_rank=2)
    a = build_adapter(m, spec, mask=mask)
    vals = _perturb(a, RngStream(1))
    merged = a.materialize(vals)
    base = apply_zeroing(m, mask)
    for i in range(2):
        for name in ("a", "b", "c"):
            diff = getattr(merged.layers[i], name) != getattr(base.layers[i], name)
            assert sorted(zip(*np.nonzero(diff))) == [(1, 0), (2, 1), (2, 2)]
        assert sorted(np.nonzero(merged.layers[i].log_dt != base.layers[i].log_dt)[0]) == [1, 2]
        assert np.linalg.matrix_rank(merged.layers[i].W - base.layers[i].W) <= 2


def test_sdt_updates_only_selected_columns():
    m = _model()
    mask = DimensionMask(tuple(LayerMask([], {}, [0, 3], {0: [0], 3: [1]}) for _ in range(2)))
    a = build_adapter(m, SDLoRA(sdt=True), mask=mask)
    merged = a.materialize(_perturb(a, RngStream(2)))
    cols = np.nonzero(np.any(merged.layers[0].W != m.layers[0].W, axis=0))[0]
    assert cols.tolist() == [0, 3]


def test_s6_sdlora_exposes_columns_and_rows():
    m = _model("s6")
    mask = DimensionMask(tuple(LayerMask([], {}, [2], {2: [1]}) for _ in range(2)))
    a = build_adapter(m, SDLoRA(), mask=mask)
    merged = a.materialize(_perturb(a, RngStream(3)))
    diff = merged.layers[0].w_b != m.layers[0].w_b
    H, D = diff.shape
    expect = np.zeros((H, D), dtype=bool)
    expect[:, 2] = True
    expect[1, :] = True
    assert np.array_equal(diff, expect)
