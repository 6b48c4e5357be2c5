import math

import numpy as np
import pytest

from avcanvas import tensor as tt
from avcanvas.canvas import Canvas, assemble, build_layout
from avcanvas.errors import ConfigError, ShapeError
from avcanvas.model import DiT, ModelConfig, attention, rotary_phases, sinusoid_embedding, strength_logit_bias
from avcanvas.sequence import Segment, StrengthField, TokenSequence
from avcanvas.tensor import GradTape, Tensor, backward

from .oracles import center_coord, sinusoid, three_token_attention


def _seq(cfg, rng, n_gen=8, n_ref=4, t=0.6):
    P = cfg.video_token_dim
    coords = np.concatenate([rng.integers(0, 4, (n_gen, 3)), rng.uniform(0, 4, (n_ref, 3))]).astype(np.float64)
    seg = np.r_[np.full(n_gen, int(Segment.GEN_VIDEO)), np.full(n_ref, int(Segment.REF_VIDEO))]
    ts = np.r_[np.full(n_gen, t), np.zeros(n_ref)]
    return TokenSequence(rng.standard_normal((n_gen + n_ref, P)).astype(np.float32), coords, ts, seg)


def _audio(cfg, rng, n=4, t=0.6):
    coords = np.zeros((n, 3))
    coords[:, 0] = np.arange(n)
    return TokenSequence(rng.standard_normal((n, cfg.audio_token_dim)).astype(np.float32), coords,
                         np.full(n, t), np.full(n, int(Segment.GEN_AUDIO)))


# --------------------------------------------------------------- config

def test_config_head_dim_rule():
    with pytest.raises(ConfigError):
        ModelConfig(width=32, heads=2)  # head dim 16 not divisible by 6
    with pytest.raises(ConfigError):
        ModelConfig(width=50, heads=4)


def test_module_registry_tags(tiny_model):
    tags = set(tiny_model.module_registry().values())
    assert tags == {"V.SA", "V.CA", "V.FF", "A.SA", "A.CA_V2A", "A.FF"}


# ----------------------------------------------------------- modulation

def test_sinusoid_matches_direct_formula():
    emb = sinusoid_embedding(np.array([0.0, 0.37, 1.0]), 24)
    for row, t in zip(emb, [0.0, 0.37, 1.0]):
        np.testing.assert_allclose(row, sinusoid(t, 24), atol=1e-12)


def test_equal_timesteps_give_equal_rows(tiny_model):
    mod = tiny_model.timestep_modulation(np.full(5, 0.3))
    for v in mod.values():
        assert np.all(v == v[0])


def test_t0_and_t1_rows_differ_even_with_zero_gates(tiny_config):
    model = DiT.init(tiny_config, seed=0, zero_init=True)
    mod = model.timestep_modulation(np.array([0.0, 1.0]))
    for v in mod.values():
        assert np.linalg.norm(v[0] - v[1]) > 0


def test_timestep_range_checked(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model.timestep_modulation(np.array([1.2]))


# ---------------------------------------------------------------- rotary

def test_zero_coord_is_identity_rotation():
    assert np.all(rotary_phases(np.zeros((1, 3)), 12) == 0)


def test_downscaled_reference_center_coordinate():
    lay = build_layout((1, 8, 8), (1, 4, 4), downscale=2)
    # 2x2 target tokens, one reference token covering all four
    np.testing.assert_array_equal(lay.ref_coords, [[0, center_coord(0, 2), center_coord(0, 2)]])
    assert lay.ref_coords[0, 1] == 0.5


def test_identical_coords_identical_phases():
    c = np.array([[1.0, 2.5, 0.5]])
    np.testing.assert_array_equal(rotary_phases(c, 12), rotary_phases(c.copy(), 12))


def test_rotary_logits_depend_on_coordinate_difference(rng):
    hd = 12
    q = rng.standard_normal((1, 1, hd))
    k = rng.standard_normal((1, 1, hd))
    for _ in range(10):
        a, b = rng.uniform(-5, 5, (2, 3))
        shift = rng.uniform(-5, 5, 3)

        def logit(ca, cb):
            ang_a = np.repeat(rotary_phases(ca[None], hd), 2, axis=1)
            ang_b = np.repeat(rotary_phases(cb[None], hd), 2, axis=1)
            qa = tt.rope(Tensor(q, dtype=np.float64), np.cos(ang_a), np.sin(ang_a)).data
            kb = tt.rope(Tensor(k, dtype=np.float64), np.cos(ang_b), np.sin(ang_b)).data
            return float((qa * kb).sum())

        assert abs(logit(a, b) - logit(a + shift, b + shift)) < 1e-5


def test_non_finite_coords_rejected():
    with pytest.raises(ConfigError):
        rotary_phases(np.array([[np.nan, 0, 0]]), 12)


# -------------------------------------------------------------- attention

def test_three_token_hand_computed_attention():
    q = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    k = [[1.0, 0.5], [0.2, 1.0], [0.5, -1.0]]
    v = [[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]]
    seg = np.array([int(Segment.GEN_VIDEO), int(Segment.GEN_VIDEO), int(Segment.REF_VIDEO)])
    bias = strength_logit_bias(seg, np.array([0.5, 0.5]))
    out = attention(*(Tensor(np.array(x)[None], dtype=np.float64) for x in (q, k, v)), bias=bias).data[0]
    ref = three_token_attention(q, k, v, [1, 1, 0], [0, 0, 1], 0.5)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_negative_strength_rejected():
    with pytest.raises(ConfigError):
        StrengthField(-0.1)
    seg = np.array([0, 2])
    with pytest.raises(ConfigError):
        strength_logit_bias(seg, np.array([-1.0]))


def test_strength_only_touches_gen_to_ref_edges():
    seg = np.array([0, 2, 0, 2])
    bias = strength_logit_bias(seg, np.array([0.5, 0.25]))
    expect = np.zeros((4, 4), np.float32)
    expect[0, [1, 3]] = math.log(0.5)
    expect[2, [1, 3]] = math.log(0.25)
    np.testing.assert_allclose(bias, expect, rtol=1e-6)


# ---------------------------------------------------------------- forward

def test_strength_one_is_bit_identical_to_no_strength(tiny_model, rng):
    seq = _seq(tiny_model.config, rng)
    a, _ = tiny_model.forward(seq)
    b, _ = tiny_model.forward(seq, strength=StrengthField(1.0))
    c, _ = tiny_model.forward(seq, strength=StrengthField(1.0, np.ones(8)))
    assert a.data.tobytes() == b.data.tobytes() == c.data.tobytes()


def test_strength_zero_equals_reference_removal(tiny_model, rng):
    seq = _seq(tiny_model.config, rng)
    a, _ = tiny_model.forward(seq, strength=StrengthField(0.0))
    b, _ = tiny_model.forward(seq.select(seq.gen_index()))
    assert np.max(np.abs(a.data - b.data)) < 1e-5


def test_local_strength_zero_masks_only_those_queries(tiny_model, rng):
    seq = _seq(tiny_model.config, rng)
    local = np.ones(8)
    local[:3] = 0.0
    a, _ = tiny_model.forward(seq, strength=StrengthField(1.0, local))
    b, _ = tiny_model.forward(seq.select(seq.gen_index()))
    full, _ = tiny_model.forward(seq)
    # layer 1 mixes masked and unmasked tokens, so only a 1-block model is exact
    one = DiT.init(ModelConfig(**{**tiny_model.config.to_dict(), "depth": 1, "patch": (1, 2, 2)}), seed=1, zero_init=False)
    a1, _ = one.forward(seq, strength=StrengthField(1.0, local))
    b1, _ = one.forward(seq.select(seq.gen_index()))
    assert np.max(np.abs(a1.data[:3] - b1.data[:3])) < 1e-5
    assert not np.allclose(a.data, full.data)


def test_empty_canvas_equals_unconditional(tiny_model, rng):
    cfg = tiny_model.config
    lay = build_layout((2, 4, 4), cfg.patch, 1)
    x = rng.standard_normal((lay.n_gen, cfg.video_token_dim)).astype(np.float32)
    seq, _ = assemble(x, lay, None)
    plain = TokenSequence(x, lay.gen_coords, np.ones(lay.n_gen), np.zeros(lay.n_gen))
    a, _ = tiny_model.forward(seq)
    b, _ = tiny_model.forward(plain)
    assert a.data.tobytes() == b.data.tobytes()


def test_output_shape_contract(tiny_model, rng):
    cfg = tiny_model.config
    for n_gen, n_ref in [(4, 0), (8, 4), (5, 9)]:
        v, a = tiny_model.forward(_seq(cfg, rng, n_gen, n_ref), _audio(cfg, rng))
        assert v.shape == (n_gen, cfg.video_token_dim)
        assert a.shape == (4, cfg.audio_token_dim)


def test_permutation_equivariance(tiny_model, rng):
    cfg = tiny_model.config
    seq = _seq(cfg, rng, 8, 4)
    aud = _audio(cfg, rng)
    v0, a0 = tiny_model.forward(seq, aud, cond_id=2)
    perm = rng.permutation(len(seq))
    pseq = seq.select(perm)
    aperm = rng.permutation(len(aud))
    v1, a1 = tiny_model.forward(pseq, aud.select(aperm), cond_id=2)
    gen_order = perm[pseq.gen_index()]  # original index of each permuted GEN output
    np.testing.assert_allclose(v1.data, v0.data[gen_order], atol=1e-5)
    np.testing.assert_allclose(a1.data, a0.data[aperm], atol=1e-5)


def test_invariant_violations_rejected(tiny_model, rng):
    seq = _seq(tiny_model.config, rng)
    bad = TokenSequence(seq.features, seq.coords, np.where(seq.is_ref, 0.1, 0.6), seq.segments)
    with pytest.raises(ConfigError, match="timestep exactly 0"):
        tiny_model.forward(bad)
    mixed = TokenSequence(seq.features, seq.coords, np.r_[np.full(4, 0.5), np.full(4, 0.6), np.zeros(4)], seq.segments)
    with pytest.raises(ConfigError):
        tiny_model.forward(mixed)
    with pytest.raises(ShapeError):
        tiny_model.forward(seq.with_features(seq.features[:, :5]))


def test_monotone_reference_influence(rng):
    hits = 0
    trials = 20
    cfg = ModelConfig(depth=2, width=24, heads=4, patch=(1, 2, 2))
    for trial in range(trials):
        model = DiT.init(cfg, seed=trial, zero_init=False)
        seq = _seq(cfg, np.random.default_rng(trial), 6, 6)
        base, _ = model.forward(seq, strength=StrengthField(0.0))
        d = [np.linalg.norm(model.forward(seq, strength=StrengthField(s))[0].data - base.data) for s in (0, 0.25, 0.5, 1.0)]
        hits += all(x <= y + 1e-7 for x, y in zip(d, d[1:]))
    assert hits >= 0.9 * trials


def test_lora_gradient_flows_through_reference_tokens(tiny_model, rng):
    from avcanvas.lora import LoraSpec, attach

    seq = _seq(tiny_model.config, rng)
    model, params = attach(tiny_model, LoraSpec(2, patterns=("V.SA",)), seed=0)
    for a, b in model.adapters[0].factors.values():
        b.data = rng.standard_normal(b.shape).astype(np.float32) * 0.1

    def ref_grads(features):
        s = seq.with_features(features)
        with GradTape() as tape:
            out, _ = model.forward(s)
            loss = tt.square(out).sum()
        return backward(loss, tape, params)

    g1 = ref_grads(seq.features)
    assert any(np.any(g != 0) for g in g1.values())
    changed = seq.features.copy()
    changed[seq.ref_index()] += 1.0
    g2 = ref_grads(changed)
    assert any(np.any(g1[p] != g2[p]) for p in params)


def test_full_forward_gradient_check_small(tiny_config, rng):
    model = DiT.init(tiny_config, seed=5, zero_init=False).astype(np.float64)
    seq = _seq(tiny_config, rng, 6, 4)
    seq = seq.with_features(seq.features.astype(np.float64))
    w = rng.standard_normal((6, tiny_config.video_token_dim))
    name = "blocks.1.video.sa.k.weight"
    p = model.params[name]

    def f(x):
        model.params[name] = x
        out, _ = model.forward(seq)
        model.params[name] = p
        return (out * Tensor(w, dtype=np.float64)).sum()

    assert tt.finite_diff_check(f, p, indices=range(0, p.size, 7)) < 1e-3
