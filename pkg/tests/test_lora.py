import numpy as np
import pytest

from avcanvas import tensor as tt
from avcanvas.errors import CheckpointError, CompositionError, ConfigError, ShapeError
from avcanvas.lora import (
    LoraSpec,
    LoraWeights,
    apply_pair,
    attach,
    load_lora,
    load_model,
    match_modules,
    merge,
    parse_modules,
    save_lora,
    save_model,
    unmerge,
)
from avcanvas.model import DiT, ModelConfig
from avcanvas.sequence import Segment, TokenSequence
from avcanvas.tensor import Tensor


def _inputs(cfg, rng, n_gen=8, n_ref=4, n_audio=4):
    P = cfg.video_token_dim
    coords = np.concatenate([rng.integers(0, 4, (n_gen, 3)), rng.uniform(0, 4, (n_ref, 3))]).astype(np.float64)
    seg = np.r_[np.zeros(n_gen), np.full(n_ref, int(Segment.REF_VIDEO))]
    video = TokenSequence(rng.standard_normal((n_gen + n_ref, P)).astype(np.float32), coords,
                          np.r_[np.full(n_gen, 0.4), np.zeros(n_ref)], seg)
    ac = np.zeros((n_audio, 3))
    ac[:, 0] = np.arange(n_audio)
    audio = TokenSequence(rng.standard_normal((n_audio, cfg.audio_token_dim)).astype(np.float32), ac,
                          np.full(n_audio, 0.4), np.full(n_audio, int(Segment.GEN_AUDIO)))
    return video, audio


def _randomize_b(model, rng, scale=0.1):
    for ad in model.adapters:
        for _, b in ad.factors.values():
            b.data = (rng.standard_normal(b.shape) * scale).astype(b.dtype)


def test_parse_table_notation():
    assert parse_modules("V: SA") == ("V.SA",)
    assert parse_modules("V: SA, CA, FF") == ("V.SA", "V.CA", "V.FF")
    assert parse_modules("A: SA, FF, V->A CA") == ("A.SA", "A.FF", "A.CA_V2A")
    assert parse_modules("A: SA, FF, V\\!$\\to$\\!A CA") == ("A.SA", "A.FF", "A.CA_V2A")
    assert parse_modules("All") == ("ALL",)
    assert parse_modules("V.SA, A.FF") == ("V.SA", "A.FF")
    with pytest.raises(ConfigError):
        parse_modules("V: XX")


def test_alpha_defaults_to_rank():
    assert LoraSpec(16).alpha == 16
    assert LoraSpec(16, alpha=4).alpha == 4
    with pytest.raises(ConfigError):
        LoraSpec(0)


def test_v_sa_on_two_blocks_has_eight_layers(tiny_model):
    names = match_modules(tiny_model, ["V.SA"])
    expected = [f"blocks.{i}.video.sa.{p}" for i in range(2) for p in ("q", "k", "v", "out")]
    assert sorted(names) == sorted(expected)


def test_unmatched_pattern_lists_available(tiny_model):
    with pytest.raises(ConfigError, match="available tags.*V.SA"):
        attach(tiny_model, LoraSpec(2, patterns=("V.XX",)))


def test_init_statistics(tiny_config):
    base = DiT.init(ModelConfig(width=96, heads=2), 0)
    _, params = attach(base, LoraSpec(64, patterns=("V.FF",)), seed=3)
    model = attach(base, LoraSpec(64, patterns=("V.FF",)), seed=3)[0]
    for name, (a, b) in model.adapters[0].factors.items():
        assert np.all(b.data == 0)
        assert a.shape[1] in (96, 192)
        assert abs(a.data.std() - 1 / np.sqrt(a.shape[1])) < 0.15 / np.sqrt(a.shape[1])
        assert abs(a.data.mean()) < 0.02
    assert len(params) == 2 * len(model.adapters[0].factors)


def test_zero_init_bit_identical(tiny_model, rng):
    video, audio = _inputs(tiny_model.config, rng)
    ref_v, ref_a = tiny_model.forward(video, audio, cond_id=1)
    model, _ = attach(tiny_model, LoraSpec(4, patterns=("ALL",)), seed=1)
    v, a = model.forward(video, audio, cond_id=1)
    assert v.data.tobytes() == ref_v.data.tobytes()
    assert a.data.tobytes() == ref_a.data.tobytes()


def test_only_lora_factors_are_trainable(tiny_model, rng):
    video, _ = _inputs(tiny_model.config, rng)
    model, params = attach(tiny_model, LoraSpec(2, patterns=("V.SA", "V.FF")), seed=1)
    _randomize_b(model, rng)
    with tt.GradTape() as tape:
        out, _ = model.forward(video)
        loss = tt.square(out).sum()
    grads = tt.backward(loss, tape)
    assert set(grads) <= set(params)
    assert all(not p.requires_grad for p in tiny_model.parameters())


def test_first_order_strength_linearity(tiny_model, rng):
    video, _ = _inputs(tiny_model.config, rng)
    base, _ = tiny_model.forward(video)
    spec = LoraSpec(4, patterns=("V.SA",))
    model, _ = attach(tiny_model, spec, seed=2)
    _randomize_b(model, rng, scale=1e-4)
    w = LoraWeights.from_adapter(model.adapters[0])
    full, _ = attach(tiny_model, LoraSpec(4, patterns=("V.SA",), lora_strength=1.0), weights=w)
    half, _ = attach(tiny_model, LoraSpec(4, patterns=("V.SA",), lora_strength=0.3), weights=w)
    m64 = tiny_model.astype(np.float64)
    d1 = full.astype(np.float64).forward(video)[0].data - m64.forward(video)[0].data
    ds = half.astype(np.float64).forward(video)[0].data - m64.forward(video)[0].data
    assert np.linalg.norm(ds - 0.3 * d1) <= 1e-3 * np.linalg.norm(0.3 * d1)


@pytest.mark.parametrize("rank", [4, 32, 128])
def test_merge_matches_live_adapter(tiny_model, rng, rank):
    video, audio = _inputs(tiny_model.config, rng)
    model, _ = attach(tiny_model, LoraSpec(rank, patterns=("ALL",)), seed=rank)
    _randomize_b(model, rng, scale=0.02)
    w = LoraWeights.from_adapter(model.adapters[0])
    merged = merge(tiny_model, w)
    lv, la = model.forward(video, audio)
    mv, ma = merged.forward(video, audio)
    assert np.max(np.abs(lv.data - mv.data)) < 1e-5
    assert np.max(np.abs(la.data - ma.data)) < 1e-5


def test_merge_strength_zero_and_unmerge(tiny_model, rng):
    model, _ = attach(tiny_model, LoraSpec(4, patterns=("V.SA",)), seed=0)
    _randomize_b(model, rng)
    w = LoraWeights.from_adapter(model.adapters[0])
    zero = merge(tiny_model, w, 0.0)
    for k, p in tiny_model.params.items():
        assert zero.params[k].data.tobytes() == p.data.tobytes()
    back = unmerge(merge(tiny_model, w), w)
    for k, p in tiny_model.params.items():
        assert np.max(np.abs(back.params[k].data - p.data)) < 1e-6


def test_merge_shape_mismatch(tiny_model):
    w = LoraWeights(2, 2.0, ("V.SA",), {"blocks.0.video.sa.q": (np.zeros((2, 5)), np.zeros((24, 2)))})
    with pytest.raises(ShapeError):
        merge(tiny_model, w)


def test_apply_pair_and_composition(tiny_model, rng):
    video, audio = _inputs(tiny_model.config, rng)
    vm, _ = attach(tiny_model, LoraSpec(4, patterns=("V.SA",)), seed=1)
    am, _ = attach(tiny_model, LoraSpec(4, patterns=("A.SA", "A.FF", "A.CA_V2A")), seed=2)
    _randomize_b(vm, rng)
    _randomize_b(am, rng)
    vw = LoraWeights.from_adapter(vm.adapters[0])
    aw = LoraWeights.from_adapter(am.adapters[0])
    both = apply_pair(tiny_model, vw, aw)
    # no audio tokens: video stream equals the video-only adapter
    assert both.forward(video)[0].data.tobytes() == vm.forward(video)[0].data.tobytes()
    # zeroing the audio B factors reproduces video-only behaviour
    aw0 = LoraWeights(aw.rank, aw.alpha, aw.patterns, {n: (a, np.zeros_like(b)) for n, (a, b) in aw.factors.items()})
    both0 = apply_pair(tiny_model, vw, aw0)
    bv, ba = both0.forward(video, audio)
    ov, oa = vm.forward(video, audio)
    assert np.max(np.abs(bv.data - ov.data)) < 1e-6
    assert np.max(np.abs(ba.data - oa.data)) < 1e-6
    # and the audio adapter really acts on audio
    assert not np.allclose(both.forward(video, audio)[1].data, oa.data)


def test_overlapping_adapters_rejected(tiny_model):
    m1, _ = attach(tiny_model, LoraSpec(2, patterns=("ALL",)), seed=0)
    w = LoraWeights.from_adapter(m1.adapters[0])
    with pytest.raises(CompositionError):
        apply_pair(tiny_model, w, w)
    with pytest.raises(CompositionError):
        attach(m1, LoraSpec(2, patterns=("V.SA",)))


def test_save_load_idempotent(tiny_model, rng, tmp_path):
    model, _ = attach(tiny_model, LoraSpec(4, patterns=("V.SA", "V.FF")), seed=5)
    _randomize_b(model, rng)
    w = LoraWeights.from_adapter(model.adapters[0], step=123)
    p1 = save_lora(tmp_path / "a.avct", w)
    back = load_lora(p1)
    p2 = save_lora(tmp_path / "b.avct", back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back.rank == 4 and back.alpha == 4.0 and back.patterns == ("V.SA", "V.FF")
    assert back.metadata["step"] == 123 and back.metadata["seed"] == 5
    for n, (a, b) in w.factors.items():
        assert back.factors[n][0].tobytes() == a.tobytes()
        assert back.factors[n][1].tobytes() == b.tobytes()


def test_rank_mismatch_on_load(tiny_model, tmp_path):
    model, _ = attach(tiny_model, LoraSpec(64, patterns=("V.SA",)), seed=0)
    p = save_lora(tmp_path / "r64.avct", LoraWeights.from_adapter(model.adapters[0]))
    with pytest.raises(ConfigError, match="rank mismatch"):
        load_lora(p, LoraSpec(128, patterns=("V.SA",)))
    w = load_lora(p)
    with pytest.raises(ConfigError, match="rank mismatch"):
        attach(tiny_model, LoraSpec(128, patterns=("V.SA",)), weights=w)


@pytest.mark.parametrize("rank", [32, 64, 128])
def test_rank_sweep_checkpoints_load_and_run(tiny_model, rng, tmp_path, rank):
    video, _ = _inputs(tiny_model.config, rng)
    model, _ = attach(tiny_model, LoraSpec(rank, patterns=("V.SA",)), seed=rank)
    p = save_lora(tmp_path / f"r{rank}.avct", LoraWeights.from_adapter(model.adapters[0]))
    w = load_lora(p, LoraSpec(rank, patterns=("V.SA",)))
    live, _ = attach(tiny_model, LoraSpec(rank, patterns=("V.SA",)), weights=w)
    out, _ = live.forward(video)
    assert np.all(np.isfinite(out.data))


def test_model_checkpoint_round_trip(tiny_model, tmp_path):
    p = save_model(tmp_path / "m.avct", tiny_model, step=7)
    back, meta = load_model(p)
    assert meta["step"] == 7
    assert back.param_hash() == tiny_model.param_hash()
    with pytest.raises(CheckpointError):
        load_lora(p)
