import numpy as np
import pytest

from avcanvas import tensor as tt
from avcanvas.canvas import Canvas, assemble, build_layout
from avcanvas.codec import patchify
from avcanvas.diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    cfg_combine,
    euler_sample,
    noise,
    noised_sequence,
    training_loss,
)
from avcanvas.errors import ConfigError, ShapeError
from avcanvas.model import DiT
from avcanvas.optim import AdamW
from avcanvas.sequence import StrengthField
from avcanvas.tensor import Tensor

DIMS = (2, 8, 8)


class _Stub:
    """Model stand-in returning a fixed prediction."""

    def __init__(self, pred):
        self.pred = pred

    def forward(self, video, audio=None, *args, **kwargs):
        return Tensor(self.pred), None


def _setup(cfg, rng, d=2, t=0.5):
    lay = build_layout(DIMS, cfg.patch, d)
    x0 = patchify(rng.uniform(0, 1, DIMS + (3,)), cfg.patch).features.astype(np.float32)
    ctrl = Canvas(rng.uniform(0, 1, (DIMS[0], DIMS[1] // d, DIMS[2] // d, 3)).astype(np.float32), d)
    seq, _ = assemble(x0, lay, ctrl, t=t)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    mask = seq.is_gen.copy()
    return lay, seq, x0, eps, mask, ctrl


def test_noise_endpoints_and_midpoint(rng):
    x0 = rng.standard_normal((5, 4)).astype(np.float32)
    eps = rng.standard_normal((5, 4)).astype(np.float32)
    assert np.array_equal(noise(x0, 0.0, eps), x0)
    assert np.array_equal(noise(x0, 1.0, eps), eps)
    mid = noise(x0, 0.5, eps)
    for idx in np.ndindex(x0.shape):
        assert mid[idx] == pytest.approx(0.5 * x0[idx] + 0.5 * eps[idx], abs=1e-7)
    with pytest.raises(ConfigError):
        noise(x0, 1.5, eps)
    with pytest.raises(ShapeError):
        noise(x0, 0.5, eps[:2])


def test_noised_sequence_leaves_reference(tiny_config, rng):
    _, seq, x0, eps, _, _ = _setup(tiny_config, rng)
    n = noised_sequence(seq, 0.7, eps)
    assert n.features[seq.is_ref].tobytes() == seq.features[seq.is_ref].tobytes()
    assert np.all(n.timesteps[seq.is_ref] == 0.0)
    assert np.all(n.timesteps[seq.is_gen] == 0.7)


def test_cfg_combine_examples():
    assert cfg_combine(np.array([3.0]), np.array([1.0]), 2.0)[0] == 5.0
    c, u = np.array([1.0, 2.0]), np.array([7.0, 8.0])
    assert cfg_combine(c, u, 1.0) is c
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    with pytest.raises(ShapeError):
        cfg_combine(c, u[:1], 2.0)
    with pytest.raises(ConfigError):
        GuidanceConfig(-1.0)


def test_schedule_grid():
    g = NoiseSchedule(16).grid()
    assert g[0] == 1.0 and g[-1] == 0.0 and len(g) == 17
    assert np.all(np.diff(g) < 0)
    with pytest.raises(ConfigError):
        NoiseSchedule(0)


def test_loss_perfect_and_constant_offset(tiny_config, rng):
    _, seq, x0, eps, mask, _ = _setup(tiny_config, rng)
    target = eps - x0
    assert training_loss(_Stub(target), seq, 0.5, eps, mask).item() == pytest.approx(0.0, abs=1e-12)
    assert training_loss(_Stub(target + 0.3), seq, 0.5, eps, mask).item() == pytest.approx(0.09, rel=1e-5)


def test_loss_averages_over_masked_rows_only(tiny_config, rng):
    _, seq, x0, eps, mask, _ = _setup(tiny_config, rng)
    pred = eps - x0
    pred[0] += 1.0
    m = mask.copy()
    m[0] = False
    assert training_loss(_Stub(pred), seq, 0.5, eps, m).item() == pytest.approx(0.0, abs=1e-12)
    m2 = np.zeros_like(mask)
    m2[:2] = True
    assert training_loss(_Stub(pred), seq, 0.5, eps, m2).item() == pytest.approx(0.5, rel=1e-6)


def test_loss_mask_preconditions(tiny_model, rng):
    _, seq, x0, eps, mask, _ = _setup(tiny_model.config, rng)
    bad = mask.copy()
    bad[seq.is_ref.argmax()] = True
    with pytest.raises(ConfigError, match="reference"):
        training_loss(tiny_model, seq, 0.5, eps, bad)
    with pytest.raises(ConfigError, match="empty"):
        training_loss(tiny_model, seq, 0.5, eps, np.zeros_like(mask))
    with pytest.raises(ShapeError):
        training_loss(tiny_model, seq, 0.5, eps, mask[:-1])


def test_reference_content_is_live(tiny_model, rng):
    _, seq, x0, eps, mask, _ = _setup(tiny_model.config, rng)
    base = training_loss(tiny_model, seq, 0.5, eps, mask).item()
    feats = seq.features.copy()
    feats[seq.is_ref] = rng.uniform(0, 1, feats[seq.is_ref].shape)
    changed = training_loss(tiny_model, seq.with_features(feats), 0.5, eps, mask).item()
    assert changed != base


def test_loss_invariant_to_targets_outside_mask(tiny_model, rng):
    # at t = 1 the model input is pure noise, so x0 only enters through the targets
    _, seq, x0, eps, mask, _ = _setup(tiny_model.config, rng, t=1.0)
    m = mask.copy()
    m[: len(x0) // 2] = False
    base = training_loss(tiny_model, seq, 1.0, eps, m).item()
    feats = seq.features.copy()
    feats[: len(x0) // 2] += rng.standard_normal(feats[: len(x0) // 2].shape).astype(np.float32)
    assert training_loss(tiny_model, seq.with_features(feats), 1.0, eps, m).item() == base


def test_sampler_deterministic(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    a = euler_sample(tiny_model, lay, ctrl, seed=42, steps=4)
    b = euler_sample(tiny_model, lay, ctrl, seed=42, steps=4)
    assert a.video.tobytes() == b.video.tobytes()
    c = euler_sample(tiny_model, lay, ctrl, seed=43, steps=4)
    assert c.video.tobytes() != a.video.tobytes()


def test_reference_tokens_fixed_and_clean(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    seen = []

    def spy(vseq, aseq):
        seen.append((vseq.features[vseq.is_ref].copy(), vseq.timesteps.copy(), vseq.is_ref.copy()))
        out, _ = tiny_model.forward(vseq)
        return out.data, None

    res = euler_sample(tiny_model, lay, ctrl, steps=5, velocity_fn=spy, trace_reference=True)
    first = seen[0][0]
    for feats, ts, is_ref in seen:
        assert feats.tobytes() == first.tobytes()
        assert np.all(ts[is_ref] == 0.0)
    grid = NoiseSchedule(5).grid()
    assert [float(ts[~is_ref][0]) for _, ts, is_ref in seen] == list(grid[:-1])
    assert all(t.tobytes() == res.ref_trace[0].tobytes() for t in res.ref_trace)
    assert len(res.ref_trace) == 6


def test_single_step_substitution(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    res = euler_sample(tiny_model, lay, ctrl, seed=7, steps=1)
    eps = np.random.default_rng(7).standard_normal((lay.n_gen, tiny_model.config.video_token_dim)).astype(np.float32)
    seq, _ = assemble(eps, lay, ctrl, t=1.0)
    v, _ = tiny_model.forward(seq, cond_id=1)
    assert np.array_equal(res.video_tokens, (eps + (0.0 - 1.0) * v.data).astype(np.float32))


def test_oracle_velocity_recovers_data(tiny_model, rng):
    lay, _, x0, _, _, ctrl = _setup(tiny_model.config, rng)
    eps = np.random.default_rng(42).standard_normal(x0.shape).astype(np.float32)
    res = euler_sample(tiny_model, lay, ctrl, seed=42, steps=16, velocity_fn=lambda v, a: (eps - x0, None))
    assert np.max(np.abs(res.video_tokens - x0)) < 1e-4


def test_cfg_one_skips_unconditional_pass(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    calls = []

    class Counting:
        config = tiny_model.config
        dtype = tiny_model.dtype

        def forward(self, *a, **k):
            calls.append(a[2])
            return tiny_model.forward(*a, **k)

    euler_sample(Counting(), lay, ctrl, steps=3, cond_id=2)
    assert calls == [2, 2, 2]
    calls.clear()
    euler_sample(Counting(), lay, ctrl, steps=3, cond_id=2, guidance=GuidanceConfig(2.0))
    assert calls == [2, 0] * 3


def test_sampler_rejects_zero_steps(tiny_model, rng):
    lay = build_layout(DIMS, tiny_model.config.patch, 1, with_reference=False)
    with pytest.raises(ConfigError):
        euler_sample(tiny_model, lay, steps=0)


def test_strength_reaches_the_model(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    full = euler_sample(tiny_model, lay, ctrl, steps=2)
    off = euler_sample(tiny_model, lay, ctrl, strength=StrengthField(0.0), steps=2)
    none = euler_sample(tiny_model, build_layout(DIMS, tiny_model.config.patch, 2, with_reference=False), None, steps=2)
    assert not np.array_equal(full.video, off.video)
    assert np.max(np.abs(off.video - none.video)) < 1e-5


def test_joint_sampling_shapes(tiny_model, rng):
    lay, _, _, _, _, ctrl = _setup(tiny_model.config, rng)
    cfg = tiny_model.config
    res = euler_sample(tiny_model, lay, ctrl, steps=2, with_audio=True)
    assert res.video.shape == DIMS + (3,)
    assert res.audio.shape == (DIMS[0] * cfg.audio_ratio, cfg.audio_features)


def test_overfit_single_sample(tiny_config, rng):
    model = DiT.init(tiny_config, seed=0)
    lay, seq, x0, eps, mask, _ = _setup(tiny_config, rng)
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, lr=3e-3, weight_decay=0.0)
    loss = None
    for step in range(2000):
        with tt.GradTape() as tape:
            loss = training_loss(model, seq, 0.5, eps, mask)
        if loss.item() < 1e-3:
            break
        opt.step(tt.backward(loss, tape))
    assert loss.item() < 1e-3


def test_loss_with_given_targets(tiny_config, rng):
    _, seq, x0, eps, mask, _ = _setup(tiny_config, rng)
    pred = rng.standard_normal(x0.shape).astype(np.float32)
    target = rng.standard_normal(x0.shape).astype(np.float32)
    got = training_loss(_Stub(pred), seq, 0.5, eps, mask, targets=(target, None)).item()
    assert got == pytest.approx(float(np.mean((pred.astype(np.float64) - target) ** 2)), rel=1e-6)
