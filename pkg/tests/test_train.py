import csv

import numpy as np
import pytest

from avcanvas import synth
from avcanvas import train as tr
from avcanvas.errors import ConfigError, NonFiniteError
from avcanvas.lora import load_lora
from avcanvas.metrics import video_metrics
from avcanvas.model import DiT, ModelConfig
from avcanvas.train import (
    FidelityReport,
    PretrainConfig,
    TrainConfig,
    ablate,
    evaluate,
    ground_truth_report,
    pretrain,
    select_checkpoint,
    strength_sweep,
    train,
)

DIMS = (2, 16, 16)


@pytest.fixture(scope="module")
def base():
    return DiT.init(ModelConfig(depth=1, width=24, heads=2), seed=0, zero_init=False)


@pytest.fixture(scope="module")
def edge_samples():
    return [synth.make_sample("edges", synth.sample_seed(5, i), DIMS) for i in range(4)]


def _cfg(tmp_path, **kw):
    d = dict(modality="edges", dims=DIMS, steps=3, rank=4, checkpoint_interval=100, out=str(tmp_path / "run"))
    d.update(kw)
    return TrainConfig.from_dict(d)


def _read_log(path):
    with open(path) as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_dict({"modality": "edges", "learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(modality="smell")
    with pytest.raises(ConfigError):
        TrainConfig(layout_mode="diagonal")
    with pytest.raises(ConfigError):
        PretrainConfig(steps=0)


def test_modality_defaults_resolved():
    c = TrainConfig(modality="edges")
    assert (c.rank, c.downscale, c.streams) == (32, 2, "video")
    assert c.lr_start == 1e-4 and c.lr_end == 1e-5
    c = TrainConfig(modality="audio_intensity")
    assert c.streams == "audio" and c.downscale == 1


def test_single_step_single_checkpoint(tmp_path, base, edge_samples):
    res = train(_cfg(tmp_path, steps=1), edge_samples, base)
    assert list(res.checkpoints) == [1]
    assert len(_read_log(tmp_path / "run" / "loss.csv")) == 1
    assert load_lora(res.checkpoints[1]).metadata["step"] == 1


def test_lr_schedule_in_log(tmp_path, base, edge_samples):
    steps = 7
    train(_cfg(tmp_path, steps=steps), edge_samples, base)
    rows = _read_log(tmp_path / "run" / "loss.csv")
    assert [r[0] for r in rows] == list(range(steps))
    for s, _, lr in rows:
        assert lr == pytest.approx(1e-4 + (1e-5 - 1e-4) * s / (steps - 1), rel=1e-7)


def test_backbone_frozen_and_checkpoint_schedule(tmp_path, base, edge_samples):
    before = base.param_hash()
    res = train(_cfg(tmp_path, steps=5, checkpoint_interval=2, checkpoint_steps=[3]), edge_samples, base)
    assert base.param_hash() == before == res.base_hash
    assert sorted(res.checkpoints) == [2, 3, 4, 5]
    assert all(np.isfinite(r[1]) for r in res.losses)


def test_lora_changes_outputs_after_training(tmp_path, base, edge_samples):
    res = train(_cfg(tmp_path, steps=3, lr_start=1e-2, lr_end=1e-3), edge_samples, base)
    assert any(np.abs(b).max() > 0 for _, b in res.weights.factors.values())


def test_dataset_modality_mismatch(tmp_path):
    synth.generate_dataset(tmp_path / "d", "depth", 1, 0, DIMS)
    cfg = _cfg(tmp_path, dataset=str(tmp_path / "d"))
    with pytest.raises(ConfigError, match="does not match"):
        tr.load_samples(cfg)
    with pytest.raises(FileNotFoundError):
        tr.load_samples(_cfg(tmp_path, dataset=str(tmp_path / "missing")))


def test_wrong_sample_modality(tmp_path, base):
    depth = [synth.make_sample("depth", 1, DIMS)]
    with pytest.raises(ConfigError):
        train(_cfg(tmp_path), depth, base)


def test_non_finite_loss_aborts_with_step(tmp_path, edge_samples):
    broken = DiT.init(ModelConfig(depth=1, width=24, heads=2), seed=0, zero_init=False)
    name = next(k for k in broken.params if k.endswith("out.weight") or "final" in k)
    broken.params[name].data[...] = np.nan
    with pytest.raises(NonFiniteError, match="step 0"):
        train(_cfg(tmp_path), edge_samples, broken)


def test_pretrain_writes_checkpoint_and_log(tmp_path):
    cfg = PretrainConfig(steps=2, count=3, dims=DIMS, width=24, depth=1, heads=2, out=str(tmp_path / "b"))
    path = pretrain(cfg)
    model = tr.load_base(str(path))
    assert model.config.width == 24
    assert len(_read_log(tmp_path / "b" / "loss.csv")) == 2


def test_ground_truth_anchor_and_constant_video(edge_samples):
    rep = ground_truth_report(edge_samples)
    m = rep.summary["mean"]
    assert m["iou"] == 1.0 and m["edge_f1"] == 1.0
    multi = synth.make_sample("edges", 0, DIMS, n_shapes=3)
    scene = synth.SceneSpec.from_dict(multi.scene)
    flat = np.full_like(multi.target_video, 0.5)
    assert video_metrics(flat, multi.target_video, scene)["iou"] == pytest.approx(0.0, abs=1e-9)


def test_evaluate_deterministic_and_bounded(base, edge_samples, tmp_path):
    model, _ = tr.attach(base, tr.LoraSpec(4, None, "V: SA"), seed=1)
    a = evaluate(model, edge_samples[:2], 2, steps=2)
    b = evaluate(model, edge_samples[:2], 2, steps=2)
    assert a.rows == b.rows
    for r in a.rows:
        assert 0.0 <= r["iou"] <= 1.0 and 0.0 <= r["edge_f1"] <= 1.0 and r["psnr_unmasked"] >= 0.0
    csv_path, json_path = a.write(tmp_path, "rep")
    assert csv_path.read_text().count("\n") == 3 and json_path.exists()


def test_strength_sweep_emits_one_report_per_value(base, edge_samples):
    reps = strength_sweep(base, edge_samples[:1], 2, steps=1)
    assert list(reps) == [0.0, 0.25, 0.5, 1.0]
    assert all(r.strength == s for s, r in reps.items())


def _report(v, key="edge_f1"):
    return FidelityReport([{"id": 0, key: float(v)}], 1.0)


def test_select_checkpoint():
    assert select_checkpoint({200: _report(0.3), 1000: _report(0.5), 2000: _report(0.5)}, "edges") == 1000
    tracks = {500: _report(3.0, "track_error"), 1000: _report(1.0, "track_error")}
    assert select_checkpoint(tracks, "tracks") == 1000


def test_ablation_axis_defaults():
    assert tr.ABLATION_AXES["rank"] == (32, 64, 128)
    assert tr.ABLATION_AXES["steps"] == (500, 1000, 2000, 3000)
    assert tr.ABLATION_AXES["layout_mode"] == ("parallel_canvas", "spatial_concat")
    with pytest.raises(ConfigError):
        ablate(TrainConfig(), "colour")


def test_ablation_arms_share_draws(tmp_path, base, edge_samples, monkeypatch):
    seen = []
    real = tr._step_grads

    def spy(model, params, batch, rng, streams, *a, **kw):
        seen.append((rng.bit_generator.state["state"]["state"], tuple(b.sample.seed for b in batch)))
        return real(model, params, batch, rng, streams, *a, **kw)

    monkeypatch.setattr(tr, "_step_grads", spy)
    held = edge_samples[:1]
    rows = ablate(_cfg(tmp_path, steps=2), "layout_mode", heldout=held, base=base, samples=edge_samples)
    assert [r["value"] for r in rows] == ["parallel_canvas", "spatial_concat"]
    assert all(r["primary"] == "edge_f1" for r in rows)
    assert len(seen) == 4 and seen[:2] == seen[2:]


def test_ablation_steps_axis_uses_one_run(tmp_path, base, edge_samples):
    rows = ablate(_cfg(tmp_path), "steps", values=(1, 2), heldout=edge_samples[:1], base=base, samples=edge_samples)
    assert [r["value"] for r in rows] == [1, 2]
    assert sorted(p.name for p in (tmp_path / "run" / "steps").glob("*.avct")) == [
        "lora_step00001.avct", "lora_step00002.avct"]


def test_ref_dropout_validation():
    with pytest.raises(ConfigError):
        TrainConfig(ref_dropout=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(ref_dropout=-0.1)


def test_preserve_base_loss_starts_at_zero(tmp_path, base, edge_samples):
    # a fresh adapter equals the backbone, so a dropped-reference step regresses onto itself
    res = train(_cfg(tmp_path, steps=1, ref_dropout=0.999, preserve_base=True), edge_samples, base)
    assert res.losses[0][1] == 0.0
    plain = train(_cfg(tmp_path, steps=1, ref_dropout=0.999), edge_samples, base)
    assert plain.losses[0][1] > 0.0


def test_ref_dropout_zero_keeps_draws(tmp_path, base, edge_samples):
    a = train(_cfg(tmp_path, steps=2), edge_samples, base)
    b = train(_cfg(tmp_path, steps=2, ref_dropout=0.0), edge_samples, base)
    assert a.losses == b.losses
