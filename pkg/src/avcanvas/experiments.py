"""Desk-scale control-learning runs shared by the acceptance suite.

Every stage writes its result as JSON under a cache directory keyed by the
numerics source plus the run configuration, so reruns with unchanged code
only re-read files.  Stages are resumable individually.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from . import synth
from .lora import apply_pair, load_lora
from .manifest import blob_hash, canonical_json
from .train import (
    PretrainConfig,
    TrainConfig,
    evaluate,
    heldout_samples,
    load_base,
    model_with_lora,
    pretrain,
    train,
)

log = logging.getLogger(__name__)

BASE = dict(steps=3000, width=96, depth=4, heads=4, ff_mult=2, lr_start=1e-3, lr_end=1e-4, count=400, seed=0,
            data_seed=1)
EDGE = dict(modality="edges", rank=32, count=200, data_seed=0, steps=2000, checkpoint_steps=[200, 1000, 2000],
            checkpoint_interval=10**6, lr_start=1e-3, lr_end=1e-4, seed=42)
AUDIO = dict(modality="audio_intensity", count=200, data_seed=0, steps=1000, checkpoint_interval=10**6,
             lr_start=1e-3, lr_end=1e-4, seed=42)
HELDOUT_COUNT = 20
HELDOUT_SEED = 9001
STRENGTHS = (0.0, 0.25, 0.5, 1.0)

# files whose edits change trained weights or metrics
NUMERIC_SOURCES = ("tensor.py", "model.py", "sequence.py", "codec.py", "canvas.py", "lora.py", "optim.py",
                   "diffusion.py", "synth.py", "metrics.py", "train.py", "checkpoint.py", "experiments.py")


def source_hash() -> str:
    here = Path(__file__).parent
    return blob_hash(b"".join(blob_hash((here / f).read_bytes()).encode() for f in NUMERIC_SOURCES))


def cache_dir(root=None) -> Path:
    root = Path(root or os.environ.get("AVCANVAS_CACHE") or Path.cwd() / ".cache" / "desk")
    key = blob_hash(canonical_json({"src": source_hash(), "base": BASE, "edge": EDGE, "audio": AUDIO,
                                    "heldout": [HELDOUT_COUNT, HELDOUT_SEED], "s": STRENGTHS}).encode())
    return root / key[:16]


def _stage(path: Path, fn):
    if path.exists():
        return json.loads(path.read_text())
    out = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return out


def _rows(report) -> list[dict]:
    return [dict(r) for r in report.rows]


def _edge_run(root: Path, base_path: Path, mode: str, edge_samples) -> dict[int, Path]:
    cfg = TrainConfig.from_dict({**EDGE, "layout_mode": mode, "base": str(base_path), "out": str(root / mode)})
    want = {s: root / mode / f"lora_step{s:05d}.avct" for s in cfg.checkpoint_steps}
    if not all(p.exists() for p in want.values()):
        train(cfg, edge_samples, load_base(str(base_path)))
    return want


def run_desk(root=None) -> dict:
    """Pretrain (once), train edge LoRAs in both layouts and an audio LoRA, evaluate everything."""
    root = cache_dir(root)
    root.mkdir(parents=True, exist_ok=True)
    base_path = root / "base" / "base.avct"
    if not base_path.exists():
        log.info("pretraining backbone into %s", base_path)
        pretrain(PretrainConfig.from_dict({**BASE, "out": str(base_path.parent)}))
    base = load_base(str(base_path))

    edge_held = heldout_samples("edges", HELDOUT_COUNT, HELDOUT_SEED)
    edge_train = [synth.make_sample("edges", synth.sample_seed(EDGE["data_seed"], i)) for i in range(EDGE["count"])]
    res: dict = {"cache": str(root)}

    res["edges_base"] = _stage(root / "eval_edges_base.json",
                               lambda: _rows(evaluate(base, edge_held, 2, "parallel_canvas")))
    # strength 0 hides the reference, so this is also the base without any control
    res["edges_base_s0"] = _stage(root / "eval_edges_base_s0.json",
                                  lambda: _rows(evaluate(base, edge_held, 2, "parallel_canvas", 0.0)))
    for mode in ("parallel_canvas", "spatial_concat"):
        ckpts = _edge_run(root, base_path, mode, edge_train)
        for step, path in ckpts.items():
            if mode == "spatial_concat" and step != EDGE["steps"]:
                continue
            res[f"edges_{mode}_{step}"] = _stage(
                root / f"eval_edges_{mode}_{step}.json",
                lambda path=path, mode=mode: _rows(evaluate(model_with_lora(base, load_lora(path)), edge_held, 2, mode)))

    final = root / "parallel_canvas" / f"lora_step{EDGE['steps']:05d}.avct"
    edge_model = model_with_lora(base, load_lora(final))
    for s in STRENGTHS:
        if s == 1.0:
            res["strength_1"] = res[f"edges_parallel_canvas_{EDGE['steps']}"]
            continue
        res[f"strength_{s:g}"] = _stage(root / f"eval_strength_{s:g}.json",
                                        lambda s=s: _rows(evaluate(edge_model, edge_held, 2, "parallel_canvas", s)))

    audio_path = root / "audio" / f"lora_step{AUDIO['steps']:05d}.avct"
    if not audio_path.exists():
        cfg = TrainConfig.from_dict({**AUDIO, "base": str(base_path), "out": str(audio_path.parent)})
        samples = [synth.make_sample("audio_intensity", synth.sample_seed(AUDIO["data_seed"], i))
                   for i in range(AUDIO["count"])]
        train(cfg, samples, base)
    joint_held = [synth.make_joint_sample(synth.sample_seed(HELDOUT_SEED, i)) for i in range(HELDOUT_COUNT)]
    joint = apply_pair(base, load_lora(final), load_lora(audio_path))
    res["joint_base"] = _stage(root / "eval_joint_base.json",
                               lambda: _rows(evaluate(base, joint_held, 2, with_audio=True)))
    res["joint_lora"] = _stage(root / "eval_joint_lora.json",
                               lambda: _rows(evaluate(joint, joint_held, 2, with_audio=True)))
    return res


def column(rows: list[dict], key: str) -> np.ndarray:
    return np.array([r[key] for r in rows], dtype=np.float64)
