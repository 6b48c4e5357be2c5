"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 non-finite numerics,
4 file or checkpoint I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .bench import bench_grid
from .checkpoint import load_checkpoint
from .codec import read_audio_csv, read_ppm_frames, write_audio_csv, write_ppm_frames
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .manifest import write_manifest
from .model import ModelConfig

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("avcanvas")


def _triple(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three integers like 8,32,32, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers, got {text!r}")
    return vals


def _read_config(path: str) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat mapping of keys to values")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: key {k!r} is nested; config files are flat")
    return data


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _write_rows_csv(path: Path, rows: list[dict]) -> Path:
    import csv

    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


# ------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    dims = args.dims
    manifest = synth.generate_dataset(args.out, args.modality, args.count, args.seed, dims)
    config = {"modality": args.modality, "count": args.count, "seed": args.seed, "dims": list(dims)}
    write_manifest(args.out, "gen-data", config, outputs=[manifest])
    print(manifest)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .plotting import plot_loss
    from .train import PretrainConfig, pretrain

    cfg = PretrainConfig.from_dict(_read_config(args.config))
    if args.out:
        cfg.out = args.out
    ckpt = pretrain(cfg)
    out = Path(cfg.out)
    losses = np.loadtxt(out / "loss.csv", delimiter=",", skiprows=1, ndmin=2)
    fig = plot_loss(losses[:, 0], losses[:, 1], out / "loss.png")
    write_manifest(out, "pretrain", cfg.to_dict(), inputs=[args.config], outputs=[ckpt, out / "loss.csv", fig])
    print(ckpt)
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss
    from .train import TrainConfig, train

    cfg = TrainConfig.from_dict(_read_config(args.config))
    if args.out:
        cfg.out = args.out
    res = train(cfg)
    out = Path(cfg.out)
    steps = [r[0] for r in res.losses]
    fig = plot_loss(steps, [max(r[1], 1e-12) for r in res.losses], out / "loss.png")
    inputs = [args.config] + ([cfg.dataset] if cfg.dataset else []) + ([cfg.base] if Path(cfg.base).exists() else [])
    outputs = list(res.checkpoints.values()) + [out / "loss.csv", fig]
    write_manifest(out, "train", cfg.to_dict(), inputs=inputs, outputs=outputs,
                   extra={"base_hash": res.base_hash})
    for p in res.checkpoints.values():
        print(p)
    return EXIT_OK


def _model_from_checkpoint(path: str, base_override: str | None):
    """(model, metadata) for a LoRA or full-model checkpoint."""
    from .train import load_base, load_lora_model

    _, meta = load_checkpoint(path)
    if meta.get("kind") == "model":
        return load_base(path), meta
    if meta.get("kind") != "lora":
        raise CheckpointError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    base = load_base(base_override) if base_override else None
    model, weights = load_lora_model(path, base)
    return model, weights.metadata


def _load_canvas(path: Path, downscale: int, kind: str):
    from .canvas import Canvas

    if not path.is_dir():
        raise FileNotFoundError(f"canvas directory {path} does not exist")
    video = Canvas(read_ppm_frames(path), downscale, kind) if any(path.glob("*.ppm")) else None
    audio_csv = path / "audio.csv"
    audio = Canvas(read_audio_csv(audio_csv), 1, kind) if audio_csv.exists() else None
    if video is None and audio is None:
        raise ConfigError(f"{path}: no PPM frames or audio.csv found")
    return video, audio


def cmd_sample(args) -> int:
    from .canvas import build_layout
    from .diffusion import GuidanceConfig, euler_sample
    from .plotting import plot_audio, plot_frames
    from .sequence import StrengthField

    model, meta = _model_from_checkpoint(args.checkpoint, args.base)
    cfg = model.config
    d = int(args.downscale or meta.get("downscale", 1))
    mode = meta.get("layout_mode", "parallel_canvas")
    canvas, audio_canvas = (None, None)
    if args.canvas:
        canvas, audio_canvas = _load_canvas(Path(args.canvas), d, meta.get("modality", "control"))
    if args.dims:
        dims = args.dims
    elif canvas is not None:
        T, h, w, _ = canvas.content.shape
        dims = (T, h * d, w * d)
    else:
        dims = tuple(meta.get("dims", (8, 32, 32)))
    layout = build_layout(dims, cfg.patch, d, mode, with_reference=canvas is not None)
    with_audio = audio_canvas is not None or meta.get("streams", "video") != "video"
    strength = StrengthField(args.strength)
    res = euler_sample(model, layout, canvas, strength, GuidanceConfig(args.cfg), args.seed, args.steps, args.cond_id,
                       audio_canvas=audio_canvas, with_audio=with_audio, audio_strength=strength)
    if not np.all(np.isfinite(res.video)):
        raise NonFiniteError("sampler produced non-finite video")
    out = Path(args.out)
    video = np.clip(res.video, 0.0, 1.0)
    outputs = write_ppm_frames(video, out / "video")
    outputs.append(plot_frames(video, out / "preview.png", None if canvas is None else
                               np.repeat(np.repeat(canvas.content, d, axis=1), d, axis=2)))
    if res.audio is not None:
        outputs.append(write_audio_csv(res.audio, out / "audio.csv"))
        outputs.append(plot_audio(res.audio, out / "audio.png", None if audio_canvas is None else audio_canvas.content))
    config = {"checkpoint": args.checkpoint, "canvas": args.canvas, "strength": args.strength, "seed": args.seed,
              "steps": args.steps, "cfg": args.cfg, "cond_id": args.cond_id, "dims": list(dims), "downscale": d,
              "layout_mode": mode}
    inputs = [args.checkpoint] + ([args.canvas] if args.canvas else [])
    write_manifest(out, "sample", config, inputs=inputs, outputs=outputs)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_metric_bars
    from .train import evaluate

    model, meta = _model_from_checkpoint(args.checkpoint, args.base)
    manifest = synth.load_manifest(args.dataset)
    samples = synth.load_dataset(args.dataset)
    modality = manifest["modality"]
    if meta.get("modality") and meta["modality"] != modality:
        raise ConfigError(f"checkpoint was trained on {meta['modality']!r} but the dataset holds {modality!r}")
    d = int(meta.get("downscale", synth.MODALITIES.get(modality, 1)))
    mode = meta.get("layout_mode", "parallel_canvas")
    with_audio = meta.get("streams", "video") != "video"
    rep = evaluate(model, samples, d, mode, args.strength, args.steps, args.seed, with_audio,
                   label=Path(args.checkpoint).name)
    out = Path(args.out or Path(args.checkpoint).parent / f"eval_s{args.strength:g}")
    csv_path, json_path = rep.write(out, "report")
    means = rep.summary["mean"]
    keys = [k for k in means if k != "seed"]
    fig = plot_metric_bars(keys, [means[k] for k in keys], "mean", out / "report.png")
    config = {"checkpoint": args.checkpoint, "dataset": args.dataset, "strength": args.strength,
              "steps": args.steps, "seed": args.seed, "downscale": d, "layout_mode": mode}
    write_manifest(out, "eval", config, inputs=[args.checkpoint, args.dataset], outputs=[csv_path, json_path, fig])
    print(json.dumps(rep.summary, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_curve
    from .train import PRIMARY_METRIC, TrainConfig, ablate

    cfg = TrainConfig.from_dict(_read_config(args.config))
    if args.out:
        cfg.out = args.out
    values = None
    if args.values:
        kind = str if args.axis == "layout_mode" else int
        values = [kind(v) for v in args.values.split(",")]
    rows = ablate(cfg, args.axis, values)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = _write_rows_csv(out / f"ablate_{args.axis}.csv", rows)
    json_path = _write_json(out / f"ablate_{args.axis}.json", rows)
    key = PRIMARY_METRIC[cfg.modality][0]
    fig = plot_curve([str(r["value"]) for r in rows], [r[key] for r in rows], args.axis, key,
                     out / f"ablate_{args.axis}.png")
    write_manifest(out, "ablate", {**cfg.to_dict(), "axis": args.axis, "values": values}, inputs=[args.config],
                   outputs=[csv_path, json_path, fig])
    for r in rows:
        print(r["value"], r[key])
    return EXIT_OK


def cmd_bench_grid(args) -> int:
    from .plotting import plot_bench

    mcfg = ModelConfig(patch=tuple(args.patch))
    rows = bench_grid(args.dims, args.patch, tuple(args.d), args.reps, mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = [r.to_dict() for r in rows]
    csv_path = _write_rows_csv(out / "bench_grid.csv", table)
    json_path = _write_json(out / "bench_grid.json", table)
    fig = plot_bench(rows, out / "bench_grid.png")
    config = {"dims": list(args.dims), "patch": list(args.patch), "d": list(args.d), "reps": args.reps}
    write_manifest(out, "bench-grid", config, outputs=[csv_path, json_path, fig])
    print(f"{'d':>2} {'N_ref':>6} {'N_total':>7} {'median_ms':>10} {'GFLOP':>8} {'speedup%':>9} {'reported%':>9}")
    for r in rows:
        print(f"{r.d:>2} {r.n_ref:>6} {r.n_total:>7} {r.median_s * 1e3:>10.3f} {r.flops / 1e9:>8.4f} "
              f"{r.speedup_pct:>9.1f} {r.reported_pct:>9}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avcanvas", description="Reference-canvas conditioning toolkit")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--modality", required=True, choices=sorted(synth.MODALITIES) + ["none"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", required=True)
    g.add_argument("--dims", type=_triple, default=(8, 32, 32))
    g.set_defaults(func=cmd_gen_data)

    pt = sub.add_parser("pretrain", help="train the backbone from scratch")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out")
    pt.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train one LoRA")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate from a checkpoint and a canvas")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--canvas", help="directory of canvas PPM frames and/or audio.csv")
    s.add_argument("--strength", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--out", required=True)
    s.add_argument("--cfg", type=float, default=1.0)
    s.add_argument("--cond-id", type=int, default=1)
    s.add_argument("--dims", type=_triple)
    s.add_argument("--downscale", type=int)
    s.add_argument("--base", help="backbone checkpoint (defaults to the one recorded in the adapter)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--strength", type=float, default=1.0)
    e.add_argument("--steps", type=int, default=16)
    e.add_argument("--seed", type=int, default=42)
    e.add_argument("--out")
    e.add_argument("--base")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one arm per axis value")
    a.add_argument("--axis", required=True, choices=["rank", "steps", "layout_mode", "downscale"])
    a.add_argument("--config", required=True)
    a.add_argument("--values", help="comma-separated override of the axis values")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench-grid", help="attention cost per canvas downscale")
    b.add_argument("--dims", type=_triple, default=(8, 32, 32))
    b.add_argument("--patch", type=_triple, default=(1, 4, 4))
    b.add_argument("--d", type=int, nargs="+", default=[1, 2, 4])
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--out", default="runs/bench")
    b.set_defaults(func=cmd_bench_grid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
