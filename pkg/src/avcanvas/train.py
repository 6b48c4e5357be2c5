"""Backbone pretraining, per-modality LoRA training, evaluation and ablations."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import synth
from . import tensor as tt
from .canvas import SequenceLayout, assemble, assemble_audio, build_layout
from .codec import audio_tokenize, patchify
from .diffusion import GuidanceConfig, euler_sample, noised_sequence, training_loss
from .errors import ConfigError, NonFiniteError
from .lora import LoraSpec, LoraWeights, attach, load_lora, load_model, save_lora, save_model
from .metrics import envelope_spearman, video_metrics
from .model import DiT, ModelConfig
from .optim import AdamW, linear_decay_lr
from .sequence import Segment, StrengthField, TokenSequence

log = logging.getLogger(__name__)

# modality -> (rank, target modules, trained streams); a scaled-down per-modality recipe
MODALITY_DEFAULTS = {
    "depth": (128, "V: SA", "video"),
    "edges": (32, "V: SA", "video"),
    "inpaint": (128, "V: SA", "video"),
    "tracks": (32, "V: SA, CA, FF", "video"),
    "shifted_view": (128, "V: SA, FF", "video"),
    "composite": (128, "V: SA", "video"),
    "audio_intensity": (128, "A: SA, FF, V->A CA", "audio"),
    "talking": (128, "All", "joint"),
}

# primary metric per modality and whether larger is better
PRIMARY_METRIC = {
    "depth": ("depth_spearman", True),
    "edges": ("edge_f1", True),
    "inpaint": ("psnr_unmasked", True),
    "tracks": ("track_error", False),
    "shifted_view": ("iou", True),
    "composite": ("depth_spearman", True),
    "audio_intensity": ("envelope_spearman", True),
    "talking": ("envelope_spearman", True),
}


def _dims(v) -> tuple[int, int, int]:
    if isinstance(v, str):
        v = [int(x) for x in v.replace("x", ",").split(",") if x.strip()]
    v = tuple(int(x) for x in v)
    if len(v) != 3 or min(v) < 1:
        raise ConfigError(f"dims must be three positive integers, got {v}")
    return v


class _FlatConfig:
    """Flat key/value config with unknown-key rejection."""

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}; allowed: {sorted(names)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


@dataclass
class PretrainConfig(_FlatConfig):
    """Full-parameter training of the backbone on unconditional scenes.

    With probability ``ref_prob`` a sample also carries its own first frame
    as clean reference tokens, so the backbone learns that t = 0 tokens are
    context rather than something to denoise.
    """

    steps: int = 3000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    count: int = 400
    data_seed: int = 1
    dims: tuple = (8, 32, 32)
    ref_prob: float = 0.5
    audio: bool = True
    weight_decay: float = 0.0
    depth: int = 2
    width: int = 48
    heads: int = 2
    ff_mult: int = 2
    patch: tuple = (1, 4, 4)
    out: str = "runs/base"

    def __post_init__(self):
        self.dims = _dims(self.dims)
        self.patch = _dims(self.patch)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")

    def model_config(self) -> ModelConfig:
        return ModelConfig(depth=self.depth, width=self.width, heads=self.heads, patch=self.patch, ff_mult=self.ff_mult)


@dataclass
class TrainConfig(_FlatConfig):
    modality: str = "edges"
    dataset: str | None = None
    count: int = 200
    data_seed: int = 0
    dims: tuple = (8, 32, 32)
    steps: int = 2000
    rank: int | None = None
    alpha: float | None = None
    patterns: str | None = None
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 1
    seed: int = 42
    checkpoint_interval: int = 500
    checkpoint_steps: tuple = ()
    layout_mode: str = "parallel_canvas"
    downscale: int | None = None
    streams: str | None = None
    weight_decay: float = 0.0
    ref_dropout: float = 0.0
    preserve_base: bool = False
    base: str = "random"
    out: str = "runs/train"

    def __post_init__(self):
        if self.modality not in MODALITY_DEFAULTS:
            raise ConfigError(f"unknown modality {self.modality!r}; choose from {sorted(MODALITY_DEFAULTS)}")
        rank, pats, streams = MODALITY_DEFAULTS[self.modality]
        self.rank = rank if self.rank is None else int(self.rank)
        self.patterns = pats if self.patterns is None else self.patterns
        self.streams = streams if self.streams is None else self.streams
        self.downscale = synth.MODALITIES[self.modality] if self.downscale is None else int(self.downscale)
        self.dims = _dims(self.dims)
        self.checkpoint_steps = tuple(int(s) for s in self.checkpoint_steps)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")
        if self.streams not in ("video", "audio", "joint"):
            raise ConfigError(f"streams must be video, audio or joint, got {self.streams!r}")
        if self.layout_mode not in ("parallel_canvas", "spatial_concat"):
            raise ConfigError(f"unknown layout_mode {self.layout_mode!r}")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if not 0.0 <= self.ref_dropout < 1.0:
            raise ConfigError(f"ref_dropout must be in [0, 1), got {self.ref_dropout}")

    def lora_spec(self) -> LoraSpec:
        return LoraSpec(self.rank, self.alpha, self.patterns)


# ------------------------------------------------------------------- data

@dataclass
class Prepared:
    """A sample turned into clean token sequences for one layout."""

    video: TokenSequence
    audio: TokenSequence | None
    cond_id: int
    sample: synth.Sample


def load_samples(cfg: TrainConfig) -> list[synth.Sample]:
    if cfg.dataset:
        root = Path(cfg.dataset)
        if not (root / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset manifest under {root}")
        manifest = synth.load_manifest(root)
        if manifest["modality"] != cfg.modality:
            raise ConfigError(f"dataset modality {manifest['modality']!r} does not match config modality {cfg.modality!r}")
        return synth.load_dataset(root)
    return [synth.make_sample(cfg.modality, synth.sample_seed(cfg.data_seed, i), cfg.dims) for i in range(cfg.count)]


def layout_for(model_cfg: ModelConfig, dims, downscale: int, mode: str, with_reference: bool = True) -> SequenceLayout:
    return build_layout(dims, model_cfg.patch, downscale, mode, with_reference)


def prepare(sample: synth.Sample, model_cfg: ModelConfig, layout: SequenceLayout, with_audio: bool) -> Prepared:
    x0 = patchify(sample.target_video, model_cfg.patch).features
    canvas = sample.canvas if layout.n_ref else None
    video, _ = assemble(x0, layout, canvas)
    audio = None
    if with_audio:
        a0 = audio_tokenize(sample.target_audio, model_cfg.audio_group).features
        audio = assemble_audio(a0, sample.audio_canvas, model_cfg.audio_group)
    return Prepared(video, audio, sample.cond_id, sample)


def _first_frame_reference(video: TokenSequence, grid) -> TokenSequence:
    """Append clean copies of frame-0 generation tokens as reference tokens."""
    nt, nh, nw = grid
    rows = np.arange(nh * nw)
    ref = TokenSequence(video.features[rows].copy(), video.coords[rows].copy(), np.zeros(rows.size),
                        np.full(rows.size, int(Segment.REF_VIDEO)))
    return TokenSequence.concat(video, ref)


# --------------------------------------------------------------- training

def _step_grads(model: DiT, params, batch, rng, streams: str, first_frame_p: float = 0.0, grid=None,
                ref_dropout: float = 0.0, teacher: DiT | None = None):
    grads = {p: np.zeros(p.shape, np.float64) for p in params}
    total = 0.0
    for item in batch:
        t = float(rng.uniform(0.0, 1.0))
        video = item.video
        if first_frame_p and rng.uniform() < first_frame_p:
            video = _first_frame_reference(video, grid)
        dropped = bool(ref_dropout) and rng.uniform() < ref_dropout
        if dropped:
            # same as strength 0: the reference is invisible to generation tokens
            video = video.select(video.gen_index())
        eps_v = rng.standard_normal((int(video.is_gen.sum()), video.features.shape[1])).astype(np.float32)
        audio = item.audio if streams in ("audio", "joint") else None
        eps_a = None
        if audio is not None:
            eps_a = rng.standard_normal((int(audio.is_gen.sum()), audio.features.shape[1])).astype(np.float32)
        mask_v = video.is_gen if streams in ("video", "joint") else np.zeros(len(video), bool)
        mask_a = audio.is_gen if audio is not None else None
        targets = None
        if dropped and teacher is not None:
            # without a reference the adapter should reproduce the frozen backbone
            na = noised_sequence(audio, t, eps_a) if audio is not None else None
            tv, ta = teacher.forward(noised_sequence(video, t, eps_v), na, item.cond_id, validate=False)
            targets = (tv.data, None if ta is None else ta.data)
        with tt.GradTape() as tape:
            loss = training_loss(model, video, t, eps_v, mask_v, audio, eps_a, mask_a, cond_id=item.cond_id,
                                 targets=targets)
        g = tt.backward(loss, tape, params)
        for p in params:
            grads[p] += g[p]
        total += loss.item()
    n = len(batch)
    return {p: (g / n) for p, g in grads.items()}, total / n


def _write_loss_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in rows:
            w.writerow([step, f"{loss:.9g}", f"{lr:.9g}"])


def pretrain(cfg: PretrainConfig) -> Path:
    """Train every backbone parameter; returns the base checkpoint path."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    model = DiT.init(mcfg, cfg.seed)
    layout = layout_for(mcfg, cfg.dims, 1, "parallel_canvas", with_reference=False)
    samples = [synth.make_sample("none", synth.sample_seed(cfg.data_seed, i), cfg.dims) for i in range(cfg.count)]
    items = [prepare(s, mcfg, layout, cfg.audio) for s in samples]
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    rows = []
    streams = "joint" if cfg.audio else "video"
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        batch = [items[i] for i in rng.integers(0, len(items), cfg.batch_size)]
        grads, loss = _step_grads(model, params, batch, rng, streams, cfg.ref_prob, layout.grid)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {step}")
        lr = linear_decay_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end)
        opt.step(grads, lr)
        rows.append((step, loss, lr))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f lr %.2e", step, loss, lr)
    for p in params:
        p.requires_grad = False
    _write_loss_log(out / "loss.csv", rows)
    return save_model(out / "base.avct", model, step=cfg.steps, seed=cfg.seed, pretrain=cfg.to_dict())


def load_base(spec: str, model_cfg: ModelConfig | None = None) -> DiT:
    """``random[:seed]`` for an untrained backbone, otherwise a model checkpoint path."""
    if spec.startswith("random"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return DiT.init(model_cfg or ModelConfig(), seed, zero_init=False)
    model, _ = load_model(spec)
    return model


@dataclass
class TrainResult:
    out: Path
    checkpoints: dict[int, Path]
    losses: list[tuple[int, float, float]]
    weights: LoraWeights
    base_hash: str
    manifest: dict = field(default_factory=dict)


def train(cfg: TrainConfig, samples: list[synth.Sample] | None = None, base: DiT | None = None) -> TrainResult:
    """LoRA-only training on one modality; the backbone stays bit-identical."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base = base or load_base(cfg.base)
    base_hash = base.param_hash()
    samples = samples if samples is not None else load_samples(cfg)
    if not samples:
        raise ConfigError("training set is empty")
    for s in samples:
        if s.modality != cfg.modality:
            raise ConfigError(f"sample of modality {s.modality!r} in a {cfg.modality!r} run")
    mcfg = base.config
    layout = layout_for(mcfg, cfg.dims, cfg.downscale, cfg.layout_mode, with_reference=samples[0].canvas is not None)
    with_audio = cfg.streams in ("audio", "joint")
    items = [prepare(s, mcfg, layout, with_audio) for s in samples]

    model, params = attach(base, cfg.lora_spec(), seed=cfg.seed)
    opt = AdamW(params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    adapter = model.adapters[-1]
    meta = {
        "modality": cfg.modality,
        "layout_mode": cfg.layout_mode,
        "downscale": cfg.downscale,
        "dims": list(cfg.dims),
        "base": cfg.base,
        "base_hash": base_hash,
        "seed": cfg.seed,
        "streams": cfg.streams,
    }
    ckpt_at = set(cfg.checkpoint_steps) | {cfg.steps}
    rows = []
    checkpoints = {}
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        batch = [items[i] for i in rng.integers(0, len(items), cfg.batch_size)]
        grads, loss = _step_grads(model, params, batch, rng, cfg.streams, ref_dropout=cfg.ref_dropout,
                                  teacher=base if cfg.preserve_base else None)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at step {step}")
        lr = linear_decay_lr(step, cfg.steps, cfg.lr_start, cfg.lr_end)
        opt.step(grads, lr)
        rows.append((step, loss, lr))
        done = step + 1
        if done % cfg.checkpoint_interval == 0 or done in ckpt_at:
            w = LoraWeights.from_adapter(adapter, step=done, **meta)
            checkpoints[done] = save_lora(out / f"lora_step{done:05d}.avct", w)
        if step % 100 == 0:
            log.info("%s step %d loss %.4f lr %.2e", cfg.modality, step, loss, lr)

    if base.param_hash() != base_hash:
        raise RuntimeError("backbone parameters changed during LoRA training")
    _write_loss_log(out / "loss.csv", rows)
    weights = LoraWeights.from_adapter(adapter, step=cfg.steps, **meta)
    return TrainResult(out, checkpoints, rows, weights, base_hash)


# ------------------------------------------------------------- evaluation

@dataclass
class FidelityReport:
    rows: list[dict]
    strength: float
    label: str = ""

    @property
    def summary(self) -> dict:
        keys = [k for k in self.rows[0] if isinstance(self.rows[0][k], float)] if self.rows else []
        agg = {k: float(np.mean([r[k] for r in self.rows])) for k in keys}
        return {"label": self.label, "strength": self.strength, "count": len(self.rows), "mean": agg}

    def values(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        keys = list(self.rows[0]) if self.rows else ["id"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary, indent=1, sort_keys=True) + "\n")
        return csv_path, json_path


def generate(
    model: DiT,
    sample: synth.Sample,
    downscale: int,
    layout_mode: str = "parallel_canvas",
    strength: float = 1.0,
    steps: int = 16,
    seed: int = 42,
    with_audio: bool = False,
    audio_strength: float | None = None,
):
    layout = layout_for(model.config, sample.target_video.shape[:3], downscale, layout_mode,
                        with_reference=sample.canvas is not None)
    s = StrengthField(float(strength))
    sa = StrengthField(float(strength if audio_strength is None else audio_strength))
    return euler_sample(model, layout, sample.canvas, s, GuidanceConfig(), seed, steps, sample.cond_id,
                        audio_canvas=sample.audio_canvas, with_audio=with_audio, audio_strength=sa)


def evaluate(
    model: DiT,
    samples: list[synth.Sample],
    downscale: int,
    layout_mode: str = "parallel_canvas",
    strength: float = 1.0,
    steps: int = 16,
    seed: int = 42,
    with_audio: bool = False,
    label: str = "",
) -> FidelityReport:
    """Generate each held-out sample at seed 42 and score it against ground truth."""
    rows = []
    for i, s in enumerate(samples):
        res = generate(model, s, downscale, layout_mode, strength, steps, seed, with_audio or s.audio_canvas is not None)
        scene = synth.SceneSpec.from_dict(s.scene)
        mask = s.canvas.mask if (s.canvas is not None and s.canvas.mask is not None) else None
        row = {"id": i, "seed": s.seed}
        row.update(video_metrics(np.clip(res.video, 0.0, 1.0), s.target_video, scene, mask))
        if res.audio is not None:
            control = s.audio_canvas.content if s.audio_canvas is not None else s.target_audio
            row["envelope_spearman"] = envelope_spearman(res.audio, control)
        rows.append(row)
    return FidelityReport(rows, float(strength), label)


STRENGTH_SWEEP = (0.0, 0.25, 0.5, 1.0)


def strength_sweep(
    model: DiT,
    samples: list[synth.Sample],
    downscale: int,
    layout_mode: str = "parallel_canvas",
    strengths=STRENGTH_SWEEP,
    steps: int = 16,
    seed: int = 42,
    with_audio: bool = False,
) -> dict[float, FidelityReport]:
    return {float(s): evaluate(model, samples, downscale, layout_mode, s, steps, seed, with_audio, label=f"strength={s:g}")
            for s in strengths}


def ground_truth_report(samples: list[synth.Sample]) -> FidelityReport:
    rows = []
    for i, s in enumerate(samples):
        scene = synth.SceneSpec.from_dict(s.scene)
        mask = s.canvas.mask if (s.canvas is not None and s.canvas.mask is not None) else None
        row = {"id": i, "seed": s.seed}
        row.update(video_metrics(s.target_video, s.target_video, scene, mask))
        rows.append(row)
    return FidelityReport(rows, 1.0, "ground_truth")


def heldout_samples(modality: str, count: int = 20, seed: int = 9001, dims=(8, 32, 32)) -> list[synth.Sample]:
    return [synth.make_sample(modality, synth.sample_seed(seed, i), dims) for i in range(count)]


def model_with_lora(base: DiT, weights: LoraWeights, lora_strength: float = 1.0) -> DiT:
    spec = LoraSpec(weights.rank, weights.alpha, weights.patterns, lora_strength)
    model, params = attach(base, spec, weights=weights)
    for p in params:
        p.requires_grad = False
    return model


def load_lora_model(path, base: DiT | None = None) -> tuple[DiT, LoraWeights]:
    weights = load_lora(path)
    if base is None:
        base = load_base(weights.metadata.get("base", "random"))
    want = weights.metadata.get("base_hash")
    if want and base.param_hash() != want:
        raise ConfigError(f"{path}: backbone hash differs from the one the adapter was trained on")
    return model_with_lora(base, weights), weights


def select_checkpoint(reports: dict[int, FidelityReport], modality: str) -> int:
    """Step whose held-out primary metric is best (earliest wins ties)."""
    key, higher = PRIMARY_METRIC[modality]
    best = None
    for step in sorted(reports):
        v = reports[step].summary["mean"][key]
        if best is None or (v > best[1] if higher else v < best[1]):
            best = (step, v)
    return best[0]


# ---------------------------------------------------------------- ablation

ABLATION_AXES = {
    "rank": (32, 64, 128),
    "steps": (500, 1000, 2000, 3000),
    "layout_mode": ("parallel_canvas", "spatial_concat"),
    "downscale": (1, 2, 4),
}


def ablate(
    cfg: TrainConfig,
    axis: str,
    values=None,
    heldout: list[synth.Sample] | None = None,
    base: DiT | None = None,
    samples: list[synth.Sample] | None = None,
) -> list[dict]:
    """Train + evaluate one arm per axis value with shared seeds; one row per value."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    values = tuple(values) if values is not None else ABLATION_AXES[axis]
    base = base or load_base(cfg.base)
    heldout = heldout if heldout is not None else heldout_samples(cfg.modality, 20, dims=cfg.dims)
    samples = samples if samples is not None else load_samples(cfg)
    key, _ = PRIMARY_METRIC[cfg.modality]
    with_audio = cfg.streams != "video"
    rows = []
    if axis == "steps":
        arm = TrainConfig.from_dict({**cfg.to_dict(), "steps": max(values), "checkpoint_steps": list(values),
                                     "out": str(Path(cfg.out) / "steps")})
        res = train(arm, samples, base)
        for v in values:
            model, _ = load_lora_model(res.checkpoints[v], base)
            rep = evaluate(model, heldout, arm.downscale, arm.layout_mode, with_audio=with_audio, label=f"steps={v}")
            rows.append({"axis": axis, "value": v, **rep.summary["mean"], "primary": key})
        return rows
    for v in values:
        arm = TrainConfig.from_dict({**cfg.to_dict(), axis: v, "out": str(Path(cfg.out) / f"{axis}_{v}")})
        arm_samples = samples
        arm_heldout = heldout
        if axis == "downscale":
            arm_samples = [_with_downscale(s, v) for s in samples]
            arm_heldout = [_with_downscale(s, v) for s in heldout]
        res = train(arm, arm_samples, base)
        model = model_with_lora(base, res.weights)
        rep = evaluate(model, arm_heldout, arm.downscale, arm.layout_mode, with_audio=with_audio, label=f"{axis}={v}")
        rows.append({"axis": axis, "value": v, **rep.summary["mean"], "primary": key})
    return rows


def _with_downscale(sample: synth.Sample, d: int) -> synth.Sample:
    """Same sample with its video canvas rebuilt at downscale ``d``."""
    if sample.canvas is None or sample.canvas.downscale == d:
        return sample
    scene = synth.SceneSpec.from_dict(sample.scene)
    clip, ann = synth.render_scene(scene)
    c = synth.make_control(scene, sample.modality, clip, ann, downscale=d)
    return synth.Sample(sample.target_video, sample.target_audio, c, sample.modality, sample.cond_id, sample.seed,
                        sample.scene, sample.audio_canvas)
