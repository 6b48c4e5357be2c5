"""Rectified-flow noising, masked objective, and the Euler sampler.

``x_t = (1 - t) x0 + t eps`` with velocity target ``eps - x0``.  Only
generation tokens are ever noised; reference tokens stay clean (t = 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .canvas import Canvas, SequenceLayout, assemble, assemble_audio
from .codec import audio_untokenize, unpatchify
from .errors import ConfigError, ShapeError
from .model import DiT
from .sequence import StrengthField, TokenSequence
from .tensor import Tensor

NULL_COND = 0


@dataclass
class NoiseSchedule:
    steps: int = 16

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampling needs at least one step, got {self.steps}")

    def grid(self) -> np.ndarray:
        """``steps + 1`` strictly decreasing timesteps from 1 to 0."""
        return np.linspace(1.0, 0.0, self.steps + 1)

    @staticmethod
    def sample_training_t(rng: np.random.Generator) -> float:
        return float(rng.uniform(0.0, 1.0))


@dataclass
class GuidanceConfig:
    cfg_scale: float = 1.0
    uncond_id: int = NULL_COND

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def noise(x0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"noise level {t} outside [0, 1]")
    if np.shape(eps) != np.shape(x0):
        raise ShapeError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    x0 = np.asarray(x0)
    return ((1.0 - t) * x0 + t * np.asarray(eps)).astype(x0.dtype)


def noised_sequence(seq: TokenSequence, t: float, eps: np.ndarray) -> TokenSequence:
    """Noise the generation tokens of ``seq``; reference rows are copied untouched."""
    gen = seq.gen_index()
    feats = np.array(seq.features, copy=True)
    feats[gen] = noise(seq.features[gen], t, eps)
    return TokenSequence(feats, seq.coords, np.where(seq.is_gen, float(t), 0.0), seq.segments)


def cfg_combine(v_cond, v_uncond, scale: float):
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ShapeError(f"cfg operands differ: {np.shape(v_cond)} vs {np.shape(v_uncond)}")
    if scale == 1.0:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)


def _masked_sq_sum(pred: Tensor, target: np.ndarray, rows: np.ndarray) -> tuple[Tensor, int]:
    sel = tt.take(pred, rows, axis=0) if rows.size != pred.shape[0] else pred
    diff = sel - Tensor(target[rows], dtype=pred.dtype)
    return tt.tsum(tt.square(diff)), rows.size * pred.shape[1]


def training_loss(
    model: DiT,
    video: TokenSequence,
    t: float,
    eps_video: np.ndarray,
    loss_mask_video: np.ndarray,
    audio: TokenSequence | None = None,
    eps_audio: np.ndarray | None = None,
    loss_mask_audio: np.ndarray | None = None,
    cond_id: int = 1,
    strength: StrengthField | None = None,
    targets: tuple | None = None,
) -> Tensor:
    """Velocity MSE averaged over masked generation tokens and features.

    ``video``/``audio`` hold clean features (x0 on generation rows, control
    content on reference rows).  Masks index the full sequences and must be
    zero on every reference position.  ``targets`` optionally replaces the
    flow targets ``eps - x0`` with given (video, audio) velocities, one row
    per generation token.
    """
    masks = [(video, np.asarray(loss_mask_video, dtype=bool))]
    if audio is not None:
        m = np.zeros(len(audio), bool) if loss_mask_audio is None else np.asarray(loss_mask_audio, dtype=bool)
        masks.append((audio, m))
    total = 0
    for seq, m in masks:
        if m.shape != (len(seq),):
            raise ShapeError(f"loss mask of shape {m.shape} for a sequence of {len(seq)} tokens")
        if np.any(m & seq.is_ref):
            raise ConfigError("loss mask may not include reference positions")
        total += int(m.sum())
    if total == 0:
        raise ConfigError("loss mask is empty")

    nv = noised_sequence(video, t, eps_video)
    na = noised_sequence(audio, t, eps_audio) if audio is not None else None
    pred_v, pred_a = model.forward(nv, na, cond_id, strength, validate=False)

    terms = []
    count = 0
    given = targets or (None, None)
    for seq, eps, pred, m, fixed in (
        (video, eps_video, pred_v, masks[0][1], given[0]),
        (audio, eps_audio, pred_a, masks[1][1] if audio is not None else None, given[1]),
    ):
        if seq is None or m is None or not m.any():
            continue
        gen = seq.gen_index()
        if fixed is not None:
            target = np.asarray(fixed, dtype=pred.dtype)
        else:
            target = (np.asarray(eps) - seq.features[gen]).astype(pred.dtype)
        rows = np.flatnonzero(m[gen])
        s, c = _masked_sq_sum(pred, target, rows)
        terms.append(s)
        count += c
    loss = terms[0]
    for s in terms[1:]:
        loss = loss + s
    return loss * (1.0 / count)


@dataclass
class SampleResult:
    video: np.ndarray  # (T, H, W, 3)
    audio: np.ndarray | None  # (Ta, F)
    video_tokens: np.ndarray
    audio_tokens: np.ndarray | None
    ref_trace: list[np.ndarray] = field(default_factory=list)


def euler_sample(
    model: DiT,
    layout: SequenceLayout,
    canvas: Canvas | None = None,
    strength: StrengthField | None = None,
    guidance: GuidanceConfig | None = None,
    seed: int = 42,
    steps: int = 16,
    cond_id: int = 1,
    audio_canvas: Canvas | None = None,
    with_audio: bool = False,
    audio_strength: StrengthField | None = None,
    trace_reference: bool = False,
    velocity_fn=None,
) -> SampleResult:
    """Integrate from noise (t = 1) to data (t = 0) with ``steps`` Euler steps.

    ``velocity_fn(video_seq, audio_seq) -> (v_video, v_audio)`` overrides the
    model (used for oracle checks).
    """
    schedule = NoiseSchedule(steps)
    guidance = guidance or GuidanceConfig()
    cfg = model.config
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    n_gen = layout.n_gen
    x_v = rng.standard_normal((n_gen, cfg.video_token_dim)).astype(dtype)
    x_a = None
    if with_audio or audio_canvas is not None:
        T = layout.dims[0]
        n_audio = T * cfg.audio_ratio // cfg.audio_group
        x_a = rng.standard_normal((n_audio, cfg.audio_token_dim)).astype(dtype)

    template, _ = assemble(x_v, layout, canvas, strength, t=1.0)
    gen_v = template.gen_index()
    a_template = assemble_audio(x_a, audio_canvas, cfg.audio_group) if x_a is not None else None
    ref_v = template.ref_index()
    trace = []

    grid = schedule.grid()
    for i in range(steps):
        t_i, t_next = float(grid[i]), float(grid[i + 1])
        feats = template.features.copy()
        feats[gen_v] = x_v
        vseq = TokenSequence(feats, template.coords, np.where(template.is_gen, t_i, 0.0), template.segments)
        aseq = None
        if a_template is not None:
            afeats = a_template.features.copy()
            afeats[a_template.gen_index()] = x_a
            aseq = TokenSequence(afeats, a_template.coords, np.where(a_template.is_gen, t_i, 0.0), a_template.segments)
        if trace_reference:
            trace.append(vseq.features[ref_v].copy())
        if velocity_fn is not None:
            v_v, v_a = velocity_fn(vseq, aseq)
        else:
            v_v, v_a = _guided_velocity(model, vseq, aseq, cond_id, strength, audio_strength, guidance)
        x_v = (x_v + (t_next - t_i) * np.asarray(v_v)).astype(dtype)
        if x_a is not None:
            x_a = (x_a + (t_next - t_i) * np.asarray(v_a)).astype(dtype)
    if trace_reference:
        trace.append(template.features[ref_v].copy())

    T, H, W = layout.dims
    video = unpatchify(x_v, layout.gen_coords.astype(np.int64), layout.dims, layout.patch, cfg.channels)
    audio = None
    if x_a is not None:
        audio = audio_untokenize(x_a, a_template.coords[a_template.gen_index()], cfg.audio_group, cfg.audio_features)
    return SampleResult(video, audio, x_v, x_a, trace)


def _guided_velocity(model, vseq, aseq, cond_id, strength, audio_strength, guidance):
    v_v, v_a = model.forward(vseq, aseq, cond_id, strength, audio_strength, validate=False)
    v_v = v_v.data
    v_a = v_a.data if v_a is not None else None
    if guidance.cfg_scale == 1.0:
        return v_v, v_a
    u_v, u_a = model.forward(vseq, aseq, guidance.uncond_id, strength, audio_strength, validate=False)
    v_v = cfg_combine(v_v, u_v.data, guidance.cfg_scale)
    if v_a is not None:
        v_a = cfg_combine(v_a, u_a.data, guidance.cfg_scale)
    return v_v, v_a
