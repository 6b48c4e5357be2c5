"""Parallel-canvas construction: layouts, compositing, mask fill, assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import audio_tokenize, grid_dims, patchify
from .errors import ConfigError, ShapeError
from .sequence import Segment, StrengthField, TokenSequence

FILL_HEX = "#66FF00"
FILL_COLOR = np.array([0x66, 0xFF, 0x00], dtype=np.float32) / 255.0

LAYOUT_MODES = ("parallel_canvas", "spatial_concat")


@dataclass
class Canvas:
    """A control signal ready to be tokenised as reference tokens."""

    content: np.ndarray  # (T, H/d, W/d, 3) video or (Ta, F) audio
    downscale: int = 1
    kind: str = "control"
    fill_color: tuple[float, float, float] = tuple(FILL_COLOR.tolist())
    mask: np.ndarray | None = None  # (T, H, W) filled region at target resolution
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.downscale not in (1, 2, 4):
            raise ConfigError(f"downscale must be 1, 2 or 4, got {self.downscale}")

    @property
    def is_audio(self) -> bool:
        return self.content.ndim == 2

    def check_target(self, dims: tuple[int, int, int]) -> None:
        if self.is_audio:
            return
        T, H, W = dims
        d = self.downscale
        want = (T, H // d, W // d, 3)
        if self.content.shape != want:
            raise ShapeError(f"canvas of kind {self.kind!r} has shape {self.content.shape}, expected {want} for d={d}")


@dataclass
class SequenceLayout:
    dims: tuple[int, int, int]
    patch: tuple[int, int, int]
    downscale: int
    mode: str
    gen_coords: np.ndarray  # (N_gen, 3)
    ref_coords: np.ndarray  # (N_ref, 3)

    @property
    def n_gen(self) -> int:
        return self.gen_coords.shape[0]

    @property
    def n_ref(self) -> int:
        return self.ref_coords.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_gen + self.n_ref

    @property
    def gen_range(self) -> tuple[int, int]:
        return 0, self.n_gen

    @property
    def ref_range(self) -> tuple[int, int]:
        return self.n_gen, self.n_total

    @property
    def grid(self) -> tuple[int, int, int]:
        return grid_dims(self.dims, self.patch)


def _grid_coords(nt: int, nh: int, nw: int) -> np.ndarray:
    ti, hi, wi = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    return np.stack([ti.ravel(), hi.ravel(), wi.ravel()], axis=1).astype(np.float64)


def build_layout(
    dims: tuple[int, int, int],
    patch: tuple[int, int, int],
    downscale: int = 1,
    mode: str = "parallel_canvas",
    with_reference: bool = True,
) -> SequenceLayout:
    """Coordinates for generation tokens followed by reference tokens.

    A reference token on the downscaled grid at cell ``(t, i, j)`` sits at the
    centre of the ``d x d`` block of target tokens it covers:
    ``(t, (i + 0.5) d - 0.5, (j + 0.5) d - 0.5)``.  In ``spatial_concat`` mode
    the reference grid is instead placed beside the target (width + W).
    """
    if mode not in LAYOUT_MODES:
        raise ConfigError(f"unknown layout mode {mode!r}; expected one of {LAYOUT_MODES}")
    d = int(downscale)
    if d not in (1, 2, 4):
        raise ConfigError(f"downscale must be 1, 2 or 4, got {d}")
    T, H, W = dims
    pt, ph, pw = patch
    if H % (d * ph) or W % (d * pw):
        raise ShapeError(f"target {H}x{W} not divisible by d*patch = {d * ph}x{d * pw}")
    nt, nh, nw = grid_dims(dims, patch)
    gen = _grid_coords(nt, nh, nw)
    if not with_reference:
        return SequenceLayout(tuple(dims), tuple(patch), d, mode, gen, np.zeros((0, 3)))
    ref = _grid_coords(nt, nh // d, nw // d)
    ref[:, 1] = (ref[:, 1] + 0.5) * d - 0.5
    ref[:, 2] = (ref[:, 2] + 0.5) * d - 0.5
    if mode == "spatial_concat":
        ref[:, 2] += nw
    return SequenceLayout(tuple(dims), tuple(patch), d, mode, gen, ref)


def composite_controls(layers, downscale: int = 1, kind: str = "composite") -> Canvas:
    """Overlay ``(clip, mask)`` layers in order; later layers win where mask is 1.

    The first layer is the base; its mask is ignored.
    """
    layers = list(layers)
    if not layers:
        raise ConfigError("composite_controls needs at least one layer")
    base = np.array(layers[0][0], copy=True)
    for clip, mask in layers[1:]:
        clip = np.asarray(clip)
        if clip.shape != base.shape:
            raise ShapeError(f"layer shape {clip.shape} differs from base {base.shape}")
        m = _mask_for(mask, base.shape)
        base[m] = clip[m]
    return Canvas(base, downscale, kind)


def _mask_for(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ConfigError("masks must be binary")
        m = m.astype(bool)
    try:
        return np.broadcast_to(m, shape[:-1])
    except ValueError:
        raise ShapeError(f"mask shape {m.shape} incompatible with clip {shape}") from None


def encode_mask_region(clip: np.ndarray, mask, fill_color=FILL_COLOR) -> np.ndarray:
    """Copy of ``clip`` with masked pixels set to the fill colour (#66FF00)."""
    out = np.array(clip, copy=True)
    m = _mask_for(mask, out.shape)
    out[m] = np.asarray(fill_color, dtype=out.dtype)
    return out


def assemble(
    gen_features: np.ndarray,
    layout: SequenceLayout,
    canvas: Canvas | None = None,
    strength: StrengthField | None = None,
    t: float = 1.0,
) -> tuple[TokenSequence, np.ndarray]:
    """Concatenate generation tokens with the canvas' reference tokens.

    Returns the sequence and one effective strength per generation token.
    No alignment between canvas and target content is required.
    """
    strength = strength or StrengthField()
    n_gen = layout.n_gen
    gen_features = np.asarray(gen_features)
    if gen_features.shape[0] != n_gen:
        raise ShapeError(f"{gen_features.shape[0]} generation tokens for a layout of {n_gen}")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"timestep {t} outside [0, 1]")
    gen = TokenSequence(gen_features, layout.gen_coords, np.full(n_gen, float(t)), np.full(n_gen, int(Segment.GEN_VIDEO)))
    eff = strength.resolve(n_gen)
    if canvas is None:
        return gen, eff
    canvas.check_target(layout.dims)
    if canvas.downscale != layout.downscale:
        raise ConfigError(f"canvas downscale {canvas.downscale} != layout downscale {layout.downscale}")
    ref_feats = patchify(canvas.content.astype(gen_features.dtype, copy=False), layout.patch).features
    if ref_feats.shape[0] != layout.n_ref:
        raise ShapeError(f"canvas yields {ref_feats.shape[0]} tokens, layout expects {layout.n_ref}")
    ref = TokenSequence(ref_feats, layout.ref_coords, np.zeros(layout.n_ref), np.full(layout.n_ref, int(Segment.REF_VIDEO)))
    seq = TokenSequence.concat(gen, ref)
    seq.validate()
    return seq, eff


def assemble_audio(
    gen_features: np.ndarray,
    canvas: Canvas | None = None,
    group: int = 1,
    t: float = 1.0,
) -> TokenSequence:
    """Audio analogue of :func:`assemble`; reference audio shares the target's time coordinates."""
    n = gen_features.shape[0]
    coords = np.zeros((n, 3))
    coords[:, 0] = np.arange(n)
    gen = TokenSequence(gen_features, coords, np.full(n, float(t)), np.full(n, int(Segment.GEN_AUDIO)))
    if canvas is None:
        return gen
    if not canvas.is_audio:
        raise ConfigError("audio assembly needs an audio canvas")
    grid = audio_tokenize(canvas.content.astype(gen_features.dtype, copy=False), group)
    ref = TokenSequence(grid.features, grid.coords.astype(np.float64), np.zeros(len(grid.features)),
                        np.full(len(grid.features), int(Segment.REF_AUDIO)))
    seq = TokenSequence.concat(gen, ref)
    seq.validate()
    return seq
