"""Procedural paired (control, target) samples with analytic ground truth.

Scenes are a few flat-coloured shapes moving along linear + sinusoidal
paths while their size pulses.  Every control is derived from the same
scene description, so pairing is exact and every annotation is known.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .canvas import FILL_COLOR, Canvas, composite_controls, encode_mask_region
from .codec import read_audio_csv, read_ppm_frames, write_audio_csv, write_ppm_frames
from .errors import ConfigError

SHAPE_KINDS = ("circle", "square", "triangle")

# modality -> downscale factor of its canvas
MODALITIES = {
    "depth": 2,
    "edges": 2,
    "inpaint": 1,
    "tracks": 2,
    "shifted_view": 1,
    "composite": 2,
    "audio_intensity": 1,
    "talking": 2,
}
VIDEO_MODALITIES = ("depth", "edges", "inpaint", "tracks", "shifted_view", "composite")
TALKING_COND = 5
AUDIO_RATIO = 2
AUDIO_FEATURES = 8
AUDIO_GAIN = 3.0  # visible-area fraction -> energy
MIN_COLOR_GAP = 0.25


@dataclass
class ShapeSpec:
    kind: str
    color: tuple[float, float, float]
    radius: float
    x0: float
    y0: float
    vx: float = 0.0
    vy: float = 0.0
    amp_x: float = 0.0
    amp_y: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    growth: float = 0.0
    pulse_amp: float = 0.0
    pulse_omega: float = 0.0
    pulse_phase: float = 0.0
    layer: int = 0

    def center(self, t: float) -> tuple[float, float]:
        s = math.sin(self.omega * t + self.phase)
        return self.x0 + self.vx * t + self.amp_x * s, self.y0 + self.vy * t + self.amp_y * s

    def size(self, t: float) -> float:
        return self.radius + self.growth * t + self.radius * self.pulse_amp * math.sin(self.pulse_omega * t + self.pulse_phase)


@dataclass
class SceneSpec:
    seed: int
    dims: tuple[int, int, int]
    background: tuple[float, float, float]
    shapes: list[ShapeSpec] = field(default_factory=list)
    audio_pattern: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        shapes = [ShapeSpec(**{**s, "color": tuple(s["color"])}) for s in d["shapes"]]
        return cls(int(d["seed"]), tuple(d["dims"]), tuple(d["background"]), shapes, tuple(d.get("audio_pattern", ())))


@dataclass
class Annotations:
    labels: np.ndarray  # (T, H, W) int, 0 = background, i+1 = shape i
    depth_rank: np.ndarray  # (T, H, W) int, 0 = background, larger = nearer
    edges: np.ndarray  # (T, H, W) bool, 1-px label boundaries
    tracks: np.ndarray  # (T, n, 2) float (x, y) centres
    n_shapes: int


@dataclass
class Sample:
    target_video: np.ndarray
    target_audio: np.ndarray
    canvas: Canvas | None
    modality: str
    cond_id: int
    seed: int
    scene: dict
    audio_canvas: Canvas | None = None


# ------------------------------------------------------------ scene sampling

def _quantize(c) -> tuple[float, float, float]:
    return tuple(float(np.float32(round(v * 255) / 255)) for v in c)


def _distinct_colors(rng: np.random.Generator, n: int) -> list[tuple[float, float, float]]:
    colors = [_quantize(rng.uniform(0.0, 0.3, 3))]
    while len(colors) < n + 1:
        c = _quantize(rng.uniform(0.15, 1.0, 3))
        if all(max(abs(a - b) for a, b in zip(c, o)) >= MIN_COLOR_GAP for o in colors):
            colors.append(c)
    return colors


def _fits(shape: ShapeSpec, dims, margin: float = 1.0) -> bool:
    T, H, W = dims
    for t in np.linspace(0, T - 1, 4 * T):
        cx, cy = shape.center(float(t))
        r = shape.size(float(t))
        if r <= 0.5 or cx - r < margin or cy - r < margin or cx + r > W - margin or cy + r > H - margin:
            return False
    return True


def random_scene(seed: int, dims=(8, 32, 32), n_shapes: int | None = None) -> SceneSpec:
    rng = np.random.default_rng(seed)
    T, H, W = dims
    n = int(rng.integers(1, 5)) if n_shapes is None else int(n_shapes)
    if not 0 <= n <= 4:
        raise ConfigError(f"shape count must be 0..4, got {n}")
    colors = _distinct_colors(rng, n)
    layers = rng.permutation(n)
    shapes = []
    scale = min(H, W)
    for i in range(n):
        for _ in range(200):
            r = float(rng.uniform(scale / 10, scale / 5.5))
            s = ShapeSpec(
                kind=SHAPE_KINDS[int(rng.integers(0, 3))],
                color=colors[i + 1],
                radius=r,
                x0=float(rng.uniform(r + 2, W - r - 2)),
                y0=float(rng.uniform(r + 2, H - r - 2)),
                vx=float(rng.uniform(-1.0, 1.0)) * scale / 32,
                vy=float(rng.uniform(-1.0, 1.0)) * scale / 32,
                amp_x=float(rng.uniform(0, 2.0)) * scale / 32,
                amp_y=float(rng.uniform(0, 2.0)) * scale / 32,
                omega=float(rng.uniform(0.3, 1.2)),
                phase=float(rng.uniform(0, 2 * math.pi)),
                pulse_amp=float(rng.uniform(0.15, 0.4)),
                pulse_omega=float(rng.uniform(0.5, 1.5)),
                pulse_phase=float(rng.uniform(0, 2 * math.pi)),
                layer=int(layers[i]),
            )
            if _fits(s, dims):
                break
            # fall back to a static shape that surely fits
            s.vx = s.vy = s.amp_x = s.amp_y = 0.0
            s.x0, s.y0 = float(np.clip(s.x0, r * 1.5 + 1, W - r * 1.5 - 1)), float(np.clip(s.y0, r * 1.5 + 1, H - r * 1.5 - 1))
            if _fits(s, dims):
                break
        shapes.append(s)
    freq = float(rng.uniform(0.5, 2.0))
    ph = float(rng.uniform(0, 2 * math.pi))
    k = np.arange(AUDIO_FEATURES)
    pattern = tuple(float(v) for v in (0.55 + 0.45 * np.cos(2 * math.pi * freq * k / AUDIO_FEATURES + ph)).astype(np.float32))
    return SceneSpec(int(seed), tuple(dims), colors[0], shapes, pattern)


# ---------------------------------------------------------------- rendering

def _shape_mask(shape: ShapeSpec, t: float, H: int, W: int) -> np.ndarray:
    cx, cy = shape.center(t)
    r = shape.size(t)
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    if shape.kind == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.kind == "square":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    if shape.kind == "triangle":
        top = cy - r
        return (py >= top) & (py <= cy + r) & (np.abs(px - cx) <= (py - top) / 2.0)
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def label_frame(scene: SceneSpec, t: float) -> np.ndarray:
    _, H, W = scene.dims
    labels = np.zeros((H, W), np.int64)
    for i in sorted(range(len(scene.shapes)), key=lambda j: scene.shapes[j].layer):
        labels[_shape_mask(scene.shapes[i], t, H, W)] = i + 1
    return labels


def edge_map(labels: np.ndarray) -> np.ndarray:
    """1-px boundaries: a pixel whose label differs from its right or lower neighbour."""
    e = np.zeros(labels.shape, bool)
    e[..., :, :-1] |= labels[..., :, :-1] != labels[..., :, 1:]
    e[..., :-1, :] |= labels[..., :-1, :] != labels[..., 1:, :]
    return e


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, Annotations]:
    T, H, W = scene.dims
    for i, s in enumerate(scene.shapes):
        if not _fits(s, scene.dims, margin=0.0):
            raise ConfigError(f"shape {i} leaves the frame")
    labels = np.stack([label_frame(scene, float(t)) for t in range(T)])
    palette = np.array([scene.background] + [s.color for s in scene.shapes], dtype=np.float32)
    clip = palette[labels]
    order = np.argsort([s.layer for s in scene.shapes])
    rank_of = np.zeros(len(scene.shapes) + 1, np.int64)
    rank_of[order + 1] = np.arange(1, len(scene.shapes) + 1)
    depth = rank_of[labels]
    tracks = np.array([[s.center(float(t)) for s in scene.shapes] for t in range(T)], dtype=np.float64).reshape(T, len(scene.shapes), 2)
    return clip, Annotations(labels, depth, edge_map(labels), tracks, len(scene.shapes))


# ------------------------------------------------------------------ controls

def downscale_mean(clip: np.ndarray, d: int) -> np.ndarray:
    if d == 1:
        return clip.copy()
    T, H, W, C = clip.shape
    return clip.reshape(T, H // d, d, W // d, d, C).mean(axis=(2, 4), dtype=np.float64).astype(np.float32)


def random_mask(rng: np.random.Generator, H: int, W: int, free_form: bool | None = None) -> tuple[np.ndarray, float]:
    """Rectangular or free-form mask covering 10-60% of the frame.

    Returns the mask and its exact area fraction.
    """
    if free_form is None:
        free_form = bool(rng.integers(0, 2))
    total = H * W
    for _ in range(1000):
        if not free_form:
            f = rng.uniform(0.10, 0.60)
            aspect = rng.uniform(0.5, 2.0)
            h = int(np.clip(round(math.sqrt(f * total * aspect)), 1, H))
            w = int(np.clip(round(f * total / h), 1, W))
            y = int(rng.integers(0, H - h + 1))
            x = int(rng.integers(0, W - w + 1))
            m = np.zeros((H, W), bool)
            m[y : y + h, x : x + w] = True
        else:
            f = rng.uniform(0.10, 0.55)
            m = np.zeros((H, W), bool)
            ys, xs = np.mgrid[0:H, 0:W]
            br = max(H, W) / 10.0
            cx, cy = rng.uniform(0, W), rng.uniform(0, H)
            while m.mean() < f:
                m |= (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= br * br
                ang = rng.uniform(0, 2 * math.pi)
                cx = float(np.clip(cx + br * math.cos(ang), 0, W))
                cy = float(np.clip(cy + br * math.sin(ang), 0, H))
        frac = float(m.sum()) / total
        if 0.10 <= frac <= 0.60:
            return m, frac
    raise RuntimeError("could not draw a mask in the 10-60% area range")


def depth_image(ann: Annotations) -> np.ndarray:
    """Grey levels rank / n_shapes (background black; nearer is lighter)."""
    g = ann.depth_rank.astype(np.float32) / max(ann.n_shapes, 1)
    return np.repeat(g[..., None], 3, axis=-1)


def track_dots(scene: SceneSpec, ann: Annotations, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Coloured dots at shape centres on black, at the canvas resolution."""
    T, H, W = scene.dims
    h, w = H // d, W // d
    out = np.zeros((T, h, w, 3), np.float32)
    mask = np.zeros((T, h, w), bool)
    ys, xs = np.mgrid[0:h, 0:w]
    for t in range(T):
        for i, s in enumerate(scene.shapes):
            cx, cy = ann.tracks[t, i] / d
            m = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= 1.0
            out[t][m] = s.color
            mask[t] |= m
    return out, mask


def shift_clip(clip: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    """Translate frames by (dx, dy) pixels; uncovered pixels take ``fill``."""
    T, H, W, C = clip.shape
    out = np.empty_like(clip)
    out[...] = np.asarray(fill, dtype=clip.dtype)
    ys_dst = slice(max(dy, 0), H + min(dy, 0))
    xs_dst = slice(max(dx, 0), W + min(dx, 0))
    ys_src = slice(max(-dy, 0), H + min(-dy, 0))
    xs_src = slice(max(-dx, 0), W + min(-dx, 0))
    out[:, ys_dst, xs_dst] = clip[:, ys_src, xs_src]
    return out


def _control_rng(scene: SceneSpec, kind: str) -> np.random.Generator:
    return np.random.default_rng([scene.seed, sum(map(ord, kind))])


def make_control(
    scene: SceneSpec,
    kind: str,
    clip: np.ndarray | None = None,
    ann: Annotations | None = None,
    downscale: int | None = None,
) -> Canvas:
    """Control canvas for ``kind``; ``downscale`` overrides the kind's default factor."""
    if kind not in MODALITIES or kind in ("talking",):
        raise ConfigError(f"unknown control kind {kind!r}")
    if clip is None or ann is None:
        clip, ann = render_scene(scene)
    d = MODALITIES[kind] if downscale is None else int(downscale)
    T, H, W = scene.dims
    rng = _control_rng(scene, kind)
    if kind == "depth":
        return Canvas(downscale_mean(depth_image(ann), d), d, kind)
    if kind == "edges":
        e = np.repeat(ann.edges[..., None].astype(np.float32), 3, axis=-1)
        return Canvas(downscale_mean(e, d), d, kind)
    if kind == "inpaint":
        m, frac = random_mask(rng, H, W)
        c = Canvas(downscale_mean(encode_mask_region(clip, m), d), d, kind)
        c.mask = np.broadcast_to(m, (T, H, W)).copy()
        c.meta["mask_fraction"] = frac
        return c
    if kind == "tracks":
        dots, _ = track_dots(scene, ann, d)
        return Canvas(dots, d, kind)
    if kind == "shifted_view":
        lo, hi = H // 8, H // 4
        dx, dy = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        c = Canvas(downscale_mean(shift_clip(clip, dx, dy, scene.background), d), d, kind)
        c.meta["shift"] = (dx, dy)
        return c
    if kind == "composite":
        m, frac = random_mask(rng, H, W)
        masked_depth = downscale_mean(encode_mask_region(depth_image(ann), m), d)
        dots, dot_mask = track_dots(scene, ann, d)
        c = composite_controls([(masked_depth, None), (dots, dot_mask)], d, kind)
        c.mask = np.broadcast_to(m, (T, H, W)).copy()
        c.meta["mask_fraction"] = frac
        return c
    if kind == "audio_intensity":
        _, control = make_audio(scene)
        return Canvas(control, 1, kind)
    raise ConfigError(f"unknown control kind {kind!r}")


# --------------------------------------------------------------------- audio

def visible_area(scene: SceneSpec, t: float) -> float:
    return float((label_frame(scene, t) > 0).mean())


def audio_envelope(frames: np.ndarray) -> np.ndarray:
    """RMS over feature dims per frame."""
    f = np.asarray(frames, dtype=np.float64)
    return np.sqrt((f * f).mean(axis=1))


def make_audio(scene: SceneSpec, ratio: int = AUDIO_RATIO) -> tuple[np.ndarray, np.ndarray]:
    """Target features whose energy tracks on-screen area, and the control:
    the target's energy envelope broadcast over all feature dims."""
    T = scene.dims[0]
    ta = T * ratio
    pattern = np.asarray(scene.audio_pattern or (1.0,) * AUDIO_FEATURES, dtype=np.float64)
    energy = np.array([min(1.0, AUDIO_GAIN * visible_area(scene, j / ratio)) for j in range(ta)])
    target = (energy[:, None] * pattern[None, :]).astype(np.float32)
    env = audio_envelope(target)
    control = np.repeat(env[:, None], pattern.size, axis=1).astype(np.float32)
    return target, control


# ------------------------------------------------------------ talking boxes

def talking_schedule(rng: np.random.Generator, k: int, T: int, turn_taking: bool = True) -> np.ndarray:
    """(k, T) bool activity; turn-taking schedules never overlap."""
    if k == 1:
        return np.ones((1, T), bool)
    act = np.zeros((k, T), bool)
    if turn_taking:
        t = 0
        who = int(rng.integers(0, k))
        while t < T:
            run = int(rng.integers(2, max(3, T // 2) + 1))
            act[who, t : t + run] = True
            t += run
            who = (who + int(rng.integers(1, k))) % k
    else:
        act = rng.random((k, T)) < 0.5
    return act


def band_table(k: int, features: int = AUDIO_FEATURES) -> list[np.ndarray]:
    """Feature-index band owned by each speaker."""
    width = features // 4
    return [np.arange(i * width, (i + 1) * width) for i in range(k)]


def make_talking_boxes(seed: int, k: int, dims=(8, 32, 32), turn_taking: bool = True, ratio: int = AUDIO_RATIO) -> Sample:
    if not 1 <= k <= 4:
        raise ConfigError(f"speaker count must be 1..4, got {k}")
    rng = np.random.default_rng(seed)
    T, H, W = dims
    colors = _distinct_colors(rng, k)
    act = talking_schedule(rng, k, T, turn_taking)
    r = min(H, W) / 8
    shapes = []
    for i in range(k):
        cx = (i + 0.5) * W / k
        shapes.append(ShapeSpec("circle", colors[i + 1], r, cx, H / 2, layer=i))
    scene = SceneSpec(int(seed), tuple(dims), colors[0], shapes, ())
    video = np.empty((T, H, W, 3), np.float32)
    video[...] = scene.background
    box = np.zeros((T, H, W, 3), np.float32)
    gray = np.float32(0.5)
    for t in range(T):
        for i, s in enumerate(shapes):
            pulse = 1.0 + (0.35 * math.sin(2.2 * t + i) + 0.25 if act[i, t] else 0.0)
            s_t = ShapeSpec("circle", s.color, s.radius * pulse, s.x0, s.y0)
            video[t][_shape_mask(s_t, 0.0, H, W)] = s.color
            y0, y1 = int(H / 2 - 1.5 * r), int(H / 2 + 1.5 * r)
            x0, x1 = int(s.x0 - 1.5 * r), int(s.x0 + 1.5 * r)
            box[t, y0:y1, max(x0, 0):x1] = s.color if act[i, t] else gray
    bands = band_table(k)
    ta = T * ratio
    audio = np.zeros((ta, AUDIO_FEATURES), np.float32)
    for j in range(ta):
        t = j // ratio
        for i in range(k):
            if act[i, t]:
                audio[j, bands[i]] += np.float32(0.8)
    d = MODALITIES["talking"]
    canvas = Canvas(downscale_mean(box, d), d, "talking")
    canvas.meta["activity"] = act
    return Sample(video, audio, canvas, "talking", TALKING_COND, int(seed), scene.to_dict(), Canvas(audio.copy(), 1, "talking_audio"))


# ------------------------------------------------------------------- samples

def make_sample(modality: str, seed: int, dims=(8, 32, 32), n_shapes: int | None = None) -> Sample:
    if modality not in MODALITIES and modality != "none":
        raise ConfigError(f"unknown modality {modality!r}; choose from {sorted(MODALITIES)}")
    if modality == "talking":
        k = int(np.random.default_rng(seed).integers(1, 5))
        return make_talking_boxes(seed, k, dims)
    scene = random_scene(seed, dims, n_shapes)
    clip, ann = render_scene(scene)
    audio, _ = make_audio(scene)
    canvas = None
    audio_canvas = None
    if modality == "audio_intensity":
        audio_canvas = make_control(scene, modality, clip, ann)
    elif modality != "none":
        canvas = make_control(scene, modality, clip, ann)
    return Sample(clip, audio, canvas, modality, max(1, len(scene.shapes)), int(seed), scene.to_dict(), audio_canvas)


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def generate_dataset(out: str | Path, modality: str, count: int, seed: int = 42, dims=(8, 32, 32)) -> Path:
    """Write ``count`` samples plus ``manifest.json`` under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        s = make_sample(modality, sample_seed(seed, i), dims)
        sid = f"{i:05d}"
        base = out / sid
        paths = {
            "target_video": f"{sid}/target",
            "target_audio": f"{sid}/target/audio.csv",
        }
        write_ppm_frames(s.target_video, base / "target")
        write_audio_csv(s.target_audio, base / "target" / "audio.csv")
        if s.canvas is not None:
            write_ppm_frames(s.canvas.content, base / "canvas")
            paths["canvas_video"] = f"{sid}/canvas"
        if s.audio_canvas is not None:
            write_audio_csv(s.audio_canvas.content, base / "canvas" / "audio.csv")
            paths["canvas_audio"] = f"{sid}/canvas/audio.csv"
        entries.append({
            "id": sid,
            "seed": s.seed,
            "modality": modality,
            "d": MODALITIES.get(modality, 1),
            "cond_id": s.cond_id,
            "paths": paths,
            "scene": s.scene,
        })
    manifest = {"modality": modality, "count": count, "seed": seed, "dims": list(dims), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_manifest(root: str | Path) -> dict:
    root = Path(root)
    return json.loads((root / "manifest.json").read_text())


def load_sample(root: str | Path, entry: dict) -> Sample:
    root = Path(root)
    p = entry["paths"]
    video = read_ppm_frames(root / p["target_video"])
    audio = read_audio_csv(root / p["target_audio"])
    d = int(entry["d"])
    canvas = Canvas(read_ppm_frames(root / p["canvas_video"]), d, entry["modality"]) if "canvas_video" in p else None
    if canvas is not None and entry["modality"] in ("inpaint", "composite"):
        # the fill mask is not stored; it is regenerated from the scene
        canvas.mask = make_control(SceneSpec.from_dict(entry["scene"]), entry["modality"], downscale=d).mask
    audio_canvas = Canvas(read_audio_csv(root / p["canvas_audio"]), 1, entry["modality"]) if "canvas_audio" in p else None
    return Sample(video, audio, canvas, entry["modality"], int(entry["cond_id"]), int(entry["seed"]), entry["scene"], audio_canvas)


def load_dataset(root: str | Path) -> list[Sample]:
    manifest = load_manifest(root)
    return [load_sample(root, e) for e in manifest["samples"]]


def make_joint_sample(seed: int, video_kind: str = "edges", dims=(8, 32, 32)) -> Sample:
    """One scene with a video control and the audio-intensity control."""
    if video_kind not in VIDEO_MODALITIES:
        raise ConfigError(f"{video_kind!r} is not a video control")
    scene = random_scene(seed, dims)
    clip, ann = render_scene(scene)
    audio, _ = make_audio(scene)
    canvas = make_control(scene, video_kind, clip, ann)
    audio_canvas = make_control(scene, "audio_intensity", clip, ann)
    return Sample(clip, audio, canvas, f"{video_kind}+audio_intensity", max(1, len(scene.shapes)), int(seed),
                  scene.to_dict(), audio_canvas)
