"""Lossless media <-> token conversion and the on-disk media formats.

Video clips are ``(T, H, W, 3)`` float arrays in [0, 1]; audio is a
``(Ta, F)`` array of feature frames in [-1, 1].  The codec is an exact
patch rearrangement, so every round trip is bitwise.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ShapeError


class TokenGrid(NamedTuple):
    """Flat token features plus the integer grid coordinate of each token."""

    features: np.ndarray  # (N, P)
    coords: np.ndarray  # (N, 3) int


def _check_clip(clip: np.ndarray) -> None:
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ShapeError(f"video clip must be (T, H, W, 3), got {clip.shape}")
    if clip.shape[0] < 1:
        raise ShapeError("video clip needs at least one frame")


def grid_dims(dims: tuple[int, int, int], patch: tuple[int, int, int]) -> tuple[int, int, int]:
    T, H, W = dims
    pt, ph, pw = patch
    if T % pt or H % ph or W % pw:
        raise ShapeError(f"dims {dims} not divisible by patch {patch}")
    return T // pt, H // ph, W // pw


def patchify(clip: np.ndarray, patch: tuple[int, int, int]) -> TokenGrid:
    _check_clip(clip)
    T, H, W, C = clip.shape
    nt, nh, nw = grid_dims((T, H, W), patch)
    pt, ph, pw = patch
    x = clip.reshape(nt, pt, nh, ph, nw, pw, C).transpose(0, 2, 4, 1, 3, 5, 6)
    feats = x.reshape(nt * nh * nw, pt * ph * pw * C)
    ti, hi, wi = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    coords = np.stack([ti.ravel(), hi.ravel(), wi.ravel()], axis=1)
    return TokenGrid(np.ascontiguousarray(feats), coords)


def unpatchify(
    features: np.ndarray,
    coords: np.ndarray,
    dims: tuple[int, int, int],
    patch: tuple[int, int, int],
    channels: int = 3,
) -> np.ndarray:
    """Inverse of :func:`patchify`; token order is irrelevant, coords decide placement."""
    nt, nh, nw = grid_dims(dims, patch)
    pt, ph, pw = patch
    n = nt * nh * nw
    features = np.asarray(features)
    coords = np.asarray(coords)
    if features.shape != (n, pt * ph * pw * channels) or coords.shape != (n, 3):
        raise ShapeError(
            f"expected {n} tokens of length {pt * ph * pw * channels}, "
            f"got features {features.shape} and coords {coords.shape}"
        )
    ci = coords.astype(np.int64)
    if np.any(ci != coords) or np.any(ci < 0) or np.any(ci >= np.array([nt, nh, nw])):
        raise ShapeError("token coordinates outside the patch grid")
    flat = (ci[:, 0] * nh + ci[:, 1]) * nw + ci[:, 2]
    if np.unique(flat).size != n:
        raise ShapeError("duplicate token coordinates")
    grid = np.empty((n, pt * ph * pw * channels), dtype=features.dtype)
    grid[flat] = features
    x = grid.reshape(nt, nh, nw, pt, ph, pw, channels).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x.reshape(nt * pt, nh * ph, nw * pw, channels))


def audio_tokenize(frames: np.ndarray, group: int) -> TokenGrid:
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeError(f"audio frames must be (Ta, F) with Ta >= 1, got {frames.shape}")
    ta, f = frames.shape
    if group < 1 or ta % group:
        raise ShapeError(f"audio length {ta} not divisible by group {group}")
    n = ta // group
    coords = np.zeros((n, 3), dtype=np.int64)
    coords[:, 0] = np.arange(n)
    return TokenGrid(np.ascontiguousarray(frames.reshape(n, group * f)), coords)


def audio_untokenize(features: np.ndarray, coords: np.ndarray, group: int, feature_dim: int) -> np.ndarray:
    features = np.asarray(features)
    n = features.shape[0]
    if features.shape[1] != group * feature_dim:
        raise ShapeError(f"audio token length {features.shape[1]} != {group}*{feature_dim}")
    order = np.asarray(coords)[:, 0].astype(np.int64)
    if sorted(order.tolist()) != list(range(n)):
        raise ShapeError("audio token coordinates are not a permutation of 0..N-1")
    out = np.empty_like(features)
    out[order] = features
    return out.reshape(n * group, feature_dim)


# ------------------------------------------------------------------ file I/O

def write_ppm_frames(clip: np.ndarray, directory: str | Path, prefix: str = "frame") -> list[Path]:
    """Write each frame as binary P6 (8-bit); values are clipped and rounded."""
    _check_clip(clip)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T, H, W, _ = clip.shape
    q = np.clip(np.rint(np.asarray(clip, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    paths = []
    for t in range(T):
        p = directory / f"{prefix}_{t:04d}.ppm"
        with open(p, "wb") as fh:
            fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
            fh.write(q[t].tobytes())
        paths.append(p)
    return paths


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    body = raw[pos + 1 : pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)


def read_ppm_frames(directory: str | Path, prefix: str = "frame") -> np.ndarray:
    paths = sorted(Path(directory).glob(f"{prefix}_*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.ppm frames in {directory}")
    return np.stack([read_ppm(p) for p in paths])


def write_audio_csv(frames: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for row in np.asarray(frames, dtype=np.float32):
            fh.write(",".join(f"{float(v):.9g}" for v in row) + "\n")
    return path


def read_audio_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=np.float32)
