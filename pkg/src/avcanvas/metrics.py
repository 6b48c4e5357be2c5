"""Control-fidelity metrics against analytic ground truth."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage, stats

from .synth import Annotations, SceneSpec, audio_envelope, edge_map

EDGE_TAU = 0.12
FG_TAU = 0.12
TRACK_TAU = 0.15
PSNR_CAP = 100.0


def annotations_from_target(target: np.ndarray, scene: SceneSpec) -> Annotations:
    """Recover exact annotations from a rendered clip by palette lookup."""
    palette = np.array([scene.background] + [s.color for s in scene.shapes], dtype=np.float32)
    dist = np.abs(target[..., None, :] - palette).max(axis=-1)
    labels = dist.argmin(axis=-1)
    n = len(scene.shapes)
    order = np.argsort([s.layer for s in scene.shapes])
    rank_of = np.zeros(n + 1, np.int64)
    rank_of[order + 1] = np.arange(1, n + 1)
    tracks = np.full((target.shape[0], n, 2), np.nan)
    for t in range(target.shape[0]):
        for i in range(n):
            ys, xs = np.nonzero(labels[t] == i + 1)
            if ys.size:
                tracks[t, i] = xs.mean() + 0.5, ys.mean() + 0.5
    return Annotations(labels, rank_of[labels], edge_map(labels), tracks, n)


def video_edges(video: np.ndarray, tau: float = EDGE_TAU) -> np.ndarray:
    """Pixels whose colour differs from the right or lower neighbour by more than tau."""
    v = np.asarray(video, dtype=np.float32)
    e = np.zeros(v.shape[:-1], bool)
    e[..., :, :-1] |= np.abs(v[..., :, :-1, :] - v[..., :, 1:, :]).max(axis=-1) > tau
    e[..., :-1, :] |= np.abs(v[..., :-1, :, :] - v[..., 1:, :, :]).max(axis=-1) > tau
    return e


def _dilate(mask: np.ndarray, tol: int) -> np.ndarray:
    if tol <= 0:
        return mask
    # square window in the last two axes only
    shape = (1,) * (mask.ndim - 2) + (2 * tol + 1, 2 * tol + 1)
    return ndimage.binary_dilation(mask, structure=np.ones(shape, bool))


def edge_f1(pred: np.ndarray, gt: np.ndarray, tol: int = 1) -> float:
    """F1 of two edge maps, matching within ``tol`` pixels (Chebyshev) per frame."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    precision = float((pred & _dilate(gt, tol)).sum()) / pred.sum()
    recall = float((gt & _dilate(pred, tol)).sum()) / gt.sum()
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def foreground(video: np.ndarray, tau: float = FG_TAU) -> np.ndarray:
    """Pixels far from the frame's background colour (median of the border ring)."""
    v = np.asarray(video, dtype=np.float32)
    ring = np.concatenate([v[:, 0], v[:, -1], v[:, 1:-1, 0], v[:, 1:-1, -1]], axis=1)
    bg = np.median(ring, axis=1)
    return np.abs(v - bg[:, None, None, :]).max(axis=-1) > tau


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum()) / union


def silhouette_iou(video: np.ndarray, ann: Annotations, tau: float = FG_TAU) -> float:
    return iou(foreground(video, tau), ann.labels > 0)


def spearman(a, b) -> float:
    """Rank correlation; 0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.spearmanr(a, b).statistic)


def depth_proxy(video: np.ndarray, scene: SceneSpec) -> np.ndarray:
    """Per-pixel depth rank read off the nearest scene colour."""
    return annotations_from_target(np.asarray(video, np.float32), scene).depth_rank


def depth_spearman(depth_map: np.ndarray, ann: Annotations) -> float:
    """Spearman between per-region means of ``depth_map`` and the true region ranks."""
    labels = ann.labels.ravel()
    vals = np.asarray(depth_map, dtype=np.float64).ravel()
    regions = np.unique(labels)
    means = ndimage.mean(vals, labels=labels, index=regions)
    ranks = ndimage.mean(ann.depth_rank.ravel().astype(np.float64), labels=labels, index=regions)
    return spearman(means, ranks)


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR over pixels where ``mask`` is True (all pixels if None); capped."""
    err = (np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    if err.size == 0:
        return PSNR_CAP
    mse = float(err.mean())
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10 * math.log10(1.0 / mse))))


def track_error(video: np.ndarray, ann: Annotations, scene: SceneSpec, tau: float = TRACK_TAU) -> float:
    """Mean px distance between visible-shape centroids in ``video`` and in ground truth.

    A shape that is visible in ground truth but absent from ``video`` costs
    half the frame diagonal.
    """
    T, H, W = ann.labels.shape
    penalty = 0.5 * math.hypot(H, W)
    v = np.asarray(video, np.float32)
    errs = []
    for i, s in enumerate(scene.shapes):
        near = np.abs(v - np.asarray(s.color, np.float32)).max(axis=-1) <= tau
        for t in range(T):
            gt = ann.tracks[t, i]
            if np.isnan(gt).any():
                continue
            ys, xs = np.nonzero(near[t])
            if ys.size == 0:
                errs.append(penalty)
                continue
            errs.append(math.hypot(xs.mean() + 0.5 - gt[0], ys.mean() + 0.5 - gt[1]))
    return float(np.mean(errs)) if errs else 0.0


def envelope_spearman(audio: np.ndarray, control: np.ndarray) -> float:
    return spearman(audio_envelope(audio), audio_envelope(control))


def video_metrics(video: np.ndarray, target: np.ndarray, scene: SceneSpec, mask: np.ndarray | None = None) -> dict:
    """Every video metric for one sample; ``mask`` marks filled pixels (inpainting)."""
    ann = annotations_from_target(target, scene)
    keep = None if mask is None else ~np.asarray(mask, bool)
    return {
        "iou": silhouette_iou(video, ann),
        "edge_f1": edge_f1(video_edges(video), ann.edges),
        "depth_spearman": depth_spearman(depth_proxy(video, scene), ann),
        "psnr_unmasked": psnr(video, target, keep),
        "track_error": track_error(video, ann, scene),
    }
