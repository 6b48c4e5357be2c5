"""Attention cost of the reference canvas at different downscale factors."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .canvas import build_layout
from .model import DiT, ModelConfig
from .tensor import Tensor

FLOP_CONSTANT = 4  # QK^T and AV, two flops per multiply-add
REPORTED_SPEEDUP = {2: (25.0, 35.0), 4: (35.0, 50.0)}  # percent, hardware-specific


@dataclass
class GridRow:
    d: int
    n_gen: int
    n_ref: int
    n_total: int
    median_s: float
    flops: float
    speedup_pct: float
    reported_pct: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def expected_counts(dims, patch, d: int) -> tuple[int, int]:
    T, H, W = dims
    pt, ph, pw = patch
    n_gen = (T // pt) * (H // ph) * (W // pw)
    return n_gen, n_gen // (d * d)


def modeled_flops(n_total: int, width: int) -> float:
    return float(FLOP_CONSTANT * n_total * n_total * width)


def time_attention(model: DiT, n_tokens_coords: np.ndarray, reps: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((len(n_tokens_coords), model.config.width)), dtype=model.dtype)
    for _ in range(3):
        model.joint_attention("blocks.0.video.sa", x, n_tokens_coords, None)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.joint_attention("blocks.0.video.sa", x, n_tokens_coords, None)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_grid(
    dims=(8, 32, 32),
    patch=(1, 4, 4),
    d_values=(1, 2, 4),
    reps: int = 20,
    config: ModelConfig | None = None,
) -> list[GridRow]:
    """Median wall time of one joint-attention layer over GEN+REF tokens per ``d``.

    Runs sequentially in the calling thread.
    """
    reps = max(int(reps), 20)
    cfg = config or ModelConfig(patch=tuple(patch))
    model = DiT.init(cfg, seed=0)
    rows = []
    for d in d_values:
        lay = build_layout(tuple(dims), tuple(patch), d)
        coords = np.concatenate([lay.gen_coords, lay.ref_coords])
        rows.append(GridRow(d, lay.n_gen, lay.n_ref, lay.n_total, time_attention(model, coords, reps),
                            modeled_flops(lay.n_total, cfg.width), 0.0, ""))
    base = next((r for r in rows if r.d == 1), None)
    for r in rows:
        if base is not None and r is not base:
            r.speedup_pct = 100.0 * (1.0 - r.median_s / base.median_s)
        lo_hi = REPORTED_SPEEDUP.get(r.d)
        r.reported_pct = f"{lo_hi[0]:.0f}-{lo_hi[1]:.0f}" if lo_hi else ""
    return rows
