"""Low-rank adapters on named backbone modules.

Patterns select linear layers by module tag (``V.SA``, ``A.CA_V2A``, ...,
or ``ALL``), with shell-style globbing.  The compact notation
``"V: SA, CA, FF"`` is accepted by :func:`parse_modules`.
"""
from __future__ import annotations

import fnmatch
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, CompositionError, ConfigError, ShapeError
from .model import ALL_TAGS, DiT, LoraAdapter
from .tensor import Tensor


@dataclass
class LoraSpec:
    rank: int
    alpha: float | None = None
    patterns: tuple[str, ...] = ("V.SA",)
    lora_strength: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            self.alpha = float(self.rank)
        if isinstance(self.patterns, str):
            self.patterns = parse_modules(self.patterns)
        self.patterns = tuple(self.patterns)
        if not self.patterns:
            raise ConfigError("LoRA spec needs at least one target pattern")
        if not 0.0 <= self.lora_strength <= 1.0:
            raise ConfigError(f"lora_strength must be in [0, 1], got {self.lora_strength}")


@dataclass
class LoraWeights:
    rank: int
    alpha: float
    patterns: tuple[str, ...]
    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A (r, in), B (out, r))
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_adapter(cls, adapter: LoraAdapter, **metadata) -> "LoraWeights":
        factors = {n: (a.data.astype(np.float32), b.data.astype(np.float32)) for n, (a, b) in adapter.factors.items()}
        meta = dict(adapter.metadata)
        meta.update(metadata)
        return cls(adapter.rank, float(adapter.alpha), tuple(adapter.patterns), factors, meta)

    def module_names(self) -> set[str]:
        return set(self.factors)


_SHORT = {"SA": "SA", "CA": "CA", "FF": "FF"}


def parse_modules(text: str) -> tuple[str, ...]:
    """``"V: SA, FF"`` -> ``("V.SA", "V.FF")``; ``"A: SA, FF, V->A CA"`` adds
    ``A.CA_V2A``; ``"All"`` -> ``("ALL",)``.  Already-tagged input passes through."""
    text = text.strip()
    if text.lower() == "all":
        return ("ALL",)
    m = re.fullmatch(r"([VA])\s*:\s*(.+)", text)
    if not m:
        return tuple(p.strip() for p in text.split(",") if p.strip())
    stream, rest = m.groups()
    out = []
    for item in rest.split(","):
        item = item.strip()
        if re.fullmatch(r"V\s*(->|→|\\!?\$?\\to\$?\\!?)\s*A\s*CA", item):
            out.append("A.CA_V2A")
        elif item in _SHORT:
            out.append(f"{stream}.{_SHORT[item]}")
        else:
            raise ConfigError(f"unrecognised module entry {item!r} in {text!r}")
    return tuple(out)


def match_modules(model: DiT, patterns) -> list[str]:
    """Linear names whose tag matches any pattern; each pattern must match."""
    registry = model.module_registry()
    chosen: set[str] = set()
    for pat in patterns:
        if pat.upper() == "ALL":
            hits = set(registry)
        else:
            hits = {n for n, tag in registry.items() if fnmatch.fnmatchcase(tag, pat) or fnmatch.fnmatchcase(n, pat)}
        if not hits:
            raise ConfigError(
                f"LoRA pattern {pat!r} matches no module; available tags: {', '.join(ALL_TAGS)}; "
                f"available names: {', '.join(sorted(registry))}"
            )
        chosen |= hits
    return sorted(chosen)


def _shape_of(model: DiT, name: str) -> tuple[int, int]:
    return model.params[f"{name}.weight"].shape


def attach(
    model: DiT,
    spec: LoraSpec,
    seed: int = 0,
    weights: LoraWeights | None = None,
) -> tuple[DiT, list[Tensor]]:
    """New model view with an adapter on every matched linear.

    Fresh factors: ``A ~ N(0, 1/in)``, ``B = 0``, so the view initially
    computes exactly what the base model does.
    """
    names = match_modules(model, spec.patterns)
    dtype = model.dtype
    factors: dict[str, tuple[Tensor, Tensor]] = {}
    if weights is not None:
        if weights.rank != spec.rank:
            raise ConfigError(f"rank mismatch: checkpoint has rank {weights.rank}, spec asks for {spec.rank}")
        if set(weights.factors) != set(names):
            raise ConfigError("checkpoint modules differ from the modules selected by the spec patterns")
    rng = np.random.default_rng(seed)
    for name in names:
        out_dim, in_dim = _shape_of(model, name)
        if weights is not None:
            a, b = weights.factors[name]
            if a.shape != (spec.rank, in_dim) or b.shape != (out_dim, spec.rank):
                raise ShapeError(f"{name}: factor shapes {a.shape}, {b.shape} do not fit weight ({out_dim}, {in_dim})")
        else:
            a = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(spec.rank, in_dim))
            b = np.zeros((out_dim, spec.rank))
        factors[name] = (
            Tensor(a, requires_grad=True, dtype=dtype, name=f"{name}.lora_A"),
            Tensor(b, requires_grad=True, dtype=dtype, name=f"{name}.lora_B"),
        )
    meta = dict(weights.metadata) if weights is not None else {"seed": int(seed)}
    adapter = LoraAdapter(spec.rank, float(spec.alpha), tuple(spec.patterns), factors, float(spec.lora_strength), meta)
    _check_disjoint(model.adapters + [adapter])
    adapted = model.with_adapters(model.adapters + [adapter])
    return adapted, adapter.parameters()


def _check_disjoint(adapters: list[LoraAdapter]) -> None:
    seen: dict[str, int] = {}
    for i, ad in enumerate(adapters):
        for name in ad.factors:
            if name in seen:
                raise CompositionError(
                    f"adapters {seen[name]} and {i} both target {name}; stacking on shared modules is unsupported"
                )
            seen[name] = i


def apply_pair(model: DiT, video_lora: LoraWeights, audio_lora: LoraWeights, strength: float = 1.0) -> DiT:
    """Activate a video adapter and an audio adapter together."""
    overlap = video_lora.module_names() & audio_lora.module_names()
    if overlap:
        raise CompositionError(f"adapters overlap on {len(overlap)} modules, e.g. {sorted(overlap)[0]}")
    out = model
    for w in (video_lora, audio_lora):
        spec = LoraSpec(w.rank, w.alpha, w.patterns, strength)
        out, params = attach(out, spec, weights=w)
        for p in params:
            p.requires_grad = False
    return out


def merge(model: DiT, lora: LoraWeights, strength: float = 1.0) -> DiT:
    """Plain model with ``W' = W + strength * (alpha / r) * B A``."""
    params = dict(model.params)
    scale = strength * lora.alpha / lora.rank
    for name, (a, b) in lora.factors.items():
        key = f"{name}.weight"
        if key not in params:
            raise ShapeError(f"model has no linear named {name}")
        w = params[key]
        if b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1] or a.shape[0] != b.shape[1]:
            raise ShapeError(f"{name}: B{b.shape} A{a.shape} incompatible with W{w.shape}")
        delta = (b.astype(np.float64) @ a.astype(np.float64)) * scale
        params[key] = Tensor(w.data + delta.astype(w.dtype), dtype=w.dtype, name=w.name)
    return DiT(model.config, params)


def unmerge(model: DiT, lora: LoraWeights, strength: float = 1.0) -> DiT:
    return merge(model, lora, -strength)


# ----------------------------------------------------------------- files

def save_lora(path: str | Path, weights: LoraWeights) -> Path:
    tensors = {}
    for name in sorted(weights.factors):
        a, b = weights.factors[name]
        tensors[f"{name}.lora_A"] = a
        tensors[f"{name}.lora_B"] = b
    meta = {
        "kind": "lora",
        "rank": int(weights.rank),
        "alpha": float(weights.alpha),
        "patterns": list(weights.patterns),
        "step": int(weights.metadata.get("step", 0)),
        "seed": int(weights.metadata.get("seed", 0)),
    }
    for k, v in weights.metadata.items():
        meta.setdefault(k, v)
    return save_checkpoint(path, tensors, meta)


def load_lora(path: str | Path, spec: LoraSpec | None = None) -> LoraWeights:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "lora":
        raise CheckpointError(f"{path}: not a LoRA checkpoint (kind={meta.get('kind')!r})")
    rank = int(meta["rank"])
    if spec is not None and spec.rank != rank:
        raise ConfigError(f"rank mismatch: checkpoint has rank {rank}, spec asks for {spec.rank}")
    factors = {}
    for key in tensors:
        if key.endswith(".lora_A"):
            name = key[: -len(".lora_A")]
            if f"{name}.lora_B" not in tensors:
                raise CheckpointError(f"{path}: missing B factor for {name}")
            factors[name] = (tensors[key], tensors[f"{name}.lora_B"])
    if 2 * len(factors) != len(tensors):
        raise CheckpointError(f"{path}: tensor-count mismatch ({len(tensors)} tensors for {len(factors)} modules)")
    extra = {k: v for k, v in meta.items() if k not in ("kind", "rank", "alpha", "patterns", "tensor_count")}
    return LoraWeights(rank, float(meta["alpha"]), tuple(meta["patterns"]), factors, extra)


def save_model(path: str | Path, model: DiT, **metadata) -> Path:
    tensors = {k: model.params[k].data for k in sorted(model.params)}
    meta = {"kind": "model", "config": model.config.to_dict(), "step": 0, "seed": 0}
    meta.update(metadata)
    return save_checkpoint(path, tensors, meta)


def load_model(path: str | Path) -> tuple[DiT, dict]:
    from .model import ModelConfig

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["config"])
    params = {k: Tensor(v, name=k) for k, v in tensors.items()}
    model = DiT(cfg, params)
    expected = set(DiT.init(cfg, 0).params)
    if set(params) != expected:
        raise CheckpointError(f"{path}: tensor-count mismatch against model config")
    return model, meta
