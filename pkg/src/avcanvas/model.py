"""Miniature joint audio-video diffusion transformer.

Each block has a video half (self-attention, cross-attention to learned
condition context tokens, feed-forward) and an audio half (self-attention,
video->audio cross-attention, feed-forward).  Timesteps are per token and
enter through adaptive layer norm, so clean reference tokens (t = 0) and
noised generation tokens are told apart without any positional change.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .sequence import Segment, StrengthField, TokenSequence
from .tensor import Tensor

# module tag per linear group; LoRA patterns match these
MODULE_TAGS = {
    "video.sa": "V.SA",
    "video.ca": "V.CA",
    "video.ff": "V.FF",
    "audio.sa": "A.SA",
    "audio.ca_v2a": "A.CA_V2A",
    "audio.ff": "A.FF",
}
ALL_TAGS = tuple(MODULE_TAGS.values())


@dataclass
class ModelConfig:
    depth: int = 2
    width: int = 48
    heads: int = 2
    patch: tuple[int, int, int] = (1, 4, 4)
    channels: int = 3
    audio_features: int = 8
    audio_group: int = 1
    audio_ratio: int = 2  # audio frames per video frame
    ff_mult: int = 2
    cond_vocab: int = 6
    cond_tokens: int = 2
    rope_theta: float = 100.0
    time_scale: float = 1000.0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.head_dim % 6:
            raise ConfigError(f"head dim {self.head_dim} must be divisible by 6 (3 rotary axes x pairs)")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def video_token_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.channels

    @property
    def audio_token_dim(self) -> int:
        return self.audio_group * self.audio_features

    @property
    def audio_time_scale(self) -> float:
        """Audio token index -> video temporal token units."""
        return self.audio_group / (self.audio_ratio * self.patch[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if k == "patch" else v) for k, v in d.items()})


# ------------------------------------------------------------ embeddings

def sinusoid_embedding(t: np.ndarray, dim: int, time_scale: float = 1000.0) -> np.ndarray:
    """``[cos(s t f_i), sin(s t f_i)]`` with ``f_i = 10000^(-i/half)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * time_scale * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def rope_frequencies(head_dim: int, theta: float) -> np.ndarray:
    pairs = head_dim // 6
    return theta ** (-np.arange(pairs, dtype=np.float64) / pairs)


def rotary_phases(coords: np.ndarray, head_dim: int, theta: float = 100.0) -> np.ndarray:
    """Per-token rotation angles ``(N, head_dim/2)``: three equal axis groups,
    angle = coordinate x geometric frequency ladder."""
    coords = np.asarray(coords, dtype=np.float64)
    if np.any(~np.isfinite(coords)):
        raise ConfigError("non-finite coordinates")
    freqs = rope_frequencies(head_dim, theta)
    return np.concatenate([coords[:, a : a + 1] * freqs[None, :] for a in range(3)], axis=1)


def _rope_tables(coords: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    ang = np.repeat(rotary_phases(coords, head_dim, theta), 2, axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def strength_logit_bias(segments: np.ndarray, strengths: np.ndarray | None) -> np.ndarray | None:
    """Additive ``ln(s_q)`` on generation-query -> reference-key logits.

    ``strengths`` holds one value per generation token in sequence order;
    zero becomes ``-inf`` (hard mask).  Returns None when there is nothing to
    bias.
    """
    if strengths is None:
        return None
    segments = np.asarray(segments)
    is_ref = np.isin(segments, [int(Segment.REF_VIDEO), int(Segment.REF_AUDIO)])
    gen = np.flatnonzero(~is_ref)
    if strengths.shape[0] != gen.size:
        raise ShapeError(f"{strengths.shape[0]} strengths for {gen.size} generation tokens")
    if np.any(strengths < 0):
        raise ConfigError("attention strength must be >= 0")
    n = segments.shape[0]
    bias = np.zeros((n, n), dtype=np.float32)
    with np.errstate(divide="ignore"):
        logs = np.log(strengths.astype(np.float64)).astype(np.float32)
    bias[np.ix_(gen, np.flatnonzero(is_ref))] = logs[:, None]
    return bias


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention on ``(H, N, hd)`` operands."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = tt.matmul(q * scale, tt.transpose(k, (0, 2, 1)))
    return tt.matmul(tt.softmax_lastdim(logits, bias), v)


# ----------------------------------------------------------------- model

@dataclass
class LoraAdapter:
    """A live low-rank adapter on a set of linear layers of the backbone."""

    rank: int
    alpha: float
    patterns: tuple[str, ...]
    factors: dict[str, tuple[Tensor, Tensor]]  # linear name -> (A, B)
    strength: float = 1.0
    metadata: dict = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.strength * self.alpha / self.rank

    def parameters(self) -> list[Tensor]:
        out = []
        for name in sorted(self.factors):
            out.extend(self.factors[name])
        return out


def _linear_specs(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    """name -> (out, in) for every linear layer."""
    D = cfg.width
    F = D * cfg.ff_mult
    specs = {
        "video_in": (D, cfg.video_token_dim),
        "audio_in": (D, cfg.audio_token_dim),
        "time_mlp.fc1": (D, D),
        "time_mlp.fc2": (D, D),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        specs[f"{b}.video.ada"] = (9 * D, D)
        specs[f"{b}.audio.ada"] = (9 * D, D)
        for group in ("video.sa", "video.ca", "audio.sa", "audio.ca_v2a"):
            for proj in ("q", "k", "v", "out"):
                specs[f"{b}.{group}.{proj}"] = (D, D)
        for group in ("video.ff", "audio.ff"):
            specs[f"{b}.{group}.fc1"] = (F, D)
            specs[f"{b}.{group}.fc2"] = (D, F)
    specs["video_out.ada"] = (2 * D, D)
    specs["video_out.proj"] = (cfg.video_token_dim, D)
    specs["audio_out.ada"] = (2 * D, D)
    specs["audio_out.proj"] = (cfg.audio_token_dim, D)
    return specs


def module_tag(linear_name: str) -> str | None:
    parts = linear_name.split(".")
    if len(parts) == 5 and parts[0] == "blocks":
        return MODULE_TAGS.get(f"{parts[2]}.{parts[3]}")
    return None


class DiT:
    """Parameters plus forward pass; adapters are attached as separate views."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], adapters: list[LoraAdapter] | None = None):
        self.config = config
        self.params = params
        self.adapters: list[LoraAdapter] = list(adapters or [])
        self._adapter_index: dict[str, list[tuple[LoraAdapter, Tensor, Tensor]]] = {}
        for ad in self.adapters:
            for name, (a, b) in ad.factors.items():
                self._adapter_index.setdefault(name, []).append((ad, a, b))

    # ---- construction
    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, zero_init: bool = True, dtype=np.float32) -> "DiT":
        """Random initialisation.

        With ``zero_init`` the residual gates and the output projections start
        at zero (adaLN-zero); shift/scale rows of the modulation stay random
        so different timesteps still give different modulation.
        """
        rng = np.random.default_rng(seed)
        D = config.width
        params: dict[str, Tensor] = {}
        for name, (o, i) in _linear_specs(config).items():
            w = rng.normal(0.0, 1.0 / math.sqrt(i), size=(o, i))
            b = np.zeros(o)
            if name.endswith(".ada") and zero_init:
                w = w * 0.1
                chunks = o // D
                for c in range(chunks):
                    # gate chunks are every third one (shift, scale, gate)
                    if c % 3 == 2:
                        w[c * D : (c + 1) * D] = 0.0
            if name.endswith("_out.proj") and zero_init:
                w = np.zeros_like(w)
            params[f"{name}.weight"] = Tensor(w, dtype=dtype, name=f"{name}.weight")
            params[f"{name}.bias"] = Tensor(b, dtype=dtype, name=f"{name}.bias")
        params["cond_embed"] = Tensor(rng.normal(0, 1.0, size=(config.cond_vocab, D)), dtype=dtype, name="cond_embed")
        params["cond_context"] = Tensor(
            rng.normal(0, 1.0, size=(config.cond_vocab, config.cond_tokens, D)), dtype=dtype, name="cond_context"
        )
        return cls(config, params)

    def linear_names(self) -> list[str]:
        return list(_linear_specs(self.config))

    def module_registry(self) -> dict[str, str]:
        """Adaptable linear name -> module tag (V.SA, A.FF, ...)."""
        out = {}
        for name in self.linear_names():
            tag = module_tag(name)
            if tag is not None:
                out[name] = tag
        return out

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def lora_parameters(self) -> list[Tensor]:
        out = []
        for ad in self.adapters:
            out.extend(ad.parameters())
        return out

    def with_adapters(self, adapters: list[LoraAdapter]) -> "DiT":
        return DiT(self.config, self.params, adapters)

    def astype(self, dtype) -> "DiT":
        params = {k: Tensor(v.data, dtype=dtype, name=v.name) for k, v in self.params.items()}
        adapters = []
        for ad in self.adapters:
            factors = {
                n: (Tensor(a.data, dtype=dtype, requires_grad=a.requires_grad), Tensor(b.data, dtype=dtype, requires_grad=b.requires_grad))
                for n, (a, b) in ad.factors.items()
            }
            adapters.append(LoraAdapter(ad.rank, ad.alpha, ad.patterns, factors, ad.strength, dict(ad.metadata)))
        return DiT(self.config, params, adapters)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    @property
    def dtype(self):
        return self.params["video_in.weight"].dtype

    # ---- building blocks
    def linear(self, name: str, x: Tensor) -> Tensor:
        y = tt.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        for ad, a, b in self._adapter_index.get(name, ()):
            if ad.strength == 0.0:
                continue
            delta = tt.linear(tt.linear(x, a), b)
            y = y + delta * ad.scale
        return y

    def modulation_input(self, timesteps: np.ndarray, cond_id: int) -> Tensor:
        """Per-token conditioning vector: timestep MLP + condition embedding."""
        timesteps = np.asarray(timesteps, dtype=np.float64)
        if np.any((timesteps < 0) | (timesteps > 1)):
            raise ConfigError("timesteps must lie in [0, 1]")
        if not 0 <= cond_id < self.config.cond_vocab:
            raise ConfigError(f"condition id {cond_id} outside vocabulary of {self.config.cond_vocab}")
        uniq, inverse = np.unique(timesteps, return_inverse=True)
        emb = Tensor(sinusoid_embedding(uniq, self.config.width, self.config.time_scale), dtype=self.dtype)
        h = self.linear("time_mlp.fc2", tt.silu(self.linear("time_mlp.fc1", emb)))
        h = h + tt.take(self.params["cond_embed"], [cond_id], axis=0)
        return tt.take(h, inverse.reshape(-1), axis=0)

    def timestep_modulation(self, timesteps: np.ndarray, cond_id: int = 0) -> dict[str, np.ndarray]:
        """Per-block modulation rows (shift/scale/gate for each sub-layer)."""
        c = tt.silu(self.modulation_input(timesteps, cond_id))
        out = {}
        for i in range(self.config.depth):
            for stream in ("video", "audio"):
                out[f"blocks.{i}.{stream}"] = self.linear(f"blocks.{i}.{stream}.ada", c).data
        return out

    def _chunks(self, mod: Tensor, n: int) -> list[Tensor]:
        D = self.config.width
        return [tt.slice_axis(mod, j * D, (j + 1) * D, axis=-1) for j in range(n)]

    @staticmethod
    def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return tt.layer_norm(x) * (scale + 1.0) + shift

    def _heads(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        cfg = self.config
        return tt.transpose(tt.reshape(x, (n, cfg.heads, cfg.head_dim)), (1, 0, 2))

    def _merge_heads(self, x: Tensor) -> Tensor:
        n = x.shape[1]
        return tt.reshape(tt.transpose(x, (1, 0, 2)), (n, self.config.width))

    def _attend(self, prefix: str, xq: Tensor, xkv: Tensor, rope_q=None, rope_k=None, bias=None) -> Tensor:
        q = self._heads(self.linear(f"{prefix}.q", xq))
        k = self._heads(self.linear(f"{prefix}.k", xkv))
        v = self._heads(self.linear(f"{prefix}.v", xkv))
        if rope_q is not None:
            q = tt.rope(q, *rope_q)
        if rope_k is not None:
            k = tt.rope(k, *rope_k)
        return self.linear(f"{prefix}.out", self._merge_heads(attention(q, k, v, bias)))

    def joint_attention(self, prefix: str, x: Tensor, coords: np.ndarray, bias: np.ndarray | None) -> Tensor:
        """Bidirectional self-attention over all tokens of one stream."""
        tables = _rope_tables(coords, self.config.head_dim, self.config.rope_theta, x.dtype)
        return self._attend(prefix, x, x, tables, tables, bias)

    def _ff(self, prefix: str, x: Tensor) -> Tensor:
        return self.linear(f"{prefix}.fc2", tt.gelu(self.linear(f"{prefix}.fc1", x)))

    # ---- forward
    def forward(
        self,
        video: TokenSequence,
        audio: TokenSequence | None = None,
        cond_id: int = 0,
        strength: StrengthField | None = None,
        audio_strength: StrengthField | None = None,
        validate: bool = True,
    ) -> tuple[Tensor, Tensor | None]:
        """Velocity predictions at generation positions ``(video, audio)``.

        Outputs follow the order of the generation tokens in each sequence;
        reference outputs are discarded.
        """
        cfg = self.config
        dt = self.dtype
        if validate:
            video.validate()
            if audio is not None:
                audio.validate()
        if video.features.shape[1] != cfg.video_token_dim:
            raise ShapeError(f"video tokens have length {video.features.shape[1]}, expected {cfg.video_token_dim}")
        has_audio = audio is not None and len(audio) > 0
        if has_audio and audio.features.shape[1] != cfg.audio_token_dim:
            raise ShapeError(f"audio tokens have length {audio.features.shape[1]}, expected {cfg.audio_token_dim}")

        v_bias = self._bias(video, strength)
        xv = self.linear("video_in", Tensor(video.features, dtype=dt))
        cv = tt.silu(self.modulation_input(video.timesteps, cond_id))
        v_rope = _rope_tables(video.coords, cfg.head_dim, cfg.rope_theta, dt)
        ctx = tt.take(self.params["cond_context"], [cond_id], axis=0)
        ctx = tt.reshape(ctx, (cfg.cond_tokens, cfg.width))
        gen_v = video.gen_index()
        gen_video_coords = video.coords[gen_v]

        if has_audio:
            a_bias = self._bias(audio, audio_strength)
            xa = self.linear("audio_in", Tensor(audio.features, dtype=dt))
            ca = tt.silu(self.modulation_input(audio.timesteps, cond_id))
            a_rope = _rope_tables(audio.coords, cfg.head_dim, cfg.rope_theta, dt)
            # cross-attention uses the temporal axis only, in video-frame units
            qa = np.zeros_like(audio.coords)
            qa[:, 0] = audio.coords[:, 0] * cfg.audio_time_scale
            kv = np.zeros_like(gen_video_coords)
            kv[:, 0] = gen_video_coords[:, 0]
            x_rope_q = _rope_tables(qa, cfg.head_dim, cfg.rope_theta, dt)
            x_rope_k = _rope_tables(kv, cfg.head_dim, cfg.rope_theta, dt)

        for i in range(cfg.depth):
            b = f"blocks.{i}"
            sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = self._chunks(self.linear(f"{b}.video.ada", cv), 9)
            h = self._modulate(xv, sh1, sc1)
            xv = xv + g1 * self._attend(f"{b}.video.sa", h, h, v_rope, v_rope, v_bias)
            h = self._modulate(xv, sh2, sc2)
            xv = xv + g2 * self._attend(f"{b}.video.ca", h, ctx)
            h = self._modulate(xv, sh3, sc3)
            xv = xv + g3 * self._ff(f"{b}.video.ff", h)

            if has_audio:
                sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = self._chunks(self.linear(f"{b}.audio.ada", ca), 9)
                h = self._modulate(xa, sh1, sc1)
                xa = xa + g1 * self._attend(f"{b}.audio.sa", h, h, a_rope, a_rope, a_bias)
                h = self._modulate(xa, sh2, sc2)
                vid = tt.take(xv, gen_v, axis=0)
                xa = xa + g2 * self._attend(f"{b}.audio.ca_v2a", h, vid, x_rope_q, x_rope_k)
                h = self._modulate(xa, sh3, sc3)
                xa = xa + g3 * self._ff(f"{b}.audio.ff", h)

        out_v = self._final("video_out", tt.take(xv, gen_v, axis=0), tt.take(cv, gen_v, axis=0))
        out_a = None
        if has_audio:
            gen_a = audio.gen_index()
            out_a = self._final("audio_out", tt.take(xa, gen_a, axis=0), tt.take(ca, gen_a, axis=0))
        return out_v, out_a

    def _final(self, prefix: str, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self._chunks(self.linear(f"{prefix}.ada", c), 2)
        return self.linear(f"{prefix}.proj", self._modulate(x, shift, scale))

    @staticmethod
    def _bias(seq: TokenSequence, strength: StrengthField | None) -> np.ndarray | None:
        if strength is None or strength.is_identity() or not np.any(seq.is_ref):
            return None
        return strength_logit_bias(seq.segments, strength.resolve(int(seq.is_gen.sum())))
