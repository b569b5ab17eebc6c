import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from .text_frontend import CharVocab, TextEmbedder

CHECKPOINT_MAGIC = b"UMBR"
CHECKPOINT_VERSION = 1
MODEL_PREFIX = "model."
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class DenoiserConfig:
    model_dim: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    d_text: int = 64
    n_mels: int = 40
    max_frames: int = 512
    ser_embed_dim: int = 256
    time_embed_dim: int = 256
    vocab_size: int = field(default_factory=lambda: CharVocab.default().size)
    text_blocks: int = 2
    text_kernel: int = 7
    mlp_ratio: int = 4
    positional: bool = True

    def __post_init__(self):
        for name in (
            "model_dim",
            "n_blocks",
            "n_heads",
            "d_text",
            "n_mels",
            "max_frames",
            "ser_embed_dim",
            "time_embed_dim",
            "vocab_size",
            "mlp_ratio",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.n_heads:
            raise ValueError(
                f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.time_embed_dim % 2 or self.ser_embed_dim % 2:
            raise ValueError("Sinusoidal embedding sizes must be even")


def sinusoidal_embed(
    value: Union[float, torch.Tensor], dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Interleaved sin/cos encoding of a scalar (or a batch of scalars).

    The value is scaled by 1000 and spread over `dim / 2` frequencies spaced
    geometrically from 1 down to 1/10000.
    """
    if dim % 2:
        raise ValueError(f"Embedding dimension must be even, got {dim}")
    value = torch.as_tensor(value, dtype=dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = TIME_SCALE * value.unsqueeze(-1) * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def positional_table(n_positions: int, dim: int) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class DiTBlock(nn.Module):
    """Self-attention and feed-forward sub-layers, both modulated by c (adaLN-zero)."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(approximate="tanh"),
            nn.Linear(dim * mlp_ratio, dim),
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        batch, n_frames, dim = x.shape
        qkv = self.qkv(x).reshape(batch, n_frames, 3, self.n_heads, dim // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.attn_out(out.transpose(1, 2).reshape(batch, n_frames, dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        (
            shift_msa,
            scale_msa,
            gate_msa,
            shift_mlp,
            scale_mlp,
            gate_mlp,
        ) = self.adaLN_modulation(c).unsqueeze(1).chunk(6, dim=-1)
        x = x + gate_msa * self.attention(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class Denoiser(nn.Module):
    """Velocity field v_θ over mel frames.

    Inputs are laid out batch-first as (B, N, channels): the noisy mel, the
    masked speech and env contexts and the text features are concatenated
    per frame before the input projection.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.text_embedder = TextEmbedder(
            config.vocab_size, config.d_text, config.text_blocks, config.text_kernel
        )
        self.input_proj = nn.Linear(3 * config.n_mels + config.d_text, d)
        self.register_buffer(
            "pos_table", positional_table(config.max_frames, d), persistent=False
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.ser_mlp = nn.Sequential(
            nn.Linear(config.ser_embed_dim, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.blocks = nn.ModuleList(
            [DiTBlock(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_blocks)]
        )
        self.output_proj = nn.Linear(d, config.n_mels)

    @property
    def dtype(self) -> torch.dtype:
        return self.input_proj.weight.dtype

    def time_embedding(self, t: Union[float, torch.Tensor]) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embed(t, self.config.time_embed_dim, self.dtype))

    def ser_embedding(self, ser: Union[float, torch.Tensor]) -> torch.Tensor:
        return self.ser_mlp(sinusoidal_embed(ser, self.config.ser_embed_dim, self.dtype))

    def cond_vector(self, t: Union[float, torch.Tensor], ser: Union[float, torch.Tensor]) -> torch.Tensor:
        """c = TimeEmbed(t) + SEREmbed(ser)."""
        return self.time_embedding(t) + self.ser_embedding(ser)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text_embedder(ids)

    def forward(
        self,
        x_t: torch.Tensor,
        speech_ctx: torch.Tensor,
        env_ctx: torch.Tensor,
        text_feat: torch.Tensor,
        c: torch.Tensor,
    ) -> torch.Tensor:
        h = self.input_proj(torch.cat([x_t, speech_ctx, env_ctx, text_feat], dim=-1))
        if self.config.positional:
            h = h + self.pos_table[: h.shape[1]].to(h.dtype)
        for block in self.blocks:
            h = block(h, c)
        return self.output_proj(h)


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Initialise a denoiser from `seed` without touching the global torch RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Denoiser(config)


def cond_vector(t: float, ser: float, model: Denoiser) -> torch.Tensor:
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"Flow time t must be in [0, 1], got {t}")
    if not 0.0 <= float(ser) <= 1.0:
        raise ValueError(f"SER must be in [0, 1], got {ser}")
    return model.cond_vector(float(t), float(ser))


def denoise_forward(
    x_t: torch.Tensor,
    speech_ctx: torch.Tensor,
    env_ctx: torch.Tensor,
    text_feat: torch.Tensor,
    c: torch.Tensor,
    model: Denoiser,
) -> torch.Tensor:
    """Predict the velocity for one or more sequences.

    Args:
        x_t: Noisy mel, (N, F) or (B, N, F)
        speech_ctx: Masked speech context, same shape as x_t
        env_ctx: Masked env context, same shape as x_t
        text_feat: Embedded extended text, (N, d_text) or (B, N, d_text)
        c: Conditioning vector, (d,) or (B, d)
        model: The denoiser

    Returns:
        Velocity with the shape of x_t
    """
    unbatched = x_t.dim() == 2
    if unbatched:
        x_t, speech_ctx, env_ctx, text_feat = (
            a.unsqueeze(0) for a in (x_t, speech_ctx, env_ctx, text_feat)
        )
        c = c.unsqueeze(0) if c.dim() == 1 else c

    cfg = model.config
    if x_t.shape[-1] != cfg.n_mels:
        raise ValueError(f"x_t has {x_t.shape[-1]} mel bins, model expects {cfg.n_mels}")
    if speech_ctx.shape != x_t.shape or env_ctx.shape != x_t.shape:
        raise ValueError(
            f"Context shapes {tuple(speech_ctx.shape)} / {tuple(env_ctx.shape)} "
            f"do not match x_t {tuple(x_t.shape)}"
        )
    if text_feat.shape[:2] != x_t.shape[:2] or text_feat.shape[-1] != cfg.d_text:
        raise ValueError(f"Text features {tuple(text_feat.shape)} do not match x_t")
    if x_t.shape[1] > cfg.max_frames:
        raise ValueError(f"{x_t.shape[1]} frames exceed max_frames={cfg.max_frames}")
    for name, tensor in (
        ("x_t", x_t),
        ("speech_ctx", speech_ctx),
        ("env_ctx", env_ctx),
        ("text_feat", text_feat),
    ):
        if not torch.all(torch.isfinite(tensor)):
            raise ValueError(f"{name} contains non-finite values")

    velocity = model(x_t, speech_ctx, env_ctx, text_feat, c)
    return velocity[0] if unbatched else velocity


@dataclass
class Checkpoint:
    model: Denoiser
    extra: Dict[str, torch.Tensor] = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)


def _write_tensor(f, name: str, tensor: torch.Tensor) -> None:
    encoded = name.encode("utf-8")
    data = tensor.detach().to(torch.float32).contiguous()
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", data.dim()))
    f.write(struct.pack(f"<{data.dim()}I", *data.shape))
    f.write(data.numpy().astype("<f4").tobytes())


def save_checkpoint(
    path: Union[str, Path],
    model: Denoiser,
    extra: Optional[Dict[str, torch.Tensor]] = None,
    meta: Optional[Dict] = None,
) -> Path:
    """Write model parameters (and optional extra tensors) in the UMBR format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"config": asdict(model.config), "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    tensors = [(MODEL_PREFIX + name, t) for name, t in model.state_dict().items()]
    tensors.extend((extra or {}).items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            _write_tensor(f, name, tensor)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a UMBR checkpoint")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    (n_tensors,) = struct.unpack_from("<I", data, offset)
    offset += 4

    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = math.prod(dims)
        values = torch.frombuffer(bytearray(data[offset : offset + 4 * count]), dtype=torch.float32)
        offset += 4 * count
        tensors[name] = values.reshape(dims).clone()

    model = build_denoiser(DenoiserConfig(**header["config"]))
    state = {k[len(MODEL_PREFIX) :]: v for k, v in tensors.items() if k.startswith(MODEL_PREFIX)}
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith(MODEL_PREFIX)}
    return Checkpoint(model=model, extra=extra, meta=header["meta"])
