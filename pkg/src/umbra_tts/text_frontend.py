from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class CharVocab:
    """Character vocabulary with a dedicated filler id and an UNK id."""

    chars: tuple
    filler_id: int = 0
    unk_id: int = 1

    def __post_init__(self):
        if self.filler_id == self.unk_id:
            raise ValueError("filler_id and unk_id must differ")
        reserved = {self.filler_id, self.unk_id}
        if reserved != {0, 1}:
            raise ValueError("filler and UNK must occupy ids 0 and 1")
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("Vocabulary characters must be unique")

    @classmethod
    def default(cls) -> "CharVocab":
        """Printable ASCII, space included."""
        return cls(chars=tuple(chr(code) for code in range(32, 127)))

    @property
    def char_to_id(self) -> Dict[str, int]:
        return {ch: i + 2 for i, ch in enumerate(self.chars)}

    @property
    def size(self) -> int:
        return len(self.chars) + 2

    def save(self, path: Union[str, Path]) -> Path:
        """Two header lines declaring filler and UNK, then one character per id.

        Body line i holds the character with id i; the lines for the
        reserved ids are left empty.
        """
        path = Path(path)
        lines = [f"filler={self.filler_id}", f"unk={self.unk_id}", "", ""]
        lines.extend(self.chars)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CharVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        try:
            filler_id = int(lines[0].split("=", 1)[1])
            unk_id = int(lines[1].split("=", 1)[1])
        except (IndexError, ValueError) as e:
            raise ValueError(f"{path}: malformed vocabulary header") from e
        body = lines[2:]
        chars = tuple(body[2:])
        if any(len(ch) != 1 for ch in chars):
            raise ValueError(f"{path}: every vocabulary line must hold one character")
        return cls(chars=chars, filler_id=filler_id, unk_id=unk_id)


@dataclass(frozen=True, eq=False)
class ExtendedTokens:
    """Character ids followed by fillers up to the mel length N."""

    ids: np.ndarray
    char_count: int

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def tokenize(text: str, vocab: CharVocab) -> np.ndarray:
    if not text:
        raise ValueError("Cannot tokenize empty text")
    lookup = vocab.char_to_id
    return np.array([lookup.get(ch, vocab.unk_id) for ch in text], dtype=np.int64)


def extend_with_filler(ids: Sequence[int], n_frames: int, vocab: CharVocab) -> ExtendedTokens:
    ids = np.asarray(ids, dtype=np.int64)
    char_count = int(ids.shape[0])
    if char_count > n_frames:
        raise ValueError(
            f"Transcript of {char_count} characters exceeds mel length {n_frames}"
        )
    extended = np.full(n_frames, vocab.filler_id, dtype=np.int64)
    extended[:char_count] = ids
    return ExtendedTokens(ids=extended, char_count=char_count)


def estimate_target_length(gen_text: str, ref_text: str, ref_frames: int) -> int:
    """Frames to generate for `gen_text`: ceil(ref_frames · S_gen / S_ref)."""
    if not gen_text or not ref_text:
        raise ValueError("Both texts must be non-empty to estimate duration")
    if ref_frames < 1:
        raise ValueError(f"ref_frames must be >= 1, got {ref_frames}")
    return -(-ref_frames * len(gen_text) // len(ref_text))


class GlobalResponseNorm(nn.Module):
    """ConvNeXt-V2 GRN over the time axis; gamma and beta start at zero."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, N, C)
        gx = torch.sqrt(torch.sum(x * x, dim=1, keepdim=True) + self.eps)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, kernel_size: int = 7, expansion: int = 2):
        super().__init__()
        self.dwconv = nn.Conv1d(
            dim, dim, kernel_size=kernel_size, padding=kernel_size // 2, groups=dim
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, dim * expansion)
        self.act = nn.GELU()
        self.grn = GlobalResponseNorm(dim * expansion)
        self.pwconv2 = nn.Linear(dim * expansion, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        x = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        x = self.norm(x)
        x = self.pwconv1(x)
        x = self.act(x)
        x = self.grn(x)
        x = self.pwconv2(x)
        return residual + x


class TextEmbedder(nn.Module):
    """The text embedding network g: token table → ConvNeXt blocks → linear."""

    def __init__(
        self,
        vocab_size: int,
        d_text: int = 64,
        n_blocks: int = 2,
        kernel_size: int = 7,
        expansion: int = 2,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.vocab_size = vocab_size
        self.kernel_size = kernel_size
        self.token_embedding = nn.Embedding(vocab_size, d_text)
        self.blocks = nn.ModuleList(
            [ConvNeXtBlock(d_text, kernel_size, expansion) for _ in range(n_blocks)]
        )
        self.proj = nn.Linear(d_text, d_text)

    @property
    def receptive_radius(self) -> int:
        """Convolutional reach on either side of a frame.

        GRN pools over the whole sequence, so frames further apart interact
        once its gamma has moved away from zero.
        """
        return len(self.blocks) * (self.kernel_size // 2)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: (B, N) int64 → features (B, N, d_text)."""
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError(
                f"Token id out of range for vocabulary of size {self.vocab_size}"
            )
        x = self.token_embedding(ids)
        for block in self.blocks:
            x = block(x)
        return self.proj(x)


def embed_text(z: ExtendedTokens, embedder: TextEmbedder) -> torch.Tensor:
    """Feature matrix of shape (d_text, N) for one extended token sequence."""
    ids = torch.as_tensor(z.ids, dtype=torch.long).unsqueeze(0)
    return embedder(ids)[0].transpose(0, 1)
