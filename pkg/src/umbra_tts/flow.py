from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .audio_dsp import MelConfig, MelSpectrogram, SerValue, Waveform, griffin_lim
from .denoiser import Denoiser, denoise_forward
from .text_frontend import CharVocab, estimate_target_length, extend_with_filler, tokenize
from .triplet_forge import TripletSample

ArrayLike = Union[np.ndarray, torch.Tensor]

# Mean character duration of the synthetic corpus at a 10 ms hop.
FRAMES_PER_CHAR = 12.0


class DivergenceError(RuntimeError):
    """A loss, gradient or ODE state became non-finite."""


class SamplerMethod(str, Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 32
    method: SamplerMethod = SamplerMethod.EULER
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        object.__setattr__(self, "method", SamplerMethod(self.method))


@dataclass(frozen=True, eq=False)
class TemporalMask:
    """Per-frame flags, True where the frame is to be generated."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=bool)
        if frames.ndim != 1:
            raise ValueError(f"Mask must be one-dimensional, got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def span(cls, n_frames: int, start: int, stop: int) -> "TemporalMask":
        if not 0 <= start < stop <= n_frames:
            raise ValueError(f"Invalid span [{start}, {stop}) for {n_frames} frames")
        frames = np.zeros(n_frames, dtype=bool)
        frames[start:stop] = True
        return cls(frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_masked(self) -> int:
        return int(np.count_nonzero(self.frames))

    @property
    def fraction(self) -> float:
        return self.n_masked / self.n_frames


@dataclass(frozen=True, eq=False)
class FlowPoint:
    x_t: np.ndarray
    t: float
    u_target: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainingDraw:
    """Everything one CFM term needs; mels are (F, N), token ids have length N."""

    x_t: np.ndarray
    speech_ctx: np.ndarray
    env_ctx: np.ndarray
    token_ids: np.ndarray
    mask: TemporalMask
    u_target: np.ndarray
    t: float
    ser: float


def sample_mask(
    n_frames: int, rng: np.random.Generator, min_frac: float = 0.3, max_frac: float = 1.0
) -> TemporalMask:
    """One contiguous span covering a uniform fraction of the frames."""
    if not 0.0 < min_frac <= max_frac <= 1.0:
        raise ValueError(
            f"Need 0 < min_frac <= max_frac <= 1, got {min_frac}, {max_frac}"
        )
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    fraction = rng.uniform(min_frac, max_frac)
    length = int(np.clip(round(fraction * n_frames), 1, n_frames))
    start = int(rng.integers(0, n_frames - length + 1))
    return TemporalMask.span(n_frames, start, start + length)


def flow_point(x0: np.ndarray, x1: Union[MelSpectrogram, np.ndarray], t: float) -> FlowPoint:
    """Point on the straight path from noise x0 to data x1."""
    x1 = x1.values if isinstance(x1, MelSpectrogram) else np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"Noise shape {x0.shape} does not match data shape {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return FlowPoint(x_t=(1.0 - t) * x0 + t * x1, t=float(t), u_target=x1 - x0)


def tile_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Loop or truncate the columns of an (F, M) matrix to exactly `n_frames`."""
    return values[:, np.arange(n_frames) % values.shape[1]]


def make_training_draw(
    triplet: TripletSample,
    rng: np.random.Generator,
    vocab: Optional[CharVocab] = None,
    min_frac: float = 0.3,
    max_frac: float = 1.0,
) -> TrainingDraw:
    vocab = vocab or CharVocab.default()
    n_frames = triplet.n_frames
    mask = sample_mask(n_frames, rng, min_frac, max_frac)
    t = float(rng.uniform(0.0, 1.0))
    x0 = rng.standard_normal(triplet.target_mel.values.shape)
    point = flow_point(x0, triplet.target_mel, t)

    keep = ~mask.frames[None, :]
    env = tile_frames(triplet.env_mel.values, n_frames)
    tokens = extend_with_filler(tokenize(triplet.transcript, vocab), n_frames, vocab)
    return TrainingDraw(
        x_t=point.x_t,
        speech_ctx=np.where(keep, triplet.speech_mel.values, 0.0),
        env_ctx=np.where(keep, env, 0.0),
        token_ids=tokens.ids,
        mask=mask,
        u_target=point.u_target,
        t=t,
        ser=float(triplet.ser),
    )


def masked_velocity_loss(
    velocity: torch.Tensor, u_target: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Squared error over masked frames, normalised by masked count times mel bins.

    velocity and u_target are (N, F); mask is a boolean (N,) tensor.
    """
    if not bool(mask.any()):
        raise ValueError("Mask selects no frames")
    diff = (velocity - u_target)[mask]
    return (diff**2).sum() / diff.numel()


def _frames_first(values: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(values.T), dtype=dtype)


def _draw_loss(model: Denoiser, draw: TrainingDraw) -> torch.Tensor:
    dtype = model.dtype
    ids = torch.as_tensor(draw.token_ids, dtype=torch.long).unsqueeze(0)
    text_feat = model.embed_tokens(ids)[0]
    c = model.cond_vector(draw.t, draw.ser)
    velocity = denoise_forward(
        _frames_first(draw.x_t, dtype),
        _frames_first(draw.speech_ctx, dtype),
        _frames_first(draw.env_ctx, dtype),
        text_feat,
        c,
        model,
    )
    return masked_velocity_loss(
        velocity,
        _frames_first(draw.u_target, dtype),
        torch.as_tensor(draw.mask.frames),
    )


def cfm_loss(model: Denoiser, draws: Sequence[TrainingDraw]) -> torch.Tensor:
    """Mean of the per-draw masked velocity losses."""
    if not draws:
        raise ValueError("Cannot compute a loss over an empty batch")
    return torch.stack([_draw_loss(model, draw) for draw in draws]).mean()


def loss_and_gradients(
    model: Denoiser, draws: Sequence[TrainingDraw]
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """CFM loss and its exact gradient for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = cfm_loss(model, draws)
    if not torch.isfinite(loss):
        raise DivergenceError(f"Non-finite loss: {loss.item()}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss.item()), grads


def _all_finite(x: ArrayLike) -> bool:
    if torch.is_tensor(x):
        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def integrate(
    velocity_fn: Callable[[ArrayLike, float], ArrayLike], x0: ArrayLike, cfg: SamplerConfig
) -> ArrayLike:
    """Fixed-step ODE integration of dx/dt = v(x, t) from t=0 to t=1."""
    h = 1.0 / cfg.n_steps
    x = x0
    for k in range(cfg.n_steps):
        t = k / cfg.n_steps
        if cfg.method is SamplerMethod.EULER:
            x = x + h * velocity_fn(x, t)
        else:
            x_mid = x + (h / 2.0) * velocity_fn(x, t)
            x = x + h * velocity_fn(x_mid, t + h / 2.0)
        if not _all_finite(x):
            raise DivergenceError(f"ODE state became non-finite at step {k + 1}")
    return x


@torch.no_grad()
def _infill(
    model: Denoiser,
    speech_ctx: np.ndarray,
    env_ctx: np.ndarray,
    token_ids: np.ndarray,
    ser: Union[SerValue, float],
    sampler_cfg: SamplerConfig,
) -> np.ndarray:
    """Integrate the learned field over the whole sequence; returns (F, N)."""
    dtype = model.dtype
    n_frames = speech_ctx.shape[1]
    if n_frames > model.config.max_frames:
        raise ValueError(
            f"Requested {n_frames} frames, model supports at most {model.config.max_frames}"
        )
    speech = _frames_first(speech_ctx, dtype)
    env = _frames_first(env_ctx, dtype)
    ids = torch.as_tensor(token_ids, dtype=torch.long).unsqueeze(0)
    text_feat = model.embed_tokens(ids)[0]
    ser = float(ser)

    def velocity_fn(x: torch.Tensor, t: float) -> torch.Tensor:
        c = model.cond_vector(t, ser)
        return denoise_forward(x, speech, env, text_feat, c, model)

    generator = torch.Generator().manual_seed(sampler_cfg.seed)
    x0 = torch.randn(n_frames, model.config.n_mels, generator=generator).to(dtype)
    x1 = integrate(velocity_fn, x0, sampler_cfg)
    return x1.T.double().numpy()


def synthesize(
    model: Denoiser,
    ref_speech_mel: MelSpectrogram,
    ref_transcript: str,
    env_prompt_mel: MelSpectrogram,
    gen_text: str,
    ser: Union[SerValue, float],
    sampler_cfg: SamplerConfig,
    mel_cfg: MelConfig,
    vocab: Optional[CharVocab] = None,
    griffin_lim_iters: int = 32,
) -> Tuple[MelSpectrogram, Waveform]:
    """Speak `gen_text` in the reference voice over the prompted environment.

    The reference occupies the first frames of the speech context; the
    generated continuation follows it and only that part is returned.
    """
    vocab = vocab or CharVocab.default()
    if not gen_text or not ref_transcript:
        raise ValueError("Both the reference transcript and the text to speak are required")
    n_ref = ref_speech_mel.n_frames
    n_total = n_ref + estimate_target_length(gen_text, ref_transcript, n_ref)
    if n_total > model.config.max_frames:
        raise ValueError(
            f"Reference plus generated speech needs {n_total} frames, "
            f"model supports at most {model.config.max_frames}"
        )

    speech_ctx = np.zeros((mel_cfg.n_mels, n_total))
    speech_ctx[:, :n_ref] = ref_speech_mel.values
    env_ctx = tile_frames(env_prompt_mel.values, n_total)
    tokens = extend_with_filler(tokenize(ref_transcript + gen_text, vocab), n_total, vocab)

    values = _infill(model, speech_ctx, env_ctx, tokens.ids, ser, sampler_cfg)
    mel = MelSpectrogram(values[:, n_ref:], mel_cfg)
    return mel, griffin_lim(mel, mel_cfg, griffin_lim_iters, seed=sampler_cfg.seed)


def synthesize_from_text(
    model: Denoiser,
    env_prompt_mel: MelSpectrogram,
    gen_text: str,
    ser: Union[SerValue, float],
    sampler_cfg: SamplerConfig,
    mel_cfg: MelConfig,
    frames_per_char: float = FRAMES_PER_CHAR,
    vocab: Optional[CharVocab] = None,
    griffin_lim_iters: int = 32,
) -> Tuple[MelSpectrogram, Waveform]:
    """Speak `gen_text` over the prompted environment with no reference voice.

    The speech context is left empty and the length is `frames_per_char`
    frames per character, rounded up.
    """
    vocab = vocab or CharVocab.default()
    if not gen_text:
        raise ValueError("Text to speak must be non-empty")
    if frames_per_char < 1.0:
        raise ValueError(f"frames_per_char must be >= 1, got {frames_per_char}")
    n_frames = int(np.ceil(frames_per_char * len(gen_text)))
    if n_frames > model.config.max_frames:
        raise ValueError(
            f"Generated speech needs {n_frames} frames, "
            f"model supports at most {model.config.max_frames}"
        )

    tokens = extend_with_filler(tokenize(gen_text, vocab), n_frames, vocab)
    values = _infill(
        model,
        np.zeros((mel_cfg.n_mels, n_frames)),
        tile_frames(env_prompt_mel.values, n_frames),
        tokens.ids,
        ser,
        sampler_cfg,
    )
    mel = MelSpectrogram(values, mel_cfg)
    return mel, griffin_lim(mel, mel_cfg, griffin_lim_iters, seed=sampler_cfg.seed)


def reconstruct(
    model: Denoiser,
    triplet: TripletSample,
    mask: TemporalMask,
    sampler_cfg: SamplerConfig,
    vocab: Optional[CharVocab] = None,
) -> MelSpectrogram:
    """Infill the masked span of a known triplet, keeping its transcript and SER."""
    vocab = vocab or CharVocab.default()
    if mask.n_frames != triplet.n_frames:
        raise ValueError(
            f"Mask covers {mask.n_frames} frames, triplet has {triplet.n_frames}"
        )
    keep = ~mask.frames[None, :]
    env = tile_frames(triplet.env_mel.values, triplet.n_frames)
    tokens = extend_with_filler(
        tokenize(triplet.transcript, vocab), triplet.n_frames, vocab
    )
    values = _infill(
        model,
        np.where(keep, triplet.speech_mel.values, 0.0),
        np.where(keep, env, 0.0),
        tokens.ids,
        triplet.ser,
        sampler_cfg,
    )
    return MelSpectrogram(values, triplet.target_mel.config)


def synthesize_environment(
    model: Denoiser,
    env_prompt_mel: MelSpectrogram,
    n_frames: int,
    sampler_cfg: SamplerConfig,
    mel_cfg: MelConfig,
    ser: Union[SerValue, float] = 0.0,
    vocab: Optional[CharVocab] = None,
    griffin_lim_iters: int = 32,
) -> Tuple[MelSpectrogram, Waveform]:
    """Generate background only: no speech context and a transcript of fillers."""
    vocab = vocab or CharVocab.default()
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    token_ids = np.full(n_frames, vocab.filler_id, dtype=np.int64)
    values = _infill(
        model,
        np.zeros((mel_cfg.n_mels, n_frames)),
        tile_frames(env_prompt_mel.values, n_frames),
        token_ids,
        ser,
        sampler_cfg,
    )
    mel = MelSpectrogram(values, mel_cfg)
    return mel, griffin_lim(mel, mel_cfg, griffin_lim_iters, seed=sampler_cfg.seed)


def batch_draws(
    triplets: Sequence[TripletSample],
    rngs: Sequence[np.random.Generator],
    vocab: Optional[CharVocab] = None,
    min_frac: float = 0.3,
    max_frac: float = 1.0,
) -> List[TrainingDraw]:
    return [
        make_training_draw(triplet, rng, vocab, min_frac, max_frac)
        for triplet, rng in zip(triplets, rngs)
    ]
