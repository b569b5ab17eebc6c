from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
from rich.console import Console
from tqdm import tqdm

from .audio_dsp import MelConfig, snr_to_ser
from .denoiser import Checkpoint, Denoiser, DenoiserConfig, build_denoiser, load_checkpoint, save_checkpoint
from .flow import DivergenceError, loss_and_gradients, make_training_draw
from .manifest import Manifest
from .text_frontend import CharVocab
from .triplet_forge import Strategy, TripletSample, remix_triplet

console = Console()

EXP_AVG_PREFIX = "optim.exp_avg."
EXP_AVG_SQ_PREFIX = "optim.exp_avg_sq."
LOSS_LOG = "loss.log"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    frames_per_batch: int = 2048
    seed: int = 0
    checkpoint_every: int = 1000
    min_mask_frac: float = 0.3
    max_mask_frac: float = 1.0
    ser_augment: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not all(0.0 < b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in (0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.frames_per_batch < 1 or self.checkpoint_every < 1:
            raise ValueError("frames_per_batch and checkpoint_every must be positive")
        if not 0.0 < self.min_mask_frac <= self.max_mask_frac <= 1.0:
            raise ValueError(
                f"Need 0 < min_mask_frac <= max_mask_frac <= 1, "
                f"got {self.min_mask_frac}, {self.max_mask_frac}"
            )
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass
class OptimizerState:
    """AdamW moment accumulators keyed by parameter name."""

    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, model: Denoiser) -> "OptimizerState":
        params = dict(model.named_parameters())
        return cls(
            exp_avg={name: torch.zeros_like(p, requires_grad=False) for name, p in params.items()},
            exp_avg_sq={name: torch.zeros_like(p, requires_grad=False) for name, p in params.items()},
        )

    def to_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = {EXP_AVG_PREFIX + name: t for name, t in self.exp_avg.items()}
        tensors.update({EXP_AVG_SQ_PREFIX + name: t for name, t in self.exp_avg_sq.items()})
        return tensors

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "OptimizerState":
        state = cls.zeros_like(checkpoint.model)
        for name in state.exp_avg:
            try:
                state.exp_avg[name] = checkpoint.extra[EXP_AVG_PREFIX + name]
                state.exp_avg_sq[name] = checkpoint.extra[EXP_AVG_SQ_PREFIX + name]
            except KeyError as e:
                raise ValueError(f"Checkpoint has no optimizer state for {name}") from e
        state.step = int(checkpoint.meta.get("step", 0))
        return state


@torch.no_grad()
def adamw_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: OptimizerState,
    cfg: TrainConfig,
) -> OptimizerState:
    """One AdamW update, in place, with weight decay decoupled from the moments."""
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError(
                f"Gradient for {name} has shape {tuple(grad.shape)}, "
                f"parameter has {tuple(params[name].shape)}"
            )
        if not torch.isfinite(grad).all():
            raise DivergenceError(f"Non-finite gradient for {name}")

    beta1, beta2 = cfg.betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for name, p in params.items():
        grad = grads[name]
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        p.mul_(1.0 - cfg.lr * cfg.weight_decay)
        m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
        p.sub_(cfg.lr * (m / bias1) / ((v / bias2).sqrt() + cfg.eps))
    return state


def make_batches(
    manifest: Manifest, frames_per_batch: int, rng: np.random.Generator
) -> List[List[str]]:
    """Greedy frame-budget packing of one shuffled pass over the manifest."""
    if manifest.size == 0:
        raise ValueError("Cannot batch an empty manifest")
    batches: List[List[str]] = []
    current: List[str] = []
    used = 0
    for index in rng.permutation(manifest.size):
        record = manifest.records[int(index)]
        frames = int(record["frames"])
        if frames > frames_per_batch:
            raise ValueError(
                f"Sample {record['id']} has {frames} frames, more than the "
                f"batch budget of {frames_per_batch}"
            )
        if current and used + frames > frames_per_batch:
            batches.append(current)
            current, used = [], 0
        current.append(record["id"])
        used += frames
    batches.append(current)
    return batches


def batch_schedule(
    manifest: Manifest, frames_per_batch: int, seed: int, start_step: int = 0
) -> Iterator[Tuple[int, List[str]]]:
    """Endless (step, batch) stream; epoch e is shuffled with the seed (seed, e)."""
    step = 0
    epoch = 0
    while True:
        for batch in make_batches(manifest, frames_per_batch, np.random.default_rng([seed, epoch])):
            if step >= start_step:
                yield step, batch
            step += 1
        epoch += 1


def _prepare(
    triplet: TripletSample, rng: np.random.Generator, cfg: TrainConfig
) -> TripletSample:
    if cfg.ser_augment and triplet.strategy is Strategy.SYNTHETIC:
        return remix_triplet(triplet, snr_to_ser(rng.uniform(-5.0, 20.0)))
    return triplet


def read_loss_log(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    steps, losses = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                step, loss = line.split("\t")
                steps.append(int(step))
                losses.append(float(loss))
    return np.array(steps, dtype=np.int64), np.array(losses)


def smooth_losses(losses: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average; shorter runs are averaged over what exists."""
    window = max(1, min(window, len(losses)))
    return np.convolve(losses, np.ones(window) / window, mode="valid")


def checkpoint_path(out_dir: Union[str, Path], step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step}.umbr"


def train(
    cfg: TrainConfig,
    manifest: Manifest,
    out_dir: Union[str, Path],
    model_config: Optional[DenoiserConfig] = None,
    resume: Optional[Union[str, Path]] = None,
    vocab: Optional[CharVocab] = None,
    mel_cfg: Optional[MelConfig] = None,
    show_progress: bool = True,
) -> Path:
    """Run CFM training and return the path of the final checkpoint.

    Args:
        cfg: Optimisation settings
        manifest: Triplets to train on
        out_dir: Where checkpoints and the loss log are written
        model_config: Architecture of a fresh model; ignored when resuming
        resume: Checkpoint to continue from (its step is the starting step)
        vocab: Character vocabulary matching the model's token table
        mel_cfg: Mel settings of the stored triplets
        show_progress: Draw a tqdm bar over steps

    Returns:
        Path to ckpt_<cfg.steps>.umbr
    """
    vocab = vocab or CharVocab.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume:
        checkpoint = load_checkpoint(resume)
        model = checkpoint.model
        state = OptimizerState.from_checkpoint(checkpoint)
        console.print(f"[green]Resuming from {resume} at step {state.step}[/green]")
    else:
        model = build_denoiser(model_config or DenoiserConfig(), cfg.seed)
        state = OptimizerState.zeros_like(model)
    start = state.step
    if start > cfg.steps:
        raise ValueError(f"Checkpoint is at step {start}, beyond the requested {cfg.steps}")
    if cfg.frames_per_batch < model.config.max_frames:
        raise ValueError(
            f"frames_per_batch {cfg.frames_per_batch} is below max_frames "
            f"{model.config.max_frames}"
        )
    if model.config.vocab_size != vocab.size:
        raise ValueError(
            f"Model token table has {model.config.vocab_size} entries, vocabulary has {vocab.size}"
        )

    too_long = [
        record["id"] for record in manifest.records if int(record["frames"]) > model.config.max_frames
    ]
    if too_long:
        raise ValueError(
            f"Samples longer than max_frames={model.config.max_frames}: {', '.join(too_long)}"
        )

    mel_cfg = mel_cfg or MelConfig(n_mels=model.config.n_mels)
    triplets = {record["id"]: manifest.load_triplet(record, mel_cfg) for record in manifest.records}

    def save(step: int) -> Path:
        return save_checkpoint(
            checkpoint_path(out_dir, step),
            model,
            extra=state.to_tensors(),
            meta={"seed": cfg.seed, "step": step},
        )

    if start == cfg.steps:
        return save(start)

    params = dict(model.named_parameters())
    schedule = batch_schedule(manifest, cfg.frames_per_batch, cfg.seed, start_step=start)
    with open(out_dir / LOSS_LOG, "a" if resume else "w", encoding="utf-8") as log:
        for step, batch in tqdm(
            islice(schedule, cfg.steps - start),
            total=cfg.steps - start,
            desc="Training",
            disable=not show_progress,
        ):
            draws = []
            for index, sample_id in enumerate(batch):
                rng = np.random.default_rng([cfg.seed, step, index])
                triplet = _prepare(triplets[sample_id], rng, cfg)
                draws.append(
                    make_training_draw(triplet, rng, vocab, cfg.min_mask_frac, cfg.max_mask_frac)
                )
            try:
                loss, grads = loss_and_gradients(model, draws)
                adamw_step(params, grads, state, cfg)
            except DivergenceError as e:
                raise DivergenceError(f"Training diverged at step {step + 1}: {e}") from e

            log.write(f"{step + 1}\t{loss:.8g}\n")
            if (step + 1) % cfg.checkpoint_every == 0 and step + 1 != cfg.steps:
                save(step + 1)

    path = save(cfg.steps)
    console.print(f"[green]Saved checkpoint {path}[/green]")
    return path
