import asyncio
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import librosa
import matplotlib.image
import numpy as np
from rich.console import Console

from .audio_dsp import MelConfig, MelSpectrogram, Waveform, save_mel, write_wav
from .denoiser import Denoiser
from .flow import SamplerConfig, SamplerMethod, TemporalMask, reconstruct, sample_mask, synthesize
from .manifest import Manifest
from .text_frontend import CharVocab
from .triplet_forge import BASE_FREQ_HZ, FREQ_STEP_HZ, LETTERS, SPEECH_BAND

console = Console()

DECODE_WINDOW = 640
DECODE_FFT = 4096
DECODE_SILENCE_DB = -30.0
DECODE_MIN_RUN = 3


def mel_mse(
    a: MelSpectrogram, b: MelSpectrogram, mask: Optional[TemporalMask] = None
) -> float:
    """Mean squared difference, restricted to the masked frames when a mask is given."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"Mel shapes differ: {a.values.shape} vs {b.values.shape}")
    diff = a.values - b.values
    if mask is not None:
        if mask.n_frames != a.n_frames:
            raise ValueError(f"Mask covers {mask.n_frames} frames, mels have {a.n_frames}")
        diff = diff[:, mask.frames]
    return float(np.mean(diff**2))


def env_speech_energy_ratio(
    wave: Waveform, cfg: MelConfig, speech_band: Tuple[float, float] = SPEECH_BAND
) -> float:
    """Out-of-band over in-band energy of the magnitude spectrogram."""
    lo, hi = speech_band
    if not 0.0 <= lo < hi <= wave.sample_rate / 2:
        raise ValueError(f"Speech band {speech_band} is not within Nyquist")
    cfg.frame_count(len(wave))
    power = (
        np.abs(
            librosa.stft(wave.samples, n_fft=cfg.n_fft, hop_length=cfg.hop, center=False)
        )
        ** 2
    )
    freqs = librosa.fft_frequencies(sr=wave.sample_rate, n_fft=cfg.n_fft)
    in_band = (freqs >= lo) & (freqs <= hi)
    speech_energy = float(power[in_band].sum())
    env_energy = float(power[~in_band].sum())
    if speech_energy + env_energy <= 0.0:
        raise ValueError("Silent input: total energy is zero")
    if speech_energy == 0.0:
        return float("inf")
    return env_energy / speech_energy


def decode_transcript(wave: Waveform, hop: int = 160) -> str:
    """Read back a synthetic-corpus transcript from its voicing frequencies.

    Each frame's strongest peak between the lowest and highest letter
    frequencies is mapped to the nearest letter; quiet frames become a
    pause. Runs shorter than a few frames are dropped before collapsing.
    """
    lo = BASE_FREQ_HZ - FREQ_STEP_HZ
    hi = BASE_FREQ_HZ + FREQ_STEP_HZ * len(LETTERS)
    if len(wave) < DECODE_WINDOW:
        return ""
    spec = np.abs(
        librosa.stft(
            wave.samples, n_fft=DECODE_FFT, hop_length=hop, win_length=DECODE_WINDOW
        )
    )
    freqs = librosa.fft_frequencies(sr=wave.sample_rate, n_fft=DECODE_FFT)
    band = (freqs >= lo) & (freqs <= hi)
    band_spec = spec[band]
    peak_level = float(band_spec.max()) if band_spec.size else 0.0
    if peak_level <= 0.0:
        return ""

    frame_peaks = band_spec.max(axis=0)
    voiced = 20.0 * np.log10(np.maximum(frame_peaks, 1e-12) / peak_level) > DECODE_SILENCE_DB
    peak_freqs = freqs[band][np.argmax(band_spec, axis=0)]
    indices = np.clip(np.round((peak_freqs - BASE_FREQ_HZ) / FREQ_STEP_HZ), 0, len(LETTERS) - 1)
    symbols = [LETTERS[int(i)] if v else " " for i, v in zip(indices, voiced)]

    runs: List[Tuple[str, int]] = []
    for symbol in symbols:
        if runs and runs[-1][0] == symbol:
            runs[-1] = (symbol, runs[-1][1] + 1)
        else:
            runs.append((symbol, 1))
    kept = [symbol for symbol, length in runs if length >= DECODE_MIN_RUN]
    collapsed = [s for i, s in enumerate(kept) if i == 0 or s != kept[i - 1]]
    return " ".join("".join(collapsed).split())


def edit_distance(a: str, b: str) -> int:
    row = np.arange(len(b) + 1)
    for i, ca in enumerate(a, start=1):
        prev, row = row, np.empty_like(row)
        row[0] = i
        for j, cb in enumerate(b, start=1):
            row[j] = min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (ca != cb))
    return int(row[-1])


def char_error_rate(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ValueError("Reference transcript must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def plot_mel(mel: MelSpectrogram, path: Union[str, Path]) -> Path:
    """Grayscale PNG, one pixel per bin and frame, lowest band at the bottom."""
    path = Path(path)
    if not path.parent.exists():
        raise ValueError(f"Cannot write {path}: directory does not exist")
    vmin = float(mel.values.min())
    vmax = float(mel.values.max())
    if vmax == vmin:
        vmax = vmin + 1.0
    matplotlib.image.imsave(
        path,
        mel.values,
        cmap="gray",
        vmin=vmin,
        vmax=vmax,
        origin="lower",
        format="png",
        metadata={"Software": None},
    )
    return path


class SweepEntry(NamedTuple):
    ser: float
    ratio: float
    cer: float
    mel_path: str
    wave_path: str
    image_path: str


@dataclass
class SweepResult:
    entries: List[SweepEntry] = field(default_factory=list)
    seed: int = 0
    checkpoint: str = ""

    @property
    def ratios(self) -> List[float]:
        return [entry.ratio for entry in self.entries]

    def save(self, path: Union[str, Path]) -> Path:
        """One JSON object per SER value."""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for entry in self.entries:
                record = {"seed": self.seed, "checkpoint": self.checkpoint, **entry._asdict()}
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SweepResult":
        result = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                result.seed = record.pop("seed")
                result.checkpoint = record.pop("checkpoint")
                result.entries.append(SweepEntry(**record))
        return result


def _sweep_one(
    model: Denoiser,
    ser: float,
    ref_speech_mel: MelSpectrogram,
    ref_transcript: str,
    env_prompt_mel: MelSpectrogram,
    gen_text: str,
    sampler_cfg: SamplerConfig,
    mel_cfg: MelConfig,
    out_dir: Path,
    vocab: CharVocab,
) -> SweepEntry:
    mel, wave = synthesize(
        model, ref_speech_mel, ref_transcript, env_prompt_mel, gen_text, ser, sampler_cfg, mel_cfg, vocab
    )
    stem = f"ser_{ser:.3f}"
    mel_path = save_mel(out_dir / f"{stem}.mel", mel)
    wave_path = write_wav(out_dir / f"{stem}.wav", wave)
    image_path = plot_mel(mel, out_dir / f"{stem}.png")
    return SweepEntry(
        ser=float(ser),
        ratio=env_speech_energy_ratio(wave, mel_cfg),
        cer=char_error_rate(gen_text, decode_transcript(wave, mel_cfg.hop)),
        mel_path=str(mel_path),
        wave_path=str(wave_path),
        image_path=str(image_path),
    )


async def ser_sweep_async(
    model: Denoiser,
    ref_speech_mel: MelSpectrogram,
    ref_transcript: str,
    env_prompt_mel: MelSpectrogram,
    gen_text: str,
    ser_values: Sequence[float],
    out_dir: Union[str, Path],
    seed: int = 0,
    n_steps: int = 32,
    mel_cfg: Optional[MelConfig] = None,
    vocab: Optional[CharVocab] = None,
    checkpoint: str = "",
) -> SweepResult:
    """Synthesize the same utterance at every SER value, concurrently.

    Only the SER conditioning differs between runs; text, reference, env
    prompt and noise seed are shared.
    """
    ser_values = [float(s) for s in ser_values]
    if not ser_values:
        raise ValueError("At least one SER value is required")
    if any(not 0.0 <= s <= 1.0 for s in ser_values):
        raise ValueError(f"SER values must lie in [0, 1], got {ser_values}")
    if any(b <= a for a, b in zip(ser_values, ser_values[1:])):
        raise ValueError(f"SER values must be strictly increasing, got {ser_values}")

    mel_cfg = mel_cfg or MelConfig(n_mels=model.config.n_mels)
    vocab = vocab or CharVocab.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler_cfg = SamplerConfig(n_steps=n_steps, seed=seed)

    entries = await asyncio.gather(
        *(
            asyncio.to_thread(
                _sweep_one,
                model,
                ser,
                ref_speech_mel,
                ref_transcript,
                env_prompt_mel,
                gen_text,
                sampler_cfg,
                mel_cfg,
                out_dir,
                vocab,
            )
            for ser in ser_values
        )
    )
    for entry in entries:
        console.print(f"ser={entry.ser:.2f}  env/speech={entry.ratio:.4f}  cer={entry.cer:.2f}")
    return SweepResult(entries=list(entries), seed=seed, checkpoint=checkpoint)


def ser_sweep(*args, **kwargs) -> SweepResult:
    return asyncio.run(ser_sweep_async(*args, **kwargs))


class ReconstructionScore(NamedTuple):
    sample_id: str
    mse: float
    normalized: float


def evaluate_reconstruction(
    model: Denoiser,
    manifest: Manifest,
    mel_cfg: MelConfig,
    seed: int = 0,
    n_steps: int = 32,
    min_frac: float = 0.3,
    max_frac: float = 1.0,
    vocab: Optional[CharVocab] = None,
    method: Union[SamplerMethod, str] = SamplerMethod.EULER,
) -> List[ReconstructionScore]:
    """Infill a seeded masked span of every triplet and score the masked region.

    The normalised score divides the MSE by the variance of the target over
    the same region.
    """
    scores = []
    for index, record in enumerate(manifest.records):
        triplet = manifest.load_triplet(record, mel_cfg)
        mask = sample_mask(
            triplet.n_frames, np.random.default_rng([seed, index]), min_frac, max_frac
        )
        sampler = SamplerConfig(n_steps=n_steps, method=method, seed=seed)
        generated = reconstruct(model, triplet, mask, sampler, vocab)
        mse = mel_mse(generated, triplet.target_mel, mask)
        variance = float(np.var(triplet.target_mel.values[:, mask.frames]))
        normalized = mse / variance if variance > 0 else float("inf")
        scores.append(ReconstructionScore(record["id"], mse, normalized))
    return scores
