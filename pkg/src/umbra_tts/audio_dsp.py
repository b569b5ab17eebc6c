import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import librosa
import numpy as np
import soundfile as sf

LOG_EPS = 1e-5
SNR_MIN_DB = -5.0
SNR_MAX_DB = 20.0
PEAK_LIMIT = 0.99
GL_MOMENTUM = 0.99
MEL_MAGIC = b"UMEL"


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio: float64 samples in nominal range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"Waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains NaN or Inf samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2)) if len(self) else 0.0

    @property
    def rms(self) -> float:
        return float(np.sqrt(self.power))


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}"
            )
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be >= 1, got {self.n_mels}")

    def frame_count(self, n_samples: int) -> int:
        """Frames produced by an uncentered STFT over `n_samples`."""
        if n_samples < self.n_fft:
            raise ValueError(
                f"Waveform too short: {n_samples} samples < n_fft={self.n_fft}"
            )
        return 1 + (n_samples - self.n_fft) // self.hop

    def band_centers(self) -> np.ndarray:
        """Center frequency (Hz) of every mel band."""
        edges = librosa.mel_frequencies(
            n_mels=self.n_mels + 2, fmin=self.fmin, fmax=self.fmax
        )
        return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Slaney-normalised filterbank, shape (n_mels, 1 + n_fft // 2)."""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.n_fft,
        n_mels=cfg.n_mels,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
        dtype=np.float64,
    )


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-mel energies, shape (F, N): rows are mel bands, columns are frames."""

    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.config.n_mels:
            raise ValueError(
                f"Expected mel of shape ({self.config.n_mels}, N), got {values.shape}"
            )
        if values.shape[1] < 1:
            raise ValueError("Mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(values)):
            raise ValueError("Mel spectrogram contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def power(self) -> np.ndarray:
        """Linear mel power, inverting the log compression; the log floor maps to 0."""
        floor = np.log(LOG_EPS) + 1e-6
        return np.where(self.values <= floor, 0.0, np.maximum(np.exp(self.values) - LOG_EPS, 0.0))

    def frames(self, start: int, stop: int) -> "MelSpectrogram":
        return MelSpectrogram(self.values[:, start:stop], self.config)


@dataclass(frozen=True)
class SerValue:
    """Speech-to-environment ratio; 0 means the environment is loudest."""

    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"SER must be in [0, 1], got {self.value}")
        object.__setattr__(self, "value", float(self.value))

    def __float__(self) -> float:
        return self.value


def stft_mel(wave: Waveform, cfg: MelConfig) -> MelSpectrogram:
    """Uncentered Hann STFT → power → mel filterbank → log(· + 1e-5)."""
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"Sample-rate mismatch: wave {wave.sample_rate} Hz, config {cfg.sample_rate} Hz"
        )
    cfg.frame_count(len(wave))
    spec = librosa.stft(
        wave.samples,
        n_fft=cfg.n_fft,
        hop_length=cfg.hop,
        win_length=cfg.n_fft,
        window="hann",
        center=False,
    )
    mel_energy = mel_filterbank(cfg) @ (np.abs(spec) ** 2)
    return MelSpectrogram(np.log(mel_energy + LOG_EPS), cfg)


def _blocked_bins(power: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(K, N) mask of STFT bins that fall within one bin of a mel band sitting at the log floor."""
    support = (mel_filterbank(cfg) > 0).T.astype(np.float64)
    blocked = support @ (power <= 0.0).astype(np.float64) > 0.0
    near = blocked.copy()
    near[1:] |= blocked[:-1]
    near[:-1] |= blocked[1:]
    # Peaks next to DC or Nyquist would fold onto their own mirror image.
    near[:2] = True
    near[-2:] = True
    return near


def _peak_spectrum(
    magnitude: np.ndarray, blocked: np.ndarray, cfg: MelConfig, seed: int
) -> np.ndarray:
    """Rebuild a consistent complex spectrum from spectral peaks.

    Every local maximum outside `blocked` becomes a bin-centred sinusoid that
    carries the energy of the bins nearest to it. Its Hann analysis kernel
    (-1/2, 1, -1/2) is laid down with a phase advancing by 2π·k·hop/n_fft per
    frame from a seeded offset, so a stationary input maps to an exact STFT.
    """
    n_bins, n_frames = magnitude.shape
    offsets = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, n_bins)
    advance = 2.0 * np.pi * cfg.hop / cfg.n_fft * np.arange(n_bins)
    phase = offsets[:, None] + advance[:, None] * np.arange(n_frames)[None, :]

    candidates = np.where(blocked, 0.0, magnitude)
    peaks = librosa.util.localmax(candidates, axis=0) & (candidates > 0.0)
    energy = magnitude**2
    bins = np.arange(n_bins)
    spectrum = np.zeros((n_bins, n_frames), dtype=np.complex128)
    for n in range(n_frames):
        idx = np.flatnonzero(peaks[:, n])
        if idx.size == 0:
            continue
        owner = np.searchsorted((idx[:-1] + idx[1:]) / 2.0, bins)
        folded = np.bincount(owner, weights=energy[:, n], minlength=idx.size)
        # Kernel energy is 1 + 1/4 + 1/4 of the squared peak.
        peak = np.sqrt(folded / 1.5) * np.exp(1j * phase[idx, n])
        spectrum[idx, n] += peak
        spectrum[idx - 1, n] -= 0.5 * peak
        spectrum[idx + 1, n] -= 0.5 * peak
    return spectrum


def griffin_lim(
    mel: MelSpectrogram, cfg: MelConfig, iters: int = 32, seed: int = 0
) -> Waveform:
    """Invert a log-mel spectrogram to audio.

    The mel power is mapped back onto linear frequency with a non-negative
    least-squares fit against the filterbank. Bins that touch a band at the
    log floor are kept empty, the remaining energy is gathered onto spectral
    peaks, and fast Griffin-Lim refines the phase from there.

    Args:
        mel: Log-mel spectrogram produced by `stft_mel` (or the sampler)
        cfg: Mel configuration the spectrogram was computed with
        iters: Number of Griffin-Lim iterations
        seed: Seed for the per-bin phase offsets

    Returns:
        Waveform of length (N - 1) * hop + n_fft
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if mel.config != cfg:
        raise ValueError("Mel spectrogram was computed with a different MelConfig")

    n_samples = (mel.n_frames - 1) * cfg.hop + cfg.n_fft
    power = mel.power
    if not np.any(power > 0):
        return Waveform(np.zeros(n_samples), cfg.sample_rate)

    magnitude = librosa.feature.inverse.mel_to_stft(
        power,
        sr=cfg.sample_rate,
        n_fft=cfg.n_fft,
        power=2.0,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
    )
    spectrum = _peak_spectrum(magnitude, _blocked_bins(power, cfg), cfg, seed)
    target = np.abs(spectrum)
    frame_args = dict(
        hop_length=cfg.hop, win_length=cfg.n_fft, n_fft=cfg.n_fft, window="hann", center=False
    )

    angles = np.exp(1j * np.angle(spectrum))
    previous = None
    for _ in range(iters):
        samples = librosa.istft(target * angles, length=n_samples, **frame_args)
        rebuilt = librosa.stft(samples, **frame_args)
        angles = rebuilt.copy()
        if previous is not None:
            angles -= GL_MOMENTUM / (1.0 + GL_MOMENTUM) * previous
        angles /= np.abs(angles) + 1e-16
        previous = rebuilt
    samples = librosa.istft(target * angles, length=n_samples, **frame_args)
    return Waveform(np.asarray(samples, dtype=np.float64), cfg.sample_rate)


def snr_to_ser(snr_db: float) -> SerValue:
    """Map an SNR in dB linearly onto [0, 1] over [-5, 20] dB, clamping outside."""
    ser = (float(snr_db) - SNR_MIN_DB) / (SNR_MAX_DB - SNR_MIN_DB)
    return SerValue(min(max(ser, 0.0), 1.0))


def ser_to_snr(ser: Union[SerValue, float]) -> float:
    return SNR_MIN_DB + float(ser) * (SNR_MAX_DB - SNR_MIN_DB)


def fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Loop or truncate `samples` to exactly `length` entries."""
    if samples.shape[0] == 0:
        raise ValueError("Cannot tile an empty signal")
    return np.resize(samples, length)


def ser_gain(speech: Waveform, env: Waveform, ser: Union[SerValue, float]) -> float:
    """Gain g on the (tiled) env such that 10·log10(P_speech / (g²·P_env)) = 25·ser − 5."""
    env_samples = fit_length(env.samples, len(speech))
    p_speech = speech.power
    p_env = float(np.mean(env_samples**2))
    if p_speech <= 0.0:
        raise ValueError("Speech has zero power; SNR is undefined")
    if p_env <= 0.0:
        raise ValueError("Environment has zero power; SNR is undefined")
    target_snr = ser_to_snr(ser)
    return float(np.sqrt(p_speech / (p_env * 10.0 ** (target_snr / 10.0))))


def mix_at_ser(speech: Waveform, env: Waveform, ser: Union[SerValue, float]) -> Waveform:
    """Scale the env to hit the requested SER, add it to speech and peak-limit."""
    if speech.sample_rate != env.sample_rate:
        raise ValueError(
            f"Sample-rate mismatch: speech {speech.sample_rate} Hz, env {env.sample_rate} Hz"
        )
    gain = ser_gain(speech, env, ser)
    mixed = speech.samples + gain * fit_length(env.samples, len(speech))
    peak = float(np.max(np.abs(mixed)))
    if peak > PEAK_LIMIT:
        mixed = mixed * (PEAK_LIMIT / peak)
    return Waveform(mixed, speech.sample_rate)


def read_wav(path: Union[str, Path]) -> Waveform:
    samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=False)
    if samples.ndim != 1:
        raise ValueError(f"{path}: only single-channel audio is supported")
    return Waveform(samples, int(sample_rate))


def write_wav(path: Union[str, Path], wave: Waveform, subtype: str = "PCM_16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype=subtype)
    return path


def save_mel(path: Union[str, Path], mel: MelSpectrogram) -> Path:
    """Write a "UMEL" dump: magic, u32 F, u32 N, f32 row-major values (little-endian)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_mels, n_frames = mel.values.shape
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", n_mels, n_frames))
        f.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())
    return path


def load_mel(path: Union[str, Path], cfg: Optional[MelConfig] = None) -> MelSpectrogram:
    """Read a "UMEL" dump; without a config, one matching the stored bin count is used."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MEL_MAGIC:
        raise ValueError(f"{path}: not a UMEL file")
    n_mels, n_frames = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n_mels * n_frames
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data[12:], dtype="<f4").reshape(n_mels, n_frames)
    return MelSpectrogram(values.astype(np.float64), cfg or MelConfig(n_mels=n_mels))
