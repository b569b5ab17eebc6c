from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Tuple, Union

import librosa
import numpy as np
from rich.console import Console

from .audio_dsp import (
    LOG_EPS,
    MelConfig,
    MelSpectrogram,
    SerValue,
    Waveform,
    fit_length,
    ser_gain,
    ser_to_snr,
    snr_to_ser,
    stft_mel,
)

console = Console()

SILENCE_DB = -200.0
SPEECH_BAND = (100.0, 2000.0)
LETTERS = "abcdefghijklmnopqrstuvwxyz"
BASE_FREQ_HZ = 160.0
FREQ_STEP_HZ = 20.0
ENV_CLASSES = ("filtered_noise", "modulated_noise", "tone_pad")


class Strategy(str, Enum):
    VAD = "vad"
    SEPARATION = "separation"
    SYNTHETIC = "synthetic"


class StrategyInapplicable(ValueError):
    """The requested extraction strategy cannot run on this recording."""


@dataclass(frozen=True, eq=False)
class TripletSample:
    target_mel: MelSpectrogram
    speech_mel: MelSpectrogram
    env_mel: MelSpectrogram
    transcript: str
    ser: SerValue
    strategy: Strategy
    sample_id: str = ""

    def __post_init__(self):
        n_mels = {m.values.shape[0] for m in (self.target_mel, self.speech_mel, self.env_mel)}
        if len(n_mels) != 1:
            raise ValueError(f"Triplet mels disagree on mel bins: {sorted(n_mels)}")
        if self.target_mel.n_frames != self.speech_mel.n_frames:
            raise ValueError(
                f"Target has {self.target_mel.n_frames} frames, speech has "
                f"{self.speech_mel.n_frames}"
            )
        if not self.transcript:
            raise ValueError("Triplet transcript must be non-empty")

    @property
    def n_frames(self) -> int:
        return self.target_mel.n_frames


@dataclass(frozen=True, eq=False)
class VadLabels:
    """Per-frame speech flags over the uncentered n_fft/hop framing."""

    speech: np.ndarray
    n_fft: int
    hop: int

    def __post_init__(self):
        object.__setattr__(self, "speech", np.asarray(self.speech, dtype=bool))

    def __len__(self) -> int:
        return self.speech.shape[0]

    @property
    def n_non_speech(self) -> int:
        return int(np.count_nonzero(~self.speech))


def _frame_rms(wave: Waveform, cfg: MelConfig) -> np.ndarray:
    cfg.frame_count(len(wave))
    frames = librosa.util.frame(wave.samples, frame_length=cfg.n_fft, hop_length=cfg.hop)
    return np.sqrt(np.mean(frames**2, axis=0))


def _drop_short_runs(flags: np.ndarray, min_run: int) -> np.ndarray:
    """Flip label runs shorter than `min_run` frames to the opposite label."""
    out = flags.copy()
    if min_run <= 1 or out.size == 0:
        return out
    change = np.flatnonzero(np.diff(out.astype(np.int8))) + 1
    if change.size == 0:
        return out
    bounds = np.concatenate([[0], change, [out.size]])
    for start, stop in zip(bounds[:-1], bounds[1:]):
        if stop - start < min_run:
            out[start:stop] = not flags[start]
    return out


def energy_vad(
    wave: Waveform, cfg: MelConfig, threshold_db: float = 10.0, hysteresis: int = 2
) -> VadLabels:
    """Label frames as speech when they sit `threshold_db` above the noise floor.

    Frame RMS is measured relative to the loudest frame, so the labels do not
    depend on the overall gain of the recording. The noise floor is the 5th
    percentile of frame levels. A recording whose level range never exceeds
    the threshold has no quiet reference; all of its non-silent frames are
    labelled speech.
    """
    rms = _frame_rms(wave, cfg)
    peak = float(rms.max())
    if peak <= 0.0:
        return VadLabels(np.zeros(rms.shape[0], dtype=bool), cfg.n_fft, cfg.hop)

    relative = rms / peak
    with np.errstate(divide="ignore"):
        level_db = np.where(relative > 0, 20.0 * np.log10(relative), SILENCE_DB)
    floor_db = float(np.percentile(level_db, 5))
    if -floor_db <= threshold_db:
        speech = level_db > SILENCE_DB
    else:
        speech = level_db > floor_db + threshold_db
    return VadLabels(_drop_short_runs(speech, hysteresis), cfg.n_fft, cfg.hop)


def speech_sample_mask(labels: VadLabels, n_samples: int) -> np.ndarray:
    """Spread frame labels onto samples.

    Frame i owns samples [i·hop, (i+1)·hop); the last frame also owns the
    tail up to the end of the recording.
    """
    n_frames = len(labels)
    if n_frames == 0:
        return np.zeros(n_samples, dtype=bool)
    owner = np.minimum(np.arange(n_samples) // labels.hop, n_frames - 1)
    return labels.speech[owner]


def env_from_vad(wave: Waveform, labels: VadLabels) -> Waveform:
    """Concatenate every non-speech region of `wave` in temporal order."""
    if labels.n_non_speech == 0:
        raise StrategyInapplicable("VAD found no non-speech frames")
    keep = ~speech_sample_mask(labels, len(wave))
    return Waveform(wave.samples[keep], wave.sample_rate)


def force_noise_frames(
    wave: Waveform, labels: VadLabels, cfg: MelConfig, fraction: float = 0.05
) -> VadLabels:
    """Mark the quietest `fraction` of frames (at least one) as non-speech."""
    rms = _frame_rms(wave, cfg)
    count = max(1, int(fraction * rms.shape[0]))
    quietest = np.argsort(rms, kind="stable")[:count]
    speech = labels.speech.copy()
    speech[quietest] = False
    return VadLabels(speech, labels.n_fft, labels.hop)


def spectral_separate(
    wave: Waveform,
    labels: VadLabels,
    cfg: MelConfig,
    over_subtraction: float = 8.0,
) -> Tuple[Waveform, Waveform]:
    """Split a recording into (speech, env) with a stationary spectral gate.

    The noise profile is the median magnitude over non-speech frames. Each
    time-frequency cell hands min(1, α·profile² / |X|²) of itself to the
    env and the remainder to speech, so the two STFTs sum to the input.
    """
    if labels.n_non_speech == 0:
        raise StrategyInapplicable("Spectral separation needs at least one non-speech frame")
    n_samples = len(wave)
    spec = librosa.stft(
        wave.samples, n_fft=cfg.n_fft, hop_length=cfg.hop, win_length=cfg.n_fft, window="hann"
    )
    n_cols = spec.shape[1]

    # centred column j covers the same audio as uncentred frame j - n_fft/(2·hop)
    label_centres = np.flatnonzero(~labels.speech) * cfg.hop + cfg.n_fft // 2
    noise_cols = np.unique(np.minimum((label_centres + cfg.hop // 2) // cfg.hop, n_cols - 1))

    magnitude = np.abs(spec)
    profile = np.median(magnitude[:, noise_cols], axis=1, keepdims=True)
    power = magnitude**2
    noise_power = over_subtraction * profile**2
    with np.errstate(divide="ignore", invalid="ignore"):
        gate = np.where(power > 0, np.minimum(1.0, noise_power / power), 1.0)

    env_spec = gate * spec
    speech_spec = spec - env_spec
    istft_kwargs = dict(hop_length=cfg.hop, win_length=cfg.n_fft, window="hann", length=n_samples)
    speech = librosa.istft(speech_spec, **istft_kwargs)
    env = librosa.istft(env_spec, **istft_kwargs)
    return (
        Waveform(np.asarray(speech, dtype=np.float64), wave.sample_rate),
        Waveform(np.asarray(env, dtype=np.float64), wave.sample_rate),
    )


def choose_strategy(rng: np.random.Generator) -> Strategy:
    return Strategy.VAD if rng.random() < 0.5 else Strategy.SEPARATION


def _estimate_ser(speech: Waveform, env: Waveform) -> SerValue:
    p_speech, p_env = speech.power, env.power
    if p_env <= 0.0:
        return SerValue(1.0)
    if p_speech <= 0.0:
        return SerValue(0.0)
    return snr_to_ser(10.0 * np.log10(p_speech / p_env))


def forge_triplet(
    wave: Waveform,
    transcript: str,
    rng: np.random.Generator,
    cfg: MelConfig,
    threshold_db: float = 10.0,
    sample_id: str = "",
) -> TripletSample:
    """Mine a (speech, env, transcript) triplet from one mixed recording.

    VAD and spectral separation are picked with equal probability; when the
    VAD strategy cannot yield an environment track the forge falls back to
    separation and records that in the triplet's strategy field.
    """
    if not transcript:
        raise ValueError("A transcript is required to forge a triplet")
    labels = energy_vad(wave, cfg, threshold_db)
    strategy = choose_strategy(rng)

    if strategy is Strategy.VAD:
        try:
            env = env_from_vad(wave, labels)
            if len(env) < cfg.n_fft:
                raise StrategyInapplicable(
                    f"non-speech audio spans {len(env)} samples, fewer than n_fft"
                )
            speech = Waveform(
                wave.samples * speech_sample_mask(labels, len(wave)), wave.sample_rate
            )
        except StrategyInapplicable as e:
            console.print(f"[yellow]{sample_id or 'recording'}: {e}; using separation[/yellow]")
            strategy = Strategy.SEPARATION

    if strategy is Strategy.SEPARATION:
        if labels.n_non_speech == 0:
            labels = force_noise_frames(wave, labels, cfg)
        speech, env = spectral_separate(wave, labels, cfg)

    return TripletSample(
        target_mel=stft_mel(wave, cfg),
        speech_mel=stft_mel(speech, cfg),
        env_mel=stft_mel(env, cfg),
        transcript=transcript,
        ser=_estimate_ser(speech, env),
        strategy=strategy,
        sample_id=sample_id,
    )


def char_frequency(ch: str) -> Optional[float]:
    """Base frequency (Hz) voicing `ch` in the synthetic corpus; None for a pause."""
    if ch == " ":
        return None
    index = LETTERS.index(ch) if ch in LETTERS else ord(ch) % len(LETTERS)
    return BASE_FREQ_HZ + FREQ_STEP_HZ * index


def _random_transcript(rng: np.random.Generator) -> str:
    words = [
        "".join(rng.choice(list(LETTERS), size=int(rng.integers(2, 5))))
        for _ in range(int(rng.integers(2, 4)))
    ]
    return " ".join(words)


def _synth_speech(
    transcript: str, rng: np.random.Generator, sample_rate: int
) -> Tuple[np.ndarray, list]:
    segments = []
    spans = []
    cursor = 0
    for ch in transcript:
        n = int(round(rng.uniform(0.080, 0.160) * sample_rate))
        base = char_frequency(ch)
        t = np.arange(n) / sample_rate
        if base is None:
            segment = np.zeros(n)
        else:
            n_partials = int(rng.integers(2, 4))
            segment = sum(
                (0.5 ** k) * np.sin(2 * np.pi * base * (k + 1) * t + rng.uniform(0, 2 * np.pi))
                for k in range(n_partials)
            )
            ramp = min(n // 4, int(0.010 * sample_rate))
            envelope = np.ones(n)
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            envelope[:ramp] = fade
            envelope[n - ramp :] = fade[::-1]
            segment = segment * envelope
        segments.append(segment)
        spans.append((cursor, cursor + n))
        cursor += n
    speech = np.concatenate(segments)
    peak = float(np.max(np.abs(speech)))
    if peak > 0:
        speech = 0.5 * speech / peak
    return speech, spans


def _band_noise(rng: np.random.Generator, n: int, sample_rate: int, lo: float, hi: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spectrum, n)


def _synth_env(rng: np.random.Generator, n: int, sample_rate: int) -> Tuple[np.ndarray, str]:
    env_class = ENV_CLASSES[int(rng.integers(len(ENV_CLASSES)))]
    t = np.arange(n) / sample_rate
    if env_class == "filtered_noise":
        env = _band_noise(rng, n, sample_rate, 2500.0, 7000.0)
    elif env_class == "modulated_noise":
        rate = rng.uniform(2.0, 6.0)
        env = _band_noise(rng, n, sample_rate, 3000.0, 6000.0)
        env = env * (1.0 + 0.8 * np.sin(2 * np.pi * rate * t))
    else:
        partials = rng.uniform(2400.0, 6000.0, size=3)
        env = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in partials)
    swell = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(0.4, 1.2) * t + rng.uniform(0, 2 * np.pi))
    env = env * swell
    rms = float(np.sqrt(np.mean(env**2)))
    return 0.1 * env / rms, env_class


class SyntheticSample(NamedTuple):
    speech: Waveform
    env: Waveform
    transcript: str
    env_class: str


class SyntheticMixture(NamedTuple):
    """A mixed recording together with the stems exactly as they sit in it."""

    mixture: Waveform
    speech: Waveform
    env: Waveform
    transcript: str
    ser: SerValue
    env_class: str


def synth_sample(rng: np.random.Generator, cfg: MelConfig) -> SyntheticSample:
    """Formant-like "speech" for a random transcript plus a matching-length env."""
    transcript = _random_transcript(rng)
    speech, _ = _synth_speech(transcript, rng, cfg.sample_rate)
    env, env_class = _synth_env(rng, speech.shape[0], cfg.sample_rate)
    return SyntheticSample(
        Waveform(speech, cfg.sample_rate), Waveform(env, cfg.sample_rate), transcript, env_class
    )


def synth_mixture(
    rng: np.random.Generator,
    cfg: MelConfig,
    ser: Union[SerValue, float, None] = None,
    pad_range: Tuple[float, float] = (0.15, 0.30),
) -> SyntheticMixture:
    """Pad synthetic speech with silence and mix an env under it at `ser`.

    When `ser` is None an SNR is drawn uniformly from [-5, 20] dB.
    """
    sample = synth_sample(rng, cfg)
    sr = cfg.sample_rate
    lead = np.zeros(int(rng.uniform(*pad_range) * sr))
    tail = np.zeros(int(rng.uniform(*pad_range) * sr))
    speech = np.concatenate([lead, sample.speech.samples, tail])
    env, env_class = _synth_env(rng, speech.shape[0], sr)
    if ser is None:
        ser = snr_to_ser(rng.uniform(-5.0, 20.0))
    ser = ser if isinstance(ser, SerValue) else SerValue(float(ser))

    speech_wave = Waveform(speech, sr)
    env_wave = Waveform(env, sr)
    gain = ser_gain(speech_wave, env_wave, ser)
    scaled_env = gain * fit_length(env, speech.shape[0])
    mixed = speech + scaled_env
    scale = min(1.0, 0.99 / float(np.max(np.abs(mixed))))
    return SyntheticMixture(
        mixture=Waveform(mixed * scale, sr),
        speech=Waveform(speech * scale, sr),
        env=Waveform(scaled_env * scale, sr),
        transcript=sample.transcript,
        ser=ser,
        env_class=env_class,
    )


def synthetic_triplet(
    mixture: SyntheticMixture, cfg: MelConfig, sample_id: str = ""
) -> TripletSample:
    """Ground-truth triplet of a synthetic mixture; the requested SER is kept exactly."""
    return TripletSample(
        target_mel=stft_mel(mixture.mixture, cfg),
        speech_mel=stft_mel(mixture.speech, cfg),
        env_mel=stft_mel(mixture.env, cfg),
        transcript=mixture.transcript,
        ser=mixture.ser,
        strategy=Strategy.SYNTHETIC,
        sample_id=sample_id,
    )


def remix_triplet(triplet: TripletSample, ser: Union[SerValue, float]) -> TripletSample:
    """Re-level the env of a triplet to another SER in the mel-power domain.

    Speech and env are treated as uncorrelated, so their mel powers add.
    Requires an env mel as long as the target.
    """
    ser = ser if isinstance(ser, SerValue) else SerValue(float(ser))
    if triplet.env_mel.n_frames != triplet.n_frames:
        raise ValueError("Remixing needs an env mel aligned with the target")
    scale = 10.0 ** ((ser_to_snr(triplet.ser) - ser_to_snr(ser)) / 10.0)
    env_power = scale * triplet.env_mel.power
    cfg = triplet.target_mel.config
    return TripletSample(
        target_mel=MelSpectrogram(np.log(triplet.speech_mel.power + env_power + LOG_EPS), cfg),
        speech_mel=triplet.speech_mel,
        env_mel=MelSpectrogram(np.log(env_power + LOG_EPS), cfg),
        transcript=triplet.transcript,
        ser=ser,
        strategy=triplet.strategy,
        sample_id=triplet.sample_id,
    )
