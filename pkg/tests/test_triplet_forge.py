import numpy as np
import pytest

from umbra_tts.audio_dsp import Waveform, ser_to_snr, stft_mel
from umbra_tts.triplet_forge import (
    Strategy,
    StrategyInapplicable,
    TripletSample,
    VadLabels,
    _synth_speech,
    char_frequency,
    choose_strategy,
    energy_vad,
    env_from_vad,
    force_noise_frames,
    forge_triplet,
    remix_triplet,
    spectral_separate,
    synth_mixture,
    synth_sample,
    synthetic_triplet,
)

SR = 16000


def bursts(n_bursts=4, on=0.2, off=0.3, freq=440.0, noise_std=0.0, seed=0):
    """Tone bursts separated by gaps; returns the wave and the burst sample ranges."""
    on_n, off_n = int(on * SR), int(off * SR)
    samples = np.zeros(off_n + n_bursts * (on_n + off_n))
    ranges = []
    for k in range(n_bursts):
        start = off_n + k * (on_n + off_n)
        t = np.arange(on_n) / SR
        samples[start : start + on_n] = 0.5 * np.sin(2 * np.pi * freq * t + 0.3)
        ranges.append((start, start + on_n))
    samples += np.random.default_rng(seed).normal(0.0, noise_std, samples.shape[0])
    return Waveform(samples, SR), ranges


def overlap_truth(ranges, n_frames, cfg):
    truth = np.zeros(n_frames, dtype=bool)
    for i in range(n_frames):
        lo, hi = i * cfg.hop, i * cfg.hop + cfg.n_fft
        truth[i] = any(lo < stop and start < hi for start, stop in ranges)
    return truth


def band_energy(samples, lo, hi):
    spectrum = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(samples.shape[0], 1.0 / SR)
    return float(spectrum[(freqs >= lo) & (freqs <= hi)].sum())


def test_vad_silence_is_all_non_speech(mel_cfg):
    labels = energy_vad(Waveform(np.zeros(SR), SR), mel_cfg)
    assert len(labels) == 98
    assert not labels.speech.any()


def test_vad_constant_tone_is_all_speech(mel_cfg):
    t = np.arange(SR) / SR
    labels = energy_vad(Waveform(0.99 * np.sin(2 * np.pi * 440 * t), SR), mel_cfg)
    assert labels.speech.all()


def test_vad_rejects_short_wave(mel_cfg):
    with pytest.raises(ValueError, match="too short"):
        energy_vad(Waveform(np.zeros(100), SR), mel_cfg)


@pytest.mark.parametrize("noise_std", [0.0, 0.005])
def test_vad_precision_recall_on_bursts(mel_cfg, noise_std):
    wave, ranges = bursts(noise_std=noise_std)
    labels = energy_vad(wave, mel_cfg, threshold_db=10.0)
    truth = overlap_truth(ranges, len(labels), mel_cfg)
    hits = np.count_nonzero(labels.speech & truth)
    assert hits / np.count_nonzero(labels.speech) >= 0.95
    assert hits / np.count_nonzero(truth) >= 0.95


def test_vad_boundaries_within_two_frames(mel_cfg):
    wave, ranges = bursts()
    labels = energy_vad(wave, mel_cfg)
    truth = overlap_truth(ranges, len(labels), mel_cfg)
    edges = np.flatnonzero(np.diff(labels.speech.astype(int)))
    true_edges = np.flatnonzero(np.diff(truth.astype(int)))
    assert edges.shape == true_edges.shape
    assert np.all(np.abs(edges - true_edges) <= 2)


@pytest.mark.parametrize("scale", [0.125, 3.0, 17.5])
def test_vad_is_scale_invariant(mel_cfg, scale):
    wave, _ = bursts()
    base = energy_vad(wave, mel_cfg)
    scaled = energy_vad(Waveform(wave.samples * scale, SR), mel_cfg)
    assert np.array_equal(base.speech, scaled.speech)


def test_env_from_vad_all_non_speech_returns_input():
    wave = Waveform(np.random.default_rng(0).normal(size=SR), SR)
    labels = VadLabels(np.zeros(98, dtype=bool), 400, 160)
    assert np.array_equal(env_from_vad(wave, labels).samples, wave.samples)


def test_env_from_vad_all_speech_is_inapplicable():
    wave = Waveform(np.ones(SR) * 0.1, SR)
    with pytest.raises(StrategyInapplicable):
        env_from_vad(wave, VadLabels(np.ones(98, dtype=bool), 400, 160))


def test_env_from_vad_keeps_only_non_speech_half():
    samples = np.concatenate([np.full(SR, 0.5), np.full(SR, -0.25)])
    labels = VadLabels(np.arange(198) < 100, 400, 160)
    env = env_from_vad(Waveform(samples, SR), labels)
    assert np.array_equal(env.samples, samples[SR:])
    assert not np.any(env.samples == 0.5)


def test_separation_removes_stationary_tone(mel_cfg):
    t = np.arange(SR) / SR
    tone_b = 0.3 * np.sin(2 * np.pi * 3000 * t)
    tone_a = np.where((t >= 0.3) & (t < 0.7), 0.5 * np.sin(2 * np.pi * 500 * t), 0.0)
    wave = Waveform(tone_a + tone_b, SR)
    frame_starts = np.arange(mel_cfg.frame_count(SR)) * mel_cfg.hop
    speech_flags = (frame_starts < int(0.7 * SR)) & (frame_starts + mel_cfg.n_fft > int(0.3 * SR))
    labels = VadLabels(speech_flags, mel_cfg.n_fft, mel_cfg.hop)

    speech, env = spectral_separate(wave, labels, mel_cfg)
    before = band_energy(wave.samples, 2900, 3100)
    after = band_energy(speech.samples, 2900, 3100)
    assert 10 * np.log10(before / max(after, 1e-30)) >= 10.0
    assert band_energy(speech.samples, 400, 600) >= 0.8 * band_energy(tone_a, 400, 600)


def test_separation_of_silence_is_silent(mel_cfg):
    wave = Waveform(np.zeros(SR), SR)
    speech, env = spectral_separate(wave, energy_vad(wave, mel_cfg), mel_cfg)
    assert speech.rms < 1e-3
    assert env.rms < 1e-3


def test_separation_of_env_only_input_leaves_little_speech(mel_cfg):
    wave = Waveform(np.random.default_rng(3).normal(0.0, 0.1, 3 * SR), SR)
    labels = VadLabels(np.ones(mel_cfg.frame_count(3 * SR), dtype=bool), 400, 160)
    labels = force_noise_frames(wave, labels, mel_cfg)
    assert labels.n_non_speech >= 1
    speech, _ = spectral_separate(wave, labels, mel_cfg)
    assert speech.rms <= 0.1 * wave.rms


def test_separation_needs_noise_frames(mel_cfg):
    wave = Waveform(np.ones(SR) * 0.1, SR)
    with pytest.raises(StrategyInapplicable):
        spectral_separate(wave, VadLabels(np.ones(98, dtype=bool), 400, 160), mel_cfg)


def test_strategy_draw_is_fair():
    draws = [choose_strategy(np.random.default_rng(seed)) for seed in range(1000)]
    fraction = sum(d is Strategy.VAD for d in draws) / len(draws)
    assert 0.45 <= fraction <= 0.55


def test_forge_records_drawn_strategy(mel_cfg):
    mixture = synth_mixture(np.random.default_rng(11), mel_cfg, ser=0.6)
    seen = set()
    for seed in range(20):
        expected = choose_strategy(np.random.default_rng(seed))
        triplet = forge_triplet(
            mixture.mixture, mixture.transcript, np.random.default_rng(seed), mel_cfg
        )
        assert triplet.strategy is expected
        seen.add(triplet.strategy)
    assert seen == {Strategy.VAD, Strategy.SEPARATION}


def test_forge_falls_back_to_separation_without_pauses(mel_cfg):
    t = np.arange(SR) / SR
    wave = Waveform(0.5 * np.sin(2 * np.pi * 300 * t), SR)
    for seed in range(6):
        triplet = forge_triplet(wave, "hum", np.random.default_rng(seed), mel_cfg)
        assert triplet.strategy is Strategy.SEPARATION


def test_forge_triplet_shapes(mel_cfg):
    mixture = synth_mixture(np.random.default_rng(2), mel_cfg)
    triplet = forge_triplet(mixture.mixture, mixture.transcript, np.random.default_rng(0), mel_cfg)
    assert triplet.target_mel.values.shape[0] == triplet.env_mel.values.shape[0] == 40
    assert triplet.target_mel.n_frames == triplet.speech_mel.n_frames
    assert 0.0 <= triplet.ser.value <= 1.0


def test_forge_requires_transcript(mel_cfg):
    mixture = synth_mixture(np.random.default_rng(2), mel_cfg)
    with pytest.raises(ValueError):
        forge_triplet(mixture.mixture, "", np.random.default_rng(0), mel_cfg)


def column_energy(wave, cfg):
    return stft_mel(wave, cfg).power.sum(axis=0)


def test_forged_env_tracks_true_env(mel_cfg):
    rng = np.random.default_rng(2024)
    correlations = []
    for index in range(100):
        mixture = synth_mixture(rng, mel_cfg, ser=rng.uniform(0.4, 1.0))
        triplet = forge_triplet(mixture.mixture, mixture.transcript, rng, mel_cfg)
        if triplet.strategy is Strategy.VAD:
            labels = energy_vad(mixture.mixture, mel_cfg)
            truth = column_energy(env_from_vad(mixture.env, labels), mel_cfg)
        else:
            truth = column_energy(mixture.env, mel_cfg)
        forged = triplet.env_mel.power.sum(axis=0)
        correlations.append(np.corrcoef(forged, truth)[0, 1])
    assert np.median(correlations) >= 0.8


def test_synth_sample_is_deterministic(mel_cfg):
    a = synth_sample(np.random.default_rng(5), mel_cfg)
    b = synth_sample(np.random.default_rng(5), mel_cfg)
    assert a.transcript == b.transcript
    assert np.array_equal(a.speech.samples, b.speech.samples)
    assert np.array_equal(a.env.samples, b.env.samples)
    assert a.env_class == b.env_class


def test_synth_sample_duration_bounds(mel_cfg):
    for seed in range(10):
        sample = synth_sample(np.random.default_rng(seed), mel_cfg)
        k = len(sample.transcript)
        assert k * 0.080 * SR - 1 <= len(sample.speech) <= k * 0.160 * SR + 1


def test_distinct_characters_have_distinct_peaks():
    speech, spans = _synth_speech("am", np.random.default_rng(0), SR)
    peaks = []
    for start, stop in spans:
        segment = speech[start:stop]
        spectrum = np.abs(np.fft.rfft(segment))
        peaks.append(np.fft.rfftfreq(segment.shape[0], 1.0 / SR)[np.argmax(spectrum)])
    assert abs(peaks[0] - char_frequency("a")) < 20
    assert abs(peaks[1] - char_frequency("m")) < 20
    assert char_frequency(" ") is None


def test_synth_mixture_stems_sum_to_mixture(mel_cfg):
    mixture = synth_mixture(np.random.default_rng(9), mel_cfg, ser=0.3)
    assert np.allclose(mixture.speech.samples + mixture.env.samples, mixture.mixture.samples)
    snr = 10 * np.log10(mixture.speech.power / mixture.env.power)
    assert abs(snr - ser_to_snr(0.3)) <= 0.05


def test_synthetic_triplet_keeps_requested_ser(mel_cfg):
    mixture = synth_mixture(np.random.default_rng(9), mel_cfg, ser=0.3)
    triplet = synthetic_triplet(mixture, mel_cfg, sample_id="x")
    assert triplet.ser.value == 0.3
    assert triplet.strategy is Strategy.SYNTHETIC
    assert triplet.env_mel.n_frames == triplet.n_frames


def test_remix_scales_env_power(toy_triplets):
    triplet = toy_triplets[1]
    remixed = remix_triplet(triplet, 0.0)
    expected = 10 ** ((ser_to_snr(triplet.ser) - ser_to_snr(0.0)) / 10)
    loud = triplet.env_mel.power > 1e-3
    ratio = remixed.env_mel.power[loud] / triplet.env_mel.power[loud]
    assert np.allclose(ratio, expected, rtol=1e-6)
    assert remixed.ser.value == 0.0
    assert remixed.strategy is triplet.strategy
    assert np.array_equal(remixed.speech_mel.values, triplet.speech_mel.values)


def test_triplet_validation(mel_cfg, toy_triplets):
    t = toy_triplets[0]
    with pytest.raises(ValueError, match="transcript"):
        TripletSample(t.target_mel, t.speech_mel, t.env_mel, "", t.ser, t.strategy)
    with pytest.raises(ValueError, match="frames"):
        TripletSample(t.target_mel, t.speech_mel.frames(0, 5), t.env_mel, "a", t.ser, t.strategy)
