import matplotlib.image
import numpy as np
import pytest

from umbra_tts.audio_dsp import MelConfig, MelSpectrogram, Waveform, load_mel
from umbra_tts.denoiser import DenoiserConfig, build_denoiser, load_checkpoint
from umbra_tts.evaluation import (
    SweepEntry,
    SweepResult,
    char_error_rate,
    decode_transcript,
    edit_distance,
    env_speech_energy_ratio,
    evaluate_reconstruction,
    mel_mse,
    plot_mel,
    ser_sweep,
    ser_sweep_async,
)
from umbra_tts.flow import TemporalMask
from umbra_tts.trainer import TrainConfig, train
from umbra_tts.triplet_forge import _band_noise, _synth_speech, char_frequency

SR = 16000


def tone(freq, seconds=1.0, amplitude=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return amplitude * np.sin(2 * np.pi * freq * t)


def test_mel_mse():
    a = MelSpectrogram(np.zeros((4, 6)), MelConfig(n_mels=4))
    b = MelSpectrogram(np.ones((4, 6)), MelConfig(n_mels=4))
    assert mel_mse(a, a) == 0.0
    assert mel_mse(a, b) == 1.0
    values = np.zeros((4, 6))
    values[:, 2:4] = 2.0
    c = MelSpectrogram(values, MelConfig(n_mels=4))
    assert mel_mse(a, c, TemporalMask.span(6, 2, 4)) == 4.0
    with pytest.raises(ValueError):
        mel_mse(a, MelSpectrogram(np.zeros((4, 5)), MelConfig(n_mels=4)))


def test_in_band_tone_has_low_ratio(mel_cfg):
    assert env_speech_energy_ratio(Waveform(tone(440.0), SR), mel_cfg) < 0.05


def test_out_of_band_noise_has_high_ratio(mel_cfg):
    noise = _band_noise(np.random.default_rng(0), SR, SR, 3000.0, 7000.0)
    assert env_speech_energy_ratio(Waveform(noise, SR), mel_cfg) > 20.0


def test_equal_tones_balance(mel_cfg):
    wave = Waveform(tone(500.0) + tone(4000.0), SR)
    assert 0.8 <= env_speech_energy_ratio(wave, mel_cfg) <= 1.25


def test_ratio_is_scale_invariant(mel_cfg):
    samples = tone(300.0) + 0.3 * tone(5000.0)
    base = env_speech_energy_ratio(Waveform(samples, SR), mel_cfg)
    assert env_speech_energy_ratio(Waveform(0.1 * samples, SR), mel_cfg) == pytest.approx(base, rel=1e-9)


def test_ratio_rejects_silence_and_bad_band(mel_cfg):
    with pytest.raises(ValueError, match="Silent"):
        env_speech_energy_ratio(Waveform(np.zeros(SR), SR), mel_cfg)
    with pytest.raises(ValueError, match="Nyquist"):
        env_speech_energy_ratio(Waveform(tone(440.0), SR), mel_cfg, (100.0, 9000.0))


def test_edit_distance():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance("", "abc") == 3
    assert edit_distance("same", "same") == 0
    assert char_error_rate("abcd", "abed") == 0.25
    with pytest.raises(ValueError):
        char_error_rate("", "x")


def test_decode_single_tone():
    wave = Waveform(tone(char_frequency("k"), 0.5), SR)
    assert decode_transcript(wave) == "k"


def test_decode_synthetic_speech():
    speech, _ = _synth_speech("amz am", np.random.default_rng(0), SR)
    hypothesis = decode_transcript(Waveform(speech, SR))
    assert char_error_rate("amz am", hypothesis) <= 0.2


def test_decode_silence_and_short_input():
    assert decode_transcript(Waveform(np.zeros(SR), SR)) == ""
    assert decode_transcript(Waveform(np.ones(100), SR)) == ""


def test_plot_mel_layout(temp_dir):
    values = np.zeros((6, 9))
    values[0] = 1.0
    path = plot_mel(MelSpectrogram(values, MelConfig(n_mels=6)), temp_dir / "mel.png")
    image = matplotlib.image.imread(path)
    assert image.shape[:2] == (6, 9)
    assert np.all(image[-1, :, 0] == 1.0)
    assert np.all(image[0, :, 0] == 0.0)


def test_plot_constant_mel_is_uniform(temp_dir):
    mel = MelSpectrogram(np.full((5, 7), -3.0), MelConfig(n_mels=5))
    image = matplotlib.image.imread(plot_mel(mel, temp_dir / "flat.png"))
    assert np.all(image == image[0, 0])


def test_plot_is_reproducible(temp_dir, toy_triplets):
    mel = toy_triplets[0].target_mel
    a = plot_mel(mel, temp_dir / "a.png")
    b = plot_mel(mel, temp_dir / "b.png")
    assert a.read_bytes() == b.read_bytes()


def test_plot_requires_existing_directory(temp_dir, toy_triplets):
    with pytest.raises(ValueError, match="does not exist"):
        plot_mel(toy_triplets[0].target_mel, temp_dir / "missing" / "x.png")


def test_sweep_result_roundtrip(temp_dir):
    result = SweepResult(
        entries=[
            SweepEntry(0.2, 1.5, 0.5, "a.mel", "a.wav", "a.png"),
            SweepEntry(0.8, 0.25, 0.0, "b.mel", "b.wav", "b.png"),
        ],
        seed=3,
        checkpoint="ckpt_10.umbr",
    )
    loaded = SweepResult.load(result.save(temp_dir / "sweep.jsonl"))
    assert loaded == result
    assert loaded.ratios == [1.5, 0.25]


@pytest.fixture
def sweep_args(tiny_config, toy_triplets):
    ref = toy_triplets[0]
    return dict(
        model=build_denoiser(tiny_config, seed=0),
        ref_speech_mel=ref.speech_mel,
        ref_transcript=ref.transcript,
        env_prompt_mel=toy_triplets[1].env_mel,
        gen_text="ab",
        n_steps=2,
        seed=5,
    )


def test_ser_sweep_writes_one_entry_per_value(temp_dir, sweep_args):
    result = ser_sweep(ser_values=[0.25, 0.75], out_dir=temp_dir / "sweep", **sweep_args)
    assert [entry.ser for entry in result.entries] == [0.25, 0.75]
    assert result.seed == 5
    for entry in result.entries:
        assert entry.ratio > 0
        assert entry.cer >= 0
        mel = load_mel(entry.mel_path)
        assert mel.values.shape[0] == 40
    names = sorted(p.name for p in (temp_dir / "sweep").iterdir())
    assert names == [
        "ser_0.250.mel", "ser_0.250.png", "ser_0.250.wav",
        "ser_0.750.mel", "ser_0.750.png", "ser_0.750.wav",
    ]


def test_ser_sweep_is_deterministic(temp_dir, sweep_args):
    a = ser_sweep(ser_values=[0.5], out_dir=temp_dir / "a", **sweep_args)
    b = ser_sweep(ser_values=[0.5], out_dir=temp_dir / "b", **sweep_args)
    assert a.ratios == b.ratios
    assert (temp_dir / "a" / "ser_0.500.mel").read_bytes() == (temp_dir / "b" / "ser_0.500.mel").read_bytes()


async def test_ser_sweep_async(temp_dir, sweep_args):
    result = await ser_sweep_async(ser_values=[0.0, 1.0], out_dir=temp_dir, **sweep_args)
    assert len(result.entries) == 2


@pytest.mark.parametrize("values", [[], [0.5, 0.5], [0.8, 0.2], [-0.1], [1.5]])
def test_ser_sweep_rejects_bad_values(temp_dir, sweep_args, values):
    with pytest.raises(ValueError):
        ser_sweep(ser_values=values, out_dir=temp_dir, **sweep_args)


def test_evaluate_reconstruction_scores_every_record(toy_manifest, tiny_config, mel_cfg):
    scores = evaluate_reconstruction(build_denoiser(tiny_config), toy_manifest, mel_cfg, n_steps=2)
    assert [s.sample_id for s in scores] == ["s0", "s1", "s2", "s3"]
    assert all(np.isfinite(s.mse) and s.normalized > 0 for s in scores)


@pytest.mark.slow
def test_trained_model_follows_ser(temp_dir, toy_manifest, toy_triplets):
    config = DenoiserConfig(
        model_dim=64,
        n_blocks=2,
        n_heads=4,
        d_text=16,
        max_frames=512,
        ser_embed_dim=64,
        time_embed_dim=64,
        text_blocks=1,
    )
    cfg = TrainConfig(steps=3000, lr=1e-3, frames_per_batch=1024, seed=0, ser_augment=True)
    model = load_checkpoint(train(cfg, toy_manifest, temp_dir / "run", config, show_progress=False)).model

    ref = toy_triplets[0]
    ser_values = [0.0, 0.25, 0.5, 0.75, 1.0]
    strictly_falling = 0
    for seed in range(10):
        result = ser_sweep(
            model, ref.speech_mel, ref.transcript, toy_triplets[1].env_mel, "ab",
            ser_values, temp_dir / f"sweep{seed}", seed=seed,
        )
        strictly_falling += bool(np.all(np.diff(result.ratios) < 0))
    assert strictly_falling >= 8
