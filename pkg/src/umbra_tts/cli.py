import sys
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
from rich.console import Console
from rich.markup import escape
from tqdm import tqdm

from .audio_dsp import MelConfig, MelSpectrogram, load_mel, read_wav, save_mel, stft_mel, write_wav
from .denoiser import DenoiserConfig, load_checkpoint
from .evaluation import evaluate_reconstruction, plot_mel, ser_sweep
from .flow import (
    FRAMES_PER_CHAR,
    SamplerConfig,
    SamplerMethod,
    synthesize,
    synthesize_environment,
    synthesize_from_text,
)
from .manifest import read_manifest, write_manifest
from .trainer import TrainConfig, train as run_training
from .triplet_forge import forge_triplet, synth_mixture, synthetic_triplet

console = Console()

MANIFEST_NAME = "manifest.jsonl"

seed_option = click.option(
    "--seed",
    type=int,
    default=0,
    envvar="UMBRA_SEED",
    show_envvar=True,
    help="Random seed (falls back to $UMBRA_SEED, then 0)",
)
steps_option = click.option("--steps", "n_steps", default=32, help="ODE solver steps")


def _fail(e: Exception) -> None:
    console.print(f"[red]Error: {escape(str(e))}[/red]", soft_wrap=True)
    sys.exit(1)


def _load_model(ckpt: str):
    model = load_checkpoint(ckpt).model
    model.eval()
    return model


def _wav_mel(path: str, cfg: MelConfig) -> MelSpectrogram:
    return stft_mel(read_wav(path), cfg)


def _parse_ser_list(value: str) -> List[float]:
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from e


@click.group()
def cli():
    """UmbraTTS - environment-aware text-to-speech at desk scale."""
    pass


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Corpus directory")
@click.option("-n", "--count", default=8, help="Number of mixtures to generate")
@seed_option
def corpus(out_dir: str, count: int, seed: int):
    """Write a synthetic corpus of mixed recordings with transcripts."""
    try:
        if count < 1:
            raise ValueError("count must be positive")
        out = Path(out_dir)
        cfg = MelConfig()
        rng = np.random.default_rng(seed)
        triplets = []
        for index in tqdm(range(count), desc="Synthesizing"):
            sample_id = f"{index:05d}"
            mixture = synth_mixture(rng, cfg)
            write_wav(out / "wavs" / f"{sample_id}.wav", mixture.mixture)
            (out / "wavs" / f"{sample_id}.txt").write_text(mixture.transcript + "\n", encoding="utf-8")
            triplets.append(synthetic_triplet(mixture, cfg, sample_id))
        write_manifest(triplets, out / "truth" / MANIFEST_NAME)
        console.print(f"[green]Wrote {count} mixtures to {out}[/green]")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--in", "--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Directory of WAV files with .txt transcripts")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Directory for the manifest and its mels")
@click.option("--threshold-db", default=10.0, help="VAD threshold above the noise floor")
@seed_option
def forge(input_dir: str, out_dir: str, threshold_db: float, seed: int):
    """Mine speech/environment triplets from mixed recordings."""
    try:
        cfg = MelConfig()
        rng = np.random.default_rng(seed)
        wavs = sorted(Path(input_dir).glob("*.wav"))
        if not wavs:
            raise ValueError(f"No .wav files in {input_dir}")
        triplets = []
        for wav in tqdm(wavs, desc="Forging"):
            transcript_path = wav.with_suffix(".txt")
            if not transcript_path.exists():
                raise ValueError(f"Missing transcript for {wav.name}")
            transcript = transcript_path.read_text(encoding="utf-8").strip()
            triplets.append(
                forge_triplet(read_wav(wav), transcript, rng, cfg, threshold_db, sample_id=wav.stem)
            )
        manifest_path = Path(out_dir) / MANIFEST_NAME
        manifest = write_manifest(triplets, manifest_path)
        console.print(f"[green]Forged {manifest.size} triplets into {manifest_path}[/green]")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Checkpoint directory")
@click.option("--steps", default=TrainConfig.steps, help="Optimisation steps")
@click.option("--lr", default=TrainConfig.lr, help="Learning rate")
@click.option("--weight-decay", default=TrainConfig.weight_decay)
@click.option("--frames-per-batch", default=TrainConfig.frames_per_batch)
@click.option("--checkpoint-every", default=TrainConfig.checkpoint_every)
@click.option("--ser-augment/--no-ser-augment", default=False, help="Re-level synthetic triplets to random SERs")
@click.option("--model-dim", default=DenoiserConfig.model_dim)
@click.option("--blocks", default=DenoiserConfig.n_blocks)
@click.option("--heads", default=DenoiserConfig.n_heads)
@click.option("--max-frames", default=DenoiserConfig.max_frames)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to continue from")
@seed_option
def train(
    manifest_path: str,
    out_dir: str,
    steps: int,
    lr: float,
    weight_decay: float,
    frames_per_batch: int,
    checkpoint_every: int,
    ser_augment: bool,
    model_dim: int,
    blocks: int,
    heads: int,
    max_frames: int,
    resume: Optional[str],
    seed: int,
):
    """Train the denoiser on a triplet manifest."""
    try:
        cfg = TrainConfig(
            steps=steps,
            lr=lr,
            weight_decay=weight_decay,
            frames_per_batch=frames_per_batch,
            checkpoint_every=checkpoint_every,
            seed=seed,
            ser_augment=ser_augment,
        )
        model_config = DenoiserConfig(
            model_dim=model_dim, n_blocks=blocks, n_heads=heads, max_frames=max_frames
        )
        path = run_training(cfg, read_manifest(manifest_path), out_dir, model_config, resume)
        console.print(f"Final checkpoint: {path}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", "ref_wav", type=click.Path(exists=True, dir_okay=False), help="Reference speech (optional)")
@click.option("--ref-text", help="Transcript of the reference; required with --ref")
@click.option("--env", "env_wav", required=True, type=click.Path(exists=True, dir_okay=False), help="Environment prompt")
@click.option("--text", "gen_text", required=True, help="Text to speak")
@click.option("--ser", default=0.5, type=click.FloatRange(0.0, 1.0), help="Speech-to-environment ratio")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice([m.value for m in SamplerMethod]), default=SamplerMethod.EULER.value)
@click.option(
    "--frames-per-char",
    default=FRAMES_PER_CHAR,
    type=click.FloatRange(min=1.0),
    help="Speaking rate when no reference is given",
)
@steps_option
@seed_option
def synth(
    ckpt: str,
    ref_wav: Optional[str],
    ref_text: Optional[str],
    env_wav: str,
    gen_text: str,
    ser: float,
    out_path: str,
    method: str,
    frames_per_char: float,
    n_steps: int,
    seed: int,
):
    """Generate speech in an environment; writes the WAV and its mel.

    With --ref the voice and speaking rate follow the reference clip;
    without it only the text and the environment prompt condition the output.
    """
    if (ref_wav is None) != (ref_text is None):
        raise click.UsageError("--ref and --ref-text must be given together")
    try:
        model = _load_model(ckpt)
        cfg = MelConfig(n_mels=model.config.n_mels)
        sampler = SamplerConfig(n_steps=n_steps, method=method, seed=seed)
        env_mel = _wav_mel(env_wav, cfg)
        if ref_wav is None:
            mel, wave = synthesize_from_text(
                model, env_mel, gen_text, ser, sampler, cfg, frames_per_char
            )
        else:
            mel, wave = synthesize(
                model, _wav_mel(ref_wav, cfg), ref_text, env_mel, gen_text, ser, sampler, cfg
            )
        out = Path(out_path)
        write_wav(out, wave)
        save_mel(out.with_suffix(".mel"), mel)
        console.print(f"[green]Wrote {out} ({mel.n_frames} frames)[/green]")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--env", "env_wav", required=True, type=click.Path(exists=True, dir_okay=False), help="Environment prompt")
@click.option("--frames", default=200, help="Frames to generate")
@click.option("--ser", default=0.0, type=click.FloatRange(0.0, 1.0))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@steps_option
@seed_option
def ambience(ckpt: str, env_wav: str, frames: int, ser: float, out_path: str, n_steps: int, seed: int):
    """Generate environment sound only, guided by an audio prompt."""
    try:
        model = _load_model(ckpt)
        cfg = MelConfig(n_mels=model.config.n_mels)
        mel, wave = synthesize_environment(
            model, _wav_mel(env_wav, cfg), frames, SamplerConfig(n_steps=n_steps, seed=seed), cfg, ser
        )
        out = Path(out_path)
        write_wav(out, wave)
        save_mel(out.with_suffix(".mel"), mel)
        console.print(f"[green]Wrote {out}[/green]")
    except Exception as e:
        _fail(e)


@cli.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--method", type=click.Choice([m.value for m in SamplerMethod]), default=SamplerMethod.EULER.value)
@steps_option
@seed_option
def evaluate(ckpt: str, manifest_path: str, method: str, n_steps: int, seed: int):
    """Score masked-span reconstruction over a manifest."""
    try:
        model = _load_model(ckpt)
        cfg = MelConfig(n_mels=model.config.n_mels)
        scores = evaluate_reconstruction(
            model, read_manifest(manifest_path), cfg, seed, n_steps, method=method
        )
        for score in scores:
            console.print(f"{score.sample_id}\tmse={score.mse:.4f}\tnormalized={score.normalized:.4f}")
        mean = float(np.mean([score.normalized for score in scores])) if scores else float("nan")
        console.print(f"Mean normalized MSE: {mean:.4f}")
    except Exception as e:
        _fail(e)


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref", "ref_wav", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ref-text", required=True)
@click.option("--env", "env_wav", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--text", "gen_text", required=True)
@click.option("--ser", "ser_values", default="0,0.25,0.5,0.75,1", help="Comma-separated SER values")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@steps_option
@seed_option
def sweep(
    ckpt: str,
    ref_wav: str,
    ref_text: str,
    env_wav: str,
    gen_text: str,
    ser_values: str,
    out_dir: str,
    n_steps: int,
    seed: int,
):
    """Synthesize one utterance across SER values and report env/speech energy."""
    values = _parse_ser_list(ser_values)
    try:
        model = _load_model(ckpt)
        cfg = MelConfig(n_mels=model.config.n_mels)
        result = ser_sweep(
            model,
            _wav_mel(ref_wav, cfg),
            ref_text,
            _wav_mel(env_wav, cfg),
            gen_text,
            values,
            out_dir,
            seed=seed,
            n_steps=n_steps,
            mel_cfg=cfg,
            checkpoint=Path(ckpt).name,
        )
        report = result.save(Path(out_dir) / "sweep.jsonl")
        console.print(f"[green]Sweep report: {report}[/green]")
    except Exception as e:
        _fail(e)


@cli.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("image", type=click.Path(dir_okay=False))
def plot(source: str, image: str):
    """Render a .mel dump (or the mel of a .wav) as a grayscale PNG."""
    try:
        cfg = MelConfig()
        if Path(source).suffix == ".wav":
            mel = _wav_mel(source, cfg)
        else:
            mel = load_mel(source)
        plot_mel(mel, image)
        console.print(f"[green]Wrote {image}[/green]")
    except Exception as e:
        _fail(e)


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI without exiting the interpreter and return its exit code."""
    try:
        cli.main(args=argv, prog_name="umbra", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    return 0
