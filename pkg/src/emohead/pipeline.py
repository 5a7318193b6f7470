"""End-to-end orchestration: prompt run, conditioning, sampling, scoring.

Every generation writes a metadata JSON holding the resolved config, seed
and prompt bundle, which is sufficient to replay the frames exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .cot import PromptBundle, run_cot
from .dataset import load_frame_png, load_wav, save_frame_png
from .diffusion import sample
from .guidance import GuidanceSchedule, blend, build_schedule
from .metrics import ClipScores, MetricReport, psnr, ssim
from .training import GenerationModel, derive_seed, load_model_checkpoint


class PipelineError(RuntimeError):
    pass


@dataclass
class ConditioningSet:
    """Stage text embeddings plus the shared audio and reference features."""

    text: tuple[torch.Tensor, ...]
    audio: torch.Tensor          # (F, Na, Da)
    reference: list[torch.Tensor]  # per level, (1, C_l, H_l, W_l)


def stage_embeddings(coarse: torch.Tensor, fine: torch.Tensor, k: int) -> tuple[torch.Tensor, ...]:
    """Stage conditioning texts: coarse-only for k=1, the pair for k=2, and
    a linear coarse-to-fine interpolation chain for k>2."""
    if k == 1:
        return (coarse,)
    if k == 2:
        return (coarse, fine)
    weights = [i / (k - 1) for i in range(k)]
    return tuple(blend(1.0 - w, coarse, fine) for w in weights)


def build_conditioning(
    model: GenerationModel,
    bundle: PromptBundle,
    waveform: np.ndarray,
    reference_image: np.ndarray,
    k: int,
) -> ConditioningSet:
    """Encode a prompt bundle, waveform and reference frame for sampling.

    `reference_image` is float (3, H, W) in [0, 1]; frame count follows the
    network config.
    """
    cfg = model.run_config
    frames = cfg.network.frames
    with torch.no_grad():
        coarse = model.text_encoder(bundle.coarse_text)
        fine = model.text_encoder(bundle.fine_text)
        audio = model.audio_encoder(waveform, frames)
        ref_latent = torch.from_numpy(
            (np.asarray(reference_image, dtype=np.float32) * 2.0 - 1.0)
        )[None]
        reference = model.reference_encoder(ref_latent)
    return ConditioningSet(
        text=stage_embeddings(coarse, fine, k),
        audio=audio.to(torch.float32),
        reference=[r.to(torch.float32) for r in reference],
    )


def conditioned_schedule(config: RunConfig, cond: ConditioningSet) -> GuidanceSchedule:
    g = config.guidance
    return build_schedule(
        g.k,
        config.sampler.steps,
        g.ratios,
        list(cond.text),
        alpha_max=g.alpha_max,
        alpha_min=g.alpha_min,
        smooth_boundary=g.smooth_boundary,
    )


def sample_video(
    model: GenerationModel,
    config: RunConfig,
    cond: ConditioningSet,
    seed: int,
) -> np.ndarray:
    """Deterministic generation -> float frames (F, 3, H, W) in [-1, 1]."""
    net = config.network
    generator = torch.Generator().manual_seed(derive_seed(seed, "init-noise"))
    noise = torch.randn(
        (1, net.frames, net.in_channels, net.latent_size, net.latent_size),
        generator=generator,
    )

    def predict(z, t, text):
        with torch.no_grad():
            return model.denoiser(
                z, t, text[None].to(torch.float32), cond.audio[None], cond.reference
            )

    schedule = conditioned_schedule(config, cond)
    z0 = sample(predict, noise, schedule, config.sampler.build(), config.noise_schedule.build())
    return z0[0].numpy()


def latents_to_frames(latents: np.ndarray) -> np.ndarray:
    """[-1, 1] latents -> float [0, 1] frames."""
    return np.clip((latents + 1.0) / 2.0, 0.0, 1.0)


@dataclass
class GenerateResult:
    frames_dir: Path
    metadata_path: Path
    latents: np.ndarray
    bundle: PromptBundle


def generate(
    config: RunConfig,
    reference_image: str | Path,
    audio_path: str | Path,
    emotion: str,
    intensity: int,
    out_dir: str | Path,
    *,
    seed: int | None = None,
    checkpoint: str | Path | None = None,
    backend: str = "rules",
) -> GenerateResult:
    checkpoint = Path(checkpoint or config.paths.checkpoint)
    if not checkpoint.exists():
        raise PipelineError(f"checkpoint {checkpoint} missing; train first")
    model, _, _ = load_model_checkpoint(checkpoint, config)
    model.eval()
    seed = config.seed if seed is None else seed

    bundle = run_cot(reference_image, emotion, intensity, backend=backend)
    _, waveform = load_wav(audio_path)
    ref = load_frame_png(reference_image)
    if ref.shape[1] != config.network.latent_size or ref.shape[2] != config.network.latent_size:
        raise PipelineError(
            f"reference image is {ref.shape[1]}x{ref.shape[2]}, "
            f"config expects {config.network.latent_size}"
        )
    cond = build_conditioning(model, bundle, waveform, ref, config.guidance.k)
    latents = sample_video(model, config, cond, seed)
    frames = latents_to_frames(latents)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_frame_png(out_dir / f"frame_{i:04d}.png", frame)

    schedule = conditioned_schedule(config, cond)
    metadata = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": seed,
        "emotion": emotion,
        "intensity": intensity,
        "backend": backend,
        "reference_image": str(Path(reference_image).resolve()),
        "audio": str(Path(audio_path).resolve()),
        "checkpoint": str(checkpoint.resolve()),
        "schedule_allocations": list(schedule.allocations),
        "bundle": bundle.to_dict(),
    }
    metadata_path = out_dir / "metadata.json"
    metadata_path.write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")
    return GenerateResult(
        frames_dir=out_dir, metadata_path=metadata_path, latents=latents, bundle=bundle
    )


def replay(metadata_path: str | Path, out_dir: str | Path) -> GenerateResult:
    """Re-run a generation from its recorded metadata."""
    meta = json.loads(Path(metadata_path).read_text(encoding="utf-8"))
    config = RunConfig.from_dict(meta["config"])
    return generate(
        config,
        meta["reference_image"],
        meta["audio"],
        meta["emotion"],
        int(meta["intensity"]),
        out_dir,
        seed=int(meta["seed"]),
        checkpoint=meta["checkpoint"],
        backend=meta.get("backend", "rules"),
    )


# -- evaluation ------------------------------------------------------------------

def _clip_frame_dirs(root: Path) -> dict[str, Path]:
    out = {}
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = child / "frames" if (child / "frames").is_dir() else child
        if list(frames.glob("frame_*.png")):
            out[child.name] = frames
    return out


def evaluate_dirs(generated_dir: str | Path, reference_dir: str | Path) -> MetricReport:
    """PSNR/SSIM of generated clips against ground-truth clips by name."""
    generated = _clip_frame_dirs(Path(generated_dir))
    reference = _clip_frame_dirs(Path(reference_dir))
    if set(generated) != set(reference):
        raise PipelineError(
            f"clip sets differ: generated {sorted(generated)} vs reference {sorted(reference)}"
        )
    if not generated:
        raise PipelineError("no clips found to evaluate")
    report = MetricReport()
    for clip_id, gen_dir in generated.items():
        gen_frames = sorted(gen_dir.glob("frame_*.png"))
        ref_frames = sorted(reference[clip_id].glob("frame_*.png"))[: len(gen_frames)]
        if len(ref_frames) < len(gen_frames):
            raise PipelineError(f"{clip_id}: fewer reference frames than generated frames")
        psnrs, ssims = [], []
        for gf, rf in zip(gen_frames, ref_frames):
            a = (load_frame_png(gf) * 255.0).round()
            b = (load_frame_png(rf) * 255.0).round()
            psnrs.append(psnr(a, b, max_value=255.0))
            ssims.append(ssim(a, b, max_value=255.0))
        report.per_clip[clip_id] = ClipScores(
            psnr_db=float(np.mean(psnrs)), ssim=float(np.mean(ssims))
        )
    return report
