"""Two-phase training: spatial layers on single frames, then all layers on
multi-frame windows.

Every per-step random draw (batch selection, timesteps, noise) is a pure
function of (seed, phase, step), and the checkpoint carries the Adam state,
so resuming reproduces the uninterrupted run.  Temporal layers stay frozen
at their zero-initialized identity throughout phase 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import RunConfig
from .cot import PromptBundle, run_cot
from .dataset import ClipData, load_clip, read_manifest
from .diffusion import noise_prediction_loss
from .encoders import AudioEncoder, TextEncoder, frame_band_energies
from .guidance import adjust_text_embedding, progress_position
from .network import NoisePredictor, ReferenceEncoder

TEMPORAL_TAG = ".temporal."


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def step_rng(seed: int, phase: int, step: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, f"phase{phase}-step{step}"))


class GenerationModel(nn.Module):
    """Denoiser plus the toy text, audio and reference encoders."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.run_config = config
        self.denoiser = NoisePredictor(config.network)
        self.text_encoder = TextEncoder(config.encoders)
        self.audio_encoder = AudioEncoder(config.encoders)
        self.reference_encoder = ReferenceEncoder(config.network)

    @classmethod
    def build_seeded(cls, config: RunConfig) -> "GenerationModel":
        torch.manual_seed(derive_seed(config.seed, "model-init"))
        return cls(config)

    def temporal_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if TEMPORAL_TAG in n]


def temporal_checksum(model: GenerationModel) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if TEMPORAL_TAG in name:
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# -- checkpoint glue -----------------------------------------------------------

def save_model_checkpoint(
    path: str | Path,
    model: GenerationModel,
    *,
    phase: int,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra_meta: dict | None = None,
) -> Path:
    tensors = {
        f"model.{name}": value.detach().cpu().numpy()
        for name, value in model.state_dict().items()
    }
    adam_steps: dict[str, int] = {}
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            pname = name_of[id(p)]
            for key in ("exp_avg", "exp_avg_sq"):
                tensors[f"optim.{pname}.{key}"] = state[key].detach().cpu().numpy()
            adam_steps[pname] = int(state["step"])
    meta = {
        "config": model.run_config.to_dict(),
        "phase": phase,
        "step": step,
        "adam_steps": adam_steps,
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_tensors(path, tensors, meta)


def load_model_checkpoint(
    path: str | Path, config: RunConfig | None = None
) -> tuple[GenerationModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns (model, meta, raw tensors)."""
    tensors, meta = load_tensors(path)
    if config is None:
        config = RunConfig.from_dict(meta["config"])
    model = GenerationModel(config)
    state = model.state_dict()
    loaded = {}
    for name, value in state.items():
        key = f"model.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint {path} misses tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(value.shape):
            raise CheckpointError(
                f"checkpoint tensor {key} has shape {arr.shape}, model expects {tuple(value.shape)}"
            )
        loaded[name] = torch.from_numpy(arr).to(value.dtype)
    model.load_state_dict(loaded)
    return model, meta, tensors


def restore_optimizer_state(
    optimizer: torch.optim.Optimizer,
    model: GenerationModel,
    tensors: dict[str, np.ndarray],
    adam_steps: dict[str, int],
) -> None:
    params = {n: p for n, p in model.named_parameters()}
    for pname, p in params.items():
        avg_key = f"optim.{pname}.exp_avg"
        if avg_key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(adam_steps.get(pname, 0))),
            "exp_avg": torch.from_numpy(tensors[avg_key]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim.{pname}.exp_avg_sq"]).to(p.dtype),
        }


# -- training ------------------------------------------------------------------

@dataclass
class PhaseStats:
    first_losses: list[float] = field(default_factory=list)
    last_losses: list[float] = field(default_factory=list)

    def initial_mean(self) -> float:
        return float(np.mean(self.first_losses))

    def final_mean(self) -> float:
        return float(np.mean(self.last_losses))


@dataclass
class TrainResult:
    checkpoint_path: Path
    phase1_checkpoint_path: Path
    loss_log_path: Path
    initial_loss_per_element: float
    final_loss_per_element: float

    @property
    def loss_ratio(self) -> float:
        return self.final_loss_per_element / self.initial_loss_per_element


@dataclass
class _ClipTensors:
    frames: torch.Tensor        # (T, 3, H, W) float32 in [-1, 1]
    energies: torch.Tensor      # (T, bands) float32
    reference: torch.Tensor     # (3, H, W)
    coarse_ids: torch.Tensor
    fine_ids: torch.Tensor
    bundle: PromptBundle


class Trainer:
    def __init__(self, config: RunConfig, *, manifest_path: str | Path | None = None, out_dir: str | Path | None = None):
        self.config = config.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else Path(config.paths.output_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_path = self.out_dir / "checkpoint.bin"
        self.phase1_checkpoint_path = self.out_dir / "checkpoint_phase1.bin"
        self.loss_log_path = self.out_dir / "loss_log.jsonl"
        self.noise_schedule = config.noise_schedule.build()

        manifest_path = Path(manifest_path or config.paths.dataset_manifest)
        root = manifest_path.parent
        entries = read_manifest(manifest_path)
        window = config.training.frames_per_iteration
        for entry in entries:
            entry.validate(root, min_frames=window)
        self.clips = [self._prepare_clip(load_clip(e, root), root, e) for e in entries]

    # one text-token lookup per clip; embeddings rebuilt per step so encoder
    # gradients flow
    def _prepare_clip(self, clip: ClipData, root: Path, entry) -> _ClipTensors:
        cfg = self.config
        if entry.prompt_bundle_path:
            bundle = PromptBundle.load(root / entry.prompt_bundle_path)
        else:
            bundle = run_cot(None, entry.emotion, entry.intensity, backend="rules")
        text_encoder = TextEncoder(cfg.encoders)
        energies = frame_band_energies(
            clip.waveform, clip.n_frames, cfg.encoders.audio_bands
        ).astype(np.float32)
        return _ClipTensors(
            frames=torch.from_numpy(clip.frames),
            energies=torch.from_numpy(energies),
            reference=torch.from_numpy(clip.reference_frame()),
            coarse_ids=text_encoder.token_ids(bundle.coarse_text),
            fine_ids=text_encoder.token_ids(bundle.fine_text),
            bundle=bundle,
        )

    def _text_pair(self, model: GenerationModel, clip: _ClipTensors) -> tuple[torch.Tensor, torch.Tensor]:
        enc = model.text_encoder
        pos = enc.positional.to(enc.embedding.weight.dtype)
        return enc.embedding(clip.coarse_ids) + pos, enc.embedding(clip.fine_ids) + pos

    def _blend_text(self, model, clip: _ClipTensors, t_train: int) -> torch.Tensor:
        coarse, fine = self._text_pair(model, clip)
        g = self.config.guidance
        steps = self.config.sampler.steps
        if g.k < 2:
            return coarse
        t_end = int(round(g.ratios[0] * steps))
        t_prog = progress_position(t_train, self.noise_schedule.train_steps, steps)
        return adjust_text_embedding(
            t_prog, coarse, fine, t_end=t_end, total=steps,
            alpha_max=g.alpha_max, alpha_min=g.alpha_min,
            smooth_boundary=g.smooth_boundary,
        )

    def _batch(self, model: GenerationModel, phase: int, step: int, window: int):
        cfg = self.config
        rng = step_rng(cfg.seed, phase, step)
        b = cfg.training.batch_size
        clip_idx = rng.integers(0, len(self.clips), size=b)
        z0, text, audio_tokens, refs = [], [], [], []
        t = torch.from_numpy(rng.integers(0, self.noise_schedule.train_steps, size=b))
        for row, ci in enumerate(clip_idx):
            clip = self.clips[int(ci)]
            start = int(rng.integers(0, clip.frames.shape[0] - window + 1))
            z0.append(clip.frames[start : start + window])
            text.append(self._blend_text(model, clip, int(t[row])))
            audio_tokens.append(model.audio_encoder.project(clip.energies[start : start + window]))
            refs.append(clip.reference)
        eps = torch.from_numpy(
            rng.standard_normal(size=(b, window, *z0[0].shape[1:])).astype(np.float32)
        )
        reference_maps = model.reference_encoder(torch.stack(refs))
        return torch.stack(z0), t, eps, torch.stack(text), torch.stack(audio_tokens), reference_maps

    def _make_optimizer(self, model: GenerationModel, phase: int) -> torch.optim.Optimizer:
        for name, p in model.named_parameters():
            p.requires_grad_(not (phase == 1 and TEMPORAL_TAG in name))
        params = [p for p in model.parameters() if p.requires_grad]
        return torch.optim.Adam(params, lr=self.config.training.learning_rate)

    def train(self, resume_from: str | Path | None = None) -> TrainResult:
        cfg = self.config
        per_phase_steps = cfg.training.steps_per_phase
        stats = {1: PhaseStats(), 2: PhaseStats()}

        if resume_from is not None:
            model, meta, raw = load_model_checkpoint(resume_from, cfg)
            start_phase, start_step = int(meta["phase"]), int(meta["step"])
            resume_payload = (raw, meta.get("adam_steps", {}))
        else:
            model = GenerationModel.build_seeded(cfg)
            start_phase, start_step = 1, 0
            resume_payload = None
            self.loss_log_path.write_text("", encoding="utf-8")

        element_counts = {
            1: cfg.network.in_channels * cfg.network.latent_size**2,
            2: cfg.training.frames_per_iteration
            * cfg.network.in_channels
            * cfg.network.latent_size**2,
        }

        last_good: Path | None = self.checkpoint_path if resume_from else None
        log = open(self.loss_log_path, "a", encoding="utf-8")
        try:
            for phase in (1, 2):
                if phase < start_phase:
                    continue
                window = 1 if phase == 1 else cfg.training.frames_per_iteration
                optimizer = self._make_optimizer(model, phase)
                first_step = start_step if phase == start_phase else 0
                if resume_payload is not None and phase == start_phase:
                    restore_optimizer_state(optimizer, model, *resume_payload)
                    resume_payload = None
                for step in range(first_step, per_phase_steps):
                    z0, t, eps, text, audio, refs = self._batch(model, phase, step, window)
                    try:
                        loss = noise_prediction_loss(
                            model.denoiser, z0, t, eps, text, audio, refs, self.noise_schedule
                        )
                    except FloatingPointError as exc:
                        log.close()
                        raise TrainingAborted(
                            f"phase {phase} step {step}: {exc}; last good checkpoint kept",
                            last_good,
                        ) from exc
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()

                    value = float(loss.detach())
                    per_element = value / element_counts[phase]
                    log.write(
                        json.dumps(
                            {"phase": phase, "step": step, "loss": value, "loss_per_element": per_element}
                        )
                        + "\n"
                    )
                    if step < 20:
                        stats[phase].first_losses.append(per_element)
                    if step >= per_phase_steps - 20:
                        stats[phase].last_losses.append(per_element)
                    if (step + 1) % cfg.training.checkpoint_every == 0:
                        last_good = save_model_checkpoint(
                            self.checkpoint_path, model, phase=phase, step=step + 1, optimizer=optimizer
                        )
                if phase == 1:
                    save_model_checkpoint(
                        self.phase1_checkpoint_path, model, phase=2, step=0, optimizer=None
                    )
                # phase boundaries start the next phase with a fresh optimizer,
                # so boundary checkpoints intentionally carry no Adam state
                last_good = save_model_checkpoint(
                    self.checkpoint_path, model, phase=phase + 1, step=0, optimizer=None
                )
        finally:
            log.close()

        initial = stats[1].initial_mean() if stats[1].first_losses else float("nan")
        final = stats[2].final_mean() if stats[2].last_losses else float("nan")
        return TrainResult(
            checkpoint_path=self.checkpoint_path,
            phase1_checkpoint_path=self.phase1_checkpoint_path,
            loss_log_path=self.loss_log_path,
            initial_loss_per_element=initial,
            final_loss_per_element=final,
        )
