"""Run configuration: nested dataclasses loaded from YAML with overrides.

Cross-module dimensional consistency is rejected at load time, before any
compute starts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import DatasetSettings
from .diffusion import NoiseSchedule, SamplerSpec
from .encoders import EncoderSettings
from .network import NoisePredictorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseScheduleSettings:
    train_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return NoiseSchedule(self.train_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {
            "train_steps": self.train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseScheduleSettings":
        return cls(**d)


@dataclass(frozen=True)
class SamplerSettings:
    kind: str = "deterministic"
    steps: int = 40

    def build(self) -> SamplerSpec:
        return SamplerSpec(kind=self.kind, steps=self.steps)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": self.steps}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerSettings":
        return cls(**d)


@dataclass(frozen=True)
class GuidanceSettings:
    k: int = 2
    ratios: tuple[float, ...] = (0.4, 0.6)
    alpha_max: float = 1.0
    alpha_min: float = 0.5
    smooth_boundary: bool = False

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "ratios": list(self.ratios),
            "alpha_max": self.alpha_max,
            "alpha_min": self.alpha_min,
            "smooth_boundary": self.smooth_boundary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceSettings":
        d = dict(d)
        d["ratios"] = tuple(d.get("ratios", (0.4, 0.6)))
        return cls(**d)


@dataclass(frozen=True)
class TrainingSettings:
    steps_per_phase: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-3
    frames_per_iteration: int = 4
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return {
            "steps_per_phase": self.steps_per_phase,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "frames_per_iteration": self.frames_per_iteration,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSettings":
        return cls(**d)


@dataclass(frozen=True)
class PathsSettings:
    dataset_manifest: str = "dataset/manifest.jsonl"
    output_dir: str = "runs"
    checkpoint: str = "runs/checkpoint.bin"
    facs_catalog: str | None = None

    def to_dict(self) -> dict:
        return {
            "dataset_manifest": self.dataset_manifest,
            "output_dir": self.output_dir,
            "checkpoint": self.checkpoint,
            "facs_catalog": self.facs_catalog,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PathsSettings":
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    network: NoisePredictorConfig = field(default_factory=NoisePredictorConfig)
    encoders: EncoderSettings = field(default_factory=EncoderSettings)
    noise_schedule: NoiseScheduleSettings = field(default_factory=NoiseScheduleSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    paths: PathsSettings = field(default_factory=PathsSettings)

    def validate(self) -> "RunConfig":
        net, enc = self.network, self.encoders
        if net.text_dim != enc.text_dim:
            raise ConfigError(
                f"network text_dim {net.text_dim} != encoder text_dim {enc.text_dim}"
            )
        if net.audio_dim != enc.audio_dim:
            raise ConfigError(
                f"network audio_dim {net.audio_dim} != encoder audio_dim {enc.audio_dim}"
            )
        if self.dataset.image_size != net.latent_size:
            raise ConfigError(
                f"dataset image_size {self.dataset.image_size} != latent size {net.latent_size}"
            )
        if self.training.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.training.learning_rate}")
        if self.training.frames_per_iteration < 2:
            raise ConfigError(
                f"phase-2 frames must be >= 2, got {self.training.frames_per_iteration}"
            )
        if self.training.frames_per_iteration != net.frames:
            raise ConfigError(
                f"frames_per_iteration {self.training.frames_per_iteration} != network frames {net.frames}"
            )
        if self.dataset.frames_per_clip < self.training.frames_per_iteration:
            raise ConfigError(
                f"clips of {self.dataset.frames_per_clip} frames cannot host "
                f"{self.training.frames_per_iteration}-frame windows"
            )
        if len(self.guidance.ratios) != self.guidance.k:
            raise ConfigError(
                f"{len(self.guidance.ratios)} ratios for k={self.guidance.k} stages"
            )
        if self.sampler.steps < self.guidance.k:
            raise ConfigError(
                f"{self.sampler.steps} sampling steps cannot hold {self.guidance.k} stages"
            )
        if self.sampler.steps > self.noise_schedule.train_steps:
            raise ConfigError(
                f"{self.sampler.steps} sampling steps exceed {self.noise_schedule.train_steps} training steps"
            )
        # construct eagerly so invariant violations surface at load time
        self.noise_schedule.build()
        self.sampler.build()
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "network": self.network.to_dict(),
            "encoders": self.encoders.to_dict(),
            "noise_schedule": self.noise_schedule.to_dict(),
            "sampler": self.sampler.to_dict(),
            "guidance": self.guidance.to_dict(),
            "training": self.training.to_dict(),
            "dataset": self.dataset.to_dict(),
            "paths": self.paths.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {
            "network": NoisePredictorConfig.from_dict,
            "encoders": EncoderSettings.from_dict,
            "noise_schedule": NoiseScheduleSettings.from_dict,
            "sampler": SamplerSettings.from_dict,
            "guidance": GuidanceSettings.from_dict,
            "training": TrainingSettings.from_dict,
            "dataset": DatasetSettings.from_dict,
            "paths": PathsSettings.from_dict,
        }
        kwargs = {"seed": int(d.get("seed", 0))}
        for name, builder in sections.items():
            if name in d:
                kwargs[name] = builder(d[name])
        unknown = set(d) - set(sections) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(**kwargs).validate()

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            dotted, _, raw_value = item.partition("=")
            value = yaml.safe_load(raw_value)
            node = d
            *parents, leaf = dotted.split(".")
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"override path {dotted!r} does not exist")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"override path {dotted!r} does not exist")
            node[leaf] = value
        return RunConfig.from_dict(d)


def load_run_config(path: str | Path | None, overrides: list[str] | None = None, *, seed: int | None = None) -> RunConfig:
    if path is None:
        config = RunConfig().validate()
    else:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        config = RunConfig.from_dict(raw)
    if overrides:
        config = config.with_overrides(list(overrides))
    if seed is not None:
        config = config.with_overrides([f"seed={seed}"])
    return config
