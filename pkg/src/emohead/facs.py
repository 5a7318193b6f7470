"""FACS knowledge base: action units, emotion profiles, intensity grading.

The catalog is reference data, shipped as a YAML file and validated on
load.  All lookups are pure functions over the loaded tables; the catalog
is immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

EMOTION_LABELS = (
    "neutral",
    "happy",
    "sad",
    "angry",
    "fear",
    "disgust",
    "surprise",
    "contempt",
)

INTENSITY_ADJECTIVES = {1: "Mild", 2: "Moderate", 3: "Intense"}


class CatalogError(ValueError):
    """Raised when the catalog file fails structural validation."""


class UnknownEmotionError(KeyError):
    def __init__(self, label: str):
        super().__init__(label)
        self.label = label

    def __str__(self) -> str:
        return (
            f"unknown emotion label {self.label!r}; "
            f"expected one of {', '.join(EMOTION_LABELS)}"
        )


class UnknownActionUnitError(KeyError):
    def __init__(self, au_id: int):
        super().__init__(au_id)
        self.au_id = au_id

    def __str__(self) -> str:
        return f"unknown action unit id {self.au_id}"


@dataclass(frozen=True)
class ActionUnit:
    id: int
    name: str
    muscles: tuple[str, ...]
    movement_text: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "muscles": list(self.muscles),
            "movement_text": self.movement_text,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActionUnit":
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            muscles=tuple(d["muscles"]),
            movement_text=str(d["movement_text"]),
        )


@dataclass(frozen=True)
class EmotionProfile:
    label: str
    au_ids: tuple[int, ...]
    core_muscles: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "au_ids": list(self.au_ids),
            "core_muscles": list(self.core_muscles),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmotionProfile":
        return cls(
            label=str(d["label"]),
            au_ids=tuple(int(i) for i in d["au_ids"]),
            core_muscles=tuple(d["core_muscles"]),
        )


@dataclass(frozen=True)
class IntensityLevel:
    level: int
    adjective: str
    default_modifier: str
    amplitude_modifiers: Mapping[int, str] = field(default_factory=dict)

    def modifier_for(self, au_id: int) -> str:
        return self.amplitude_modifiers.get(au_id, self.default_modifier)


def default_catalog_path() -> Path:
    return Path(resources.files("emohead").joinpath("data/facs_catalog.yaml"))


def _join_names(names: tuple[str, ...]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


class FacsCatalog:
    """Immutable lookup tables mapping emotions to AUs to muscle movements."""

    def __init__(
        self,
        action_units: dict[int, ActionUnit],
        emotions: dict[str, EmotionProfile],
        intensities: dict[int, IntensityLevel],
        muscle_glossary: dict[str, str],
    ):
        self.action_units = dict(action_units)
        self.emotions = dict(emotions)
        self.intensities = dict(intensities)
        self.muscle_glossary = dict(muscle_glossary)
        self._validate()

    @classmethod
    def load(cls, path: str | Path | None = None) -> "FacsCatalog":
        path = Path(path) if path is not None else default_catalog_path()
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise CatalogError(f"cannot read catalog file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise CatalogError(f"catalog file {path} is not valid YAML: {exc}") from exc
        return cls.from_raw(raw, source=str(path))

    @classmethod
    def from_raw(cls, raw: Mapping, source: str = "<memory>") -> "FacsCatalog":
        if not isinstance(raw, Mapping):
            raise CatalogError(f"{source}: top level must be a mapping")
        for key in ("muscles", "action_units", "emotions", "intensity_levels"):
            if key not in raw:
                raise CatalogError(f"{source}: missing required section {key!r}")

        glossary = {str(k): str(v) for k, v in raw["muscles"].items()}

        aus: dict[int, ActionUnit] = {}
        for entry in raw["action_units"]:
            au = ActionUnit(
                id=int(entry["id"]),
                name=str(entry["name"]).strip(),
                muscles=tuple(str(m) for m in entry["muscles"]),
                movement_text=" ".join(str(entry["movement"]).split()),
            )
            if au.id in aus:
                raise CatalogError(f"{source}: duplicate AU id {au.id}")
            aus[au.id] = au

        emotions: dict[str, EmotionProfile] = {}
        for entry in raw["emotions"]:
            label = str(entry["label"])
            au_ids = tuple(int(i) for i in entry["action_units"])
            core = tuple(
                dict.fromkeys(m for i in au_ids for m in aus.get(i, ActionUnit(i, "", (), "")).muscles)
            )
            emotions[label] = EmotionProfile(label=label, au_ids=au_ids, core_muscles=core)

        intensities: dict[int, IntensityLevel] = {}
        for entry in raw["intensity_levels"]:
            lvl = IntensityLevel(
                level=int(entry["level"]),
                adjective=str(entry["adjective"]),
                default_modifier=str(entry["default_modifier"]),
                amplitude_modifiers={int(k): str(v) for k, v in (entry.get("modifiers") or {}).items()},
            )
            intensities[lvl.level] = lvl

        return cls(aus, emotions, intensities, glossary)

    def _validate(self) -> None:
        for au in self.action_units.values():
            if not au.name or not au.movement_text:
                raise CatalogError(f"AU{au.id}: name and movement text must be non-empty")
            for muscle in au.muscles:
                if muscle not in self.muscle_glossary:
                    raise CatalogError(
                        f"AU{au.id}: muscle {muscle!r} missing from the muscle glossary"
                    )
        if set(self.emotions) != set(EMOTION_LABELS):
            raise CatalogError(
                f"emotion labels must be exactly {sorted(EMOTION_LABELS)}, "
                f"got {sorted(self.emotions)}"
            )
        if self.emotions["neutral"].au_ids:
            raise CatalogError("the neutral profile must have an empty AU list")
        for profile in self.emotions.values():
            for au_id in profile.au_ids:
                if au_id not in self.action_units:
                    raise CatalogError(
                        f"emotion {profile.label!r} references unknown AU id {au_id}"
                    )
        if {lvl.level: lvl.adjective for lvl in self.intensities.values()} != INTENSITY_ADJECTIVES:
            raise CatalogError(
                f"intensity levels must map exactly {INTENSITY_ADJECTIVES}"
            )
        for lvl in self.intensities.values():
            for au_id in lvl.amplitude_modifiers:
                if au_id not in self.action_units:
                    raise CatalogError(
                        f"intensity level {lvl.level} modifier references unknown AU id {au_id}"
                    )

    # -- lookups -----------------------------------------------------------

    def lookup_emotion(self, label: str) -> EmotionProfile:
        try:
            return self.emotions[label]
        except KeyError:
            raise UnknownEmotionError(label) from None

    def lookup_au(self, au_id: int) -> ActionUnit:
        try:
            return self.action_units[au_id]
        except KeyError:
            raise UnknownActionUnitError(au_id) from None

    def intensity(self, level: int) -> IntensityLevel:
        try:
            return self.intensities[level]
        except KeyError:
            raise CatalogError(f"intensity level must be 1, 2 or 3, got {level}") from None

    def describe_au(self, au_id: int, level: int) -> str:
        """Movement description for one AU at one intensity level.

        Deterministic; the returned text names the AU, its muscles, and the
        intensity adjective.
        """
        au = self.lookup_au(au_id)
        lvl = self.intensity(level)
        verb = "is" if len(au.muscles) == 1 else "are"
        return (
            f"{lvl.adjective} {au.name.lower()} (AU{au.id}): {au.movement_text} "
            f"The {_join_names(au.muscles)} {verb} active, {lvl.modifier_for(au.id)}."
        )

    def au_names_in(self, text: str) -> list[int]:
        """AU ids whose canonical names occur in `text` (case-insensitive)."""
        lowered = text.lower()
        return [au.id for au in self.action_units.values() if au.name.lower() in lowered]
