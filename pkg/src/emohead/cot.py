"""Four-step prompt decomposition: subject, action units, muscles, prompts.

Two backends produce the same PromptBundle shape: "rules" composes texts
offline from the FACS catalog and is fully deterministic, while "llm"
drives a hosted chat model through the four step templates and lints its
replies against the catalog instead of accepting them blindly.
"""

from __future__ import annotations

import datetime as _dt
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .facs import FacsCatalog
from .llm import ChatClient

RULES_BACKEND = "rules"
LLM_BACKEND = "llm"

STEP_NAMES = (
    "facial_information_extraction",
    "facial_action_unit_analysis",
    "facial_muscle_analysis",
    "prompt_design",
)

_TEMPLATE_FILES = (
    "step1_subject.txt",
    "step2_action_units.txt",
    "step3_muscles.txt",
    "step4_prompt_design.txt",
)

UNSPECIFIED = "unspecified"


class CotError(ValueError):
    pass


class BundleValidationError(CotError):
    def __init__(self, violations: list["Violation"]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass(frozen=True)
class SubjectAttributes:
    age_range: str = UNSPECIFIED
    gender: str = UNSPECIFIED
    ethnicity: str = UNSPECIFIED
    appearance_notes: str = UNSPECIFIED

    @classmethod
    def from_sidecar(cls, image_ref: str | Path | None) -> "SubjectAttributes":
        """Attributes from `<image>.attrs.json` next to the image, if present."""
        if image_ref is None:
            return cls()
        sidecar = Path(str(image_ref) + ".attrs.json")
        if not sidecar.exists():
            return cls()
        raw = json.loads(sidecar.read_text(encoding="utf-8"))
        return cls(
            age_range=str(raw.get("age_range", UNSPECIFIED)) or UNSPECIFIED,
            gender=str(raw.get("gender", UNSPECIFIED)) or UNSPECIFIED,
            ethnicity=str(raw.get("ethnicity", UNSPECIFIED)) or UNSPECIFIED,
            appearance_notes=str(raw.get("appearance_notes", UNSPECIFIED)) or UNSPECIFIED,
        )

    def to_dict(self) -> dict:
        return {
            "age_range": self.age_range,
            "gender": self.gender,
            "ethnicity": self.ethnicity,
            "appearance_notes": self.appearance_notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectAttributes":
        return cls(**d)


@dataclass
class CoTStep:
    index: int
    name: str
    request: str | None
    response: str
    timestamp: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "name": self.name,
            "request": self.request,
            "response": self.response,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoTStep":
        return cls(**d)


@dataclass
class CoTTrace:
    backend: str
    steps: list[CoTStep] = field(default_factory=list)

    def add(self, name: str, request: str | None, response: str, *, timestamp: str | None = None) -> None:
        self.steps.append(
            CoTStep(index=len(self.steps) + 1, name=name, request=request, response=response, timestamp=timestamp)
        )

    def validate(self) -> None:
        if self.backend not in (RULES_BACKEND, LLM_BACKEND):
            raise CotError(f"unknown backend {self.backend!r}")
        names = tuple(s.name for s in self.steps)
        if names != STEP_NAMES:
            raise CotError(f"trace steps {names} != expected {STEP_NAMES}")
        if [s.index for s in self.steps] != [1, 2, 3, 4]:
            raise CotError("trace step indices must run 1..4 in order")

    def to_dict(self) -> dict:
        return {"backend": self.backend, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "CoTTrace":
        return cls(backend=d["backend"], steps=[CoTStep.from_dict(s) for s in d["steps"]])


@dataclass
class PromptBundle:
    coarse_text: str
    fine_text: str
    emotion: str
    intensity: int
    trace: CoTTrace

    def to_dict(self) -> dict:
        return {
            "coarse_text": self.coarse_text,
            "fine_text": self.fine_text,
            "emotion": self.emotion,
            "intensity": self.intensity,
            "trace": self.trace.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "PromptBundle":
        return cls(
            coarse_text=d["coarse_text"],
            fine_text=d["fine_text"],
            emotion=d["emotion"],
            intensity=int(d["intensity"]),
            trace=CoTTrace.from_dict(d["trace"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PromptBundle":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def bundle_filename(clip_id: str) -> str:
    return f"{clip_id}.prompt.json"


# -- validation --------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.message}"


def validate_bundle(bundle: PromptBundle, catalog: FacsCatalog | None = None) -> list[Violation]:
    """Lint a bundle; an empty report means it passes.

    Rules: the coarse text must mention the emotion word; a non-neutral
    fine text must mention at least one of the profile's AU names and none
    outside the profile; the fine text must be longer than the coarse text.
    """
    catalog = catalog or _default_catalog()
    report: list[Violation] = []

    profile = catalog.lookup_emotion(bundle.emotion)
    if bundle.emotion.lower() not in bundle.coarse_text.lower():
        report.append(
            Violation("missing-emotion-word", f"coarse text never mentions {bundle.emotion!r}")
        )

    mentioned = set(catalog.au_names_in(bundle.fine_text))
    if profile.au_ids and not mentioned:
        report.append(
            Violation("no-au-mention", "fine text mentions none of the profile's action units")
        )
    foreign = mentioned - set(profile.au_ids)
    if foreign:
        report.append(
            Violation(
                "au-outside-profile",
                f"fine text mentions AUs {sorted(foreign)} outside the {bundle.emotion!r} profile",
            )
        )
    if len(bundle.fine_text) < len(bundle.coarse_text):
        report.append(
            Violation("fine-shorter-than-coarse", "fine text is shorter than the coarse text")
        )
    return report


_CATALOG_CACHE: FacsCatalog | None = None


def _default_catalog() -> FacsCatalog:
    global _CATALOG_CACHE
    if _CATALOG_CACHE is None:
        _CATALOG_CACHE = FacsCatalog.load()
    return _CATALOG_CACHE


# -- rules backend -----------------------------------------------------------

_EMOTION_NOUN = {
    "neutral": "neutrality",
    "happy": "happiness",
    "sad": "sadness",
    "angry": "anger",
    "fear": "fear",
    "disgust": "disgust",
    "surprise": "surprise",
    "contempt": "contempt",
}


def _subject_phrase(attrs: SubjectAttributes) -> str:
    parts = []
    if attrs.ethnicity != UNSPECIFIED:
        parts.append(attrs.ethnicity)
    noun = attrs.gender if attrs.gender != UNSPECIFIED else "person"
    parts.append(noun)
    phrase = "A " + " ".join(parts)
    if attrs.age_range != UNSPECIFIED:
        phrase += f" in the {attrs.age_range} age range"
    if attrs.appearance_notes != UNSPECIFIED:
        phrase += f", {attrs.appearance_notes},"
    return phrase


def compose_coarse_text(attrs: SubjectAttributes, emotion: str) -> str:
    return (
        f"{_subject_phrase(attrs)} is speaking with a {emotion} emotion, "
        f"the mood carried across the whole face."
    )


def compose_fine_text(catalog: FacsCatalog, emotion: str, intensity: int) -> str:
    profile = catalog.lookup_emotion(emotion)
    adjective = catalog.intensity(intensity).adjective
    if not profile.au_ids:
        return (
            f"The facial expression stays neutral with no dominant action unit "
            f"activation: the musculature rests at {adjective.lower()} baseline "
            f"stillness, brows settled, eyes level, and the mouth moving only "
            f"for speech articulation."
        )
    names = ", ".join(catalog.lookup_au(i).name.lower() for i in profile.au_ids)
    noun = _EMOTION_NOUN.get(emotion, emotion)
    opening = (
        f"The facial expression shows {names} as the subject displays "
        f"{adjective} {noun}."
    )
    details = " ".join(catalog.describe_au(i, intensity) for i in profile.au_ids)
    return f"{opening} {details}"


def _run_rules(
    image_ref: str | Path | None,
    emotion: str,
    intensity: int,
    catalog: FacsCatalog,
) -> PromptBundle:
    profile = catalog.lookup_emotion(emotion)
    level = catalog.intensity(intensity)
    attrs = SubjectAttributes.from_sidecar(image_ref)

    trace = CoTTrace(backend=RULES_BACKEND)
    # Deterministic backend: no wall-clock timestamps, outputs must be
    # byte-identical across runs.
    trace.add(
        STEP_NAMES[0],
        request=None,
        response=(
            f"Age range: {attrs.age_range}\nGender: {attrs.gender}\n"
            f"Ethnicity: {attrs.ethnicity}\nAppearance: {attrs.appearance_notes}"
        ),
    )
    if profile.au_ids:
        au_lines = "; ".join(f"AU{i} {catalog.lookup_au(i).name}" for i in profile.au_ids)
        step2 = f"Activated action units for {emotion}: {au_lines}."
    else:
        step2 = f"No dominant action units are activated for {emotion}."
    trace.add(STEP_NAMES[1], request=None, response=step2)

    if profile.au_ids:
        step3 = " ".join(catalog.describe_au(i, intensity) for i in profile.au_ids)
    else:
        step3 = "Facial musculature at rest; no dominant muscle activation."
    trace.add(STEP_NAMES[2], request=None, response=step3)

    coarse = compose_coarse_text(attrs, emotion)
    fine = compose_fine_text(catalog, emotion, intensity)
    trace.add(STEP_NAMES[3], request=None, response=f"COARSE: {coarse}\nFINE: {fine}")

    bundle = PromptBundle(
        coarse_text=coarse,
        fine_text=fine,
        emotion=emotion,
        intensity=level.level,
        trace=trace,
    )
    trace.validate()
    return bundle


# -- hosted-model backend ------------------------------------------------------

def load_step_templates(directory: str | Path | None = None) -> tuple[str, str, str, str]:
    if directory is not None:
        base = Path(directory)
        return tuple((base / name).read_text(encoding="utf-8") for name in _TEMPLATE_FILES)
    pkg = resources.files("emohead").joinpath("data/prompts")
    return tuple(pkg.joinpath(name).read_text(encoding="utf-8") for name in _TEMPLATE_FILES)


def llm_step(client: ChatClient, conversation: list[dict], instruction: str) -> str:
    """Append one user turn, return the model's reply, extend the history."""
    if not instruction or not instruction.strip():
        raise CotError("empty instruction rejected before dispatch")
    conversation.append({"role": "user", "content": instruction})
    reply = client.complete(conversation)
    conversation.append({"role": "assistant", "content": reply})
    return reply


def _parse_subject_reply(reply: str) -> SubjectAttributes:
    fields = {"age range": UNSPECIFIED, "gender": UNSPECIFIED, "ethnicity": UNSPECIFIED, "appearance": UNSPECIFIED}
    for line in reply.splitlines():
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = key.strip().lower()
        if key in fields and value.strip():
            fields[key] = value.strip()
    return SubjectAttributes(
        age_range=fields["age range"],
        gender=fields["gender"],
        ethnicity=fields["ethnicity"],
        appearance_notes=fields["appearance"],
    )


_SECTION_RE = re.compile(r"COARSE:\s*(?P<coarse>.+?)\s*FINE:\s*(?P<fine>.+)", re.DOTALL)


def split_prompt_sections(reply: str) -> tuple[str, str]:
    m = _SECTION_RE.search(reply)
    if not m:
        raise BundleValidationError(
            [Violation("missing-sections", "prompt design reply lacks COARSE:/FINE: sections")]
        )
    return " ".join(m.group("coarse").split()), " ".join(m.group("fine").split())


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _run_llm(
    image_ref: str | Path | None,
    emotion: str,
    intensity: int,
    catalog: FacsCatalog,
    client: ChatClient,
    template_dir: str | Path | None = None,
) -> PromptBundle:
    profile = catalog.lookup_emotion(emotion)
    level = catalog.intensity(intensity)
    templates = load_step_templates(template_dir)
    fills = {
        "image_note": f"({Path(image_ref).name})" if image_ref else "(not provided)",
        "emotion": emotion,
        "level": level.level,
        "adjective": level.adjective,
    }
    conversation: list[dict] = []
    trace = CoTTrace(backend=LLM_BACKEND)
    replies = []
    for name, template in zip(STEP_NAMES, templates):
        instruction = template.format(**fills)
        reply = llm_step(client, conversation, instruction)
        trace.add(name, request=instruction, response=reply, timestamp=_now())
        replies.append(reply)

    for step_idx in (1, 2):
        if profile.au_ids and not catalog.au_names_in(replies[step_idx]):
            raise BundleValidationError(
                [
                    Violation(
                        "unmatched-au-reply",
                        f"step {step_idx + 1} reply names no catalog action unit",
                    )
                ]
            )

    coarse, fine = split_prompt_sections(replies[3])
    bundle = PromptBundle(
        coarse_text=coarse,
        fine_text=fine,
        emotion=emotion,
        intensity=level.level,
        trace=trace,
    )
    report = validate_bundle(bundle, catalog)
    if report:
        raise BundleValidationError(report)
    trace.validate()
    return bundle


def run_cot(
    image_ref: str | Path | None,
    emotion: str,
    intensity: int,
    backend: str = RULES_BACKEND,
    *,
    catalog: FacsCatalog | None = None,
    client: ChatClient | None = None,
    template_dir: str | Path | None = None,
) -> PromptBundle:
    """Produce a PromptBundle via the selected backend.

    The rules backend is a pure function of (emotion, intensity, sidecar
    attribute file); the llm backend requires a configured ChatClient.
    """
    catalog = catalog or _default_catalog()
    if backend == RULES_BACKEND:
        return _run_rules(image_ref, emotion, intensity, catalog)
    if backend == LLM_BACKEND:
        if client is None:
            from .llm import ChatClientConfig

            client = ChatClient(ChatClientConfig.from_env())
        return _run_llm(image_ref, emotion, intensity, catalog, client, template_dir)
    raise CotError(f"unknown backend {backend!r}; expected 'rules' or 'llm'")
