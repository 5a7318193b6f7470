"""Synthetic sprite-face dataset: procedural clips with audio-driven mouths.

Each clip is an ellipse face whose mouth aperture tracks the band energy of
a synthetic speech-like waveform, while brow and mouth-corner geometry is a
deterministic function of (emotion, intensity).  Clips regenerate
byte-identically from (seed, settings).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from .encoders import frame_band_energies
from .facs import EMOTION_LABELS

# Affine map from summed log-band energy to mouth aperture in [0, 1].
APERTURE_LEVEL_LO = 2.0
APERTURE_LEVEL_HI = 22.0
APERTURE_BANDS = 8

INTENSITY_SCALE = {1: 0.5, 2: 1.0, 3: 1.5}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSettings:
    clips: int = 4
    frames_per_clip: int = 12
    image_size: int = 16
    sample_rate: int = 8000
    fps: int = 25

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate // self.fps

    def to_dict(self) -> dict:
        return {
            "clips": self.clips,
            "frames_per_clip": self.frames_per_clip,
            "image_size": self.image_size,
            "sample_rate": self.sample_rate,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSettings":
        return cls(**d)


@dataclass(frozen=True)
class FaceGeometry:
    """Expression displacements; zeros with eye_open=1 is the resting face."""

    brow_raise: float = 0.0   # + moves brows up
    brow_tilt: float = 0.0    # + raises the inner brow ends
    mouth_corner: float = 0.0  # + bends the corners upward
    eye_open: float = 1.0     # vertical eye aperture multiplier
    mouth_width: float = 0.0  # + widens the mouth
    jaw_drop: float = 0.0     # baseline mouth opening
    corner_asym: float = 0.0  # one-sided corner weighting in [-1, 1]

    def to_dict(self) -> dict:
        return {
            "brow_raise": self.brow_raise,
            "brow_tilt": self.brow_tilt,
            "mouth_corner": self.mouth_corner,
            "eye_open": self.eye_open,
            "mouth_width": self.mouth_width,
            "jaw_drop": self.jaw_drop,
            "corner_asym": self.corner_asym,
        }


_BASE_GEOMETRY = {
    "neutral": FaceGeometry(),
    "happy": FaceGeometry(brow_raise=0.1, mouth_corner=1.0, eye_open=0.85, mouth_width=0.3),
    "sad": FaceGeometry(brow_raise=0.2, brow_tilt=0.8, mouth_corner=-0.8, eye_open=0.9),
    "angry": FaceGeometry(brow_raise=-0.5, brow_tilt=-0.9, mouth_corner=-0.3, eye_open=1.05, mouth_width=-0.3),
    "fear": FaceGeometry(brow_raise=0.8, brow_tilt=0.5, eye_open=1.4, mouth_width=0.5, jaw_drop=0.3),
    "disgust": FaceGeometry(brow_raise=-0.3, mouth_corner=-0.5, eye_open=0.7),
    "surprise": FaceGeometry(brow_raise=1.0, eye_open=1.5, jaw_drop=0.8),
    "contempt": FaceGeometry(mouth_corner=0.5, corner_asym=0.9, eye_open=0.95),
}


def expression_geometry(emotion: str, intensity: int) -> FaceGeometry:
    """Resolved face geometry; displacements scale with the intensity level."""
    if emotion not in _BASE_GEOMETRY:
        raise DatasetError(f"unknown emotion label {emotion!r}")
    if intensity not in INTENSITY_SCALE:
        raise DatasetError(f"intensity must be 1, 2 or 3, got {intensity}")
    base = _BASE_GEOMETRY[emotion]
    s = INTENSITY_SCALE[intensity]
    return FaceGeometry(
        brow_raise=base.brow_raise * s,
        brow_tilt=base.brow_tilt * s,
        mouth_corner=base.mouth_corner * s,
        eye_open=1.0 + (base.eye_open - 1.0) * s,
        mouth_width=base.mouth_width * s,
        jaw_drop=base.jaw_drop * s,
        corner_asym=base.corner_asym,
    )


@dataclass(frozen=True)
class FaceIdentity:
    skin_rgb: tuple[float, float, float]
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    mouth_y: float

    def to_dict(self) -> dict:
        return {
            "skin_rgb": list(self.skin_rgb),
            "face_rx": self.face_rx,
            "face_ry": self.face_ry,
            "eye_dx": self.eye_dx,
            "eye_y": self.eye_y,
            "mouth_y": self.mouth_y,
        }


def sample_identity(rng: np.random.Generator) -> FaceIdentity:
    hue = rng.uniform(0.0, 1.0)
    skin = (
        0.55 + 0.35 * abs(np.cos(2 * np.pi * hue)),
        0.40 + 0.25 * abs(np.cos(2 * np.pi * hue + 2.1)),
        0.30 + 0.25 * abs(np.cos(2 * np.pi * hue + 4.2)),
    )
    return FaceIdentity(
        skin_rgb=tuple(float(c) for c in skin),
        face_rx=float(rng.uniform(0.66, 0.8)),
        face_ry=float(rng.uniform(0.8, 0.92)),
        eye_dx=float(rng.uniform(0.28, 0.38)),
        eye_y=float(rng.uniform(-0.34, -0.22)),
        mouth_y=float(rng.uniform(0.38, 0.5)),
    )


def synthesize_speech_audio(
    n_frames: int, samples_per_frame: int, rng: np.random.Generator
) -> np.ndarray:
    """Speech-like mono waveform: per-frame tone bursts with a wandering
    amplitude envelope, float32 in [-1, 1]."""
    amp = 0.35
    chunks = []
    for _ in range(n_frames):
        amp = float(np.clip(amp + rng.uniform(-0.25, 0.25), 0.02, 0.8))
        freq_cycles = rng.uniform(2.0, 40.0)  # cycles per frame window
        phase = rng.uniform(0.0, 2 * np.pi)
        t = np.arange(samples_per_frame) / samples_per_frame
        tone = amp * np.sin(2 * np.pi * freq_cycles * t + phase)
        tone = tone + 0.01 * rng.standard_normal(samples_per_frame)
        chunks.append(tone)
    wave = np.concatenate(chunks)
    return np.clip(wave, -1.0, 1.0).astype(np.float32)


def mouth_aperture(waveform: np.ndarray, n_frames: int) -> np.ndarray:
    """Per-frame mouth opening in [0, 1] from summed log-band energies."""
    energies = frame_band_energies(waveform, n_frames, APERTURE_BANDS)
    level = energies.sum(axis=1)
    return np.clip(
        (level - APERTURE_LEVEL_LO) / (APERTURE_LEVEL_HI - APERTURE_LEVEL_LO), 0.0, 1.0
    )


def render_face(
    size: int, identity: FaceIdentity, geometry: FaceGeometry, aperture: float
) -> np.ndarray:
    """One frame as float32 (3, size, size) in [0, 1]."""
    ax = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax)
    img = np.full((3, size, size), 0.12, dtype=np.float64)

    face = (xx / identity.face_rx) ** 2 + (yy / identity.face_ry) ** 2 <= 1.0
    for c in range(3):
        img[c][face] = identity.skin_rgb[c]

    brow_y = identity.eye_y - 0.22 - 0.16 * geometry.brow_raise
    for side in (-1.0, 1.0):
        cx = side * identity.eye_dx
        rel = (xx - cx) / 0.17
        inward = -side * rel  # +1 at the inner brow end
        line_y = brow_y - 0.09 * geometry.brow_tilt * inward
        brow = (np.abs(rel) <= 1.0) & (np.abs(yy - line_y) <= 0.06)
        for c in range(3):
            img[c][brow] = 0.1

        eye_ry = max(0.035, 0.1 * geometry.eye_open)
        eye = ((xx - cx) / 0.13) ** 2 + ((yy - identity.eye_y) / eye_ry) ** 2 <= 1.0
        for c in range(3):
            img[c][eye] = 0.05

    half_w = 0.3 * (1.0 + 0.3 * geometry.mouth_width)
    opening = 0.03 + 0.3 * float(np.clip(aperture + 0.4 * geometry.jaw_drop, 0.0, 1.2))
    relm = np.clip(xx / half_w, -1.0, 1.0)
    corner_weight = 1.0 + geometry.corner_asym * np.sign(xx)
    center_y = identity.mouth_y - 0.16 * geometry.mouth_corner * corner_weight * relm**2
    height = opening * np.sqrt(np.clip(1.0 - relm**2, 0.0, 1.0))
    mouth = (np.abs(xx) <= half_w) & (np.abs(yy - center_y) <= height) & face
    img[0][mouth] = 0.45
    img[1][mouth] = 0.08
    img[2][mouth] = 0.1

    return img.astype(np.float32)


# -- manifest ------------------------------------------------------------------

@dataclass
class DatasetManifestEntry:
    clip_id: str
    frames_path: str
    audio_path: str
    reference_frame_index: int
    emotion: str
    intensity: int
    prompt_bundle_path: str | None = None

    def to_dict(self) -> dict:
        d = {
            "clip_id": self.clip_id,
            "frames_path": self.frames_path,
            "audio_path": self.audio_path,
            "reference_frame_index": self.reference_frame_index,
            "emotion": self.emotion,
            "intensity": self.intensity,
        }
        if self.prompt_bundle_path is not None:
            d["prompt_bundle_path"] = self.prompt_bundle_path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifestEntry":
        return cls(
            clip_id=d["clip_id"],
            frames_path=d["frames_path"],
            audio_path=d["audio_path"],
            reference_frame_index=int(d["reference_frame_index"]),
            emotion=d["emotion"],
            intensity=int(d["intensity"]),
            prompt_bundle_path=d.get("prompt_bundle_path"),
        )

    def validate(self, root: Path, min_frames: int) -> None:
        frames_dir = root / self.frames_path
        if not frames_dir.is_dir():
            raise DatasetError(f"{self.clip_id}: frames path {frames_dir} missing")
        n = len(sorted(frames_dir.glob("frame_*.png")))
        if n < min_frames:
            raise DatasetError(f"{self.clip_id}: {n} frames < required {min_frames}")
        if not (root / self.audio_path).is_file():
            raise DatasetError(f"{self.clip_id}: audio path {self.audio_path} missing")
        if self.emotion not in EMOTION_LABELS:
            raise DatasetError(f"{self.clip_id}: unknown emotion {self.emotion!r}")
        if self.intensity not in (1, 2, 3):
            raise DatasetError(f"{self.clip_id}: intensity {self.intensity} outside 1..3")
        if not 0 <= self.reference_frame_index < n:
            raise DatasetError(
                f"{self.clip_id}: reference frame {self.reference_frame_index} outside 0..{n - 1}"
            )


def write_manifest(path: Path, entries: list[DatasetManifestEntry]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
    return path


def read_manifest(path: str | Path) -> list[DatasetManifestEntry]:
    path = Path(path)
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(DatasetManifestEntry.from_dict(json.loads(line)))
    if not entries:
        raise DatasetError(f"manifest {path} holds no entries")
    return entries


# -- IO helpers ------------------------------------------------------------------

def save_frame_png(path: Path, frame: np.ndarray) -> None:
    """Store a float (3, H, W) frame in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_frame_png(path: str | Path) -> np.ndarray:
    """PNG -> float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_wav(path: str | Path) -> tuple[int, np.ndarray]:
    """Mono waveform as float32 in [-1, 1]; accepts 16-bit PCM or float WAV."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise DatasetError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise DatasetError(f"{path}: unsupported WAV sample format {data.dtype}")
    return int(rate), data


@dataclass
class ClipData:
    entry: DatasetManifestEntry
    frames: np.ndarray          # (T, 3, H, W) float32 in [-1, 1]
    waveform: np.ndarray        # float32
    sample_rate: int
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def reference_frame(self) -> np.ndarray:
        return self.frames[self.entry.reference_frame_index]


def load_clip(entry: DatasetManifestEntry, root: str | Path) -> ClipData:
    root = Path(root)
    frames_dir = root / entry.frames_path
    frame_files = sorted(frames_dir.glob("frame_*.png"))
    frames = np.stack([load_frame_png(p) for p in frame_files])
    rate, wave = load_wav(root / entry.audio_path)
    meta_path = frames_dir.parent / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return ClipData(
        entry=entry,
        frames=(frames * 2.0 - 1.0).astype(np.float32),
        waveform=wave,
        sample_rate=rate,
        meta=meta,
    )


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_clips: int,
    settings: DatasetSettings,
    seed: int,
) -> Path:
    """Render n_clips procedural clips plus a JSON-lines manifest.

    Returns the manifest path.  Regeneration with the same arguments is
    byte-identical.
    """
    if n_clips < 1:
        raise DatasetError(f"need at least one clip, got {n_clips}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out_dir}: {exc}") from exc

    entries = []
    for i in range(n_clips):
        clip_id = f"clip_{i:04d}"
        emotion = EMOTION_LABELS[i % len(EMOTION_LABELS)]
        intensity = (i % 3) + 1
        rng = np.random.default_rng([seed, i])
        identity = sample_identity(rng)
        geometry = expression_geometry(emotion, intensity)

        clip_dir = out_dir / "clips" / clip_id
        frames_dir = clip_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)

        wave = synthesize_speech_audio(settings.frames_per_clip, settings.samples_per_frame, rng)
        apertures = mouth_aperture(wave, settings.frames_per_clip)
        wavfile.write(clip_dir / "audio.wav", settings.sample_rate, wave)

        for f, aperture in enumerate(apertures):
            frame = render_face(settings.image_size, identity, geometry, float(aperture))
            save_frame_png(frames_dir / f"frame_{f:04d}.png", frame)

        (clip_dir / "meta.json").write_text(
            json.dumps(
                {
                    "clip_id": clip_id,
                    "seed": seed,
                    "emotion": emotion,
                    "intensity": intensity,
                    "identity": identity.to_dict(),
                    "geometry": geometry.to_dict(),
                    "apertures": [float(a) for a in apertures],
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
        entries.append(
            DatasetManifestEntry(
                clip_id=clip_id,
                frames_path=f"clips/{clip_id}/frames",
                audio_path=f"clips/{clip_id}/audio.wav",
                reference_frame_index=0,
                emotion=emotion,
                intensity=intensity,
            )
        )
    return write_manifest(out_dir / "manifest.jsonl", entries)
