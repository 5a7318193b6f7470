"""Desk-scale quality metrics: PSNR, SSIM, conditioning sensitivity.

Perceptual metrics that need pretrained reference networks are out of
scope; the report schema reserves null fields for them so external tooling
can merge scores later.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 7  # uniform window; images here are 16-64 px, 11x11 would not fit well


class MetricError(ValueError):
    pass


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, max_value: float, *, cap_db: float = PSNR_CAP_DB) -> float:
    """10 log10(max_value^2 / MSE); identical inputs report the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if max_value <= 0:
        raise MetricError(f"max_value must be positive, got {max_value}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return 10.0 * math.log10(max_value**2 / mse)


def _ssim_plane(a: np.ndarray, b: np.ndarray, max_value: float, window: int, k1: float, k2: float) -> float:
    if min(a.shape) < window:
        raise MetricError(f"window {window} does not fit image of shape {a.shape}")
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    max_value: float,
    *,
    window: int = SSIM_WINDOW,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Windowed SSIM with a uniform window, averaged over window positions.

    Accepts (H, W) planes or (C, H, W) images; channels are scored
    independently and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if max_value <= 0:
        raise MetricError(f"max_value must be positive, got {max_value}")
    if a.ndim == 2:
        return _ssim_plane(a, b, max_value, window, k1, k2)
    if a.ndim == 3:
        return float(np.mean([_ssim_plane(pa, pb, max_value, window, k1, k2) for pa, pb in zip(a, b)]))
    raise MetricError(f"expected 2-D or 3-D arrays, got ndim={a.ndim}")


def conditioning_sensitivity(
    sample_fn: Callable[["object", int], np.ndarray],
    cond_a,
    cond_b,
    seed: int,
) -> float:
    """Mean absolute pixel difference between same-seed generations.

    The two conditioning sets must differ only in their text embeddings;
    audio and reference parts are checked for equality first.
    """
    if not _non_text_parts_equal(cond_a, cond_b):
        raise MetricError("conditioning sets must differ only in text embeddings")
    va = np.asarray(sample_fn(cond_a, seed), dtype=np.float64)
    vb = np.asarray(sample_fn(cond_b, seed), dtype=np.float64)
    _check_same_shape(va, vb)
    return float(np.abs(va - vb).mean())


def _non_text_parts_equal(cond_a, cond_b) -> bool:
    audio_a, audio_b = np.asarray(cond_a.audio), np.asarray(cond_b.audio)
    if audio_a.shape != audio_b.shape or not np.array_equal(audio_a, audio_b):
        return False
    if len(cond_a.reference) != len(cond_b.reference):
        return False
    return all(
        np.array_equal(np.asarray(ra), np.asarray(rb))
        for ra, rb in zip(cond_a.reference, cond_b.reference)
    )


@dataclass
class ClipScores:
    psnr_db: float
    ssim: float

    def to_dict(self) -> dict:
        return {"psnr_db": self.psnr_db, "ssim": self.ssim}


@dataclass
class MetricReport:
    per_clip: dict[str, ClipScores] = field(default_factory=dict)
    sensitivity: float | None = None
    deterministic: bool | None = None
    # reserved for pretrained-network metrics merged by external tooling
    fid: None = None
    fvd: None = None
    lpips: None = None
    cpbd: None = None
    sync_conf: None = None

    @property
    def psnr_mean(self) -> float:
        return float(np.mean([s.psnr_db for s in self.per_clip.values()]))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean([s.ssim for s in self.per_clip.values()]))

    def to_dict(self) -> dict:
        return {
            "per_clip": {k: v.to_dict() for k, v in sorted(self.per_clip.items())},
            "aggregate": {"psnr_db": self.psnr_mean, "ssim": self.ssim_mean},
            "sensitivity": self.sensitivity,
            "deterministic": self.deterministic,
            "fid": self.fid,
            "fvd": self.fvd,
            "lpips": self.lpips,
            "cpbd": self.cpbd,
            "sync_conf": self.sync_conf,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        report = cls(
            per_clip={k: ClipScores(**v) for k, v in d["per_clip"].items()},
            sensitivity=d.get("sensitivity"),
            deterministic=d.get("deterministic"),
        )
        return report

    def format_table(self) -> str:
        lines = [f"{'clip':<16}{'PSNR (dB)':>12}{'SSIM':>10}"]
        for clip_id in sorted(self.per_clip):
            s = self.per_clip[clip_id]
            lines.append(f"{clip_id:<16}{s.psnr_db:>12.3f}{s.ssim:>10.4f}")
        lines.append(f"{'mean':<16}{self.psnr_mean:>12.3f}{self.ssim_mean:>10.4f}")
        return "\n".join(lines)
