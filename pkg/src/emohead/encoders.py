"""Toy text and audio encoders with deterministic featurization.

Both are plain nn.Modules: the featurization (hashing, spectral bands) is
fixed and platform-stable, while the embedding table / projection weights
are trainable.  The reference image encoder lives in network.py since it
mirrors the noise predictor's down path.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .network import sinusoidal_embedding


class EmptyTextError(ValueError):
    pass


class WaveformTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSettings:
    text_vocab: int = 1024
    text_tokens: int = 32
    text_dim: int = 32
    audio_bands: int = 8
    audio_tokens: int = 4
    audio_dim: int = 32

    def to_dict(self) -> dict:
        return {
            "text_vocab": self.text_vocab,
            "text_tokens": self.text_tokens,
            "text_dim": self.text_dim,
            "audio_bands": self.audio_bands,
            "audio_tokens": self.audio_tokens,
            "audio_dim": self.audio_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSettings":
        return cls(**d)


def hash_token(token: str, vocab_size: int) -> int:
    """Stable token id in [1, vocab_size); 0 is reserved for padding."""
    return 1 + zlib.crc32(token.lower().encode("utf-8")) % (vocab_size - 1)


class TextEncoder(nn.Module):
    """Whitespace tokens -> hashed ids -> learned embeddings + fixed positions.

    Output is (text_tokens, text_dim); shorter prompts are padded with the
    reserved id 0, longer ones truncated.
    """

    def __init__(self, settings: EncoderSettings):
        super().__init__()
        self.settings = settings
        self.embedding = nn.Embedding(settings.text_vocab, settings.text_dim)
        pos = sinusoidal_embedding(torch.arange(settings.text_tokens), settings.text_dim)
        self.register_buffer("positional", pos.to(torch.float32), persistent=False)

    def token_ids(self, text: str) -> torch.Tensor:
        if not text or not text.split():
            raise EmptyTextError("cannot encode empty text")
        ids = [hash_token(tok, self.settings.text_vocab) for tok in text.split()]
        ids = ids[: self.settings.text_tokens]
        ids += [0] * (self.settings.text_tokens - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, text: str) -> torch.Tensor:
        ids = self.token_ids(text).to(self.embedding.weight.device)
        return self.embedding(ids) + self.positional.to(self.embedding.weight.dtype)


def triangular_band_energies(window: np.ndarray, n_bands: int) -> np.ndarray:
    """Log energy of overlapping triangular bands over the power spectrum.

    Band centers are evenly spaced over the rFFT bins and each triangle
    spans from the previous center to the next, so adjacent bands overlap
    by half.  Returns log1p of the filtered energies, shape (n_bands,).
    """
    window = np.asarray(window, dtype=np.float64)
    power = np.abs(np.fft.rfft(window)) ** 2
    n_bins = power.shape[0]
    edges = np.linspace(0.0, n_bins - 1.0, n_bands + 2)
    bins = np.arange(n_bins, dtype=np.float64)
    energies = np.empty(n_bands, dtype=np.float64)
    for b in range(n_bands):
        left, center, right = edges[b], edges[b + 1], edges[b + 2]
        rising = (bins - left) / max(center - left, 1e-12)
        falling = (right - bins) / max(right - center, 1e-12)
        weights = np.clip(np.minimum(rising, falling), 0.0, None)
        energies[b] = float(weights @ power)
    return np.log1p(energies)


def frame_band_energies(waveform: np.ndarray, frame_count: int, n_bands: int) -> np.ndarray:
    """Per-video-frame band energies, shape (frame_count, n_bands).

    The waveform is cut into frame_count equal windows (remainder samples
    dropped); each window contributes one band vector.
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.shape[0] < frame_count:
        raise WaveformTooShortError(
            f"waveform of {waveform.shape[0]} samples cannot cover {frame_count} frames"
        )
    hop = waveform.shape[0] // frame_count
    return np.stack(
        [triangular_band_energies(waveform[i * hop : (i + 1) * hop], n_bands) for i in range(frame_count)]
    )


class AudioEncoder(nn.Module):
    """Bandwise log-energies per frame, projected to audio tokens.

    The spectral featurization is fixed; only the linear projection that
    maps band energies to (audio_tokens, audio_dim) is trainable.
    """

    def __init__(self, settings: EncoderSettings):
        super().__init__()
        self.settings = settings
        self.proj = nn.Linear(settings.audio_bands, settings.audio_tokens * settings.audio_dim)

    def project(self, band_energies: torch.Tensor) -> torch.Tensor:
        """(..., n_bands) energies -> (..., audio_tokens, audio_dim) tokens."""
        s = self.settings
        out = self.proj(band_energies.to(self.proj.weight.dtype))
        return out.reshape(*band_energies.shape[:-1], s.audio_tokens, s.audio_dim)

    def forward(self, waveform: np.ndarray, frame_count: int) -> torch.Tensor:
        energies = frame_band_energies(waveform, frame_count, self.settings.audio_bands)
        return self.project(torch.from_numpy(energies))
