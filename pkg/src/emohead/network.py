"""Conditional noise predictor: a small encoder-decoder over latent video.

Each resolution level applies, in order, reference attention, text
attention, audio attention and temporal attention on top of a convolutional
spine.  Every attention layer writes through a zero-initialized output
projection, so a freshly constructed network is exactly the identity on its
attention branches and reduces to the spine alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NoisePredictorConfig:
    levels: int = 2
    channels: tuple[int, ...] = (32, 64)
    d_k: int = 32
    heads: int = 2
    frames: int = 4
    latent_size: int = 16
    in_channels: int = 3
    text_dim: int = 32
    audio_dim: int = 32
    groupnorm_groups: int = 8
    time_dim: int = 64

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError(
                f"{len(self.channels)} channel widths for {self.levels} levels"
            )
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"channel width {c} not divisible by {self.heads} heads")
            if c % self.groupnorm_groups:
                raise ValueError(
                    f"channel width {c} not divisible by {self.groupnorm_groups} groups"
                )
        if self.latent_size % (1 << (self.levels - 1)):
            raise ValueError(
                f"latent size {self.latent_size} not divisible by 2^{self.levels - 1}"
            )

    def level_sizes(self) -> tuple[int, ...]:
        return tuple(self.latent_size >> i for i in range(self.levels))

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "d_k": self.d_k,
            "heads": self.heads,
            "frames": self.frames,
            "latent_size": self.latent_size,
            "in_channels": self.in_channels,
            "text_dim": self.text_dim,
            "audio_dim": self.audio_dim,
            "groupnorm_groups": self.groupnorm_groups,
            "time_dim": self.time_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePredictorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos position code, shape (len(positions), dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class MultiHeadCrossAttention(nn.Module):
    """softmax(Q K^T / sqrt(d_k)) V per head, concatenated and projected.

    Q comes from the query tokens, K and V from the context tokens; the
    output projection starts at zero so the module initially contributes
    nothing to its caller's residual stream.
    """

    def __init__(self, query_dim: int, context_dim: int, d_k: int, heads: int):
        super().__init__()
        self.d_k = d_k
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(heads, query_dim, d_k))
        self.w_k = nn.Parameter(torch.empty(heads, context_dim, d_k))
        self.w_v = nn.Parameter(torch.empty(heads, context_dim, d_k))
        self.out_proj = _zero_init(nn.Linear(heads * d_k, query_dim))
        nn.init.normal_(self.w_q, std=query_dim**-0.5)
        nn.init.normal_(self.w_k, std=context_dim**-0.5)
        nn.init.normal_(self.w_v, std=context_dim**-0.5)

    def mixture(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        value_context: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-head attention output before head concat, (B, heads, Nq, d_k)."""
        if x.shape[-1] != self.w_q.shape[1]:
            raise ShapeMismatchError(
                f"query dim {x.shape[-1]} != projection dim {self.w_q.shape[1]}"
            )
        if context.shape[-1] != self.w_k.shape[1]:
            raise ShapeMismatchError(
                f"context dim {context.shape[-1]} != projection dim {self.w_k.shape[1]}"
            )
        q = torch.einsum("bnd,hdk->bhnk", x, self.w_q)
        k = torch.einsum("bnd,hdk->bhnk", context, self.w_k)
        v = torch.einsum("bnd,hdk->bhnk", value_context if value_context is not None else context, self.w_v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        return torch.softmax(scores, dim=-1) @ v

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        value_context: torch.Tensor | None = None,
    ) -> torch.Tensor:
        mixed = self.mixture(x, context, value_context)
        b, h, n, dk = mixed.shape
        out = mixed.permute(0, 2, 1, 3).reshape(b, n, h * dk)
        out = self.out_proj(out)
        if torch.isnan(out).any():
            raise FloatingPointError("NaN in cross-attention output")
        return out


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention plus feedforward, both residual."""

    def __init__(self, dim: int, context_dim: int, d_k: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, context_dim, d_k, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        tokens = tokens + self.attn(self.norm_attn(tokens), context)
        tokens = tokens + self.ff(self.norm_ff(tokens))
        return tokens


class TemporalSelfAttentionBlock(nn.Module):
    """Self-attention along the frame axis with fixed positional codes.

    Positions are added to the attention queries and keys only; values stay
    position-free so a stack of identical frames maps to identical outputs.
    """

    MAX_FRAMES = 64

    def __init__(self, dim: int, d_k: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, dim, d_k, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        pos = sinusoidal_embedding(torch.arange(self.MAX_FRAMES), dim).to(torch.float32)
        self.register_buffer("frame_pos", pos, persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        f = tokens.shape[1]
        if f > self.MAX_FRAMES:
            raise ShapeMismatchError(f"{f} frames exceeds positional table {self.MAX_FRAMES}")
        h = self.norm_attn(tokens)
        hp = h + self.frame_pos[:f].to(h.dtype)
        tokens = tokens + self.attn(hp, hp, value_context=h)
        tokens = tokens + self.ff(self.norm_ff(tokens))
        return tokens


def _fold_frames(x: torch.Tensor) -> torch.Tensor:
    b, f, c, h, w = x.shape
    return x.reshape(b * f, c, h, w)


def _unfold_frames(x: torch.Tensor, frames: int) -> torch.Tensor:
    bf, c, h, w = x.shape
    return x.reshape(bf // frames, frames, c, h, w)


class _SpatialAttentionLayer(nn.Module):
    """Shared skeleton: GroupNorm -> 1x1 conv -> tokens -> transformer block
    -> 1x1 conv (zero-init) -> residual add."""

    def __init__(self, channels: int, context_dim: int, d_k: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.block = CrossAttentionBlock(channels, context_dim, d_k, heads)
        self.proj_out = _zero_init(nn.Conv2d(channels, channels, 1))

    @staticmethod
    def _to_tokens(x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w).transpose(1, 2)

    @staticmethod
    def _from_tokens(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        n, hw, c = tokens.shape
        return tokens.transpose(1, 2).reshape(n, c, h, w)

    def _branch(self, x_flat: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x_flat.shape
        hidden = self.proj_in(self.norm(x_flat))
        tokens = self.block(self._to_tokens(hidden), context)
        return self.proj_out(self._from_tokens(tokens, h, w))


class TextAttentionLayer(_SpatialAttentionLayer):
    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = x.shape
        if text.shape[0] != b:
            raise ShapeMismatchError(f"text batch {text.shape[0]} != video batch {b}")
        context = text.repeat_interleave(f, dim=0)
        out = self._branch(_fold_frames(x), context)
        return x + _unfold_frames(out, f)


class AudioAttentionLayer(_SpatialAttentionLayer):
    """Text-attention skeleton conditioned on per-frame audio tokens."""

    def forward(self, x: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = x.shape
        if audio.shape[:2] != (b, f):
            raise ShapeMismatchError(
                f"audio leading dims {tuple(audio.shape[:2])} != video dims {(b, f)}"
            )
        context = audio.reshape(b * f, audio.shape[2], audio.shape[3])
        out = self._branch(_fold_frames(x), context)
        return x + _unfold_frames(out, f)


class ReferenceAttentionLayer(_SpatialAttentionLayer):
    """Attends each frame to itself concatenated with the reference map.

    The reference feature map is replicated across frames and appended
    along the width axis; queries come from the frame tokens only, so the
    output is already cropped back to the frame's own shape.
    """

    def __init__(self, channels: int, d_k: int, heads: int, groups: int):
        super().__init__(channels, channels, d_k, heads, groups)

    @staticmethod
    def concat_reference_width(frame: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        """Width-concatenated context map, (..., c, h, 2w)."""
        if frame.shape[-2:] != reference.shape[-2:]:
            raise ShapeMismatchError(
                f"reference spatial {tuple(reference.shape[-2:])} != frame {tuple(frame.shape[-2:])}"
            )
        return torch.cat([frame, reference], dim=-1)

    def forward(self, x: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = x.shape
        if reference.shape != (b, c, h, w):
            raise ShapeMismatchError(
                f"reference map {tuple(reference.shape)} != expected {(b, c, h, w)}"
            )
        x_flat = _fold_frames(x)
        hidden = self.proj_in(self.norm(x_flat))
        ref_hidden = self.proj_in(self.norm(reference)).repeat_interleave(f, dim=0)
        context_map = self.concat_reference_width(hidden, ref_hidden)
        tokens = self.block(self._to_tokens(hidden), self._to_tokens(context_map))
        out = self.proj_out(self._from_tokens(tokens, h, w))
        return x + _unfold_frames(out, f)


class TemporalAttentionLayer(nn.Module):
    """Inter-frame self-attention per spatial location."""

    def __init__(self, channels: int, d_k: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.linear_in = nn.Linear(channels, channels)
        self.block = TemporalSelfAttentionBlock(channels, d_k, heads)
        self.linear_out = _zero_init(nn.Linear(channels, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = x.shape
        hidden = self.norm(_fold_frames(x)).reshape(b, f, c, h, w)
        # (b, f, c, h, w) -> (b*h*w, f, c): one token sequence per location
        tokens = hidden.permute(0, 3, 4, 1, 2).reshape(b * h * w, f, c)
        tokens = self.block(self.linear_in(tokens))
        out = self.linear_out(tokens)
        out = out.reshape(b, h, w, f, c).permute(0, 3, 4, 1, 2)
        return x + out


class AttentionStack(nn.Module):
    """Reference -> text -> audio -> temporal attention, applied in order."""

    def __init__(self, channels: int, config: NoisePredictorConfig):
        super().__init__()
        g = config.groupnorm_groups
        self.reference = ReferenceAttentionLayer(channels, config.d_k, config.heads, g)
        self.text = TextAttentionLayer(channels, config.text_dim, config.d_k, config.heads, g)
        self.audio = AudioAttentionLayer(channels, config.audio_dim, config.d_k, config.heads, g)
        self.temporal = TemporalAttentionLayer(channels, config.d_k, config.heads, g)

    def forward(self, x, text, audio, reference):
        x = self.reference(x, reference)
        x = self.text(x, text)
        x = self.audio(x, audio)
        x = self.temporal(x)
        return x


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(t_emb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return x + h


class ConvBlock(nn.Module):
    """ResBlock without timestep conditioning (reference encoder spine)."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return x + h


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class NoisePredictor(nn.Module):
    """Noise estimate for a latent video given timestep and conditioning.

    forward(z, t, text, audio, reference) with
      z         (B, F, C, H, W)  noisy latents
      t         (B,) integer timesteps
      text      (B, Nt, text_dim)
      audio     (B, F, Na, audio_dim)
      reference list of per-level maps, level l shaped (B, channels[l], H_l, W_l)
    Output matches z's shape.
    """

    def __init__(self, config: NoisePredictorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        td = config.time_dim

        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(config.in_channels, ch[0], 3, padding=1)

        self.down_samplers = nn.ModuleList(
            [Downsample(ch[i - 1], ch[i]) for i in range(1, config.levels)]
        )
        self.down_res = nn.ModuleList(
            [ResBlock(ch[i], td, config.groupnorm_groups) for i in range(config.levels)]
        )
        self.down_stacks = nn.ModuleList(
            [AttentionStack(ch[i], config) for i in range(config.levels)]
        )

        self.mid_res = ResBlock(ch[-1], td, config.groupnorm_groups)

        self.up_res = nn.ModuleList(
            [ResBlock(ch[i], td, config.groupnorm_groups) for i in range(config.levels)]
        )
        self.up_stacks = nn.ModuleList(
            [AttentionStack(ch[i], config) for i in range(config.levels)]
        )
        self.up_samplers = nn.ModuleList(
            [Upsample(ch[i], ch[i - 1]) for i in range(1, config.levels)]
        )

        self.norm_out = nn.GroupNorm(config.groupnorm_groups, ch[0])
        self.conv_out = _zero_init(nn.Conv2d(ch[0], config.in_channels, 3, padding=1))

    @staticmethod
    def _as_timestep_tensor(t, batch: int) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor(t)
        t = t.reshape(-1)
        if t.numel() == 1 and batch > 1:
            t = t.expand(batch)
        return t

    def _time_embedding(self, t: torch.Tensor, frames: int) -> torch.Tensor:
        dtype = self.conv_in.weight.dtype
        emb = sinusoidal_embedding(t, self.config.time_dim).to(dtype)
        emb = self.time_mlp(emb)
        return emb.repeat_interleave(frames, dim=0)

    def _check_inputs(self, z, t, text, audio, reference):
        cfg = self.config
        b, f, c, h, w = z.shape
        if c != cfg.in_channels or h != cfg.latent_size or w != cfg.latent_size:
            raise ShapeMismatchError(
                f"latent shape {(c, h, w)} != configured "
                f"{(cfg.in_channels, cfg.latent_size, cfg.latent_size)}"
            )
        if t.shape[0] != b:
            raise ShapeMismatchError(f"{t.shape[0]} timesteps for batch {b}")
        if text.shape[0] != b or text.shape[2] != cfg.text_dim:
            raise ShapeMismatchError(
                f"text shape {tuple(text.shape)} incompatible with batch {b}, dim {cfg.text_dim}"
            )
        if audio.shape[0] != b or audio.shape[1] != f or audio.shape[3] != cfg.audio_dim:
            raise ShapeMismatchError(
                f"audio shape {tuple(audio.shape)} incompatible with "
                f"batch {b}, frames {f}, dim {cfg.audio_dim}"
            )
        if len(reference) != cfg.levels:
            raise ShapeMismatchError(
                f"{len(reference)} reference maps for {cfg.levels} levels"
            )
        for lvl, (r, size, width) in enumerate(zip(reference, self.config.level_sizes(), cfg.channels)):
            if r.shape != (b, width, size, size):
                raise ShapeMismatchError(
                    f"reference level {lvl} shape {tuple(r.shape)} != {(b, width, size, size)}"
                )

    def _spine_and_stacks(self, z, t, text, audio, reference, use_attention: bool):
        b, f = z.shape[:2]
        t_emb = self._time_embedding(t, f)

        def stack(i, which, x):
            if not use_attention:
                return x
            module = self.down_stacks[i] if which == "down" else self.up_stacks[i]
            return module(x, text, audio, reference[i])

        h = self.conv_in(_fold_frames(z))
        skips = []
        for i in range(self.config.levels):
            if i > 0:
                h = self.down_samplers[i - 1](h)
            h = self.down_res[i](h, t_emb)
            x = stack(i, "down", _unfold_frames(h, f))
            skips.append(x)
            h = _fold_frames(x)

        h = self.mid_res(h, t_emb)

        for i in reversed(range(self.config.levels)):
            h = self.up_res[i](h + _fold_frames(skips[i]), t_emb)
            x = stack(i, "up", _unfold_frames(h, f))
            h = _fold_frames(x)
            if i > 0:
                h = self.up_samplers[i - 1](h)

        out = self.conv_out(nn.functional.silu(self.norm_out(h)))
        return _unfold_frames(out, f)

    def forward(self, z, t, text, audio, reference) -> torch.Tensor:
        t = self._as_timestep_tensor(t, z.shape[0])
        self._check_inputs(z, t, text, audio, reference)
        out = self._spine_and_stacks(z, t, text, audio, reference, use_attention=True)
        if torch.isnan(out).any():
            raise FloatingPointError("NaN in noise prediction")
        return out

    def forward_spine(self, z, t) -> torch.Tensor:
        """Convolutional path only, all attention stacks skipped."""
        t = self._as_timestep_tensor(t, z.shape[0])
        return self._spine_and_stacks(z, t, None, None, None, use_attention=False)


class ReferenceEncoder(nn.Module):
    """Down path twin of the noise predictor with independent weights.

    Runs once on the clean reference latent and returns one feature map per
    resolution level, matched to the predictor's channel widths.
    """

    def __init__(self, config: NoisePredictorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        self.conv_in = nn.Conv2d(config.in_channels, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            [ConvBlock(ch[i], config.groupnorm_groups) for i in range(config.levels)]
        )
        self.down_samplers = nn.ModuleList(
            [Downsample(ch[i - 1], ch[i]) for i in range(1, config.levels)]
        )

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.config
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.latent_size, cfg.latent_size):
            raise ShapeMismatchError(
                f"reference image shape {tuple(image.shape)} != "
                f"(B, {cfg.in_channels}, {cfg.latent_size}, {cfg.latent_size})"
            )
        h = self.conv_in(image)
        maps = []
        for i in range(cfg.levels):
            if i > 0:
                h = self.down_samplers[i - 1](h)
            h = self.blocks[i](h)
            maps.append(h)
        return maps
