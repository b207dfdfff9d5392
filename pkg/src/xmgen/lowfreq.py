"""Low-pass anchoring of reverse-diffusion proposals.

The scale-N low-pass operator averages each NxN block and broadcasts the
mean back, so it is linear, idempotent, and an orthogonal projection;
``project_proposal`` swaps the low band of a proposal for that of a
noised reference, leaving the proposal's high band untouched:

    out = low(ref_noised) + (proposal - low(proposal))

so that low(out) == low(ref_noised) exactly. A bicubic resampling filter
is available as a non-default alternative; it is neither exactly linear
at the boundaries nor idempotent, so its guarantees are loose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_diffuse


@dataclass(frozen=True)
class LowPassFilter:
    """Block-average (default) or bicubic dimension-preserving filter."""

    N: int
    kind: str = "block"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"scale factor must be >= 1, got {self.N}")
        if self.kind not in ("block", "bicubic"):
            raise ValueError(f"unknown filter kind {self.kind!r}")


def _check_divisible(x, N: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % N or w % N:
        raise ValueError(f"spectrogram {h}x{w} not divisible by scale {N}")


def _upsample_nearest(m, N: int):
    if isinstance(m, torch.Tensor):
        return m.repeat_interleave(N, dim=-2).repeat_interleave(N, dim=-1)
    return np.repeat(np.repeat(m, N, axis=-2), N, axis=-1)


def _bicubic(x, N: int):
    t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.asarray(x))
    t4 = t.reshape(-1, 1, t.shape[-2], t.shape[-1]).to(torch.float32)
    down = torch.nn.functional.interpolate(
        t4, scale_factor=1.0 / N, mode="bicubic", align_corners=False)
    up = torch.nn.functional.interpolate(
        down, size=t.shape[-2:], mode="bicubic", align_corners=False)
    out = up.reshape(t.shape)
    if isinstance(x, torch.Tensor):
        return out.to(x.dtype)
    return out.numpy().astype(x.dtype)


def low_pass(x, f: LowPassFilter):
    """Extract the scale-N global structure, preserving dimensions."""
    _check_divisible(x, f.N)
    if f.N == 1:
        return x * 1.0
    if f.kind == "bicubic":
        return _bicubic(x, f.N)
    h, w = x.shape[-2], x.shape[-1]
    lead = tuple(x.shape[:-2])
    blocks = x.reshape(lead + (h // f.N, f.N, w // f.N, f.N))
    means = blocks.mean(-1).mean(-2)
    return _upsample_nearest(means, f.N)


def high_pass(x, f: LowPassFilter):
    """Complement of ``low_pass``: x minus its low band."""
    return x - low_pass(x, f)


def diffuse_reference(r, t: int, sched: NoiseSchedule, noise):
    """Reference corrupted to step t; t == 0 returns the reference itself."""
    if t == 0:
        return r
    return forward_diffuse(r, t, noise, sched)


def project_proposal(x_prop, r_noised, f: LowPassFilter):
    """Replace the proposal's low band with the noised reference's."""
    if tuple(x_prop.shape) != tuple(r_noised.shape):
        raise ValueError(
            f"shape mismatch: proposal {tuple(x_prop.shape)} vs "
            f"reference {tuple(r_noised.shape)}")
    return low_pass(r_noised, f) + x_prop - low_pass(x_prop, f)
