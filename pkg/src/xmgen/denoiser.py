"""Noise-prediction backbone with an additive conditioning port.

A small U-Net predicts the noise eps(x_t, t). The timestep enters as a
sinusoidal embedding passed through a two-layer MLP; an optional
conditioning vector of the same width is added to the result before it
is broadcast into the residual blocks. A zero conditioning vector is
therefore exactly equivalent to no conditioning, which makes the
unconditioned prediction and the conditioning-induced correction an
exact decomposition of the conditioned output.

Parameter initialization is fully deterministic: each tensor is drawn
from a numpy stream keyed by (config.seed, parameter name), so identical
configs always produce identical checkpoints.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import storage
from .diffusion import NoiseSchedule, ddpm_training_loss
from .seeding import make_rng


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: tuple[int, int] = (32, 32)
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        for side in (h, w):
            if side < 16 or side & (side - 1):
                raise ValueError(f"image sides must be powers of two >= 16, got {side}")
        if self.time_embed_dim < 8:
            raise ValueError("time_embed_dim must be >= 8")
        if not self.channel_multipliers:
            raise ValueError("need at least one channel multiplier")
        factor = 2 ** (len(self.channel_multipliers) - 1)
        if h % factor or w % factor:
            raise ValueError(f"{len(self.channel_multipliers)} resolutions do not fit {h}x{w}")
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))

    def to_json(self) -> dict:
        return {"image_size": list(self.image_size),
                "base_channels": self.base_channels,
                "channel_multipliers": list(self.channel_multipliers),
                "time_embed_dim": self.time_embed_dim,
                "seed": self.seed}

    @staticmethod
    def from_json(doc: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            image_size=tuple(doc["image_size"]),
            base_channels=int(doc["base_channels"]),
            channel_multipliers=tuple(doc["channel_multipliers"]),
            time_embed_dim=int(doc["time_embed_dim"]),
            seed=int(doc["seed"]))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional features for integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """U-Net over single-channel spectrograms, conditioned on timestep."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.time_embed_dim
        chans = [config.base_channels * m for m in config.channel_multipliers]
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            [ResidualBlock(c, c, d) for c in chans])
        self.downsamples = nn.ModuleList(
            [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
             for i in range(len(chans) - 1)])
        self.middle = ResidualBlock(chans[-1], chans[-1], d)
        self.up_blocks = nn.ModuleList(
            [ResidualBlock(2 * c, c, d) for c in reversed(chans)])
        self.upsamples = nn.ModuleList(
            [nn.Conv2d(chans[i + 1], chans[i], 3, padding=1)
             for i in reversed(range(len(chans) - 1))])
        self.out_norm = nn.GroupNorm(8, chans[0])
        self.out_conv = nn.Conv2d(chans[0], 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_embed_dim))
        if cond is not None:
            if cond.dim() == 1:
                cond = cond.unsqueeze(0).expand(x.shape[0], -1)
            if cond.shape != temb.shape:
                raise ValueError(
                    f"conditioning shape {tuple(cond.shape)} does not match "
                    f"time embedding {tuple(temb.shape)}")
            temb = temb + cond

        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.middle(h, temb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), temb)
            if i < len(self.upsamples):
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


@dataclass
class DenoiserCheckpoint:
    """Frozen-serializable bundle of config, parameters, and provenance."""

    config: DenoiserConfig
    model: DenoiserNet
    training_meta: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {name: p.detach().numpy().copy()
                for name, p in self.model.state_dict().items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.model.state_dict()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(
                self.model.state_dict()[name].detach().numpy(), dtype="<f4").tobytes())
        return h.hexdigest()

    def clone(self) -> "DenoiserCheckpoint":
        return DenoiserCheckpoint(self.config, copy.deepcopy(self.model),
                                  dict(self.training_meta))

    def save(self, path: str | Path) -> None:
        meta = {"kind": "denoiser_checkpoint",
                "config": self.config.to_json(),
                "training_meta": self.training_meta}
        storage.save_container(path, meta, self.params())

    @staticmethod
    def load(path: str | Path) -> "DenoiserCheckpoint":
        meta, tensors = storage.load_container(path)
        if meta.get("kind") != "denoiser_checkpoint":
            raise storage.StorageError(f"not a denoiser checkpoint: {meta.get('kind')}")
        config = DenoiserConfig.from_json(meta["config"])
        ckpt = DenoiserCheckpoint(config, DenoiserNet(config), meta["training_meta"])
        state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
        ckpt.model.load_state_dict(state)
        return ckpt


def _deterministic_init(model: DenoiserNet, seed: int) -> None:
    """Kaiming-uniform-style init, one numpy stream per parameter name."""
    state = model.state_dict()
    for name, tensor in state.items():
        rng = make_rng(seed, "param", name)
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") \
                or name.endswith("out_norm.weight"):
            values = np.ones(tensor.shape, dtype=np.float32)
        elif "norm" in name and name.endswith(".bias"):
            values = np.zeros(tensor.shape, dtype=np.float32)
        elif name.endswith(".bias"):
            values = np.zeros(tensor.shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(tensor.shape[1:])) if tensor.dim() > 1 else tensor.shape[0]
            bound = 1.0 / math.sqrt(max(fan_in, 1))
            values = rng.uniform(-bound, bound, size=tuple(tensor.shape)).astype(np.float32)
        tensor.copy_(torch.from_numpy(values))


def init_params(config: DenoiserConfig) -> DenoiserCheckpoint:
    """Build a checkpoint with reproducible parameters from config.seed."""
    model = DenoiserNet(config)
    with torch.no_grad():
        _deterministic_init(model, config.seed)
    model.eval()
    return DenoiserCheckpoint(config, model, {"initialized_from_seed": config.seed})


def _as_batch_tensor(x) -> tuple[torch.Tensor, bool]:
    t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.asarray(x, dtype=np.float32))
    if t.dim() == 2:
        return t.unsqueeze(0), True
    if t.dim() == 3:
        return t, False
    raise ValueError(f"expected HxW or BxHxW input, got shape {tuple(t.shape)}")


def denoise(ckpt: DenoiserCheckpoint, xt, t, cond=None):
    """Predict the noise field for xt at step t.

    xt may be a single HxW array or a BxHxW batch (numpy or torch);
    the return type and shape mirror the input. ``cond`` is a vector of
    length time_embed_dim (or a batch of them); a zero vector gives the
    same output as None.
    """
    batch, squeeze = _as_batch_tensor(xt)
    t_tensor = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t_tensor.numel() == 1:
        t_tensor = t_tensor.expand(batch.shape[0])
    cond_t = None
    if cond is not None:
        cond_t = cond if isinstance(cond, torch.Tensor) else \
            torch.from_numpy(np.asarray(cond, dtype=np.float32))
    with torch.no_grad():
        out = ckpt.model(batch.unsqueeze(1).float(), t_tensor, cond_t).squeeze(1)
    if squeeze:
        out = out[0]
    if isinstance(xt, torch.Tensor):
        return out.to(xt.dtype)
    return out.numpy().astype(np.float32)


def forward_eps(ckpt: DenoiserCheckpoint, batch: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
    """Gradient-capable BxHxW noise prediction (internal training path)."""
    return ckpt.model(batch.unsqueeze(1), t, cond).squeeze(1)


def _training_step(model: DenoiserNet, opt: torch.optim.Optimizer,
                   x0_batch: torch.Tensor, sched: NoiseSchedule,
                   rng: np.random.Generator) -> float:
    B = x0_batch.shape[0]
    ts = rng.integers(1, sched.T + 1, size=B)
    noise = torch.from_numpy(rng.standard_normal(x0_batch.shape).astype(np.float32))
    c_sig = torch.from_numpy(np.sqrt(sched.alpha_bar[ts - 1]).astype(np.float32))
    c_noise = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bar[ts - 1]).astype(np.float32))
    xt = c_sig[:, None, None] * x0_batch + c_noise[:, None, None] * noise
    eps_pred = model(xt.unsqueeze(1), torch.from_numpy(ts), None).squeeze(1)
    loss = ddpm_training_loss(noise, eps_pred)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_denoiser(ckpt: DenoiserCheckpoint, x0_stack: np.ndarray,
                   sched: NoiseSchedule, steps: int, lr: float, batch: int,
                   seed: int, meta_label: str) -> DenoiserCheckpoint:
    """Shared DDPM training loop (pretraining and naive fine-tuning)."""
    if x0_stack.shape[0] == 0:
        raise ValueError("training set is empty")
    out = ckpt.clone()
    if steps == 0:
        return out
    model = out.model
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = make_rng(seed, meta_label)
    data = torch.from_numpy(x0_stack.astype(np.float32))
    losses = []
    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch, data.shape[0]))
        loss = _training_step(model, opt, data[idx], sched, rng)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"{meta_label}: non-finite loss {loss} at step {step}")
        losses.append(loss)
    model.eval()
    decile = max(1, len(losses) // 10)
    out.training_meta = dict(out.training_meta)
    out.training_meta.update({
        "phase": meta_label, "steps": steps, "lr": lr, "batch": batch,
        "seed": seed, "final_loss": losses[-1],
        "first_decile_loss": float(np.mean(losses[:decile])),
        "last_decile_loss": float(np.mean(losses[-decile:])),
    })
    return out


def pretrain_source(ckpt: DenoiserCheckpoint, dataset, sched: NoiseSchedule,
                    steps: int, lr: float, seed: int,
                    batch: int = 32) -> DenoiserCheckpoint:
    """Fit the backbone to the abundant source modality.

    ``dataset`` is a sequence of spectrogram samples (anything exposing
    ``.data``) or a raw MxHxW array; all samples must be source-modality
    when tagged.
    """
    stack = _dataset_stack(dataset, require_modality="source")
    out = train_denoiser(ckpt, stack, sched, steps, lr, batch, seed, "pretrain")
    out.training_meta["source_size"] = int(stack.shape[0])
    return out


def _dataset_stack(dataset, require_modality: str | None = None) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32)
    items = list(dataset)
    if not items:
        raise ValueError("dataset is empty")
    if require_modality is not None:
        for s in items:
            tag = getattr(s, "modality", None)
            if tag is not None and tag != require_modality:
                raise ValueError(f"expected {require_modality} samples, found {tag!r}")
    return np.stack([np.asarray(s.data, dtype=np.float32) for s in items])
