"""Denoising-objective trainer for the toy backbone."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .codec import IdentityCodec
from .schedule import NoiseSchedule
from .unet import Denoiser


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 2e-4
    cond_dropout: float = 0.1
    ema_decay: float = 0.999
    log_every: int = 200


@dataclass
class TrainResult:
    losses: list
    steps: int


def diffusion_loss(model: Denoiser, schedule: NoiseSchedule, x0: torch.Tensor,
                   captions: list, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE at the given timesteps (shared by trainer and gradient checks)."""
    abar = torch.tensor(
        [schedule.alpha_bar_at(int(tt)) for tt in t], dtype=x0.dtype
    )[:, None, None, None]
    xt = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise
    tokens = model.prompt_encoder.embed_batch(captions)
    pred = model(xt, t, tokens)
    return F.mse_loss(pred, noise)


def train_toy(
    model: Denoiser,
    schedule: NoiseSchedule,
    dataset: list,
    steps: int,
    seed: int,
    config: TrainConfig | None = None,
    progress: bool = False,
    snapshot_every: int = 0,
    snapshot_fn=None,
) -> TrainResult:
    """Train in place; finishes by loading the EMA weights into the model.

    With snapshot_every > 0, snapshot_fn(step, ema_state) is called
    periodically so long runs can persist intermediate EMA checkpoints.
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    codec = IdentityCodec()
    images = torch.stack([codec.encode(s.image) for s in dataset])
    captions = [s.caption for s in dataset]
    total_t = schedule.total_timesteps

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in model.state_dict().items() if v.dtype.is_floating_point}
    losses = []
    model.train()
    start = time.time()
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        x0 = images[idx]
        t = torch.from_numpy(rng.integers(1, total_t + 1, size=cfg.batch_size))
        noise = torch.randn(x0.shape)
        caps = [captions[i] if rng.random() >= cfg.cond_dropout else "" for i in idx]
        loss = diffusion_loss(model, schedule, x0, caps, t, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        with torch.no_grad():
            for k, v in model.state_dict().items():
                if k in ema:
                    ema[k].mul_(cfg.ema_decay).add_(v, alpha=1.0 - cfg.ema_decay)
        if progress and step % cfg.log_every == 0:
            rate = step / (time.time() - start)
            recent = sum(losses[-cfg.log_every:]) / min(cfg.log_every, len(losses))
            print(f"step {step}/{steps}  loss {recent:.4f}  ({rate:.1f} it/s)", flush=True)
        if snapshot_every and snapshot_fn and step % snapshot_every == 0:
            snapshot_fn(step, {k: v.clone() for k, v in ema.items()})
    state = model.state_dict()
    state.update(ema)
    model.load_state_dict(state)
    model.eval()
    return TrainResult(losses=losses, steps=steps)
