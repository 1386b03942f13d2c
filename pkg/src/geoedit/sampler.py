"""DDIM inversion and denoising with region-mixed updates and masked guidance.

Step indexing: tau = 1 is the noisiest denoising step, tau = steps the last.
Per-pixel noise comes from a counter-based generator keyed by (seed, t), so a
pixel's draw never depends on the mask shape.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .attention import AttentionContext, KVCache
from .backbone.codec import IdentityCodec
from .backbone.conditioning import ConditionEmbedding
from .backbone.schedule import NoiseSchedule
from .backbone.unet import Denoiser
from .imaging import DimensionMismatch, ImageBuffer, MaskBuffer


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    inpaint_blend_start: int = 1
    refine_blend_start_completion: int = 13
    refine_blend_start_general: int = 25
    clip_denoised: bool = False  # clamp predicted x0 into [0, 1] while sampling
    inversion_refine_iters: int = 1  # fixed-point refinements per inversion step

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        for v in (
            self.inpaint_blend_start,
            self.refine_blend_start_completion,
            self.refine_blend_start_general,
        ):
            if not 1 <= v < 50:
                raise ValueError("blend-start step indices must lie in [1, 50)")
        if self.inversion_refine_iters < 0:
            raise ValueError("inversion_refine_iters must be >= 0")

    def scaled_blend_start(self, reference_value: int) -> int:
        """Blend-start indices are stated for 50 steps; rescale for other step counts."""
        return max(1, round(reference_value * self.steps / 50))


@dataclass
class DiffusionTrajectory:
    """Recorded latents of one inversion, ordered noisy -> clean (length steps+1)."""

    latents: list
    timesteps: np.ndarray
    cond_text: str
    eps: Optional[list] = None
    kv: Optional[KVCache] = None

    def __post_init__(self):
        if len(self.latents) != len(self.timesteps):
            raise ValueError("latent count must equal timestep count")

    @property
    def steps(self) -> int:
        return len(self.latents) - 1

    def start_latent(self) -> torch.Tensor:
        return self.latents[0].clone()

    def final_latent(self) -> torch.Tensor:
        return self.latents[-1].clone()


def ddim_step(
    x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Deterministic update from timestep t to t_prev.

    clip_x0 clamps the predicted clean latent into [0, 1] (pixel-space
    stabilization); the default leaves the raw update formula untouched.
    """
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    x0 = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if clip_x0:
        x0 = torch.clamp(x0, 0.0, 1.0)
    return math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps


def ddpm_sigma(t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    """Stochastic-update noise scale between two timesteps; 0 when they coincide."""
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    inner = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    return math.sqrt(max(inner, 0.0))


def ddpm_step(
    x_t: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
    noise: torch.Tensor, clip_x0: bool = False,
) -> torch.Tensor:
    """Stochastic update: shared predicted x0, reduced eps coefficient, fresh noise."""
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    sigma = ddpm_sigma(t, t_prev, schedule)
    x0 = (x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if clip_x0:
        x0 = torch.clamp(x0, 0.0, 1.0)
    coef = math.sqrt(max(1.0 - ab_p - sigma**2, 0.0))
    return math.sqrt(ab_p) * x0 + coef * eps + sigma * noise


def step_noise(seed: int, t: int, shape) -> torch.Tensor:
    """Position-stable standard normal draw keyed by (seed, t)."""
    gen = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, t & 0xFFFFFFFFFFFFFFFF]))
    return torch.from_numpy(gen.standard_normal(size=tuple(shape), dtype=np.float32))


def masked_stochastic_step(
    x_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    mask: Optional[MaskBuffer],
    noise: torch.Tensor,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Stochastic update inside the mask, deterministic outside, shared predicted x0.

    An empty (or missing) mask is bit-identical to `ddim_step`; a full mask is
    bit-identical to `ddpm_step` under the same draw.
    """
    if mask is not None and (mask.height, mask.width) != tuple(x_t.shape[-2:]):
        raise DimensionMismatch(
            f"perturbation mask {mask.height}x{mask.width} does not match latent {tuple(x_t.shape[-2:])}"
        )
    base = ddim_step(x_t, eps, t, t_prev, schedule, clip_x0=clip_x0)
    if mask is None or mask.is_empty():
        return base
    stoch = ddpm_step(x_t, eps, t, t_prev, schedule, noise, clip_x0=clip_x0)
    if mask.is_full():
        return stoch
    sel = torch.from_numpy(mask.data.copy()).bool()[None, :, :]
    return torch.where(sel, stoch, base)


def masked_guidance(
    eps_null: torch.Tensor, eps_cond: torch.Tensor, scale: float, region: Optional[MaskBuffer]
) -> torch.Tensor:
    """Classifier-free guidance confined to a region; outside it the null branch passes through."""
    if region is None or region.is_empty():
        return eps_null
    if (region.height, region.width) != tuple(eps_null.shape[-2:]):
        raise DimensionMismatch("guidance region does not match latent dimensions")
    guided = eps_null + scale * (eps_cond - eps_null)
    if region.is_full():
        return guided
    sel = torch.from_numpy(region.data.copy()).bool()[None, :, :]
    return torch.where(sel, guided, eps_null)


@dataclass
class DenoiseResult:
    image: ImageBuffer
    latents: list  # start latent plus one entry per step


def denoise(
    model: Denoiser,
    schedule: NoiseSchedule,
    start: torch.Tensor,
    cond: ConditionEmbedding,
    null: ConditionEmbedding,
    config: SamplerConfig,
    ctx: Optional[AttentionContext] = None,
    perturb_mask: Optional[MaskBuffer] = None,
    guide_region: Optional[MaskBuffer] = None,
    codec: Optional[IdentityCodec] = None,
    anchor: Optional[DiffusionTrajectory] = None,
    edit_region: Optional[MaskBuffer] = None,
) -> DenoiseResult:
    """Run the full denoising loop from a starting latent.

    Each step evaluates the noise model under the null and conditional
    branches (the conditional branch localizes cross-attention when the
    context carries a region), merges them with masked guidance, then
    advances with the region-mixed update.

    With `anchor` and `edit_region`, latents outside the editable region are
    pinned to the recorded inversion trajectory after every step, so the
    deterministic part cannot drift when the model reacts to in-region noise.
    """
    codec = codec or IdentityCodec()
    ts = schedule.sampler_timesteps(config.steps)
    anchor_sel = None
    if anchor is not None and edit_region is not None and not edit_region.is_full():
        if anchor.steps != config.steps:
            raise ValueError("anchor trajectory step count differs from the sampler config")
        anchor_sel = torch.from_numpy(edit_region.data.copy()).bool()[None, :, :]
    x = start.clone()
    latents = [x.clone()]
    for tau in range(1, config.steps + 1):
        t, t_prev = int(ts[tau - 1]), int(ts[tau])
        if ctx is not None:
            ctx.current_tau = tau
            ctx.cross_localized = False
        eps_null = model.predict_noise(x, t, null, ctx)
        if ctx is not None:
            ctx.cross_localized = True
        eps_cond = model.predict_noise(x, t, cond, ctx)
        if ctx is not None:
            ctx.cross_localized = False
        eps_hat = masked_guidance(eps_null, eps_cond, config.guidance_scale, guide_region)
        noise = step_noise(config.seed, t, x.shape)
        x = masked_stochastic_step(x, eps_hat, t, t_prev, schedule, perturb_mask, noise,
                                   clip_x0=config.clip_denoised)
        if anchor_sel is not None:
            x = torch.where(anchor_sel, x, anchor.latents[tau])
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite latent at step {tau}")
        latents.append(x.clone())
    return DenoiseResult(image=codec.decode(x), latents=latents)


def ddim_invert(
    image: ImageBuffer,
    cond: ConditionEmbedding,
    model: Denoiser,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    codec: Optional[IdentityCodec] = None,
    record: bool = True,
    cond_text: str = "",
) -> DiffusionTrajectory:
    """Deterministic inversion from the clean image to the noisiest latent.

    Records latents at every sampler timestep; with `record` it additionally
    replays the trajectory once to cache per-layer source K/V and per-step
    noise predictions.

    Each reversed update is optionally solved by fixed-point iteration
    (config.inversion_refine_iters), re-evaluating the noise at the target
    timestep so the later denoising pass retraces the trajectory closely.
    """
    codec = codec or IdentityCodec()
    ts = schedule.sampler_timesteps(config.steps)
    steps = config.steps
    latents = [None] * (steps + 1)
    x = codec.encode(image)
    latents[steps] = x.clone()
    for k in reversed(range(steps)):
        t_lo, t_hi = int(ts[k + 1]), int(ts[k])
        ab_lo = schedule.alpha_bar_at(t_lo)
        ab_hi = schedule.alpha_bar_at(t_hi)

        def reversed_update(eps):
            x0 = (x - math.sqrt(1.0 - ab_lo) * eps) / math.sqrt(ab_lo)
            return math.sqrt(ab_hi) * x0 + math.sqrt(1.0 - ab_hi) * eps

        x_hi = reversed_update(model.predict_noise(x, max(t_lo, 1), cond, None))
        for _ in range(config.inversion_refine_iters):
            x_hi = reversed_update(model.predict_noise(x_hi, t_hi, cond, None))
        x = x_hi
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite latent while inverting to t={t_hi}")
        latents[k] = x.clone()

    traj = DiffusionTrajectory(latents=latents, timesteps=ts, cond_text=cond_text)
    if record:
        kv = KVCache()
        ctx = AttentionContext(mode="record", kv=kv)
        eps_list = []
        for tau in range(1, steps + 1):
            ctx.current_tau = tau
            eps_list.append(model.predict_noise(latents[tau - 1], int(ts[tau - 1]), cond, ctx))
        traj.eps = eps_list
        traj.kv = kv
    return traj


# ---------------------------------------------------------------------------
# persistent trajectory/KV cache
# ---------------------------------------------------------------------------


class SampleCache:
    """Binary cache directory for inversions, keyed by content hash."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def trajectory_key(
        image: ImageBuffer, cond_text: str, config: SamplerConfig, schedule: NoiseSchedule, weights_fp: str, record: bool
    ) -> str:
        h = hashlib.sha256()
        h.update(image.data.tobytes())
        h.update(cond_text.encode("utf-8"))
        h.update(json.dumps({
            "steps": config.steps,
            "invert_iters": config.inversion_refine_iters,
            "T": schedule.total_timesteps,
            "beta0": float(schedule.beta[0]),
            "beta1": float(schedule.beta[-1]),
            "weights": weights_fp,
            "record": bool(record),
        }, sort_keys=True).encode("utf-8"))
        return h.hexdigest()[:32]

    def _paths(self, key: str):
        return self.root / f"{key}.traj.npz", self.root / f"{key}.kv.npz"

    def has(self, key: str) -> bool:
        return self._paths(key)[0].exists()

    def save(self, key: str, traj: DiffusionTrajectory) -> None:
        traj_path, kv_path = self._paths(key)
        arrays = {
            "latents": torch.stack(traj.latents).numpy(),
            "timesteps": traj.timesteps,
            "cond": np.frombuffer(traj.cond_text.encode("utf-8"), dtype=np.uint8),
        }
        if traj.eps is not None:
            arrays["eps"] = torch.stack(traj.eps).numpy()
        np.savez(traj_path, **arrays)
        if traj.kv is not None:
            traj.kv.save(kv_path)

    def load(self, key: str) -> Optional[DiffusionTrajectory]:
        traj_path, kv_path = self._paths(key)
        if not traj_path.exists():
            return None
        with np.load(traj_path) as zf:
            latents = [torch.from_numpy(a.copy()) for a in zf["latents"]]
            ts = zf["timesteps"].copy()
            cond_text = bytes(zf["cond"]).decode("utf-8")
            eps = [torch.from_numpy(a.copy()) for a in zf["eps"]] if "eps" in zf.files else None
        kv = KVCache.load(kv_path) if kv_path.exists() else None
        return DiffusionTrajectory(latents=latents, timesteps=ts, cond_text=cond_text, eps=eps, kv=kv)
