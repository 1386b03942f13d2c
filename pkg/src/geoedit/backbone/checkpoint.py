"""Checkpoint container: npz archive with a JSON meta block and named parameters."""
from __future__ import annotations

import hashlib
import json

import numpy as np
import torch

from .schedule import NoiseSchedule
from .unet import Denoiser, DenoiserConfig

FORMAT_VERSION = 1


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, extra: dict | None = None) -> None:
    meta = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "schedule": {
            "total_timesteps": schedule.total_timesteps,
            "beta_start": float(schedule.beta[0]),
            "beta_end": float(schedule.beta[-1]),
        },
        "extra": extra or {},
    }
    arrays = {f"param.{name}": tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}
    np.savez_compressed(path, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple:
    """Returns (model, schedule, meta). The model is in eval mode."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["__meta__"]).decode("utf-8"))
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        state = {
            key[len("param."):]: torch.from_numpy(zf[key].copy())
            for key in zf.files
            if key.startswith("param.")
        }
    config = DenoiserConfig.from_dict(meta["config"])
    model = Denoiser(config)
    model.load_state_dict(state)
    model.eval()
    sched_meta = meta["schedule"]
    schedule = NoiseSchedule.linear(
        sched_meta["total_timesteps"], sched_meta["beta_start"], sched_meta["beta_end"]
    )
    return model, schedule, meta


def weights_fingerprint(model: Denoiser) -> str:
    """Stable digest of the parameter values; keys trajectory caches to the weights."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()[:16]
