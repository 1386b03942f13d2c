"""Latent codec boundary. The default is the identity: latents are pixels.

A learned autoencoder can replace this without changing any buffer shapes
seen by the samplers.
"""
from __future__ import annotations

import numpy as np
import torch

from ..imaging import ImageBuffer


class IdentityCodec:
    """Pixel-space latents: encode/decode are array/clip conversions only."""

    def encode(self, image: ImageBuffer) -> torch.Tensor:
        arr = np.transpose(image.data, (2, 0, 1)).copy()
        return torch.from_numpy(arr)

    def decode(self, latent: torch.Tensor) -> ImageBuffer:
        arr = latent.detach().cpu().numpy()
        arr = np.clip(np.transpose(arr, (1, 2, 0)), 0.0, 1.0)
        return ImageBuffer(arr.astype(np.float32))
