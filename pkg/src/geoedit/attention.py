"""Attention processors for region-controlled editing.

All operators work on single-head token matrices of shape (n, d). Region
masks arrive as per-grid {0,1} vectors produced by `imaging.downsample_mask`.
Key exclusion is additive: excluded logits get -1e9 before the softmax, which
reproduces single-key behavior exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .imaging import MaskBuffer, downsample_mask

NEG_LOGIT = -1.0e9


class MissingKVError(KeyError):
    """A routed attention layer asked for source keys that were never recorded."""


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits + torch.where(key_mask.bool(), 0.0, NEG_LOGIT)
    weights = torch.softmax(logits, dim=-1)
    if torch.isnan(weights).any():
        raise ValueError("attention weights are NaN")
    return weights @ v


def plain_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Unrestricted single-head scaled dot-product attention over (..., n, d)."""
    return _attend(q, k, v, None)


def masked_self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Attention restricted to the admitted keys.

    A full mask equals plain attention bit-for-bit; an empty mask falls back
    to unmasked attention (the degenerate-mask convention).
    """
    if key_mask.shape[0] != k.shape[0]:
        raise ValueError(f"key mask length {key_mask.shape[0]} != key count {k.shape[0]}")
    if not key_mask.any() or key_mask.all():
        return _attend(q, k, v, None)
    return _attend(q, k, v, key_mask)


def masked_mutual_attention(
    q: torch.Tensor,
    k_src: torch.Tensor,
    v_src: torch.Tensor,
    src_mask: torch.Tensor,
    query_mask: torch.Tensor,
) -> torch.Tensor:
    """Queries read source keys/values split by region.

    Rows flagged by `query_mask` attend to the source foreground, the rest to
    the source background; the two branch outputs are recomposed per row.
    """
    fg = masked_self_attention(q, k_src, v_src, src_mask)
    bg = masked_self_attention(q, k_src, v_src, 1 - src_mask)
    sel = query_mask.bool()[:, None]
    return torch.where(sel, fg, bg)


def linear_blend_weight(tau: float, tau0: float, tau1: float) -> float:
    """(tau1 - tau) / (tau1 - tau0), clamped to [0, 1]."""
    if tau1 <= tau0:
        raise ValueError("tau1 must exceed tau0")
    return min(1.0, max(0.0, (tau1 - tau) / (tau1 - tau0)))


@dataclass(frozen=True)
class BlendSchedule:
    """Timestep-dependent weight for mixing region-routed and plain attention.

    linear: weight 1 at/before start_step, falling to 0 at end_step.
    hard_switch: weight 1 up to switch_step, 0 after.
    """

    kind: str = "linear"
    start_step: int = 1
    end_step: int = 50
    switch_step: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("linear", "hard_switch"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 1 <= self.start_step < self.end_step:
            raise ValueError("need 1 <= start_step < end_step")
        if self.kind == "hard_switch":
            if self.switch_step is None or not 1 <= self.switch_step <= self.end_step:
                raise ValueError("hard_switch needs switch_step within [1, end_step]")

    def weight(self, tau: int) -> float:
        if self.kind == "hard_switch":
            return 1.0 if tau <= self.switch_step else 0.0
        return linear_blend_weight(tau, self.start_step, self.end_step)


def refine_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    k_src: torch.Tensor,
    v_src: torch.Tensor,
    src_mask: torch.Tensor,
    target_mask: torch.Tensor,
    tau: int,
    schedule: BlendSchedule,
) -> torch.Tensor:
    """Blend of mutual (source-routed) attention and the current stream's own attention.

    At weight 0 this is exactly plain attention over (k, v); at weight 1 it is
    exactly the mutual composition against the source cache.
    """
    alpha = schedule.weight(tau)
    if alpha == 0.0:
        return _attend(q, k, v, None)
    mutual = masked_mutual_attention(q, k_src, v_src, src_mask, target_mask)
    if alpha == 1.0:
        return mutual
    plain = _attend(q, k, v, None)
    return (1.0 - alpha) * plain + alpha * mutual


def inpaint_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    k_src: torch.Tensor,
    v_src: torch.Tensor,
    src_mask: torch.Tensor,
    tau: int,
    schedule: BlendSchedule,
    restrict_all_queries: bool = True,
) -> torch.Tensor:
    """Background-only source attention blended with the current stream.

    Every query (or, with restrict_all_queries=False, only queries inside the
    source region) reads the source background keys, so the vacated region is
    reconstructed from its surroundings.
    """
    alpha = schedule.weight(tau)
    if alpha == 0.0:
        return _attend(q, k, v, None)
    background = masked_self_attention(q, k_src, v_src, 1 - src_mask)
    if not restrict_all_queries:
        plain_rows = _attend(q, k, v, None)
        background = torch.where(src_mask.bool()[:, None], background, plain_rows)
    if alpha == 1.0:
        return background
    plain = _attend(q, k, v, None)
    return (1.0 - alpha) * plain + alpha * background


def shared_kv_attention(
    q: torch.Tensor,
    k_src: torch.Tensor,
    v_src: torch.Tensor,
    k_tgt: torch.Tensor,
    v_tgt: torch.Tensor,
    src_key_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Attention over concatenated source+target keys/values.

    With `src_key_mask` the shared source keys are restricted to that region
    while the target's own keys stay fully admissible.
    """
    k = torch.cat([k_src, k_tgt], dim=0)
    v = torch.cat([v_src, v_tgt], dim=0)
    if src_key_mask is None:
        return _attend(q, k, v, None)
    if src_key_mask.shape[0] != k_src.shape[0]:
        raise ValueError("source key mask length mismatch")
    full = torch.cat([src_key_mask, torch.ones(k_tgt.shape[0], dtype=src_key_mask.dtype)], dim=0)
    return masked_self_attention(q, k, v, full)


def localized_cross_attention(
    q: torch.Tensor,
    k_cond: torch.Tensor,
    v_cond: torch.Tensor,
    k_null: torch.Tensor,
    v_null: torch.Tensor,
    region: torch.Tensor,
) -> torch.Tensor:
    """Prompt-conditional cross-attention inside `region`, null-text outside."""
    if region.shape[0] != q.shape[0]:
        raise ValueError("region length must match query count")
    null_out = _attend(q, k_null, v_null, None)
    if not region.any():
        return null_out
    cond_out = _attend(q, k_cond, v_cond, None)
    if region.all():
        return cond_out
    return torch.where(region.bool()[:, None], cond_out, null_out)


# ---------------------------------------------------------------------------
# routing context
# ---------------------------------------------------------------------------


class KVCache:
    """(sampler step, layer id) -> recorded source (K, V) token matrices."""

    def __init__(self):
        self._store = {}

    def put(self, tau: int, layer_id: str, k: torch.Tensor, v: torch.Tensor) -> None:
        self._store[(tau, layer_id)] = (k.detach().clone(), v.detach().clone())

    def get(self, tau: int, layer_id: str):
        try:
            return self._store[(tau, layer_id)]
        except KeyError:
            raise MissingKVError(f"no source KV recorded for step {tau}, layer {layer_id!r}")

    def has(self, tau: int, layer_id: str) -> bool:
        return (tau, layer_id) in self._store

    def __len__(self) -> int:
        return len(self._store)

    def keys(self):
        return self._store.keys()

    def save(self, path) -> None:
        arrays = {}
        for (tau, layer_id), (k, v) in self._store.items():
            arrays[f"k.{tau}.{layer_id}"] = k.numpy()
            arrays[f"v.{tau}.{layer_id}"] = v.numpy()
        np.savez(path, **arrays)

    @staticmethod
    def load(path) -> "KVCache":
        cache = KVCache()
        with np.load(path) as zf:
            kv = {}
            for name in zf.files:
                kind, tau, layer_id = name.split(".", 2)
                kv.setdefault((int(tau), layer_id), {})[kind] = torch.from_numpy(zf[name].copy())
            for key, parts in kv.items():
                cache._store[key] = (parts["k"], parts["v"])
        return cache


@dataclass
class GridMasks:
    """Region masks downsampled to one attention token grid, flattened row-major."""

    src: Optional[torch.Tensor] = None
    target_full: Optional[torch.Tensor] = None
    cg_region: Optional[torch.Tensor] = None


def masks_for_grids(
    grids,
    src: Optional[MaskBuffer] = None,
    target_full: Optional[MaskBuffer] = None,
    cg_region: Optional[MaskBuffer] = None,
) -> dict:
    """Downsample pixel masks onto each attention grid."""

    def flat(mask: Optional[MaskBuffer], grid: int):
        if mask is None:
            return None
        small = downsample_mask(mask, grid, grid)
        return torch.from_numpy(small.data.reshape(-1).copy()).to(torch.uint8)

    return {
        g: GridMasks(src=flat(src, g), target_full=flat(target_full, g), cg_region=flat(cg_region, g))
        for g in grids
    }


MODES = ("plain", "record", "inpaint", "refine", "mutual_only", "shared_kv", "shared_kv_fg")


@dataclass
class AttentionContext:
    """Per-run routing state consulted by every attention layer.

    A context instance belongs to one sampling run at a time; the sampler owns
    `current_tau` and `cross_localized` while the run advances.
    """

    mode: str = "plain"
    schedule: Optional[BlendSchedule] = None
    masks: dict = field(default_factory=dict)
    kv: Optional[KVCache] = None
    hooked_layers: Optional[frozenset] = None  # None routes every self-attention layer
    null_tokens: Optional[torch.Tensor] = None
    step2_restrict_all: bool = True
    current_tau: int = 1
    cross_localized: bool = False
    cg_parts: Optional[list] = None  # [(per-grid masks, cond tokens)] for multi-object prompts

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")

    def _routed(self, layer_id: str) -> bool:
        if self.mode in ("plain", "record"):
            return False
        return self.hooked_layers is None or layer_id in self.hooked_layers

    def _grid_masks(self, grid: int) -> GridMasks:
        try:
            return self.masks[grid]
        except KeyError:
            raise KeyError(f"no masks prepared for attention grid {grid}")

    def process_self(self, layer_id: str, grid: int, q, k, v) -> torch.Tensor:
        if self.mode == "record":
            if self.kv is None:
                raise MissingKVError("recording context has no cache attached")
            self.kv.put(self.current_tau, layer_id, k, v)
            return _attend(q, k, v, None)
        if not self._routed(layer_id):
            return _attend(q, k, v, None)
        if self.kv is None:
            raise MissingKVError(f"mode {self.mode!r} needs a recorded KV cache")
        k_src, v_src = self.kv.get(self.current_tau, layer_id)
        gm = self._grid_masks(grid)
        if self.mode == "inpaint":
            return inpaint_attention(
                q, k, v, k_src, v_src, gm.src, self.current_tau, self.schedule,
                restrict_all_queries=self.step2_restrict_all,
            )
        if self.mode == "refine":
            return refine_attention(
                q, k, v, k_src, v_src, gm.src, gm.target_full, self.current_tau, self.schedule
            )
        if self.mode == "mutual_only":
            return masked_mutual_attention(q, k_src, v_src, gm.src, gm.target_full)
        if self.mode == "shared_kv":
            return shared_kv_attention(q, k_src, v_src, k, v)
        if self.mode == "shared_kv_fg":
            return shared_kv_attention(q, k_src, v_src, k, v, src_key_mask=gm.src)
        raise RuntimeError(f"unhandled mode {self.mode!r}")

    def process_cross(self, layer_id: str, grid: int, q, k_cond, v_cond, project) -> torch.Tensor:
        if self.cross_localized and self.cg_parts:
            return self._multi_region_cross(grid, q, project)
        region = None
        if self.cross_localized and self.masks:
            region = self._grid_masks(grid).cg_region
        if region is None or self.null_tokens is None:
            return _attend(q, k_cond, v_cond, None)
        k_null, v_null = project(self.null_tokens)
        return localized_cross_attention(q, k_cond, v_cond, k_null, v_null, region)

    def _multi_region_cross(self, grid: int, q, project) -> torch.Tensor:
        """Per-part conditional rows; later parts win where regions overlap."""
        if self.null_tokens is None:
            raise ValueError("multi-region cross-attention needs null tokens")
        k_null, v_null = project(self.null_tokens)
        out = _attend(q, k_null, v_null, None)
        for part_masks, tokens in self.cg_parts:
            region = part_masks[grid].cg_region
            if region is None or not region.any():
                continue
            k_c, v_c = project(tokens)
            cond_out = _attend(q, k_c, v_c, None)
            out = torch.where(region.bool()[:, None], cond_out, out)
        return out
