"""Three-step geometric edit orchestration.

Step 1 transforms the object, step 2 inpaints the vacated source region,
step 3 refines the blended composite. Steps 2 and 3 share one recorded
inversion of the source image.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry, imaging
from .attention import AttentionContext, BlendSchedule, KVCache, masks_for_grids
from .backbone.checkpoint import weights_fingerprint
from .backbone.codec import IdentityCodec
from .backbone.schedule import NoiseSchedule
from .backbone.unet import Denoiser
from .geometry import AffineParams, CameraIntrinsics, DepthMap, Rotation3DParams
from .imaging import ImageBuffer, MaskBuffer
from .instructions import EditInstruction
from .sampler import SampleCache, SamplerConfig, ddim_invert, denoise

INPAINT_DILATION_REFERENCE = 30 / 512  # stated at 512x512; scaled by min(h, w)
BOUNDARY_RADIUS_REFERENCE = 3 / 64  # step-3 general-refinement ring, stated at 64x64
DEFAULT_INPAINT_PROMPT = "empty scene"


def inpaint_dilation_radius(height: int, width: int) -> int:
    return max(1, round(INPAINT_DILATION_REFERENCE * min(height, width)))


def boundary_radius(height: int, width: int) -> int:
    return max(1, round(BOUNDARY_RADIUS_REFERENCE * min(height, width)))


@dataclass
class EditRequest:
    """One edit: source image/mask plus either an instruction or explicit params."""

    image: ImageBuffer
    source_mask: MaskBuffer
    instruction: Optional[EditInstruction] = None
    affine: Optional[AffineParams] = None
    rotation: Optional[Rotation3DParams] = None
    depth: Optional[DepthMap] = None
    intrinsics: Optional[CameraIntrinsics] = None
    completion_mask: Optional[MaskBuffer] = None
    prompt: Optional[str] = None
    inpaint_prompt: str = DEFAULT_INPAINT_PROMPT
    extra_perturb: Optional[MaskBuffer] = None
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.source_mask.is_empty():
            raise ValueError("source mask is empty")
        if (self.image.height, self.image.width) != (self.source_mask.height, self.source_mask.width):
            raise imaging.DimensionMismatch("image and source mask dimensions differ")
        if self.completion_mask is not None and (
            (self.completion_mask.height, self.completion_mask.width)
            != (self.image.height, self.image.width)
        ):
            raise imaging.DimensionMismatch("completion mask dimensions differ from image")
        specified = sum(x is not None for x in (self.instruction, self.affine, self.rotation))
        if specified != 1:
            raise ValueError("specify exactly one of instruction, affine, or rotation")

    def is_identity(self) -> bool:
        return self.affine is not None and self.affine.is_identity() and self.completion_mask is None


@dataclass
class EditResult:
    """All pipeline artifacts with provenance metadata."""

    source: ImageBuffer
    source_mask: MaskBuffer
    coarse: ImageBuffer
    target_mask: MaskBuffer
    background: ImageBuffer
    composite: ImageBuffer
    refined: ImageBuffer
    target_full_mask: MaskBuffer
    durations: dict = field(default_factory=dict)
    config_snapshot: dict = field(default_factory=dict)
    cache_keys: dict = field(default_factory=dict)

    _IMAGES = ("source", "coarse", "background", "composite", "refined")
    _MASKS = ("source_mask", "target_mask", "target_full_mask")

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in self._IMAGES + self._MASKS:
            imaging.save_png(getattr(self, name), out / f"{name}.png")
        manifest = {
            "durations": self.durations,
            "config": self.config_snapshot,
            "cache_keys": self.cache_keys,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(out_dir) -> "EditResult":
        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        kwargs = {name: imaging.load_png(out / f"{name}.png") for name in EditResult._IMAGES}
        kwargs.update({name: imaging.load_mask_png(out / f"{name}.png") for name in EditResult._MASKS})
        return EditResult(
            durations=manifest.get("durations", {}),
            config_snapshot=manifest.get("config", {}),
            cache_keys=manifest.get("cache_keys", {}),
            **kwargs,
        )


class Editor:
    """Owns the model, schedule, codec, and inversion cache for edit runs."""

    def __init__(
        self,
        model: Denoiser,
        schedule: NoiseSchedule,
        cache_dir=None,
        hooked_layers: Optional[list] = None,
        step2_restrict_all: bool = True,
    ):
        self.model = model
        self.schedule = schedule
        self.codec = IdentityCodec()
        self.cache = SampleCache(cache_dir) if cache_dir else None
        self.fingerprint = weights_fingerprint(model)
        if hooked_layers is None:
            hooked_layers = model.decoder_half_layer_ids("self")
        self.hooked_layers = frozenset(hooked_layers)
        self.step2_restrict_all = step2_restrict_all
        self._grids = sorted(set(model.config.attention_grids))

    # -- inversion ------------------------------------------------------

    def invert(
        self, image: ImageBuffer, config: SamplerConfig, record: bool, cond_text: str = ""
    ) -> tuple:
        """Invert under the given prompt (null by default); returns (trajectory, cache key)."""
        cond = self.model.embed_prompt(cond_text)
        key = None
        if self.cache is not None:
            key = SampleCache.trajectory_key(
                image, cond_text, config, self.schedule, self.fingerprint, record
            )
            cached = self.cache.load(key)
            if cached is not None:
                return cached, key
        traj = ddim_invert(
            image, cond, self.model, self.schedule, config,
            codec=self.codec, record=record, cond_text=cond_text,
        )
        if self.cache is not None:
            self.cache.save(key, traj)
        return traj, key

    # -- step 1 ----------------------------------------------------------

    def step1_transform(self, request: EditRequest) -> tuple:
        """Dispatch to the 2D or 3D object transform; returns (coarse, target mask)."""
        if request.instruction is not None:
            instr = request.instruction
            if instr.is_3d():
                depth = request.depth
                if depth is None:
                    raise ValueError("3D instruction requires a depth map")
                intr = request.intrinsics or CameraIntrinsics.default_for(
                    request.image.height, request.image.width
                )
                return geometry.transform_3d(
                    request.image, request.source_mask, depth, intr, instr.to_rotation()
                )
            affine = instr.to_affine(request.image.height, request.image.width)
            return geometry.transform_2d(request.image, request.source_mask, affine)
        if request.affine is not None:
            return geometry.transform_2d(request.image, request.source_mask, request.affine)
        depth = request.depth
        if depth is None:
            raise ValueError("3D edit requires a depth map")
        intr = request.intrinsics or CameraIntrinsics.default_for(request.image.height, request.image.width)
        return geometry.transform_3d(request.image, request.source_mask, depth, intr, request.rotation)

    # -- step 2 ----------------------------------------------------------

    def step2_inpaint(
        self,
        image: ImageBuffer,
        source_mask: MaskBuffer,
        prompt: str = DEFAULT_INPAINT_PROMPT,
        config: Optional[SamplerConfig] = None,
    ) -> tuple:
        """Regenerate the (dilated) source region from its background context.

        Returns (background image, inversion cache key).
        """
        if source_mask.is_empty():
            raise ValueError("source mask is empty")
        config = config or SamplerConfig()
        if source_mask.is_full():
            warnings.warn("source mask covers the whole frame; inpainting degenerates to regeneration")
        radius = inpaint_dilation_radius(image.height, image.width)
        region = imaging.dilate(source_mask, radius)
        traj, key = self.invert(image, config, record=True)
        blend_sched = BlendSchedule(
            kind="linear",
            start_step=config.scaled_blend_start(config.inpaint_blend_start),
            end_step=config.steps,
        )
        ctx = AttentionContext(
            mode="inpaint",
            schedule=blend_sched,
            masks=masks_for_grids(self._grids, src=region, cg_region=region),
            kv=traj.kv,
            hooked_layers=self.hooked_layers,
            null_tokens=self.model.null_embedding().tokens,
            step2_restrict_all=self.step2_restrict_all,
        )
        cond = self.model.embed_prompt(prompt)
        null = self.model.null_embedding()
        run = denoise(
            self.model, self.schedule, traj.start_latent(), cond, null, config,
            ctx=ctx, perturb_mask=region, guide_region=region, codec=self.codec,
            anchor=traj, edit_region=region,
        )
        return run.image, key

    # -- step 3 ----------------------------------------------------------

    def step3_refine(
        self,
        composite: ImageBuffer,
        source_image: ImageBuffer,
        source_mask: MaskBuffer,
        target_mask: MaskBuffer,
        completion_mask: Optional[MaskBuffer] = None,
        prompt: Optional[str] = None,
        config: Optional[SamplerConfig] = None,
        extra_perturb: Optional[MaskBuffer] = None,
        source_kv: Optional[KVCache] = None,
    ) -> tuple:
        """Refine the blended composite against the recorded source context.

        Returns (refined image, dict of cache keys).
        """
        config = config or SamplerConfig()
        keys = {}
        if source_kv is None:
            source_traj, src_key = self.invert(source_image, config, record=True)
            source_kv = source_traj.kv
            keys["source"] = src_key
        comp_traj, comp_key = self.invert(composite, config, record=False)
        keys["composite"] = comp_key

        has_completion = completion_mask is not None and not completion_mask.is_empty()
        if has_completion:
            target_full = imaging.mask_union(target_mask, completion_mask)
            blend_start = config.scaled_blend_start(config.refine_blend_start_completion)
            perturb = completion_mask
        else:
            target_full = target_mask
            blend_start = config.scaled_blend_start(config.refine_blend_start_general)
            perturb = imaging.boundary_mask(
                target_mask, boundary_radius(composite.height, composite.width)
            )
        if extra_perturb is not None:
            perturb = imaging.mask_union(perturb, extra_perturb)
        guide_region = completion_mask if has_completion else None

        blend_sched = BlendSchedule(kind="linear", start_step=blend_start, end_step=config.steps)
        ctx = AttentionContext(
            mode="refine",
            schedule=blend_sched,
            masks=masks_for_grids(
                self._grids, src=source_mask, target_full=target_full, cg_region=target_full
            ),
            kv=source_kv,
            hooked_layers=self.hooked_layers,
            null_tokens=self.model.null_embedding().tokens,
        )
        cond = self.model.embed_prompt(prompt or "")
        null = self.model.null_embedding()
        # change is licensed only where perturbation or guidance applies;
        # everything else tracks the composite's own trajectory
        editable = imaging.mask_union(perturb, guide_region) if guide_region else perturb
        run = denoise(
            self.model, self.schedule, comp_traj.start_latent(), cond, null, config,
            ctx=ctx, perturb_mask=perturb, guide_region=guide_region, codec=self.codec,
            anchor=comp_traj, edit_region=editable,
        )
        return run.image, keys

    # -- full pipeline -----------------------------------------------------

    def edit(self, request: EditRequest) -> EditResult:
        config = request.config
        durations: dict = {}
        cache_keys: dict = {}

        t0 = time.perf_counter()
        if request.is_identity():
            coarse, target = request.image, request.source_mask
            durations["step1"] = time.perf_counter() - t0
            t1 = time.perf_counter()
            refined = self.noop_replay(request.image, config)
            durations["replay"] = time.perf_counter() - t1
            background = composite = request.image
            target_full = target
        else:
            coarse, target = self.step1_transform(request)
            durations["step1"] = time.perf_counter() - t0

            t1 = time.perf_counter()
            background, inpaint_key = self.step2_inpaint(
                request.image, request.source_mask, request.inpaint_prompt, config
            )
            durations["step2"] = time.perf_counter() - t1
            cache_keys["inpaint"] = inpaint_key

            composite = imaging.blend(coarse, background, target)

            t2 = time.perf_counter()
            refined, refine_keys = self.step3_refine(
                composite,
                request.image,
                request.source_mask,
                target,
                completion_mask=request.completion_mask,
                prompt=request.prompt,
                config=config,
                extra_perturb=request.extra_perturb,
            )
            durations["step3"] = time.perf_counter() - t2
            cache_keys.update(refine_keys)
            target_full = (
                imaging.mask_union(target, request.completion_mask)
                if request.completion_mask is not None
                else target
            )

        snapshot = {
            "steps": config.steps,
            "guidance_scale": config.guidance_scale,
            "seed": config.seed,
            "inpaint_blend_start": config.inpaint_blend_start,
            "refine_blend_start_completion": config.refine_blend_start_completion,
            "refine_blend_start_general": config.refine_blend_start_general,
            "identity_replay": request.is_identity(),
            "prompt": request.prompt,
            "inpaint_prompt": request.inpaint_prompt,
        }
        if request.instruction is not None:
            snapshot["instruction"] = request.instruction.to_dict()
        return EditResult(
            source=request.image,
            source_mask=request.source_mask,
            coarse=coarse,
            target_mask=target,
            background=background,
            composite=composite,
            refined=refined,
            target_full_mask=target_full,
            durations=durations,
            config_snapshot=snapshot,
            cache_keys=cache_keys,
        )

    def noop_replay(self, image: ImageBuffer, config: Optional[SamplerConfig] = None) -> ImageBuffer:
        """Replay the recorded inversion endpoint; bit-equal to the decoded clean latent."""
        config = config or SamplerConfig()
        traj, _ = self.invert(image, config, record=False)
        return self.codec.decode(traj.final_latent())

    # -- extended applications ---------------------------------------------

    def appearance_transfer(
        self,
        image: ImageBuffer,
        target_mask: MaskBuffer,
        appearance_image: ImageBuffer,
        appearance_mask: MaskBuffer,
        label: Optional[str] = None,
        config: Optional[SamplerConfig] = None,
    ) -> ImageBuffer:
        """Rewrite the masked object's appearance from a donor image.

        The donor (appearance) image plays the source role in the refinement
        attention; the edited object region is perturbed so its texture can
        change while its shape stays put.
        """
        config = config or SamplerConfig()
        donor_traj, _ = self.invert(appearance_image, config, record=True)
        start_traj, _ = self.invert(image, config, record=False)
        blend_sched = BlendSchedule(
            kind="linear",
            start_step=config.scaled_blend_start(config.refine_blend_start_completion),
            end_step=config.steps,
        )
        ctx = AttentionContext(
            mode="refine",
            schedule=blend_sched,
            masks=masks_for_grids(
                self._grids, src=appearance_mask, target_full=target_mask, cg_region=target_mask
            ),
            kv=donor_traj.kv,
            hooked_layers=self.hooked_layers,
            null_tokens=self.model.null_embedding().tokens,
        )
        cond = self.model.embed_prompt(label or "")
        null = self.model.null_embedding()
        run = denoise(
            self.model, self.schedule, start_traj.start_latent(), cond, null, config,
            ctx=ctx, perturb_mask=target_mask,
            guide_region=target_mask if label else None, codec=self.codec,
            anchor=start_traj, edit_region=target_mask,
        )
        return run.image


@dataclass
class ComposePart:
    """One object to place on the shared canvas."""

    image: ImageBuffer
    source_mask: MaskBuffer
    target_mask: MaskBuffer
    label: Optional[str] = None
    completion_mask: Optional[MaskBuffer] = None


def _fit_affine(src_mask: MaskBuffer, dst_mask: MaskBuffer) -> AffineParams:
    """Axis-aligned bbox fit mapping the source object onto the target region."""
    sy, sx = np.nonzero(src_mask.data)
    dy, dx = np.nonzero(dst_mask.data)
    sw = max(sx.max() - sx.min(), 1)
    sh = max(sy.max() - sy.min(), 1)
    dw = max(dx.max() - dx.min(), 1)
    dh = max(dy.max() - dy.min(), 1)
    return AffineParams(
        s_x=dw / sw,
        s_y=dh / sh,
        t_x=float(dx.mean() - sx.mean()),
        t_y=float(dy.mean() - sy.mean()),
    )


def compose(
    editor: Editor,
    canvas: ImageBuffer,
    parts: list,
    removals: Optional[list] = None,
    config: Optional[SamplerConfig] = None,
) -> ImageBuffer:
    """Cross-image composition: optional removals, sequential paste, one refinement.

    Each part is warped from its own source mask onto its canvas target mask;
    per-part labels are applied through per-part cross-attention regions.
    """
    config = config or SamplerConfig()
    h, w = canvas.height, canvas.width
    if removals:
        union = removals[0]
        for m in removals[1:]:
            union = imaging.mask_union(union, m)
        canvas, _ = editor.step2_inpaint(canvas, union, config=config)

    pasted = canvas.data.copy()
    placed_masks = []
    for part in parts:
        if (part.image.height, part.image.width) != (h, w):
            raise imaging.DimensionMismatch("compose parts must match the canvas dimensions")
        affine = _fit_affine(part.source_mask, part.target_mask)
        mat = geometry.affine_matrix(affine, pivot=geometry.mask_centroid(part.source_mask))
        warped_img = geometry.warp_image(part.image, mat)
        warped_mask = geometry.warp_mask(part.source_mask, mat)
        placed = imaging.mask_union(warped_mask, part.target_mask)
        pasted = np.where(placed.data[:, :, None] == 1, warped_img.data, pasted)
        placed_masks.append(placed)
    pasted_img = ImageBuffer(pasted)

    target_union = placed_masks[0]
    for m in placed_masks[1:]:
        target_union = imaging.mask_union(target_union, m)
    draw_union = None
    for part in parts:
        if part.completion_mask is not None:
            draw_union = (
                part.completion_mask
                if draw_union is None
                else imaging.mask_union(draw_union, part.completion_mask)
            )

    # the pasted composite itself is the preservation source for refinement
    comp_traj, _ = editor.invert(pasted_img, config, record=True)
    target_full = (
        imaging.mask_union(target_union, draw_union) if draw_union is not None else target_union
    )
    perturb = imaging.boundary_mask(target_union, boundary_radius(h, w))
    if draw_union is not None:
        perturb = imaging.mask_union(perturb, draw_union)
    blend_start = config.scaled_blend_start(
        config.refine_blend_start_completion if draw_union is not None else config.refine_blend_start_general
    )
    ctx = AttentionContext(
        mode="refine",
        schedule=BlendSchedule(kind="linear", start_step=blend_start, end_step=config.steps),
        masks=masks_for_grids(
            editor._grids, src=target_union, target_full=target_full, cg_region=target_full
        ),
        kv=comp_traj.kv,
        hooked_layers=editor.hooked_layers,
        null_tokens=editor.model.null_embedding().tokens,
    )
    labelled = [p for p in parts if p.label]
    if labelled:
        cg_parts = []
        for part in labelled:
            part_full = (
                imaging.mask_union(part.target_mask, part.completion_mask)
                if part.completion_mask is not None
                else part.target_mask
            )
            cg_parts.append(
                (
                    masks_for_grids(editor._grids, cg_region=part_full),
                    editor.model.embed_prompt(part.label).tokens,
                )
            )
        ctx.cg_parts = cg_parts
    null = editor.model.null_embedding()
    editable = imaging.mask_union(perturb, draw_union) if draw_union is not None else perturb
    run = denoise(
        editor.model, editor.schedule, comp_traj.start_latent(), null, null, config,
        ctx=ctx, perturb_mask=perturb, guide_region=draw_union, codec=editor.codec,
        anchor=comp_traj, edit_region=editable,
    )
    return run.image
