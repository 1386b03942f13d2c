"""Benchmark construction and batch evaluation.

Builds manifest files over procedurally generated source directories, samples
difficulty-banded instructions with in-bounds guarantees, and runs the full
edit pipeline per instruction with per-sample and corpus metrics.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry, imaging, metrics
from .backbone.data import gen_shapes_dataset
from .geometry import CameraIntrinsics, DepthMap
from .imaging import ImageBuffer, MaskBuffer, mask_area_fraction
from .instructions import DIFFICULTIES, MOVE_DIRECTIONS, EditInstruction, magnitude_band
from .pipeline import EditRequest, Editor
from .sampler import SamplerConfig

TINY_MASK_FRACTION = 0.001
MAX_MASKS_PER_IMAGE = 50
DEFAULT_OPS = ("move", "resize", "rotate2d", "rotate3d")


def filter_masks(masks: list, height: int, width: int) -> list:
    """Drop tiny masks; reject the whole image (empty result) when too many remain."""
    kept = [m for m in masks if mask_area_fraction(m) >= TINY_MASK_FRACTION]
    if len(kept) > MAX_MASKS_PER_IMAGE:
        return []
    return kept


def _sample_direction(rng: np.random.Generator, op: str) -> str:
    choices = {
        "move": tuple(MOVE_DIRECTIONS),
        "resize": ("enlarge", "shrink"),
        "rotate2d": ("cw", "ccw"),
        "rotate3d": ("x", "y", "z"),
    }[op]
    return choices[rng.integers(len(choices))]


def _instruction_in_bounds(
    instr: EditInstruction,
    mask: MaskBuffer,
    depth: Optional[DepthMap],
    intrinsics: Optional[CameraIntrinsics],
) -> bool:
    h, w = mask.height, mask.width
    if instr.is_3d():
        if depth is None:
            return False
        intr = intrinsics or CameraIntrinsics.default_for(h, w)
        points, _ = geometry.lift_points(mask, depth, intr)
        rotated = geometry.rotate_points(points, instr.to_rotation())
        return geometry.points_in_bounds(rotated, intr, h, w)
    affine = instr.to_affine(h, w)
    mat = geometry.affine_matrix(affine, pivot=geometry.mask_centroid(mask))
    return geometry.mask_in_bounds(mask, mat)


def gen_instructions(
    image: ImageBuffer,
    mask: MaskBuffer,
    seed: int,
    per_op_counts: Optional[dict] = None,
    depth: Optional[DepthMap] = None,
    intrinsics: Optional[CameraIntrinsics] = None,
    max_retries: int = 20,
) -> list:
    """Sample one in-bounds instruction per (op, difficulty) cell by default.

    Out-of-bounds draws are resampled up to `max_retries`, then the cell is
    skipped. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    counts = dict.fromkeys(DEFAULT_OPS, 1)
    if per_op_counts:
        counts.update(per_op_counts)
    out = []
    for op in DEFAULT_OPS:
        if counts.get(op, 0) <= 0:
            continue
        if op == "rotate3d" and depth is None:
            continue
        for difficulty in DIFFICULTIES:
            for _ in range(counts[op]):
                for _attempt in range(max_retries):
                    direction = _sample_direction(rng, op)
                    lo, hi = magnitude_band(op, direction, difficulty)
                    magnitude = float(rng.uniform(lo, hi))
                    instr = EditInstruction(op, direction, magnitude, difficulty)
                    if _instruction_in_bounds(instr, mask, depth, intrinsics):
                        out.append(instr)
                        break
    return out


# ---------------------------------------------------------------------------
# source directories and manifests
# ---------------------------------------------------------------------------


def build_source_dir(n: int, seed: int, out_dir, resolution: int = 64, with_depth: bool = True) -> dict:
    """Write a procedural source-image directory (images, masks, optional depth)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    if with_depth:
        (out / "depth").mkdir(exist_ok=True)
    records = []
    for i, sample in enumerate(gen_shapes_dataset(n, seed, resolution)):
        name = f"{i:04d}.png"
        imaging.save_png(sample.image, out / "images" / name)
        imaging.save_png(sample.mask, out / "masks" / name)
        rec = {
            "image": f"images/{name}",
            "mask": f"masks/{name}",
            "caption": sample.caption,
            "label": " ".join(sample.caption.split()[1:3]),
        }
        if with_depth:
            depth = geometry.synthetic_depth("constant", resolution, resolution, value=2.0)
            scale = geometry.save_depth_png(depth, out / "depth" / name)
            rec["depth"] = f"depth/{name}"
            rec["depth_scale"] = scale
        records.append(rec)
    index = {"resolution": resolution, "seed": seed, "records": records}
    (out / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


@dataclass
class BenchRecord:
    image: str
    mask: str
    label: str = ""
    caption: str = ""
    instructions: list = field(default_factory=list)
    depth: Optional[str] = None
    depth_scale: Optional[float] = None
    completion_masks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "image": self.image,
            "mask": self.mask,
            "label": self.label,
            "caption": self.caption,
            "instructions": [i.to_dict() for i in self.instructions],
        }
        if self.depth is not None:
            d["depth"] = self.depth
            d["depth_scale"] = self.depth_scale
        if self.completion_masks:
            d["completion_masks"] = self.completion_masks
        return d

    @staticmethod
    def from_dict(d: dict) -> "BenchRecord":
        return BenchRecord(
            image=d["image"],
            mask=d["mask"],
            label=d.get("label", ""),
            caption=d.get("caption", ""),
            instructions=[EditInstruction.from_dict(x) for x in d.get("instructions", [])],
            depth=d.get("depth"),
            depth_scale=d.get("depth_scale"),
            completion_masks=d.get("completion_masks", {}),
        )


@dataclass
class BenchManifest:
    records: list
    seed: int
    counts: dict = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "seed": self.seed,
            "counts": self.counts,
            "records": [r.to_dict() for r in self.records],
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "BenchManifest":
        d = json.loads(Path(path).read_text())
        return BenchManifest(
            records=[BenchRecord.from_dict(r) for r in d["records"]],
            seed=d["seed"],
            counts=d.get("counts", {}),
        )

    def validate_files(self, root) -> None:
        root = Path(root)
        for rec in self.records:
            for rel in filter(None, [rec.image, rec.mask, rec.depth, *rec.completion_masks.values()]):
                if not (root / rel).exists():
                    raise FileNotFoundError(f"manifest references missing file {rel!r}")


def build_manifest(src_dir, seed: int, per_op_counts: Optional[dict] = None) -> BenchManifest:
    """Generate instructions for every usable record of a source directory."""
    src = Path(src_dir)
    index = json.loads((src / "dataset.json").read_text())
    records = []
    counts = dict.fromkeys(DIFFICULTIES, 0)
    for i, rec in enumerate(index["records"]):
        mask = imaging.load_mask_png(src / rec["mask"])
        kept = filter_masks([mask], mask.height, mask.width)
        if not kept:
            continue
        depth = None
        if rec.get("depth"):
            depth = geometry.load_depth_png(src / rec["depth"], rec["depth_scale"])
        image = imaging.load_png(src / rec["image"])
        instructions = gen_instructions(image, mask, seed=seed + i, per_op_counts=per_op_counts, depth=depth)
        if not instructions:
            continue
        for instr in instructions:
            counts[instr.difficulty] += 1
        records.append(
            BenchRecord(
                image=rec["image"],
                mask=rec["mask"],
                label=rec.get("label", ""),
                caption=rec.get("caption", ""),
                instructions=instructions,
                depth=rec.get("depth"),
                depth_scale=rec.get("depth_scale"),
            )
        )
    return BenchManifest(records=records, seed=seed, counts=counts)


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------


def _sample_key(record: BenchRecord, idx: int, instr: EditInstruction, config: SamplerConfig, embedder_name: str) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({
        "image": record.image,
        "instr": instr.to_dict(),
        "idx": idx,
        "steps": config.steps,
        "scale": config.guidance_scale,
        "seed": config.seed,
        "embedder": embedder_name,
    }, sort_keys=True).encode("utf-8"))
    return h.hexdigest()[:20]


def _point_transform_3d(depth: DepthMap, intr: CameraIntrinsics, rotation, pivot_points: np.ndarray):
    pivot = pivot_points.mean(axis=0)

    def apply(pts: np.ndarray) -> np.ndarray:
        xs = np.clip(np.rint(pts[:, 0]).astype(int), 0, depth.width - 1)
        ys = np.clip(np.rint(pts[:, 1]).astype(int), 0, depth.height - 1)
        d = depth.data[ys, xs]
        px = (pts[:, 0] - intr.c_x) / intr.f * d
        py = (pts[:, 1] - intr.c_y) / intr.f * d
        points = np.stack([px, py, d], axis=1)
        from .geometry import Rotation3DParams

        rot = Rotation3DParams(axis=rotation.axis, angle=rotation.angle, pivot=tuple(pivot))
        moved = geometry.rotate_points(points, rot)
        z = moved[:, 2]
        return np.stack([intr.f * moved[:, 0] / z + intr.c_x, intr.f * moved[:, 1] / z + intr.c_y], axis=1)

    return apply


def evaluate_sample(
    editor: Editor,
    root: Path,
    record: BenchRecord,
    idx: int,
    instr: EditInstruction,
    config: SamplerConfig,
    embedder,
    md_provider_name: str = "ncc",
) -> dict:
    """Run one edit and compute its per-sample metrics plus embeddings."""
    image = imaging.load_png(root / record.image)
    mask = imaging.load_mask_png(root / record.mask)
    depth = None
    if instr.is_3d():
        depth = geometry.load_depth_png(root / record.depth, record.depth_scale)
    completion = None
    if instr.completion_mask_ref and instr.completion_mask_ref in record.completion_masks:
        completion = imaging.load_mask_png(root / record.completion_masks[instr.completion_mask_ref])
    request = EditRequest(
        image=image,
        source_mask=mask,
        instruction=instr,
        depth=depth,
        completion_mask=completion,
        prompt=record.label or None,
        config=config,
    )
    result = editor.edit(request)

    provider = metrics.oracle_provider if md_provider_name == "oracle" else metrics.ncc_provider()
    intr = CameraIntrinsics.default_for(image.height, image.width)
    if instr.is_3d():
        points, _ = geometry.lift_points(mask, depth, intr)
        transform = _point_transform_3d(depth, intr, instr.to_rotation(), points)
        we = metrics.masked_l1(result.refined, result.coarse, result.target_mask)
        we_base = metrics.masked_l1(result.source, result.coarse, result.target_mask)
    else:
        mat = geometry.affine_matrix(
            instr.to_affine(image.height, image.width), pivot=geometry.mask_centroid(mask)
        )
        transform = metrics.affine_point_transform(mat)
        we = metrics.warp_error(result.refined, image, mat, result.target_mask)
        we_base = metrics.warp_error(result.source, image, mat, result.target_mask)
    md = metrics.mean_distance(image, result.refined, mask, transform, provider)
    subc = metrics.subject_consistency(image, result.refined, mask, result.target_mask, embedder)
    bc = metrics.background_consistency(image, result.refined, mask, result.target_mask, embedder)
    return {
        "record": record.image,
        "instruction": idx,
        "op": instr.op,
        "direction": instr.direction,
        "magnitude": instr.magnitude,
        "difficulty": instr.difficulty,
        "warp_error": we,
        "warp_error_baseline": we_base,
        "mean_distance": md,
        "subject_consistency": subc,
        "background_consistency": bc,
        "embedding": [float(v) for v in embedder(result.refined)],
        "source_embedding": [float(v) for v in embedder(image)],
    }


def run_eval(
    manifest_path,
    editor: Editor,
    out_dir,
    config: Optional[SamplerConfig] = None,
    embedder=None,
    md_provider: str = "ncc",
    jobs: int = 1,
) -> metrics.MetricReport:
    """Evaluate every (record, instruction) pair; resumable and byte-stable.

    Per-sample rows cache as JSON under out_dir/cache; a rerun reuses them and
    rewrites byte-identical reports.
    """
    config = config or SamplerConfig()
    manifest = BenchManifest.load(manifest_path)
    root = Path(manifest_path).parent
    manifest.validate_files(root)
    out = Path(out_dir)
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    embedder = embedder or metrics.RandomProjectionEmbedder()

    tasks = []
    for record in manifest.records:
        for idx, instr in enumerate(record.instructions):
            key = _sample_key(record, idx, instr, config, embedder.name)
            tasks.append((key, record, idx, instr))

    def compute(task) -> tuple:
        key, record, idx, instr = task
        path = cache / f"{key}.json"
        if path.exists():
            return key, json.loads(path.read_text())
        row = evaluate_sample(editor, root, record, idx, instr, config, embedder, md_provider)
        path.write_text(json.dumps(row, sort_keys=True) + "\n")
        return key, row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(compute, tasks))
    else:
        results = [compute(t) for t in tasks]

    rows = [row for _key, row in results]
    rows.sort(key=lambda r: (r["record"], r["instruction"]))
    edited_vecs = np.array([r.pop("embedding") for r in rows])
    source_vecs = np.array([r.pop("source_embedding") for r in rows])
    corpus = {}
    if len(rows) >= 2:
        corpus["frechet_distance"] = metrics.frechet_distance(edited_vecs, source_vecs)
        corpus["kernel_distance"] = metrics.kernel_distance(edited_vecs, source_vecs)
    report = metrics.MetricReport(
        per_sample=rows,
        corpus=corpus,
        config={
            "steps": config.steps,
            "guidance_scale": config.guidance_scale,
            "seed": config.seed,
            "embedder": embedder.name,
            "md_provider": md_provider,
        },
    )
    report.write_csv(out / "per_sample.csv")
    report.write_summary(out / "summary.json")
    return report
