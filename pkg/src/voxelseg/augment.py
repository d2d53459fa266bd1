"""3D training-set augmentation: scale-up, crop, elastic deformation.

One of the three transforms (or no transform) is drawn uniformly per output
item.  All continuous resampling mirrors at the volume boundary.  Dataset
builds derive one rng per output item from (master_seed, source_index, item),
so results do not depend on build order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .metrics import average_annotations
from .resample import MaskVolume, Volume, mirror_index, resample_trilinear, sample_nearest, sample_trilinear, threshold
from .volume_io import DatasetManifest, read_volume, write_manifest, write_volume

AUGMENT_KINDS = ("scale_up", "crop", "elastic", "none")
SCALE_RANGE = (1.0, 4.0)
DEFAULT_VOXEL_BUDGET = 2 ** 27


class VoxelBudgetError(ValueError):
    """Raised when a transform would materialize more voxels than allowed."""


@dataclass
class ElasticParams:
    sigma: float = 10.0
    points: int = 6

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.points < 2:
            raise ValueError(f"points must be >= 2, got {self.points}")


@dataclass
class AugmentationSpec:
    kind: str
    scale_factor: float | None = None
    crop_origin: tuple[int, int, int] | None = None
    crop_size: tuple[int, int, int] | None = None
    elastic_seed: int | None = None
    elastic: ElasticParams | None = None

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "scale_up" and self.scale_factor is None:
            raise ValueError("scale_up spec needs scale_factor")
        if self.kind == "crop" and (self.crop_origin is None or self.crop_size is None):
            raise ValueError("crop spec needs crop_origin and crop_size")
        if self.kind == "elastic" and self.elastic_seed is None:
            raise ValueError("elastic spec needs elastic_seed")

    def to_json_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "scale_up":
            out["scale_factor"] = self.scale_factor
        elif self.kind == "crop":
            out["crop_origin"] = list(self.crop_origin)
            out["crop_size"] = list(self.crop_size)
        elif self.kind == "elastic":
            out["elastic_seed"] = self.elastic_seed
            params = self.elastic or ElasticParams()
            out["sigma"] = params.sigma
            out["points"] = params.points
        return out

    @classmethod
    def from_json_dict(cls, row: dict) -> "AugmentationSpec":
        kind = row.get("kind")
        if kind == "scale_up":
            return cls(kind, scale_factor=row["scale_factor"])
        if kind == "crop":
            return cls(kind, crop_origin=tuple(row["crop_origin"]), crop_size=tuple(row["crop_size"]))
        if kind == "elastic":
            return cls(kind, elastic_seed=row["elastic_seed"],
                       elastic=ElasticParams(row.get("sigma", 10.0), row.get("points", 6)))
        return cls("none")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _crop_extent(size_x: int, src_x: int, src_other: int) -> int:
    # y/z crop extents follow x so aspect stays within one voxel of the source
    exact = size_x * src_other / src_x
    lo = -(-src_other // 4)
    return min(max(_round_half_up(exact), lo), src_other)


def sample_spec(rng, source_dims, elastic_params: ElasticParams | None = None,
                kinds=AUGMENT_KINDS) -> AugmentationSpec:
    """Draw one augmentation uniformly over `kinds` with in-bounds parameters."""
    w, h, z = (int(d) for d in source_dims)
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "scale_up":
        return AugmentationSpec("scale_up", scale_factor=float(rng.uniform(*SCALE_RANGE)))
    if kind == "crop":
        size_x = int(rng.integers(-(-w // 4), w + 1))
        size = (size_x, _crop_extent(size_x, w, h), _crop_extent(size_x, w, z))
        origin = tuple(int(rng.integers(0, src - s + 1)) for src, s in zip((w, h, z), size))
        return AugmentationSpec("crop", crop_origin=origin, crop_size=size)
    if kind == "elastic":
        return AugmentationSpec("elastic", elastic_seed=int(rng.integers(0, 2 ** 31)),
                                elastic=elastic_params or ElasticParams())
    return AugmentationSpec("none")


def apply_scale_up(image: Volume, mask: MaskVolume, factor: float,
                   voxel_budget: int | None = None) -> tuple[Volume, MaskVolume]:
    """Resample both volumes onto a grid of round(factor * extent) per axis;
    the mask goes through trilinear interpolation and a 0.5 threshold."""
    if not SCALE_RANGE[0] <= factor <= SCALE_RANGE[1]:
        raise ValueError(f"scale factor must lie in {list(SCALE_RANGE)}, got {factor}")
    if image.dims != mask.dims:
        raise ValueError(f"image dims {image.dims} != mask dims {mask.dims}")
    target = tuple(_round_half_up(factor * e) for e in image.dims)
    voxels = target[0] * target[1] * target[2]
    if voxel_budget is not None and voxels > voxel_budget:
        raise VoxelBudgetError(f"scale {factor:.3f} would produce {voxels} voxels (budget {voxel_budget})")
    return resample_trilinear(image, target), threshold(resample_trilinear(mask, target), 0.5)


def apply_crop(image: Volume, mask: MaskVolume, origin, size) -> tuple[Volume, MaskVolume]:
    """Extract the box at origin/size; out-of-bounds coordinates reflect."""
    if image.dims != mask.dims:
        raise ValueError(f"image dims {image.dims} != mask dims {mask.dims}")
    origin = tuple(int(v) for v in origin)
    size = tuple(int(v) for v in size)
    if min(size) < 1:
        raise ValueError(f"degenerate crop size {size}")
    w, h, z = image.dims
    xi = mirror_index(origin[0] + np.arange(size[0]), w)
    yi = mirror_index(origin[1] + np.arange(size[1]), h)
    zi = mirror_index(origin[2] + np.arange(size[2]), z)
    sel = np.ix_(zi, yi, xi)
    return (Volume(size, image.voxels[sel].copy()),
            MaskVolume(size, mask.voxels[sel].copy()))


def elastic_deform(image: Volume, mask: MaskVolume, params: ElasticParams,
                   seed: int) -> tuple[Volume, MaskVolume]:
    """Displace by a dense field interpolated from a points^3 grid of
    Normal(0, sigma^2) vectors; image trilinear, mask nearest, same field."""
    if image.dims != mask.dims:
        raise ValueError(f"image dims {image.dims} != mask dims {mask.dims}")
    rng = np.random.default_rng(seed)
    p = params.points
    # component order (dz, dy, dx) in voxels
    disp = rng.normal(0.0, params.sigma, size=(3, p, p, p))
    w, h, z = image.dims

    def grid_axis(n: int) -> np.ndarray:
        if n == 1:
            return np.zeros(1)
        return np.arange(n, dtype=np.float64) * ((p - 1) / (n - 1))

    gz = grid_axis(z)[:, None, None]
    gy = grid_axis(h)[None, :, None]
    gx = grid_axis(w)[None, None, :]
    zc = np.arange(z, dtype=np.float64)[:, None, None] + sample_trilinear(disp[0], gz, gy, gx)
    yc = np.arange(h, dtype=np.float64)[None, :, None] + sample_trilinear(disp[1], gz, gy, gx)
    xc = np.arange(w, dtype=np.float64)[None, None, :] + sample_trilinear(disp[2], gz, gy, gx)
    warped = sample_trilinear(image.voxels.astype(np.float64), zc, yc, xc)
    np.clip(warped, float(image.voxels.min()), float(image.voxels.max()), out=warped)
    return (Volume(image.dims, warped.astype(np.float32)),
            MaskVolume(image.dims, sample_nearest(mask.voxels, zc, yc, xc)))


def apply_spec(image: Volume, mask: MaskVolume, spec: AugmentationSpec,
               voxel_budget: int | None = None) -> tuple[Volume, MaskVolume]:
    if spec.kind == "scale_up":
        return apply_scale_up(image, mask, spec.scale_factor, voxel_budget)
    if spec.kind == "crop":
        return apply_crop(image, mask, spec.crop_origin, spec.crop_size)
    if spec.kind == "elastic":
        return elastic_deform(image, mask, spec.elastic or ElasticParams(), spec.elastic_seed)
    return image.copy(), mask.copy()


def item_rng(master_seed: int, source_index: int, item: int):
    return np.random.default_rng(np.random.SeedSequence((master_seed, source_index, item)))


def build_augmented_dataset(manifest: DatasetManifest, multiplicity: int, master_seed: int,
                            out_dir, network_dims, elastic_params: ElasticParams | None = None,
                            kinds=AUGMENT_KINDS, voxel_budget: int = DEFAULT_VOXEL_BUDGET) -> str:
    """Emit `multiplicity` augmented pairs per train entry, resampled to
    network_dims, plus pass-through validation/test entries.

    Returns the path of the written manifest.  Every output pair records its
    source, spec, and seed; rebuilding with the same arguments is
    byte-identical.
    """
    if multiplicity < 1:
        raise ValueError(f"multiplicity must be >= 1, got {multiplicity}")
    network_dims = tuple(int(d) for d in network_dims)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for source_index, entry in enumerate(manifest.split("train")):
        image = read_volume(entry.image_path)
        target = average_annotations([read_volume(p) for p in entry.annotation_paths])
        crisp = threshold(target, 0.5)
        stem = os.path.basename(entry.image_path)
        for k in range(multiplicity):
            rng = item_rng(master_seed, source_index, k)
            for _ in range(100):
                spec = sample_spec(rng, image.dims, elastic_params, kinds)
                try:
                    aug_image, aug_mask = apply_spec(image, crisp, spec, voxel_budget)
                except VoxelBudgetError:
                    continue
                break
            else:
                raise RuntimeError(f"could not draw a within-budget augmentation for {entry.image_path}")
            net_image = resample_trilinear(aug_image, network_dims)
            net_target = resample_trilinear(aug_mask, network_dims)
            image_name = f"{stem}_k{k:03d}_img"
            target_name = f"{stem}_k{k:03d}_tgt"
            write_volume(os.path.join(out_dir, image_name), net_image)
            write_volume(os.path.join(out_dir, target_name), net_target)
            rows.append({
                "image_path": image_name,
                "annotation_paths": [target_name],
                "split": "train",
                "author_tags": ["aug"],
                "source_image": os.path.relpath(entry.image_path, out_dir),
                "augmentation": spec.to_json_dict(),
                "item_seed": [master_seed, source_index, k],
            })
    for split in ("validation", "test"):
        for entry in manifest.split(split):
            rows.append({
                "image_path": os.path.relpath(entry.image_path, out_dir),
                "annotation_paths": [os.path.relpath(p, out_dir) for p in entry.annotation_paths],
                "split": split,
                "author_tags": entry.author_tags,
            })
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, rows)
    return manifest_path
