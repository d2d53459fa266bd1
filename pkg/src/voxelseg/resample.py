"""Volumes, trilinear resampling, and probability thresholding.

A volume stores dims as (W, H, Z) and voxels as a (Z, H, W) float32 array so
the linear index is (z*H + y)*W + x.  All continuous sampling uses mirror
reflection at the boundary: coordinate -d maps to +d, the edge sample is not
repeated.
"""

from __future__ import annotations

import numpy as np


class Volume:
    """3D scalar image with intensities in [0, 1]."""

    kind = "image"
    _lo, _hi = 0.0, 1.0

    def __init__(self, dims, voxels: np.ndarray):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive extents (W,H,Z), got {dims}")
        w, h, z = dims
        voxels = np.asarray(voxels, dtype=np.float32)
        if voxels.shape != (z, h, w):
            raise ValueError(f"voxel array shape {voxels.shape} does not match dims {dims} (want (Z,H,W))")
        if not np.all(np.isfinite(voxels)):
            raise ValueError("voxels contain non-finite values")
        vmin, vmax = float(voxels.min()), float(voxels.max())
        if vmin < self._lo or vmax > self._hi:
            raise ValueError(f"{self.kind} values must lie in [{self._lo}, {self._hi}], got [{vmin}, {vmax}]")
        self._check_values(voxels)
        self.dims = dims
        self.voxels = voxels

    def _check_values(self, voxels):
        pass

    @classmethod
    def from_voxels(cls, voxels: np.ndarray):
        z, h, w = voxels.shape
        return cls((w, h, z), voxels)

    @property
    def voxel_count(self) -> int:
        w, h, z = self.dims
        return w * h * z

    def copy(self):
        return type(self)(self.dims, self.voxels.copy())

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims})"


class MaskVolume(Volume):
    """3D annotation; crisp masks hold {0, 1}, soft targets anything in [0, 1]."""

    kind = "mask"

    def is_crisp(self) -> bool:
        return bool(np.all((self.voxels == 0.0) | (self.voxels == 1.0)))


def require_crisp(mask: MaskVolume, what: str = "mask") -> None:
    if not isinstance(mask, MaskVolume) or not mask.is_crisp():
        raise ValueError(f"{what} must be a crisp 0/1 mask")


def mirror_coords(c: np.ndarray, extent: int) -> np.ndarray:
    """Fold continuous coordinates into [0, extent-1] by mirror reflection."""
    if extent == 1:
        return np.zeros_like(c)
    period = 2.0 * (extent - 1)
    c = np.mod(c, period)
    return np.where(c > extent - 1, period - c, c)


def mirror_index(idx: np.ndarray, extent: int) -> np.ndarray:
    """Integer-index variant of mirror_coords."""
    if extent == 1:
        return np.zeros_like(idx)
    period = 2 * (extent - 1)
    idx = np.mod(idx, period)
    return np.where(idx > extent - 1, period - idx, idx)


def sample_trilinear(voxels: np.ndarray, zc, yc, xc) -> np.ndarray:
    """Trilinear sample of a (Z,H,W) array at continuous coordinates.

    Coordinates may lie anywhere; they are mirror-reflected into range.
    Returns float64 values of the coordinate arrays' shape.
    """
    nz, ny, nx = voxels.shape
    z = mirror_coords(np.asarray(zc, dtype=np.float64), nz)
    y = mirror_coords(np.asarray(yc, dtype=np.float64), ny)
    x = mirror_coords(np.asarray(xc, dtype=np.float64), nx)
    z0 = np.floor(z).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fz, fy, fx = z - z0, y - y0, x - x0
    z1 = np.minimum(z0 + 1, nz - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    v = voxels.astype(np.float64, copy=False)
    out = ((v[z0, y0, x0] * (1 - fy) + v[z0, y1, x0] * fy) * (1 - fx)
           + (v[z0, y0, x1] * (1 - fy) + v[z0, y1, x1] * fy) * fx) * (1 - fz) \
        + ((v[z1, y0, x0] * (1 - fy) + v[z1, y1, x0] * fy) * (1 - fx)
           + (v[z1, y0, x1] * (1 - fy) + v[z1, y1, x1] * fy) * fx) * fz
    return out


def sample_nearest(voxels: np.ndarray, zc, yc, xc) -> np.ndarray:
    """Nearest-neighbor sample with the same mirror convention (half rounds up)."""
    nz, ny, nx = voxels.shape
    z = np.floor(mirror_coords(np.asarray(zc, dtype=np.float64), nz) + 0.5).astype(np.int64)
    y = np.floor(mirror_coords(np.asarray(yc, dtype=np.float64), ny) + 0.5).astype(np.int64)
    x = np.floor(mirror_coords(np.asarray(xc, dtype=np.float64), nx) + 0.5).astype(np.int64)
    return voxels[z, y, x]


def _source_axis(out_extent: int, src_extent: int) -> np.ndarray:
    # align-corners-false: output voxel centers mapped into source coordinates
    return (np.arange(out_extent, dtype=np.float64) + 0.5) * (src_extent / out_extent) - 0.5


def resample_trilinear(v: Volume, target_dims) -> Volume:
    """Resample onto target_dims (W,H,Z); identity when dims already match."""
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three positive extents, got {target_dims}")
    sw, sh, sz = v.dims
    tw, th, tz = target_dims
    zs = _source_axis(tz, sz)
    ys = _source_axis(th, sh)[:, None]
    xs = _source_axis(tw, sw)[None, :]
    out = np.empty((tz, th, tw), dtype=np.float32)
    vmin = float(v.voxels.min())
    vmax = float(v.voxels.max())
    src = v.voxels.astype(np.float64)
    for k in range(tz):
        # one z-slab at a time keeps peak memory flat at large target dims
        plane = sample_trilinear(src, zs[k], ys, xs)
        out[k] = np.clip(plane, vmin, vmax)
    return type(v)(target_dims, out)


def threshold(p: Volume, t: float = 0.5) -> MaskVolume:
    """Binarize at t; voxels >= t map to 1."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {t}")
    return MaskVolume(p.dims, (p.voxels >= t).astype(np.float32))
