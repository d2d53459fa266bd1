"""Bit-exact volume persistence, dataset manifests, and synthetic phantoms.

On disk a volume is a `<name>.json` header plus a `<name>.raw` little-endian
payload in (z*H + y)*W + x order.  Manifests are JSON lines, one dataset entry
per line, with paths resolved relative to the manifest file.  Phantoms are
layered-intensity volumes with dark ellipsoidal pockets standing in for the
structures of interest; the pocket union is the ground-truth mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .resample import MaskVolume, Volume

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_KINDS = ("image", "mask", "prob")


def _base_path(path) -> str:
    path = os.fspath(path)
    for ext in (".json", ".raw"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def write_volume(path, v: Volume, kind: str | None = None) -> None:
    """Write `<path>.json` + `<path>.raw`; masks go out as u8 when crisp."""
    base = _base_path(path)
    if kind is None:
        kind = "mask" if isinstance(v, MaskVolume) else "image"
    if kind not in _KINDS:
        raise ValueError(f"unknown volume kind {kind!r}")
    if kind == "mask" and isinstance(v, MaskVolume) and v.is_crisp():
        dtype_tag, payload = "u8", v.voxels.astype("u1")
    else:
        dtype_tag, payload = "f32", v.voxels.astype("<f4")
    header = {"dims": list(v.dims), "dtype": dtype_tag, "kind": kind}
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
    with open(base + ".raw", "wb") as f:
        f.write(payload.tobytes())


def _read_header(base: str) -> tuple[tuple[int, int, int], str, str]:
    header_path = base + ".json"
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing volume header {header_path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed volume header {header_path}: {e}") from None
    if not isinstance(header, dict) or set(header) != {"dims", "dtype", "kind"}:
        raise ValueError(f"volume header {header_path} must have exactly dims/dtype/kind")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(d, int) or d < 1 for d in dims)):
        raise ValueError(f"volume header {header_path} has bad dims {dims!r}")
    if header["dtype"] not in _DTYPES:
        raise ValueError(f"volume header {header_path} has unknown dtype {header['dtype']!r}")
    if header["kind"] not in _KINDS:
        raise ValueError(f"volume header {header_path} has unknown kind {header['kind']!r}")
    return tuple(dims), header["dtype"], header["kind"]


def expected_payload_bytes(dims, dtype_tag: str) -> int:
    w, h, z = dims
    return w * h * z * _DTYPES[dtype_tag].itemsize


def read_volume(path) -> Volume:
    base = _base_path(path)
    dims, dtype_tag, kind = _read_header(base)
    raw_path = base + ".raw"
    try:
        with open(raw_path, "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing volume payload {raw_path}") from None
    expected = expected_payload_bytes(dims, dtype_tag)
    if len(payload) != expected:
        raise ValueError(f"payload length mismatch in {raw_path}: expected {expected} bytes, got {len(payload)}")
    w, h, z = dims
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype_tag]).reshape(z, h, w)
    if dtype_tag == "u8":
        bad = (arr > 1).nonzero()
        if bad[0].size:
            zi, yi, xi = (int(a[0]) for a in bad)
            raise ValueError(f"u8 mask {raw_path} holds value {int(arr[zi, yi, xi])} at voxel "
                             f"(x={xi}, y={yi}, z={zi}); only 0 and 1 are allowed")
        arr = arr.astype(np.float32)
    else:
        arr = arr.astype(np.float32)
    cls = MaskVolume if kind == "mask" else Volume
    return cls(dims, arr)


def validate_volume_files(base: str) -> tuple[tuple[int, int, int], str, str]:
    """Header parse plus payload size check without reading the payload."""
    base = _base_path(base)
    dims, dtype_tag, kind = _read_header(base)
    raw_path = base + ".raw"
    if not os.path.exists(raw_path):
        raise FileNotFoundError(f"missing volume payload {raw_path}")
    expected = expected_payload_bytes(dims, dtype_tag)
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise ValueError(f"payload length mismatch in {raw_path}: expected {expected} bytes, got {actual}")
    return dims, dtype_tag, kind


SPLITS = ("train", "validation", "test")


@dataclass
class ManifestEntry:
    image_path: str
    annotation_paths: list[str]
    split: str
    author_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.author_tags:
            self.author_tags = [f"A{i + 1}" for i in range(len(self.annotation_paths))]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    Every entry needs image_path, annotation_paths (>= 1) and a known split;
    paths are resolved relative to the manifest directory; an image may appear
    in only one entry (no split leakage).
    """
    path = os.fspath(path)
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            for key in ("image_path", "annotation_paths", "split"):
                if key not in row:
                    raise ValueError(f"{path}:{lineno}: missing key {key!r}")
            if row["split"] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {row['split']!r} (want one of {SPLITS})")
            annotations = row["annotation_paths"]
            if not isinstance(annotations, list) or not annotations:
                raise ValueError(f"{path}:{lineno}: annotation_paths must be a non-empty list")
            image = os.path.normpath(os.path.join(root, row["image_path"]))
            if image in seen:
                raise ValueError(f"{path}:{lineno}: image {row['image_path']!r} already listed on line {seen[image]}")
            seen[image] = lineno
            tags = row.get("author_tags") or []
            if tags and len(tags) != len(annotations):
                raise ValueError(f"{path}:{lineno}: author_tags count {len(tags)} != annotations count {len(annotations)}")
            entry = ManifestEntry(image, [os.path.normpath(os.path.join(root, a)) for a in annotations],
                                  row["split"], list(tags))
            if check_files:
                for base in (entry.image_path, *entry.annotation_paths):
                    try:
                        validate_volume_files(base)
                    except (OSError, ValueError) as e:
                        raise type(e)(f"{path}:{lineno}: {e}") from None
            entries.append(entry)
    return DatasetManifest(entries)


def write_manifest(path, rows: list[dict]) -> None:
    """Write JSON-lines rows (paths should already be manifest-relative)."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class PhantomSpec:
    seed: int
    dims: tuple[int, int, int] = (32, 32, 17)
    layer_count: int = 5
    pocket_count: tuple[int, int] = (2, 5)
    pocket_radius: tuple[float, float] = (2.5, 5.0)
    noise_sigma: float = 0.02

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 4:
            raise ValueError(f"phantom dims too small: {self.dims}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        lo, hi = self.pocket_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad pocket_count range {self.pocket_count}")
        rlo, rhi = self.pocket_radius
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad pocket_radius range {self.pocket_radius}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, MaskVolume]:
    """Deterministic layered phantom with dark pockets.

    Bands of distinct intensity stack along y; pockets are ellipsoids confined
    to the central half of the height, darker than every band.
    """
    rng = np.random.default_rng(spec.seed)
    w, h, z = spec.dims

    # bands: random cut points along y, distinct permuted intensity levels
    cuts = np.sort(rng.uniform(0.1, 0.9, size=spec.layer_count - 1)) * h if spec.layer_count > 1 else np.array([])
    band_of_y = np.searchsorted(cuts, np.arange(h) + 0.5)
    levels = rng.permutation(np.linspace(0.35, 0.85, spec.layer_count))
    image = np.broadcast_to(levels[band_of_y][None, :, None], (z, h, w)).astype(np.float64).copy()

    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(h), np.arange(w), indexing="ij")
    mask = np.zeros((z, h, w), dtype=bool)
    count = int(rng.integers(spec.pocket_count[0], spec.pocket_count[1] + 1))
    y_lo, y_hi = 0.25 * h, 0.75 * h
    for _ in range(count):
        r = rng.uniform(*spec.pocket_radius)
        rx = r * rng.uniform(0.7, 1.3)
        ry = r * rng.uniform(0.7, 1.3)
        rz = r * rng.uniform(0.7, 1.3)
        # confined to the central band region in y, fully inside in x/z
        rx = min(rx, (w - 2) / 2)
        rz = min(rz, (max(z - 2, 1)) / 2)
        ry = min(ry, (y_hi - y_lo) / 2)
        cx = rng.uniform(rx + 1, w - 1 - rx)
        cy = rng.uniform(y_lo + ry, y_hi - ry)
        cz = rng.uniform(rz + 1, z - 1 - rz) if z - 2 > 2 * rz else (z - 1) / 2
        inside = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2) <= 1.0
        image[inside] = rng.uniform(0.05, 0.15)
        mask |= inside
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return (Volume(spec.dims, image.astype(np.float32)),
            MaskVolume(spec.dims, mask.astype(np.float32)))


def export_slice_pgm(v: Volume, z: int, path) -> None:
    """Write slice z as a binary 8-bit PGM (values round(v*255))."""
    w, h, depth = v.dims
    if not 0 <= z < depth:
        raise ValueError(f"slice index {z} out of range for Z={depth}")
    data = np.rint(v.voxels[z] * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
