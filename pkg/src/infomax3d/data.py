"""Volume files, manifests, synthetic data, augmentation and splits.

Volume file format (little-endian): magic ``IMV1`` (4 bytes), dtype tag u32
(0 = f32), dims 3 x u32, then D*H*W float32 voxels in row-major order.
Manifests are UTF-8 text: a ``path,label`` header line followed by
comma-separated rows; ``#`` lines are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

__all__ = [
    "VolumeRecord",
    "Manifest",
    "SplitPlan",
    "AugmentationConfig",
    "VolumeFormatError",
    "write_volume",
    "read_volume",
    "write_manifest",
    "read_manifest",
    "generate_synthetic",
    "augment",
    "stratified_split",
    "batch_iter",
    "load_batch",
]

_MAGIC = b"IMV1"
_DTYPE_F32 = 0


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeRecord:
    path: str
    label: int
    dims: tuple[int, int, int]
    values: np.ndarray  # float32, shape dims

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != tuple(self.dims):
            raise VolumeFormatError(f"dims {self.dims} do not match data shape {self.values.shape}")


@dataclass
class Manifest:
    records: list[tuple[str, int]]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        paths = [p for p, _ in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        if not self.class_names:
            k = max((lbl for _, lbl in self.records), default=-1) + 1
            self.class_names = [f"class{i}" for i in range(k)]
        for _, lbl in self.records:
            if not 0 <= lbl < len(self.class_names):
                raise ValueError(f"label {lbl} outside [0, {len(self.class_names)})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([lbl for _, lbl in self.records], dtype=np.int64)


def write_volume(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise VolumeFormatError(f"volumes are 3-d, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise VolumeFormatError("refusing to write non-finite voxels")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _DTYPE_F32))
        fh.write(struct.pack("<3I", *values.shape))
        fh.write(values.astype("<f4", copy=False).tobytes())


def read_volume(path, label: int = -1) -> VolumeRecord:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise VolumeFormatError(f"bad magic {magic!r} in {path}")
        header = fh.read(16)
        if len(header) < 16:
            raise VolumeFormatError(f"truncated header in {path}")
        tag, d, h, w = struct.unpack("<4I", header)
        if tag != _DTYPE_F32:
            raise VolumeFormatError(f"unknown dtype tag {tag} in {path}")
        count = d * h * w
        if count > 2**32:
            raise VolumeFormatError(f"dim overflow in {path}")
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise VolumeFormatError(f"truncated data in {path}")
        values = np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return VolumeRecord(path=str(path), label=label, dims=(d, h, w), values=values)


def write_manifest(path, manifest: Manifest) -> None:
    lines = ["# class_names: " + ",".join(manifest.class_names), "path,label"]
    lines += [f"{p},{lbl}" for p, lbl in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    class_names: list[str] = []
    records: list[tuple[str, int]] = []
    seen_header = False
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("class_names:"):
                class_names = line.split(":", 1)[1].strip().split(",")
            continue
        if not seen_header:
            if line != "path,label":
                raise ValueError(f"manifest must start with a 'path,label' header, got {line!r}")
            seen_header = True
            continue
        p, lbl = line.rsplit(",", 1)
        records.append((p, int(lbl)))
    return Manifest(records=records, class_names=class_names)


# ---------------------------------------------------------------------------
# synthetic data

_NOISE_SIGMA = 0.2


def _octant_center(label: int, side: int) -> tuple[float, float, float]:
    # classes sit at distinct octant centers: bits of the label pick the
    # near/far quarter point on the first two axes, parity picks the third
    q, q3 = side / 4.0, 3.0 * side / 4.0
    return (
        q3 if label & 1 else q,
        q3 if label & 2 else q,
        q3 if (label & 1) ^ ((label & 2) >> 1) else q,
    )


def generate_synthetic(
    n_per_class, side: int, seed: int, out_dir=None, noise_sigma: float = _NOISE_SIGMA
) -> tuple[Manifest, list[VolumeRecord]]:
    """Four-class dataset of Gaussian blobs (sigma = side/8, amplitude 1)
    at class-specific octant centers plus iid noise. Deterministic per seed.

    When ``out_dir`` is given the volumes are written there and the manifest
    uses paths relative to it.
    """
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    counts = list(n_per_class)
    if len(counts) != 4:
        raise ValueError(f"n_per_class must list 4 class counts, got {counts}")
    rng = np.random.default_rng(seed)
    grid = np.arange(side, dtype=np.float32)
    zz, yy, xx = np.meshgrid(grid, grid, grid, indexing="ij")
    sigma = side / 8.0
    records: list[VolumeRecord] = []
    entries: list[tuple[str, int]] = []
    for label, count in enumerate(counts):
        cz, cy, cx = _octant_center(label, side)
        blob = np.exp(-((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        for i in range(count):
            vol = blob + noise_sigma * rng.standard_normal((side, side, side)).astype(np.float32)
            name = f"c{label}_{i:04d}.vol"
            rec = VolumeRecord(path=name, label=label, dims=(side, side, side), values=vol.astype(np.float32))
            records.append(rec)
            entries.append((name, label))
    manifest = Manifest(records=entries)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rec in records:
            write_volume(out_dir / rec.path, rec.values)
        write_manifest(out_dir / "manifest.csv", manifest)
    return manifest, records


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    target_side: int = 128
    flip_prob: float = 0.5
    enabled: bool = True


def _bounding_box(values: np.ndarray) -> list[tuple[int, int]] | None:
    nz = np.nonzero(values)
    if nz[0].size == 0:
        return None
    return [(int(ix.min()), int(ix.max())) for ix in nz]


def augment(values: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> Tensor:
    """Pad/crop to ``target_side`` cubes, then (when enabled) flip each axis
    with probability ``flip_prob``.

    Short axes are zero-padded centered. Long axes are cropped with an
    offset constrained so the crop window contains the whole nonzero
    bounding box (random offset when enabled, the most-centered valid
    offset otherwise); an axis whose content exceeds the window is an error.
    """
    target = config.target_side
    bbox = _bounding_box(values)
    out = values
    for axis in range(3):
        dim = out.shape[axis]
        if dim < target:
            before = (target - dim) // 2
            width = [(0, 0)] * 3
            width[axis] = (before, target - dim - before)
            out = np.pad(out, width)
        elif dim > target:
            if bbox is None:
                lo_min, lo_max = 0, dim - target
            else:
                lo, hi = bbox[axis]
                if hi - lo + 1 > target:
                    raise ValueError(
                        f"nonzero content spans {hi - lo + 1} voxels on axis {axis}, "
                        f"larger than target {target}"
                    )
                lo_min = max(0, hi + 1 - target)
                lo_max = min(dim - target, lo)
            if config.enabled:
                off = int(rng.integers(lo_min, lo_max + 1))
            else:
                off = min(max((dim - target) // 2, lo_min), lo_max)
            out = np.take(out, np.arange(off, off + target), axis=axis)
    if config.enabled:
        for axis in range(3):
            if rng.random() < config.flip_prob:
                out = np.flip(out, axis=axis)
    return Tensor(np.ascontiguousarray(out, dtype=np.float32)[None, ...])


# ---------------------------------------------------------------------------
# stratified splitting


@dataclass
class SplitPlan:
    holdout_fraction: float
    n_folds: int
    seed: int
    assignment: dict[str, str]  # record path -> "holdout" or "fold<k>"

    def paths(self, group: str) -> list[str]:
        return [p for p, g in self.assignment.items() if g == group]

    def holdout_indices(self, manifest: Manifest) -> list[int]:
        return [i for i, (p, _) in enumerate(manifest.records) if self.assignment[p] == "holdout"]

    def fold_indices(self, manifest: Manifest, fold: int) -> list[int]:
        tag = f"fold{fold}"
        return [i for i, (p, _) in enumerate(manifest.records) if self.assignment[p] == tag]

    def cv_indices(self, manifest: Manifest) -> list[int]:
        return [i for i, (p, _) in enumerate(manifest.records) if self.assignment[p] != "holdout"]


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(
    manifest: Manifest, holdout_fraction: float = 0.07, n_folds: int = 5, seed: int = 0
) -> SplitPlan:
    """Per-class seeded shuffle; the first round(fraction * count) records go
    to the holdout, the rest are dealt round-robin into ``n_folds`` folds."""
    by_class: dict[int, list[str]] = {}
    for path, label in manifest.records:
        by_class.setdefault(label, []).append(path)
    assignment: dict[str, str] = {}
    for label in sorted(by_class):
        # sort first so the split depends only on (contents, seed), not on
        # the manifest row order
        paths = sorted(by_class[label])
        rng = np.random.default_rng(np.random.SeedSequence((seed, label)))
        order = rng.permutation(len(paths))
        shuffled = [paths[i] for i in order]
        n_hold = _round_half_up(holdout_fraction * len(paths))
        if len(paths) - n_hold < n_folds:
            raise ValueError(
                f"class {label} has {len(paths) - n_hold} non-holdout samples, "
                f"needs at least {n_folds}"
            )
        for p in shuffled[:n_hold]:
            assignment[p] = "holdout"
        for j, p in enumerate(shuffled[n_hold:]):
            assignment[p] = f"fold{j % n_folds}"
    return SplitPlan(holdout_fraction, n_folds, seed, assignment)


# ---------------------------------------------------------------------------
# batching


def batch_iter(indices, batch_size: int, drop_last: bool, seed: int, epoch: int):
    """Seeded per-epoch shuffle (seed XOR epoch) yielding lists of indices;
    drop_last keeps exactly floor(n / batch_size) full batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    indices = list(indices)
    rng = np.random.default_rng(seed ^ epoch)
    order = rng.permutation(len(indices))
    shuffled = [indices[i] for i in order]
    n_full = len(shuffled) // batch_size
    batches = [shuffled[i * batch_size : (i + 1) * batch_size] for i in range(n_full)]
    if not drop_last and n_full * batch_size < len(shuffled):
        batches.append(shuffled[n_full * batch_size :])
    return batches


def load_batch(volumes, labels, idx, config: AugmentationConfig, rng: np.random.Generator):
    """Stack augmented volumes into a (B, 1, S, S, S) batch tensor."""
    parts = [augment(volumes[i], config, rng).data for i in idx]
    batch = Tensor(np.stack(parts, axis=0))
    return batch, np.asarray([labels[i] for i in idx], dtype=np.int64)
