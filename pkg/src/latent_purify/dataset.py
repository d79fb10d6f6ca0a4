"""Procedural 16x16 shape dataset.

The label is a global factor (which silhouette is drawn); pose and a
low-pass texture are nuisance factors that never change the label.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import archive
from .rng import stream

WIDTH = HEIGHT = 16
MAX_OFFSET = 2
MAX_NOISE = 0.15
BACKGROUND = 0.1
FOREGROUND = 0.75
_SUPERSAMPLE = 4

LPDS_MAGIC = b"LPDS"
LPDS_VERSION = 1


@dataclass(frozen=True)
class SampleSpec:
    class_id: int
    rotation: int  # quarter turns, 0..3
    offset: tuple[int, int]  # (dy, dx), each in [-2, 2]
    texture_seed: int
    noise_amplitude: float


def _template(class_id: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Boolean silhouette of a class at the canonical pose; coordinates are centred."""
    r = np.hypot(yy, xx)
    kind = class_id % 8
    size = 1.0 + 0.12 * (class_id // 8)
    yy, xx, r = yy / size, xx / size, r / size
    if kind == 0:  # disk
        return r <= 3.2
    if kind == 1:  # T
        return ((yy >= -4.5) & (yy <= -2.0) & (np.abs(xx) <= 4.5)) | ((np.abs(xx) <= 1.25) & (yy >= -4.5) & (yy <= 4.5))
    if kind == 2:  # ring
        return (r <= 5.2) & (r >= 3.0)
    if kind == 3:  # L, filled heavy
        return ((xx >= -4.5) & (xx <= -1.0) & (np.abs(yy) <= 4.5)) | ((yy >= 1.0) & (yy <= 4.5) & (np.abs(xx) <= 4.5))
    if kind == 4:  # hollow square
        m = np.maximum(np.abs(yy), np.abs(xx))
        return (m <= 4.5) & (m >= 3.0)
    if kind == 5:  # horizontal bar
        return (np.abs(yy) <= 1.5) & (np.abs(xx) <= 5.5)
    if kind == 6:  # triangle
        return (yy <= 4.0) & (np.abs(xx) <= (yy + 5.0) * 0.55)
    # plus
    return ((np.abs(yy) <= 1.25) & (np.abs(xx) <= 5.0)) | ((np.abs(xx) <= 1.25) & (np.abs(yy) <= 5.0))


def _silhouette(class_id: int, rotation: int, offset: tuple[int, int]) -> np.ndarray:
    s = _SUPERSAMPLE
    coords = (np.arange(WIDTH * s) + 0.5) / s - WIDTH / 2
    yy, xx = np.meshgrid(coords - offset[0], coords - offset[1], indexing="ij")
    for _ in range(rotation):
        yy, xx = -xx, yy
    mask = _template(class_id, yy, xx).astype(np.float64)
    return mask.reshape(HEIGHT, s, WIDTH, s).mean(axis=(1, 3))


def render(spec: SampleSpec) -> np.ndarray:
    """Deterministic 16x16 float32 image for ``spec``."""
    mask = _silhouette(spec.class_id, spec.rotation, spec.offset)
    tex_rng = np.random.Generator(np.random.Philox(key=spec.texture_seed))
    noise = tex_rng.uniform(-1.0, 1.0, size=(HEIGHT, WIDTH))
    texture = uniform_filter(noise, size=3, mode="reflect") * 3.0
    img = BACKGROUND + FOREGROUND * mask + spec.noise_amplitude * np.clip(texture, -1.0, 1.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_spec(seed: int, index: int, classes: int) -> SampleSpec:
    rng = stream(seed, "dataset-sample", index)
    rotation = int(rng.integers(0, 4))
    dy, dx = (int(v) for v in rng.integers(-MAX_OFFSET, MAX_OFFSET + 1, size=2))
    texture_seed = int(rng.integers(0, 1 << 63, dtype=np.int64))
    amplitude = float(rng.uniform(0.0, MAX_NOISE))
    return SampleSpec(index % classes, rotation, (dy, dx), texture_seed, amplitude)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (n, 16, 16) float32
    labels: np.ndarray  # (n,) uint16
    classes: int
    seed: int
    split: str = "all"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    @property
    def per_class(self) -> int:
        return int(np.bincount(self.labels, minlength=self.classes).min()) if len(self) else 0

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.seed, split or self.split)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.seed == other.seed
            and self.split == other.split
            and np.array_equal(self.labels, other.labels)
            and self.images.tobytes() == other.images.tobytes()
        )


def generate(seed: int, classes: int = 4, per_class: int = 1250) -> Dataset:
    """Render ``per_class`` samples of each of ``classes`` shape templates.

    Sample ``i`` has class ``i % classes`` and is fully determined by the
    stream ``(seed, "dataset-sample", i)``.
    """
    if not 2 <= classes <= 16:
        raise ValueError(f"classes must be in [2, 16], got {classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    n = classes * per_class
    images = np.empty((n, HEIGHT, WIDTH), dtype=np.float32)
    for i in range(n):
        images[i] = render(sample_spec(seed, i, classes))
    labels = (np.arange(n) % classes).astype(np.uint16)
    return Dataset(images, labels, classes, seed, "all")


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split, deterministic in ``seed``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or (fractions < 0).any() or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    seed = ds.seed if seed is None else seed
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[stream(seed, "dataset-split", c).permutation(len(idx))]
        cuts = np.round(np.cumsum(fractions)[:2] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    names = ("train", "val", "test")
    out = []
    for name, chunks in zip(names, parts):
        idx = np.sort(np.concatenate(chunks))
        out.append(ds.subset(idx, name))
    return tuple(out)


def generate_splits(seed: int, classes: int = 4, sizes=(4000, 500, 500)) -> tuple[Dataset, Dataset, Dataset]:
    total = int(np.sum(sizes))
    if total % classes:
        raise ValueError(f"total size {total} is not divisible by {classes} classes")
    return split(generate(seed, classes, total // classes), np.asarray(sizes) / total, seed)


# ---------------------------------------------------------------------------
# LPDS archives


def dumps(ds: Dataset, meta: dict | None = None) -> bytes:
    manifest = {
        "classes": ds.classes,
        "per_class": ds.per_class,
        "count": len(ds),
        "width": WIDTH,
        "height": HEIGHT,
        "seed": ds.seed,
        "split": ds.split,
    }
    if meta:
        manifest["meta"] = meta
    payload = ds.labels.astype("<u2").tobytes() + ds.images.astype("<f4").tobytes()
    return archive.pack(LPDS_MAGIC, LPDS_VERSION, manifest, payload)


def _payload_size(m: dict) -> int:
    return int(m["count"]) * (2 + 4 * int(m["width"]) * int(m["height"]))


def loads(blob: bytes) -> Dataset:
    m, payload = archive.unpack(blob, LPDS_MAGIC, LPDS_VERSION, _payload_size)
    n, h, w = int(m["count"]), int(m["height"]), int(m["width"])
    labels = np.frombuffer(payload, dtype="<u2", count=n).astype(np.uint16)
    images = np.frombuffer(payload, dtype="<f4", count=n * h * w, offset=2 * n).reshape(n, h, w).astype(np.float32)
    return Dataset(images, labels, int(m["classes"]), int(m["seed"]), str(m["split"]))


def save(ds: Dataset, path: str | Path, meta: dict | None = None) -> bytes:
    blob = dumps(ds, meta)
    archive.write_bytes(path, blob)
    return blob


def load(path: str | Path) -> Dataset:
    return loads(Path(path).read_bytes())


def stratified_slice(ds: Dataset, n: int, seed: int, label: str = "eval-slice") -> Dataset:
    """``n`` samples spread uniformly over classes (deterministic)."""
    chosen = []
    counts = [n // ds.classes + (1 if c < n % ds.classes else 0) for c in range(ds.classes)]
    for c, k in enumerate(counts):
        idx = np.flatnonzero(ds.labels == c)
        perm = stream(seed, label, c).permutation(len(idx))
        chosen.append(idx[perm[:k]])
    return ds.subset(np.sort(np.concatenate(chosen)))
