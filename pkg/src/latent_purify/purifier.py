"""Latent-space purification: preprocess, encode, resample, interpolate, decode."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .attacks import Target
from .classifier import Classifier, argmax_lowest
from .layers import IMAGE_SHAPE, as_batch, to_images
from .mlvgm import LatentStack, Mlvgm
from .ndgrad import Tensor


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# alpha schedules

SCHEDULE_KINDS = ("linear", "cosine", "uniform", "one-minus-linear", "one-minus-cosine", "learned", "custom")


@dataclass(frozen=True, eq=False)
class AlphaSchedule:
    values: np.ndarray
    kind: str = "custom"
    alpha_max: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0 < self.alpha_max <= 1:
            raise ConfigError(f"alpha_max must be in (0, 1], got {self.alpha_max}")
        if (values < 0).any() or (values > self.alpha_max + 1e-12).any():
            raise ConfigError(f"alpha values must lie in [0, {self.alpha_max}]: {values}")

    def __len__(self) -> int:
        return len(self.values)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "alpha_max": self.alpha_max, "values": [float(v) for v in self.values]})

    @classmethod
    def from_json(cls, text: str) -> "AlphaSchedule":
        obj = json.loads(text)
        if isinstance(obj, list):
            return cls(np.asarray(obj, dtype=np.float64), "custom", 1.0)
        return cls(np.asarray(obj["values"], dtype=np.float64), obj.get("kind", "custom"), float(obj.get("alpha_max", 1.0)))


def make_schedule(kind: str, levels: int, alpha_max: float = 1.0) -> AlphaSchedule:
    """Fixed monotone (or complementary) schedules, rescaled so the cap is ``alpha_max``.

    linear: ``(i + 1) / N``; cosine: ``(1 - cos(pi (i + 1) / N)) / 2``;
    uniform: 0.5; the ``one-minus`` variants complement linear/cosine.
    """
    if levels < 1:
        raise ConfigError("a schedule needs at least one level")
    if not 0 < alpha_max <= 1:
        raise ConfigError(f"alpha_max must be in (0, 1], got {alpha_max}")
    i = np.arange(levels, dtype=np.float64)
    linear = (i + 1) / levels
    cosine = (1 - np.cos(np.pi * (i + 1) / levels)) / 2
    base = {
        "linear": linear,
        "cosine": cosine,
        "uniform": np.full(levels, 0.5),
        "one-minus-linear": 1 - linear,
        "one-minus-cosine": 1 - cosine,
    }
    if kind not in base:
        raise ConfigError(f"cannot build a {kind!r} schedule; choose one of {sorted(base)}")
    return AlphaSchedule(np.clip(base[kind], 0.0, 1.0) * alpha_max, kind, alpha_max)


INIT_KINDS = ("linear", "cosine", "uniform", "one-minus-linear", "one-minus-cosine")


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    kind: str = "none"  # none | noise | blur
    target_l2: float = 0.0
    kernel_size: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "noise", "blur"):
            raise ConfigError(f"unknown preprocessing {self.kind!r}")
        if self.kind == "noise" and self.target_l2 < 0:
            raise ConfigError("target_l2 must be non-negative")
        if self.kind == "blur":
            if self.kernel_size < 3 or self.kernel_size % 2 == 0:
                raise ConfigError(f"blur kernel size must be odd and >= 3, got {self.kernel_size}")
            if self.sigma <= 0:
                raise ConfigError("blur sigma must be positive")

    @classmethod
    def none(cls) -> "PreprocessSpec":
        return cls("none")

    @classmethod
    def noise(cls, target_l2: float) -> "PreprocessSpec":
        return cls("noise", target_l2=target_l2)

    @classmethod
    def blur(cls, kernel_size: int | None = None, sigma: float = 1.0, resolution: int = IMAGE_SHAPE[0]) -> "PreprocessSpec":
        return cls("blur", kernel_size=kernel_size or default_blur_kernel(resolution), sigma=sigma)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target_l2": self.target_l2, "kernel_size": self.kernel_size, "sigma": self.sigma}


def default_blur_kernel(resolution: int) -> int:
    """``2 ** (log2(resolution) / 2) - 1``: 3 at 16px, 7 at 64px, 15 at 256px."""
    return int(round(2 ** (np.log2(resolution) / 2))) - 1


@lru_cache(maxsize=16)
def blur_matrix(kernel_size: int, sigma: float, height: int = IMAGE_SHAPE[0], width: int = IMAGE_SHAPE[1]) -> np.ndarray:
    """Dense ``(H*W, H*W)`` operator of a normalized Gaussian blur with reflect padding.

    Applied to row-vector images as ``flat @ M``.
    """
    if kernel_size > min(height, width):
        raise ConfigError(f"blur kernel {kernel_size} exceeds the {height}x{width} image")
    half = kernel_size // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-(t**2) / (2 * sigma**2))
    k1 /= k1.sum()
    rows = np.pad(np.arange(height), half, mode="reflect")
    cols = np.pad(np.arange(width), half, mode="reflect")
    m = np.zeros((height * width, height * width))
    for y in range(height):
        for x in range(width):
            dst = y * width + x
            for a in range(kernel_size):
                for b in range(kernel_size):
                    src = rows[y + a] * width + cols[x + b]
                    m[src, dst] += k1[a] * k1[b]
    return m.astype(np.float32)


def sample_noise(spec: PreprocessSpec, batch: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian perturbations rescaled to exactly ``spec.target_l2`` per row."""
    raw = rng.standard_normal((batch, dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return (raw / norms * spec.target_l2).astype(np.float32)


def preprocess_graph(x: Tensor, spec: PreprocessSpec, rng: np.random.Generator | None) -> Tensor:
    if spec.kind == "none":
        return x
    if spec.kind == "noise":
        if rng is None:
            raise ConfigError("noise preprocessing needs a random stream")
        nu = sample_noise(spec, x.shape[0], x.shape[1], rng)
        return nd.clamp01(nd.add(x, Tensor._wrap(nu)))
    side = int(round(np.sqrt(x.shape[1])))
    m = blur_matrix(spec.kernel_size, float(spec.sigma), side, side)
    return nd.clamp01(nd.matmul(x, Tensor._wrap(m)))


def preprocess(x, spec: PreprocessSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    flat, single = as_batch(x, int(np.prod(IMAGE_SHAPE)))
    with nd.no_tape():
        out = preprocess_graph(Tensor._wrap(flat), spec, rng).data
    return to_images(out, single)


# ---------------------------------------------------------------------------
# interpolation and the pipeline


def interpolate(z_e: LatentStack, z_s: LatentStack, alpha: AlphaSchedule | Sequence[float]) -> LatentStack:
    """Per-level convex blend ``(1 - a_i) z_e_i + a_i z_s_i``."""
    a = np.asarray(getattr(alpha, "values", alpha), dtype=np.float64)
    if len(a) != len(z_e) or len(z_s) != len(z_e):
        raise ConfigError(f"{len(a)} alpha values for {len(z_e)} encoded and {len(z_s)} sampled levels")
    codes = tuple(
        ((1 - ai) * np.asarray(e, np.float64) + ai * np.asarray(s, np.float64)).astype(np.float32)
        for ai, e, s in zip(a, z_e.codes, z_s.codes)
    )
    return LatentStack(codes, "interpolated")


def interpolate_graph(z_e: Sequence[Tensor], z_s: Sequence[np.ndarray], alpha: np.ndarray) -> list[Tensor]:
    return [nd.add(nd.scale(e, 1.0 - a), Tensor._wrap(np.float32(a) * s)) for e, s, a in zip(z_e, z_s, alpha)]


@dataclass(frozen=True, eq=False)
class PurifierPipeline:
    mlvgm: Mlvgm
    classifier: Classifier
    schedule: AlphaSchedule
    preprocess: PreprocessSpec = PreprocessSpec()

    def __post_init__(self):
        if len(self.schedule) != self.mlvgm.spec.levels:
            raise ConfigError(
                f"schedule has {len(self.schedule)} values but the MLVGM has {self.mlvgm.spec.levels} levels"
            )

    @property
    def stochastic(self) -> bool:
        return self.preprocess.kind == "noise" or bool((self.schedule.values > 0).any())

    def with_schedule(self, schedule: AlphaSchedule) -> "PurifierPipeline":
        return PurifierPipeline(self.mlvgm, self.classifier, schedule, self.preprocess)

    def purify_graph(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        """Differentiable purification of a ``(batch, dim)`` tensor.

        Draw order from ``rng``: preprocessing noise, then one prior code per
        level.  Prior codes are always drawn, whatever the alpha values.
        """
        if rng is None:
            rng = np.random.Generator(np.random.Philox(key=0))
        xp = preprocess_graph(x, self.preprocess, rng)
        z_e = self.mlvgm.encode_graph(xp)
        z_s = self.mlvgm.sample_prior(rng, x.shape[0]).codes
        return self.mlvgm.decode_graph(interpolate_graph(z_e, z_s, self.schedule.values))

    def logits_graph(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.classifier.logits_graph(self.purify_graph(x, rng))

    def as_target(self) -> Target:
        return Target(self.logits_graph, self.stochastic, name="purified")


def purify(x, pipeline: PurifierPipeline, rng: np.random.Generator | None = None) -> np.ndarray:
    flat, single = as_batch(x, pipeline.mlvgm.spec.image_dim)
    with nd.no_tape():
        out = pipeline.purify_graph(Tensor._wrap(flat), rng).data
    return to_images(out, single)


def purified_predict(x, pipeline: PurifierPipeline, rng: np.random.Generator | None = None):
    flat, single = as_batch(x, pipeline.mlvgm.spec.image_dim)
    with nd.no_tape():
        logits = pipeline.logits_graph(Tensor._wrap(flat), rng).data
    labels = argmax_lowest(logits)
    return int(labels[0]) if single else labels


def base_pipeline(mlvgm: Mlvgm, classifier: Classifier) -> PurifierPipeline:
    """Plain autoencode-then-classify: no preprocessing, every alpha zero."""
    n = mlvgm.spec.levels
    return PurifierPipeline(mlvgm, classifier, AlphaSchedule(np.zeros(n), "custom", 1.0))
