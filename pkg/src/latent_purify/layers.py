"""Parameter tables and dense layers shared by the generative model and the classifier."""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

IMAGE_SHAPE = (16, 16)


class StateError(RuntimeError):
    """Model used before it was trained or loaded."""


def init_linear(params: dict[str, Tensor], name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)


def linear(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return nd.add_bias(nd.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    """Flatten images to ``(batch, dim)``; report whether the input was a single image."""
    arr = np.asarray(x, dtype=np.float32)
    single = arr.size == dim and arr.ndim <= 2 and (arr.ndim < 2 or arr.shape != (1, dim))
    return arr.reshape(-1, dim), single


def to_images(flat: np.ndarray, single: bool) -> np.ndarray:
    out = flat.reshape((-1,) + IMAGE_SHAPE)
    return out[0] if single else out


def frozen_copy(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def thaw(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}
