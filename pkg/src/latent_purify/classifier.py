"""MLP image classifier: the model under attack."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from . import ndgrad as nd
from .layers import StateError, as_batch, init_linear, linear, thaw
from .ndgrad import Tensor


@dataclass(frozen=True)
class ClassifierSpec:
    input_dim: int = 256
    hidden: tuple[int, ...] = (256, 128)
    classes: int = 4

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "classes": self.classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(int(d["input_dim"]), tuple(int(h) for h in d["hidden"]), int(d["classes"]))


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 30
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


class Classifier:
    def __init__(self, spec: ClassifierSpec, params: dict[str, Tensor], trained: bool = False):
        self.spec = spec
        self.params = params
        self.trained = trained

    @classmethod
    def initialize(cls, spec: ClassifierSpec, rng: np.random.Generator) -> "Classifier":
        params: dict[str, Tensor] = {}
        widths = (spec.input_dim,) + spec.hidden
        for k in range(len(spec.hidden)):
            init_linear(params, f"fc{k}", widths[k], widths[k + 1], rng)
        init_linear(params, "head", widths[-1], spec.classes, rng)
        return cls(spec, params)

    def _ensure_ready(self) -> None:
        if not self.trained:
            raise StateError("classifier has not been trained or loaded")

    def logits_graph(self, x: Tensor) -> Tensor:
        h = x
        for k in range(len(self.spec.hidden)):
            h = nd.relu(linear(self.params, f"fc{k}", h))
        return linear(self.params, "head", h)

    def logits(self, x) -> np.ndarray:
        self._ensure_ready()
        flat, single = as_batch(x, self.spec.input_dim)
        with nd.no_tape():
            out = self.logits_graph(Tensor._wrap(flat)).data
        return out[0] if single else out

    def predict(self, x) -> np.ndarray | int:
        out = argmax_lowest(self.logits(x))
        return int(out) if np.ndim(out) == 0 else out

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def dumps(self, meta: dict | None = None) -> bytes:
        return archive.pack_checkpoint("classifier", self.spec.to_dict(), self.state_dict(), meta)

    def save(self, path: str | Path, meta: dict | None = None) -> bytes:
        blob = self.dumps(meta)
        archive.write_bytes(path, blob)
        return blob

    @classmethod
    def loads(cls, blob: bytes) -> "Classifier":
        manifest, params = archive.unpack_checkpoint(blob)
        if manifest.get("kind") != "classifier":
            raise archive.FormatError(f"checkpoint holds a {manifest.get('kind')!r}, not a classifier")
        return cls(ClassifierSpec.from_dict(manifest["spec"]), thaw(params), trained=True)

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        return cls.loads(Path(path).read_bytes())


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        lines = [",".join(keys)]
        lines += [",".join(_fmt(r[k]) for k in keys) for r in self.rows]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(
    images,
    labels,
    config: ClassifierTrainConfig = ClassifierTrainConfig(),
    spec: ClassifierSpec | None = None,
    val: tuple | None = None,
) -> tuple[Classifier, TrainLog]:
    """Mini-batch SGD with momentum on softmax cross-entropy."""
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    flat = np.asarray(images, dtype=np.float32).reshape(len(labels), -1)
    labels = np.asarray(labels, dtype=np.intp)
    spec = spec or ClassifierSpec(input_dim=flat.shape[1], classes=int(labels.max()) + 1)
    model = Classifier.initialize(spec, rng)
    params = [model.params[k] for k in sorted(model.params)]
    velocity: list[np.ndarray] = []
    log = TrainLog()
    n = len(labels)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            with nd.Tape() as tape:
                loss = nd.softmax_cross_entropy(model.logits_graph(Tensor._wrap(flat[idx])), labels[idx])
            for p in params:
                p.zero_grad()
            tape.backward(loss)
            nd.sgd_momentum_step(params, [p.grad for p in params], velocity, config.lr, config.momentum)
            total += float(loss.data) * len(idx)
        model.trained = True
        row = {"epoch": epoch, "loss": total / n, "train_acc": model.accuracy(flat, labels)}
        if val is not None:
            row["val_acc"] = model.accuracy(*val)
        log.rows.append(row)
    return model, log
