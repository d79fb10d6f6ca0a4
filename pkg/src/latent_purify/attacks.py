"""Whitebox untargeted L2 attacks (FGSM, DeepFool, Carlini-Wagner) with EoT.

An attack sees a :class:`Target`: a differentiable map from a ``(batch,
dim)`` image tensor and a random stream to logits.  Stochastic targets
(purification pipelines) draw their randomness from that stream, one row at
a time, so stacking ``K`` copies of an input in a batch gives ``K``
independent passes.  Gradients averaged over such a batch are the
Expectation-over-Transformation gradients.

Success is always judged under one fixed evaluation stream per sample.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import archive
from . import ndgrad as nd
from .ndgrad import Tensor
from .rng import child_key, from_key, stream, stream_key


class DegenerateGradientError(ArithmeticError):
    """Every candidate logit-gap gradient vanished."""


@dataclass(frozen=True)
class Target:
    forward: Callable[[Tensor, np.random.Generator | None], Tensor]
    stochastic: bool = False
    name: str = "target"

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(x, rng)

    def logits(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        with nd.no_tape():
            return self.forward(Tensor._wrap(np.asarray(x, np.float32).reshape(1, -1)), rng).data[0]

    def predict(self, x: np.ndarray, rng: np.random.Generator | None = None) -> int:
        return int(np.argmax(self.logits(x, rng)))


def classifier_target(classifier) -> Target:
    return Target(lambda x, rng: classifier.logits_graph(x), False, "undefended")


def linear_target(weights: np.ndarray, bias: np.ndarray) -> Target:
    """Affine classifier ``x @ W + b``; handy as an analytic oracle."""
    w = Tensor(weights)
    b = Tensor(bias)
    return Target(lambda x, rng: nd.add_bias(nd.matmul(x, w), b), False, "linear")


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class FGSMConfig:
    epsilon: float = 0.03
    eot: int = 1
    name: str = field(default="fgsm", init=False)

    def __post_init__(self):
        if self.epsilon < 0 or self.eot < 1:
            raise ValueError("FGSM needs epsilon >= 0 and eot >= 1")


@dataclass(frozen=True)
class DeepFoolConfig:
    overshoot: float = 0.02
    max_steps: int = 256
    classes_tested: int = 4
    eot: int = 1
    name: str = field(default="deepfool", init=False)

    def __post_init__(self):
        if self.overshoot < 0 or self.max_steps < 1 or self.classes_tested < 2 or self.eot < 1:
            raise ValueError("invalid DeepFool configuration")


@dataclass(frozen=True)
class CWConfig:
    c: float = 24.0
    kappa: float = 0.02
    steps: int = 1024
    restarts: int = 8
    lr: float = 2e-3
    eot: int = 1
    init_noise: float = 1e-2
    name: str = field(default="cw", init=False)

    def __post_init__(self):
        if self.c <= 0 or self.kappa < 0 or self.steps < 1 or self.restarts < 1 or self.lr <= 0 or self.eot < 1:
            raise ValueError("invalid C&W configuration")


AttackConfig = FGSMConfig | DeepFoolConfig | CWConfig

# Per-task hyperparameters of the original evaluation.
DEEPFOOL_PRESETS = {
    "gender": DeepFoolConfig(overshoot=0.01, max_steps=1024, classes_tested=2),
    "identities": DeepFoolConfig(overshoot=0.02, max_steps=128, classes_tested=8),
    "cars": DeepFoolConfig(overshoot=0.02, max_steps=256, classes_tested=4),
}
CW_PRESETS = {
    "gender": CWConfig(c=64, kappa=0.01, steps=1024, restarts=8, lr=1e-3),
    "identities": CWConfig(c=16, kappa=0.05, steps=1024, restarts=8, lr=5e-3),
    "cars": CWConfig(c=24, kappa=0.02, steps=1024, restarts=8, lr=2e-3),
}


def config_to_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> AttackConfig:
    d = dict(d)
    name = d.pop("name")
    cls = {"fgsm": FGSMConfig, "deepfool": DeepFoolConfig, "cw": CWConfig}[name]
    return cls(**d)


@dataclass(frozen=True, eq=False)
class AdversarialRecord:
    original: np.ndarray
    adversarial: np.ndarray
    delta_l2: float
    success: bool
    y: int
    y_hat: int
    steps: int
    sample_id: int = 0
    error: str | None = None


def _record(x, x_adv, y, y_hat, steps, sample_id, error=None) -> AdversarialRecord:
    delta = float(np.linalg.norm(x_adv.astype(np.float64) - x.astype(np.float64)))
    return AdversarialRecord(x, x_adv, delta, bool(y_hat != y), int(y), int(y_hat), int(steps), sample_id, error)


def _flat(x) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = np.asarray(x, dtype=np.float32)
    return arr.reshape(-1).copy(), arr.shape


# ---------------------------------------------------------------------------
# gradients


def _batched_gradient(target: Target, x: np.ndarray, k: int, rng, objective) -> tuple[np.ndarray, float, np.ndarray]:
    xt = Tensor(x.reshape(1, -1), requires_grad=True)
    with nd.Tape() as tape:
        logits = target(nd.tile_rows(xt, k), rng)
        loss = objective(logits)
    tape.backward(loss)
    return xt.grad[0], float(loss.data), logits.data


def eot_gradient(target: Target, x, y: int, k: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Cross-entropy input gradient averaged over ``k`` random passes."""
    if k < 1:
        raise ValueError("EoT needs at least one pass")
    flat, shape = _flat(x)
    labels = np.full(k, int(y))
    grad, _, _ = _batched_gradient(target, flat, k, rng, lambda z: nd.softmax_cross_entropy(z, labels))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# attacks


def fgsm(
    target: Target,
    x,
    y: int,
    epsilon: float,
    k: int = 1,
    rng: np.random.Generator | None = None,
    eval_key: int = 0,
    sample_id: int = 0,
) -> AdversarialRecord:
    """One signed-gradient step of L-inf size ``epsilon``, clipped to the pixel box."""
    flat, shape = _flat(x)
    g = eot_gradient(target, flat, y, k, rng)
    x_adv = np.clip(flat + np.float32(epsilon) * np.sign(g), 0.0, 1.0).astype(np.float32)
    y_hat = target.predict(x_adv, from_key(eval_key))
    return _record(flat.reshape(shape), x_adv.reshape(shape), y, y_hat, 1, sample_id)


def deepfool(
    target: Target,
    x,
    y: int,
    cfg: DeepFoolConfig = DeepFoolConfig(),
    rng: np.random.Generator | None = None,
    eval_key: int = 0,
    sample_id: int = 0,
) -> AdversarialRecord:
    """Multi-class L2 DeepFool over the top ``classes_tested`` classes.

    ``classes_tested`` counts the true class, so ``classes_tested - 1``
    competitors are linearized per step.  Logit gaps and their gradients are
    averaged over ``cfg.eot`` passes sharing one stream per step.
    """
    flat, shape = _flat(x)
    rng = rng if rng is not None else stream(0, "deepfool")
    r = np.zeros(flat.shape, dtype=np.float64)
    scale = 1.0 + cfg.overshoot
    k = cfg.eot
    x_adv = flat
    for step in range(cfg.max_steps + 1):
        x_adv = np.clip(flat + scale * r, 0.0, 1.0).astype(np.float32)
        y_hat = target.predict(x_adv, from_key(eval_key))
        if y_hat != y:
            return _record(flat.reshape(shape), x_adv.reshape(shape), y, y_hat, step, sample_id)
        if step == cfg.max_steps:
            break
        key = child_key(rng)
        with nd.no_tape():
            logits = target(Tensor._wrap(np.tile(x_adv, (k, 1))), from_key(key)).data.mean(axis=0)
        ranked = [int(c) for c in np.argsort(-logits, kind="stable") if c != y]
        competitors = ranked[: min(cfg.classes_tested, len(logits)) - 1]
        best = None
        for c in competitors:
            w, f, _ = _batched_gradient(target, x_adv, k, from_key(key), _gap_objective(c, y, k))
            norm = float(np.linalg.norm(w.astype(np.float64)))
            if norm < 1e-12:
                continue
            dist = (abs(f) + 1e-4) / norm
            if best is None or dist < best[0]:
                best = (dist, w.astype(np.float64), norm)
        if best is None:
            err = DegenerateGradientError("all logit-gap gradients vanished")
            return _record(flat.reshape(shape), x_adv.reshape(shape), y, y_hat, step, sample_id, str(err))
        dist, w, norm = best
        r += dist / norm * w
    return _record(flat.reshape(shape), x_adv.reshape(shape), y, y_hat, cfg.max_steps, sample_id)


def _gap_objective(c: int, y: int, k: int):
    cols_c = np.full(k, c)
    cols_y = np.full(k, y)
    return lambda z: nd.mean(nd.sub(nd.take(z, cols_c), nd.take(z, cols_y)))


def cw(
    target: Target,
    x,
    y: int,
    cfg: CWConfig = CWConfig(),
    rng: np.random.Generator | None = None,
    eval_key: int = 0,
    sample_id: int = 0,
) -> AdversarialRecord:
    """Carlini-Wagner L2 in tanh space with a fixed trade-off constant.

    Minimizes ``||x_adv - x||^2 + c * max(Z_y - max_{j != y} Z_j + kappa, 0)``
    with Adam; the smallest successful iterate over all restarts is returned.
    """
    flat, shape = _flat(x)
    rng = rng if rng is not None else stream(0, "cw")
    y_hat = target.predict(flat, from_key(eval_key))
    if y_hat != y:
        return _record(flat.reshape(shape), flat.reshape(shape), y, y_hat, 0, sample_id)
    k = cfg.eot
    x0 = Tensor._wrap(flat.reshape(1, -1))
    w0 = np.arctanh(np.clip(2.0 * flat.astype(np.float64) - 1.0, -1 + 1e-6, 1 - 1e-6))
    cols_y = np.full(k, y)
    best: tuple[float, np.ndarray, int, int] | None = None
    fallback: tuple[float, np.ndarray, int, int] | None = None
    steps_used = 0
    for _ in range(cfg.restarts):
        w = Tensor(w0 + cfg.init_noise * rng.standard_normal(w0.shape), requires_grad=True)
        w.data = w.data.reshape(1, -1)
        state = nd.AdamState()
        for _ in range(cfg.steps):
            steps_used += 1
            w.zero_grad()
            with nd.Tape() as tape:
                xa = nd.scale(nd.add(nd.tanh(w), 1.0), 0.5)
                dist = nd.sum(nd.square(nd.sub(xa, x0)))
                logits = target(nd.tile_rows(xa, k), from_key(child_key(rng)))
                masked = logits.data.copy()
                masked[:, y] = -np.inf
                other = nd.take(logits, np.argmax(masked, axis=1))
                hinge = nd.mean(nd.relu(nd.add(nd.sub(nd.take(logits, cols_y), other), float(cfg.kappa))))
                loss = nd.add(dist, nd.scale(hinge, cfg.c))
            tape.backward(loss)
            cand = np.clip(xa.data[0], 0.0, 1.0)
            pred = target.predict(cand, from_key(eval_key))
            d2 = float(dist.data)
            if pred != y and (best is None or d2 < best[0]):
                best = (d2, cand.copy(), pred, steps_used)
            if fallback is None or float(loss.data) < fallback[0]:
                fallback = (float(loss.data), cand.copy(), pred, steps_used)
            nd.adam_step([w], [w.grad], state, cfg.lr)
    chosen = best if best is not None else fallback
    _, x_adv, pred, steps = chosen
    return _record(flat.reshape(shape), x_adv.reshape(shape).astype(np.float32), y, pred, steps, sample_id)


def run_attack(
    target: Target, x, y: int, cfg: AttackConfig, rng=None, eval_key: int = 0, sample_id: int = 0
) -> AdversarialRecord:
    if isinstance(cfg, FGSMConfig):
        return fgsm(target, x, y, cfg.epsilon, cfg.eot, rng, eval_key, sample_id)
    if isinstance(cfg, DeepFoolConfig):
        return deepfool(target, x, y, cfg, rng, eval_key, sample_id)
    if isinstance(cfg, CWConfig):
        return cw(target, x, y, cfg, rng, eval_key, sample_id)
    raise TypeError(f"unknown attack configuration {cfg!r}")


def minimal_perturbation_sweep(
    target: Target,
    images,
    labels: Sequence[int],
    cfg: AttackConfig,
    seed: int = 0,
    threads: int = 1,
    sample_ids: Sequence[int] | None = None,
) -> list[AdversarialRecord]:
    """Attack every sample; streams are keyed by sample id so order and threading don't matter."""
    images = np.asarray(images, dtype=np.float32)
    ids = list(range(len(labels))) if sample_ids is None else [int(i) for i in sample_ids]

    def one(j: int) -> AdversarialRecord:
        sid = ids[j]
        rng = stream(seed, f"attack-{cfg.name}", sid)
        return run_attack(target, images[j], int(labels[j]), cfg, rng, stream_key(seed, "attack-eval", sid), sid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(ids))))
    return [one(j) for j in range(len(ids))]


# ---------------------------------------------------------------------------
# ADVR archives and CSV export

ADVR_MAGIC = b"ADVR"
ADVR_VERSION = 1
_RECORD_DTYPE = np.dtype(
    [("sample_id", "<u4"), ("y", "<u2"), ("y_hat", "<u2"), ("success", "u1"), ("steps", "<u4"), ("delta_l2", "<f8")]
)


def dumps_records(records: Sequence[AdversarialRecord], manifest: dict) -> bytes:
    n = len(records)
    dim = int(records[0].original.size) if n else 0
    table = np.zeros(n, dtype=_RECORD_DTYPE)
    for i, r in enumerate(records):
        table[i] = (r.sample_id, r.y, r.y_hat, int(r.success), r.steps, r.delta_l2)
    shape = list(records[0].original.shape) if n else []
    m = dict(manifest, count=n, dim=dim, image_shape=shape)
    m["errors"] = {str(r.sample_id): r.error for r in records if r.error}
    originals = np.stack([r.original.reshape(-1) for r in records]).astype("<f4") if n else np.zeros(0, "<f4")
    adversarial = np.stack([r.adversarial.reshape(-1) for r in records]).astype("<f4") if n else np.zeros(0, "<f4")
    return archive.pack(ADVR_MAGIC, ADVR_VERSION, m, table.tobytes() + originals.tobytes() + adversarial.tobytes())


def loads_records(blob: bytes) -> tuple[dict, list[AdversarialRecord]]:
    m, payload = archive.unpack(
        blob, ADVR_MAGIC, ADVR_VERSION, lambda m: int(m["count"]) * (_RECORD_DTYPE.itemsize + 8 * int(m["dim"]))
    )
    n, dim = int(m["count"]), int(m["dim"])
    table = np.frombuffer(payload, dtype=_RECORD_DTYPE, count=n)
    off = n * _RECORD_DTYPE.itemsize
    originals = np.frombuffer(payload, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    adversarial = np.frombuffer(payload, dtype="<f4", count=n * dim, offset=off + 4 * n * dim).reshape(n, dim)
    shape = tuple(m.get("image_shape") or (dim,))
    errors = m.get("errors", {})
    records = [
        AdversarialRecord(
            originals[i].reshape(shape).astype(np.float32),
            adversarial[i].reshape(shape).astype(np.float32),
            float(t["delta_l2"]),
            bool(t["success"]),
            int(t["y"]),
            int(t["y_hat"]),
            int(t["steps"]),
            int(t["sample_id"]),
            errors.get(str(int(t["sample_id"]))),
        )
        for i, t in enumerate(table)
    ]
    return m, records


def records_to_csv(records: Sequence[AdversarialRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "y", "y_hat", "delta_l2", "success", "steps"])
    for r in records:
        writer.writerow([r.sample_id, r.y, r.y_hat, repr(r.delta_l2), int(r.success), r.steps])
    return buf.getvalue()


def save_records(path: str | Path, records: Sequence[AdversarialRecord], manifest: dict) -> bytes:
    blob = dumps_records(records, manifest)
    archive.write_bytes(path, blob)
    return blob


def load_records(path: str | Path) -> tuple[dict, list[AdversarialRecord]]:
    return loads_records(Path(path).read_bytes())
