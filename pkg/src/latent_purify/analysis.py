"""Success-rate curves, rank/linear correlation and the latent studies."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .classifier import Classifier
from .mlvgm import Mlvgm


class DegenerateRankWarning(UserWarning):
    """All alpha values tie, so the rank correlation is undefined (reported as 0)."""


class ZeroVarianceError(ValueError):
    pass


class DegenerateStudyError(ValueError):
    pass


def log_eps_grid(lo: float = 1e-2, hi: float = 10.0, points: int = 25) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), points)


# ---------------------------------------------------------------------------
# success rate


@dataclass(frozen=True, eq=False)
class SRCurve:
    eps: np.ndarray
    sr: np.ndarray
    n: int
    label: str = ""
    _delta: np.ndarray | None = field(default=None, repr=False)
    _success: np.ndarray | None = field(default=None, repr=False)

    def at(self, eps: float) -> float:
        """SR at an arbitrary bound (step function, right-continuous)."""
        if self._delta is None:
            raise ValueError("curve was built without per-record data")
        return float(np.mean(self._success & (self._delta <= eps)))

    def first_eps_reaching(self, level: float) -> float | None:
        """Smallest observed delta at which SR reaches ``level`` (None if never)."""
        if self._delta is None:
            hits = np.flatnonzero(self.sr >= level)
            return float(self.eps[hits[0]]) if len(hits) else None
        for d in np.sort(np.unique(self._delta[self._success])):
            if self.at(d) >= level:
                return float(d)
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "sr"])
        for e, s in zip(self.eps, self.sr):
            w.writerow([repr(float(e)), repr(float(s))])
        return buf.getvalue()


def success_rate_curve(records, eps_grid: Sequence[float], label: str = "") -> SRCurve:
    """``SR(eps) = mean(success_i and delta_i <= eps)`` over all records.

    ``records`` is a sequence of objects with ``delta_l2`` and ``success``
    attributes, or a ``(deltas, successes)`` pair of arrays.
    """
    if isinstance(records, tuple) and len(records) == 2 and not hasattr(records[0], "delta_l2"):
        delta = np.asarray(records[0], dtype=np.float64)
        success = np.asarray(records[1], dtype=bool)
    else:
        delta = np.array([r.delta_l2 for r in records], dtype=np.float64)
        success = np.array([r.success for r in records], dtype=bool)
    if len(delta) == 0:
        raise ValueError("success_rate_curve needs at least one record")
    eps = np.asarray(eps_grid, dtype=np.float64)
    if (eps < 0).any() or (np.diff(eps) <= 0).any():
        raise ValueError("eps grid must be non-negative and strictly increasing")
    hits = success[None, :] & (delta[None, :] <= eps[:, None])
    return SRCurve(eps, hits.mean(axis=1), len(delta), label, delta, success)


# ---------------------------------------------------------------------------
# correlation


def spearman_rho(alpha) -> float:
    """Rank correlation between level index and alpha (average ranks for ties).

    Equals ``1 - 6 sum(d^2) / (N (N^2 - 1))`` when there are no ties.  An
    all-equal vector has no rank variance: the result is 0 and a
    :class:`DegenerateRankWarning` is emitted.
    """
    a = np.asarray(getattr(alpha, "values", alpha), dtype=np.float64).reshape(-1)
    if len(a) < 2:
        raise ValueError("rank correlation needs at least two levels")
    ranks = rankdata(a, method="average")
    if np.all(ranks == ranks[0]):
        warnings.warn("all alpha values are equal; rank correlation set to 0", DegenerateRankWarning, stacklevel=2)
        return 0.0
    return pearson(np.arange(len(a), dtype=np.float64), ranks)


def is_degenerate(alpha) -> bool:
    a = np.asarray(getattr(alpha, "values", alpha), dtype=np.float64).reshape(-1)
    return bool(np.all(a == a[0]))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVarianceError("Pearson correlation is undefined for a constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# random alpha combinations


@dataclass(frozen=True, eq=False)
class CombinationStudy:
    alphas: np.ndarray
    accuracy: np.ndarray
    rho: np.ndarray
    pearson: float
    seed: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["combination"] + [f"alpha_{i}" for i in range(self.alphas.shape[1])] + ["accuracy", "spearman"])
        for i, (a, acc, r) in enumerate(zip(self.alphas, self.accuracy, self.rho)):
            w.writerow([i] + [repr(float(v)) for v in a] + [repr(float(acc)), repr(float(r))])
        w.writerow(["pearson", repr(float(self.pearson))])
        return buf.getvalue()


def random_combination_study(
    objective: Callable[[np.ndarray], float],
    count: int,
    alpha_max: float,
    levels: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> CombinationStudy:
    """Uniform alpha vectors in ``[0, alpha_max]^levels``; correlate monotonicity with accuracy."""
    if count < 2:
        raise DegenerateStudyError("a correlation study needs at least two combinations")
    alphas = rng.uniform(0.0, alpha_max, size=(count, levels))
    accuracy = np.array([objective(a) for a in alphas], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRankWarning)
        rho = np.array([spearman_rho(a) for a in alphas])
    try:
        r = pearson(rho, accuracy)
    except ZeroVarianceError as exc:
        raise DegenerateStudyError(str(exc)) from exc
    return CombinationStudy(alphas, accuracy, rho, r, seed)


# ---------------------------------------------------------------------------
# code swapping


def code_swap_retention(mlvgm: Mlvgm, classifier: Classifier, images, levels: Sequence[int], rng: np.random.Generator) -> float:
    """Fraction of images whose predicted label survives resampling ``levels`` from the prior."""
    z = mlvgm.encode(np.asarray(images).reshape(-1, mlvgm.spec.image_dim))
    reference = classifier.predict(mlvgm.decode(z))
    prior = mlvgm.sample_prior(rng, len(reference))
    for lvl in levels:
        z = z.replace(lvl, prior[lvl])
    return float(np.mean(classifier.predict(mlvgm.decode(z)) == reference))


@dataclass(frozen=True, eq=False)
class CodeSwapResult:
    retention: np.ndarray  # one entry per level, coarse to fine

    def to_csv(self) -> str:
        lines = ["level,retention"] + [f"{i},{float(r)!r}" for i, r in enumerate(self.retention)]
        return "\n".join(lines) + "\n"


def code_swap_study(mlvgm: Mlvgm, classifier: Classifier, images, rng: np.random.Generator) -> CodeSwapResult:
    retention = [code_swap_retention(mlvgm, classifier, images, [lvl], rng) for lvl in range(mlvgm.spec.levels)]
    return CodeSwapResult(np.array(retention))
