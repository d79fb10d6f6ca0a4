"""Bayesian optimization of the per-level alpha vector.

A Matern-5/2 Gaussian process (ARD length-scales, fitted by random search
on the log marginal likelihood) with closed-form Expected Improvement,
maximized over random and incumbent-local candidates.  All GP arithmetic is
float64.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

from . import ndgrad as nd
from .attacks import FGSMConfig, minimal_perturbation_sweep
from .classifier import Classifier, argmax_lowest
from .mlvgm import Mlvgm
from .ndgrad import Tensor
from .purifier import (
    INIT_KINDS,
    AlphaSchedule,
    PreprocessSpec,
    PurifierPipeline,
    base_pipeline,
    interpolate_graph,
    make_schedule,
    preprocess_graph,
)
from .rng import stream

LENGTHSCALE_BOUNDS = (0.05, 2.0)
SIGNAL_BOUNDS = (0.1, 2.0)
NOISE_BOUNDS = (1e-4, 0.1)
JITTERS = (1e-6, 1e-5, 1e-4)
SEARCH_POINTS = 512


class GPStateError(RuntimeError):
    pass


class GPNumericError(ArithmeticError):
    pass


def matern52(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray, signal: float) -> np.ndarray:
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(diff * diff, axis=-1))
    s5r = np.sqrt(5.0) * r
    return signal * (1.0 + s5r + 5.0 / 3.0 * r * r) * np.exp(-s5r)


@dataclass
class GPModel:
    x: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal: float
    noise: float
    jitter: float
    y_mean: float
    y_std: float
    chol: np.ndarray
    weights: np.ndarray  # K^-1 (y - mean) / std
    log_likelihood: float = float("nan")

    @classmethod
    def fit(cls, x, y, lengthscales, signal: float, noise: float, standardize: bool = True) -> "GPModel":
        """Condition on data with fixed hyperparameters (jitter escalates on Cholesky failure)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        mean, std = (float(y.mean()), float(y.std())) if standardize else (0.0, 1.0)
        if std <= 0:
            std = 1.0
        ys = (y - mean) / std
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (x.shape[1],)).copy()
        k = matern52(x, x, ls, signal)
        for jitter in JITTERS:
            try:
                chol = np.linalg.cholesky(k + (noise + jitter) * np.eye(len(x)))
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise GPNumericError("kernel matrix is not positive definite even with maximal jitter")
        weights = _cho_solve(chol, ys)
        lml = -0.5 * ys @ weights - np.log(np.diag(chol)).sum() - 0.5 * len(x) * np.log(2 * np.pi)
        return cls(x, y, ls, float(signal), float(noise), jitter, mean, std, chol, weights, float(lml))

    def posterior(self, q) -> tuple[np.ndarray, np.ndarray]:
        return gp_posterior(self, q)


def _cho_solve(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    tmp = solve_triangular(chol, b, lower=True)
    return solve_triangular(chol.T, tmp, lower=False)


def _hyper_candidates(dims: int, count: int = SEARCH_POINTS) -> np.ndarray:
    """Fixed log-uniform candidate table: columns are lengthscales..., signal, noise."""
    rng = stream(0, "gp-hyperparameters", dims)
    lo = np.log([LENGTHSCALE_BOUNDS[0]] * dims + [SIGNAL_BOUNDS[0], NOISE_BOUNDS[0]])
    hi = np.log([LENGTHSCALE_BOUNDS[1]] * dims + [SIGNAL_BOUNDS[1], NOISE_BOUNDS[1]])
    return np.exp(rng.uniform(lo, hi, size=(count, dims + 2)))


def fit_gp(x, y) -> GPModel:
    """Standardize ``y`` and pick kernel hyperparameters by maximum marginal likelihood."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) < 2:
        raise GPStateError("a GP needs at least two observations")
    n, d = x.shape
    mean, std = float(y.mean()), float(y.std())
    ys = (y - mean) / (std if std > 0 else 1.0)
    cand = _hyper_candidates(d)
    ls, signal, noise = cand[:, :d], cand[:, d], cand[:, d + 1]
    diff2 = (x[:, None, :] - x[None, :, :]) ** 2
    r = np.sqrt(np.einsum("ijd,cd->cij", diff2, 1.0 / ls**2))
    s5r = np.sqrt(5.0) * r
    k = signal[:, None, None] * (1 + s5r + 5.0 / 3.0 * r * r) * np.exp(-s5r)
    k += (noise + JITTERS[0])[:, None, None] * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        lml = np.array([_safe_lml(x, y, ls[c], signal[c], noise[c]) for c in range(len(cand))])
    else:
        alpha = np.linalg.solve(chol, np.broadcast_to(ys, (len(cand), n))[..., None])[..., 0]
        logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        lml = -0.5 * np.sum(alpha * alpha, axis=1) - logdet - 0.5 * n * np.log(2 * np.pi)
    best = int(np.nanargmax(lml))
    return GPModel.fit(x, y, ls[best], signal[best], noise[best])


def _safe_lml(x, y, ls, signal, noise) -> float:
    try:
        return GPModel.fit(x, y, ls, signal, noise).log_likelihood
    except GPNumericError:
        return -np.inf


def gp_posterior(model: GPModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance (original units) at query points ``q``."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    ks = matern52(q, model.x, model.lengthscales, model.signal)
    mean = ks @ model.weights
    v = solve_triangular(model.chol, ks.T, lower=True)
    var = np.maximum(model.signal - np.sum(v * v, axis=0), 0.0)
    return model.y_mean + model.y_std * mean, model.y_std**2 * var


def ei_closed_form(mu, sigma, incumbent: float) -> np.ndarray:
    """``(mu - f*) Phi(u) + sigma phi(u)`` with ``u = (mu - f*) / sigma``; ``max(mu - f*, 0)`` when sigma < 1e-12."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    gain = mu - incumbent
    out = np.maximum(gain, 0.0)
    ok = sigma >= 1e-12
    u = gain[ok] / sigma[ok]
    out[ok] = gain[ok] * norm.cdf(u) + sigma[ok] * norm.pdf(u)
    return np.maximum(out, 0.0)


def expected_improvement(model: GPModel, q, incumbent: float) -> np.ndarray:
    """Closed-form EI for maximization at query points ``q``."""
    mu, var = gp_posterior(model, q)
    return ei_closed_form(mu, np.sqrt(var), incumbent)


# ---------------------------------------------------------------------------
# optimization loop


@dataclass
class BOState:
    alpha_max: float
    levels: int
    budget: int
    history_x: list[np.ndarray] = field(default_factory=list)
    history_y: list[float] = field(default_factory=list)
    incumbents: list[float] = field(default_factory=list)
    model: GPModel | None = None
    step: int = 0

    def observe(self, alpha: np.ndarray, value: float) -> None:
        self.history_x.append(np.asarray(alpha, dtype=np.float64))
        self.history_y.append(float(value))
        self.incumbents.append(max(self.history_y))

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.history_y))

    @property
    def incumbent(self) -> tuple[np.ndarray, float]:
        i = self.best_index
        return self.history_x[i], self.history_y[i]

    def learned_schedule(self) -> AlphaSchedule:
        alpha, _ = self.incumbent
        return AlphaSchedule(np.clip(alpha, 0.0, self.alpha_max), "learned", self.alpha_max)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step"] + [f"alpha_{i}" for i in range(self.levels)] + ["objective", "incumbent"])
        for s, (a, v, inc) in enumerate(zip(self.history_x, self.history_y, self.incumbents)):
            w.writerow([s] + [repr(float(t)) for t in a] + [repr(v), repr(inc)])
        return buf.getvalue()


def suggest_next(state: BOState, rng: np.random.Generator, n_random: int = 1024, n_local: int = 64) -> np.ndarray:
    if state.model is None:
        raise GPStateError("fit a GP before asking for suggestions")
    best_x, best_y = state.incumbent
    uniform = rng.uniform(0.0, state.alpha_max, size=(n_random, state.levels))
    local = np.clip(best_x + 0.05 * rng.standard_normal((n_local, state.levels)), 0.0, state.alpha_max)
    cand = np.vstack([uniform, local])
    ei = expected_improvement(state.model, cand, best_y)
    return cand[int(np.argmax(ei))]


def run_bo(
    objective: Callable[[np.ndarray], float],
    steps: int = 95,
    alpha_max: float = 1.0,
    levels: int = 3,
    rng: np.random.Generator | None = None,
    callback: Callable[[BOState], None] | None = None,
) -> BOState:
    """Evaluate the five fixed schedules, then ``steps`` rounds of fit / suggest / evaluate."""
    rng = rng if rng is not None else stream(0, "bo")
    state = BOState(alpha_max, levels, steps)
    for kind in INIT_KINDS:
        alpha = make_schedule(kind, levels, alpha_max).values
        state.observe(alpha, objective(alpha))
    for _ in range(steps):
        state.model = fit_gp(np.array(state.history_x), np.array(state.history_y))
        alpha = suggest_next(state, rng)
        state.observe(alpha, objective(alpha))
        state.step += 1
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------------------
# the adversarial-accuracy objective


class BOObjective:
    """Purified accuracy on a cached FGSM set, as a pure function of alpha.

    Sample ``i`` is purified with the stream ``(seed, "bo-eval", i)``; its
    preprocessing noise, encoding and prior codes are drawn once and cached.
    """

    def __init__(
        self,
        mlvgm: Mlvgm,
        classifier: Classifier,
        adv_images: np.ndarray,
        labels: np.ndarray,
        seed: int = 0,
        preprocess: PreprocessSpec = PreprocessSpec(),
    ):
        self.mlvgm = mlvgm
        self.classifier = classifier
        self.preprocess = preprocess
        self.adv_images = np.asarray(adv_images, dtype=np.float32)
        self.labels = np.asarray(labels)
        self.seed = seed
        dim = mlvgm.spec.image_dim
        flat = self.adv_images.reshape(len(self.labels), dim)
        prepped = []
        priors: list[list[np.ndarray]] = [[] for _ in range(mlvgm.spec.levels)]
        with nd.no_tape():
            for i in range(len(flat)):
                rng = stream(seed, "bo-eval", i)
                prepped.append(preprocess_graph(Tensor._wrap(flat[i : i + 1]), preprocess, rng).data)
                for lvl, code in enumerate(mlvgm.sample_prior(rng, 1).codes):
                    priors[lvl].append(code)
            self._z_e = [t.data for t in mlvgm.encode_graph(Tensor._wrap(np.vstack(prepped)))]
        self._z_s = [np.vstack(p) for p in priors]

    @classmethod
    def build(
        cls,
        mlvgm: Mlvgm,
        classifier: Classifier,
        images,
        labels,
        fgsm_epsilon: float = 0.03,
        seed: int = 0,
        preprocess: PreprocessSpec = PreprocessSpec(),
    ) -> "BOObjective":
        """FGSM every image against the base model (autoencode + classify) and cache the result."""
        target = base_pipeline(mlvgm, classifier).as_target()
        records = minimal_perturbation_sweep(target, images, labels, FGSMConfig(fgsm_epsilon), seed)
        adv = np.stack([r.adversarial for r in records])
        return cls(mlvgm, classifier, adv, np.asarray(labels), seed, preprocess)

    def predictions(self, alpha) -> np.ndarray:
        alpha = np.asarray(getattr(alpha, "values", alpha), dtype=np.float64)
        with nd.no_tape():
            z_e = [Tensor._wrap(z) for z in self._z_e]
            codes = interpolate_graph(z_e, self._z_s, alpha)
            logits = self.classifier.logits_graph(self.mlvgm.decode_graph(codes)).data
        return argmax_lowest(logits)

    def __call__(self, alpha) -> float:
        return float(np.mean(self.predictions(alpha) == self.labels))

    def pipeline(self, alpha) -> PurifierPipeline:
        schedule = alpha if isinstance(alpha, AlphaSchedule) else AlphaSchedule(np.asarray(alpha), "custom", 1.0)
        return PurifierPipeline(self.mlvgm, self.classifier, schedule, self.preprocess)

