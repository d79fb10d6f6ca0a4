import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from latent_purify import hpo, purifier
from latent_purify.hpo import BOObjective, BOState, GPModel
from latent_purify.purifier import make_schedule
from latent_purify.rng import stream

# ---------------------------------------------------------------------------
# expected improvement


def test_ei_examples():
    assert hpo.ei_closed_form(0.2, 0.0, 0.5)[0] == 0.0
    assert hpo.ei_closed_form(0.8, 0.0, 0.5)[0] == pytest.approx(0.3, abs=1e-12)
    assert hpo.ei_closed_form(0.5, 1.0, 0.5)[0] == pytest.approx(0.3989422804, abs=1e-9)


def test_ei_matches_numerical_expectation(rng):
    for mu, sigma, inc in rng.normal(size=(10, 3)):
        sigma = abs(sigma) + 0.1
        z = np.linspace(-10, 10, 200_001)
        gain = np.maximum(mu + sigma * z - inc, 0) * norm.pdf(z)
        assert hpo.ei_closed_form(mu, sigma, inc)[0] == pytest.approx(trapezoid(gain, z), abs=1e-6)


def test_ei_is_non_negative_and_vanishes_at_observed_suboptimum(rng):
    x = rng.uniform(size=(6, 2))
    y = np.sin(3 * x).sum(axis=1)
    model = GPModel.fit(x, y, [0.4, 0.4], 1.0, 0.0)
    q = rng.uniform(size=(500, 2))
    assert (hpo.expected_improvement(model, q, y.max()) >= 0).all()
    worst = int(np.argmin(y))
    assert hpo.expected_improvement(model, x[worst], y.max())[0] < 1e-6


# ---------------------------------------------------------------------------
# GP regression


def test_matern_at_zero_distance_is_signal(rng):
    a = rng.uniform(size=(4, 3))
    np.testing.assert_allclose(np.diag(hpo.matern52(a, a, np.ones(3), 1.7)), 1.7)


def test_interpolates_observations(rng):
    x = rng.uniform(size=(8, 1))
    y = np.cos(4 * x[:, 0])
    model = GPModel.fit(x, y, 0.3, 1.0, 0.0)
    mean, var = hpo.gp_posterior(model, x)
    np.testing.assert_allclose(mean, y, atol=1e-4)
    assert var.max() < 1e-4


def test_far_query_reverts_to_prior():
    x = np.linspace(0, 1, 5)[:, None]
    model = GPModel.fit(x, x[:, 0] ** 2, 0.1, 0.8, 1e-3, standardize=False)
    mean, var = hpo.gp_posterior(model, [[10.0]])
    assert var[0] == pytest.approx(0.8, rel=0.01)
    assert abs(mean[0]) < 1e-3


def test_sine_regression_rmse():
    x = np.linspace(0, 1, 8)[:, None]
    model = hpo.fit_gp(x, np.sin(2 * np.pi * x[:, 0]))
    q = np.linspace(0, 1, 201)[:, None]
    mean, _ = hpo.gp_posterior(model, q)
    assert np.sqrt(np.mean((mean - np.sin(2 * np.pi * q[:, 0])) ** 2)) < 0.1


def test_posterior_matches_direct_solve(rng):
    for _ in range(5):
        x, q = rng.uniform(size=(10, 2)), rng.uniform(size=(7, 2))
        y = rng.normal(size=10)
        ls, signal, noise = rng.uniform(0.2, 1.0, size=2), 1.3, 0.01
        model = GPModel.fit(x, y, ls, signal, noise)
        k = hpo.matern52(x, x, ls, signal) + (noise + model.jitter) * np.eye(10)
        ks = hpo.matern52(q, x, ls, signal)
        ys = (y - y.mean()) / y.std()
        mean = y.mean() + y.std() * ks @ np.linalg.solve(k, ys)
        var = y.std() ** 2 * (signal - np.einsum("ij,ji->i", ks, np.linalg.solve(k, ks.T)))
        got_mean, got_var = hpo.gp_posterior(model, q)
        np.testing.assert_allclose(got_mean, mean, atol=1e-8)
        np.testing.assert_allclose(got_var, np.maximum(var, 0), atol=1e-8)


def test_fit_gp_needs_two_points():
    with pytest.raises(hpo.GPStateError):
        hpo.fit_gp([[0.1]], [1.0])


def test_fit_gp_hyperparameters_in_bounds(rng):
    x = rng.uniform(size=(12, 3))
    model = hpo.fit_gp(x, x.sum(axis=1))
    assert ((model.lengthscales >= 0.05) & (model.lengthscales <= 2.0)).all()
    assert 0.1 <= model.signal <= 2.0 and 1e-4 <= model.noise <= 0.1


def test_suggest_requires_a_model():
    state = BOState(1.0, 2, 0)
    with pytest.raises(hpo.GPStateError):
        hpo.suggest_next(state, stream(0, "s"))


# ---------------------------------------------------------------------------
# BO loop


def test_zero_budget_returns_best_init():
    def f(a):
        return -float(np.sum((a - 0.3) ** 2))

    state = hpo.run_bo(f, steps=0, alpha_max=1.0, levels=3)
    inits = [f(make_schedule(k, 3, 1.0).values) for k in hpo.INIT_KINDS]
    assert len(state.history_y) == 5
    assert state.incumbent[1] == max(inits)


def test_quadratic_maximizer_is_found():
    state = hpo.run_bo(lambda a: -float((a[0] - 0.37) ** 2), steps=20, alpha_max=1.0, levels=1, rng=stream(0, "q"))
    assert abs(state.incumbent[0][0] - 0.37) < 0.05


def test_loop_invariants():
    seen = []
    state = hpo.run_bo(
        lambda a: float(np.sin(5 * a[0]) * np.cos(3 * a[1])),
        steps=15,
        alpha_max=0.7,
        levels=2,
        rng=stream(1, "bo"),
        callback=lambda s: seen.append(s.step),
    )
    assert seen == list(range(1, 16))
    assert all(b >= a for a, b in zip(state.incumbents, state.incumbents[1:]))
    assert state.incumbents[-1] == max(state.history_y)
    for a in state.history_x:
        assert (a >= 0).all() and (a <= 0.7).all()
    learned = state.learned_schedule()
    assert learned.kind == "learned" and len(learned.values) == 2
    rows = state.trace_csv().splitlines()
    assert rows[0] == "step,alpha_0,alpha_1,objective,incumbent" and len(rows) == 21


def test_bo_is_deterministic():
    def f(a):
        return float(-np.sum((a - 0.2) ** 2))

    a = hpo.run_bo(f, steps=5, levels=2, rng=stream(3, "bo"))
    b = hpo.run_bo(f, steps=5, levels=2, rng=stream(3, "bo"))
    assert a.trace_csv() == b.trace_csv()


# ---------------------------------------------------------------------------
# the purification objective


@pytest.fixture(scope="module")
def objective(vae, clf, val):
    return BOObjective.build(vae, clf, val.images[:40], val.labels[:40], fgsm_epsilon=0.03, seed=0)


def test_objective_at_zero_is_base_model_accuracy(objective, vae, clf):
    base = clf.predict(vae.decode(vae.encode(objective.adv_images)))
    assert objective(np.zeros(3)) == pytest.approx(float(np.mean(base == objective.labels)))


def test_objective_is_deterministic(objective):
    alpha = make_schedule("cosine", 3, 0.7).values
    assert objective(alpha) == objective(alpha)
    np.testing.assert_array_equal(objective.predictions(alpha), objective.predictions(alpha))


def test_objective_matches_purified_predict(objective):
    alpha = make_schedule("linear", 3, 0.7)
    pipe = objective.pipeline(alpha)
    direct = [purifier.purified_predict(x, pipe, stream(0, "bo-eval", i)) for i, x in enumerate(objective.adv_images[:10])]
    np.testing.assert_array_equal(objective.predictions(alpha)[:10], direct)
