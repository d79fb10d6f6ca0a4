import csv
import io

import numpy as np
import pytest

from conftest import linear_problem
from latent_purify import archive, attacks, purifier
from latent_purify import ndgrad as nd
from latent_purify.attacks import CWConfig, DeepFoolConfig, FGSMConfig, Target
from latent_purify.ndgrad import Tensor
from latent_purify.purifier import PreprocessSpec, PurifierPipeline, make_schedule
from latent_purify.rng import from_key, stream, stream_key

LINEAR_CW = CWConfig(lr=1e-2, steps=512, restarts=1)


@pytest.fixture(scope="module")
def noisy_target(vae, clf):
    return PurifierPipeline(vae, clf, make_schedule("cosine", 3, 0.7), PreprocessSpec.noise(0.5)).as_target()


def plain_gradient(target, x, y, rng):
    xt = Tensor(np.asarray(x, np.float32).reshape(1, -1), requires_grad=True)
    with nd.Tape() as tape:
        loss = nd.softmax_cross_entropy(target(xt, rng), [y])
    tape.backward(loss)
    return xt.grad[0]


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(ValueError):
        FGSMConfig(epsilon=-1)
    with pytest.raises(ValueError):
        DeepFoolConfig(max_steps=0)
    with pytest.raises(ValueError):
        CWConfig(c=0)
    with pytest.raises(ValueError):
        CWConfig(eot=0)


def test_presets_follow_the_published_tables():
    assert attacks.DEEPFOOL_PRESETS["cars"] == DeepFoolConfig(overshoot=0.02, max_steps=256, classes_tested=4)
    assert attacks.DEEPFOOL_PRESETS["identities"].max_steps == 128
    cw = attacks.CW_PRESETS["cars"]
    assert (cw.c, cw.kappa, cw.steps, cw.restarts, cw.lr) == (24, 0.02, 1024, 8, 2e-3)


def test_config_dict_round_trip():
    for cfg in (FGSMConfig(0.1, 2), DeepFoolConfig(), CWConfig(c=3)):
        assert attacks.config_from_dict(attacks.config_to_dict(cfg)) == cfg


# ---------------------------------------------------------------------------
# EoT


def test_eot_single_pass_equals_plain_gradient(noisy_target, val):
    x, y = val.images[0], int(val.labels[0])
    key = stream_key(0, "eot-test")
    g = attacks.eot_gradient(noisy_target, x, y, 1, from_key(key))
    np.testing.assert_allclose(g.reshape(-1), plain_gradient(noisy_target, x, y, from_key(key)), atol=1e-6)


def test_eot_deterministic_target_is_k_independent(clf, val):
    target = attacks.classifier_target(clf)
    x, y = val.images[1], int(val.labels[1])
    g1 = attacks.eot_gradient(target, x, y, 1, stream(0, "e"))
    for k in (2, 8):
        np.testing.assert_allclose(attacks.eot_gradient(target, x, y, k, stream(k, "e")), g1, atol=1e-6)


def test_eot_variance_shrinks_with_k(noisy_target, val):
    # a blend of two classes keeps the loss away from saturation, where
    # rare draws would dominate the spread
    x = 0.5 * (val.images[val.labels == 0][0] + val.images[val.labels == 2][0])
    y = 0

    def spread(k):
        gs = np.stack([attacks.eot_gradient(noisy_target, x, y, k, stream(r, f"var{k}")).reshape(-1) for r in range(20)])
        return float(gs.var(axis=0).sum())

    assert spread(64) < 0.25 * spread(4)


def test_eot_rejects_zero_passes(clf, val):
    with pytest.raises(ValueError):
        attacks.eot_gradient(attacks.classifier_target(clf), val.images[0], 0, 0)


# ---------------------------------------------------------------------------
# FGSM


def test_fgsm_zero_epsilon(clf, val):
    r = attacks.fgsm(attacks.classifier_target(clf), val.images[0], int(val.labels[0]), 0.0)
    np.testing.assert_array_equal(r.adversarial, r.original)
    assert r.delta_l2 == 0


def test_fgsm_saturates_on_linear_model():
    rng = np.random.default_rng(1)
    W, b, x, y, _ = linear_problem(rng, 32)
    r = attacks.fgsm(attacks.linear_target(W, b), x, y, 1.0)
    assert set(np.unique(r.adversarial)) <= {0.0, 1.0}


def test_fgsm_respects_linf_budget(clf, eval_slice):
    target = attacks.classifier_target(clf)
    records = attacks.minimal_perturbation_sweep(target, eval_slice.images, eval_slice.labels, FGSMConfig(0.03), 0)
    for r in records:
        assert np.abs(r.adversarial - r.original).max() <= 0.03 + 1e-6
    clean_error = 1 - clf.accuracy(eval_slice.images, eval_slice.labels)
    assert np.mean([r.success for r in records]) > clean_error


# ---------------------------------------------------------------------------
# DeepFool


def test_deepfool_linear_oracle():
    rng = np.random.default_rng(2)
    for i in range(10):
        W, b, x, y, dist = linear_problem(rng)
        cfg = DeepFoolConfig()
        r = attacks.deepfool(attacks.linear_target(W, b), x, y, cfg, stream(0, "df", i))
        assert r.success
        assert r.delta_l2 == pytest.approx((1 + cfg.overshoot) * dist, rel=0.05)


def test_deepfool_already_misclassified():
    rng = np.random.default_rng(3)
    W, b, x, _, _ = linear_problem(rng)
    r = attacks.deepfool(attacks.linear_target(W, b), x, 0)
    assert r.success and r.steps == 0 and r.delta_l2 == 0


def test_deepfool_degenerate_gradient_is_recorded_as_failure():
    target = attacks.linear_target(np.zeros((16, 3)), np.array([1.0, 0.0, 0.0]))
    r = attacks.deepfool(target, np.full(16, 0.5), 0)
    assert not r.success and r.error and "vanished" in r.error


def test_deepfool_exhausts_its_budget():
    # cubic logits: each linearized step covers only part of the way to the boundary
    rng = np.random.default_rng(4)
    W, b, x, y, _ = linear_problem(rng)
    w, bias = Tensor(W), Tensor(b)

    def forward(t, _rng):
        z = nd.add_bias(nd.matmul(t, w), bias)
        return nd.mul(z, nd.mul(z, z))

    r = attacks.deepfool(Target(forward), x, y, DeepFoolConfig(overshoot=0.0, max_steps=1))
    assert not r.success and r.steps == 1


def test_deepfool_toy_success_rate(clf, eval_slice):
    cfg = DeepFoolConfig(overshoot=0.02, max_steps=128, classes_tested=4)
    target = attacks.classifier_target(clf)
    correct = clf.predict(eval_slice.images) == eval_slice.labels
    records = attacks.minimal_perturbation_sweep(target, eval_slice.images[correct], eval_slice.labels[correct], cfg, 0)
    assert np.mean([r.success for r in records]) >= 0.95


# ---------------------------------------------------------------------------
# Carlini-Wagner


def test_cw_linear_oracle():
    rng = np.random.default_rng(5)
    for i in range(5):
        W, b, x, y, dist = linear_problem(rng)
        r = attacks.cw(attacks.linear_target(W, b), x, y, LINEAR_CW, stream(0, "cw", i))
        assert r.success
        assert r.delta_l2 == pytest.approx(dist, rel=0.10)


def test_cw_already_misclassified():
    rng = np.random.default_rng(6)
    W, b, x, _, _ = linear_problem(rng)
    r = attacks.cw(attacks.linear_target(W, b), x, 0, CWConfig(kappa=0.0, steps=10, restarts=1))
    assert r.success and r.delta_l2 <= 1e-3


def test_cw_vanishing_constant_stays_put():
    rng = np.random.default_rng(7)
    W, b, x, y, _ = linear_problem(rng)
    r = attacks.cw(attacks.linear_target(W, b), x, y, CWConfig(c=1e-8, steps=100, restarts=1, lr=1e-2))
    assert not r.success and r.delta_l2 < 1e-2


# ---------------------------------------------------------------------------
# sweeps and persistence


@pytest.fixture(scope="module")
def purified_records(vae, clf, eval_slice):
    target = PurifierPipeline(vae, clf, make_schedule("cosine", 3, 0.7)).as_target()
    return attacks.minimal_perturbation_sweep(
        target, eval_slice.images[:12], eval_slice.labels[:12], DeepFoolConfig(max_steps=64, eot=2), 3
    ), target


def test_record_invariants(purified_records, eval_slice):
    records, target = purified_records
    for j, r in enumerate(records):
        assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1
        assert r.delta_l2 == pytest.approx(np.linalg.norm(r.adversarial.astype(np.float64) - r.original), abs=1e-9)
        assert r.sample_id == j
        pred = target.predict(r.adversarial, stream(3, "attack-eval", r.sample_id))
        assert r.y_hat == pred and r.success == (pred != r.y)


def test_sweep_is_order_and_thread_independent(vae, clf, eval_slice, purified_records):
    target = purified_records[1]
    cfg = DeepFoolConfig(max_steps=64, eot=2)
    ids = np.arange(12)[::-1]
    again = attacks.minimal_perturbation_sweep(
        target, eval_slice.images[:12][ids], eval_slice.labels[:12][ids], cfg, 3, threads=3, sample_ids=ids
    )
    by_id = {r.sample_id: r for r in again}
    for r in purified_records[0]:
        assert by_id[r.sample_id].delta_l2 == r.delta_l2
        np.testing.assert_array_equal(by_id[r.sample_id].adversarial, r.adversarial)


def test_deterministic_attacks_are_bit_reproducible(clf, eval_slice):
    target = attacks.classifier_target(clf)
    for cfg in (FGSMConfig(), DeepFoolConfig(), CWConfig(steps=20, restarts=2)):
        a = attacks.minimal_perturbation_sweep(target, eval_slice.images[:4], eval_slice.labels[:4], cfg, 9)
        b = attacks.minimal_perturbation_sweep(target, eval_slice.images[:4], eval_slice.labels[:4], cfg, 9)
        assert attacks.records_to_csv(a) == attacks.records_to_csv(b)


def test_advr_round_trip_and_csv(purified_records, tmp_path):
    records = purified_records[0]
    blob = attacks.save_records(tmp_path / "r.advr", records, {"attack": {"name": "deepfool"}})
    manifest, back = attacks.load_records(tmp_path / "r.advr")
    assert manifest["count"] == len(records) and blob[:4] == b"ADVR"
    assert attacks.records_to_csv(back) == attacks.records_to_csv(records)
    for a, b in zip(records, back):
        np.testing.assert_array_equal(a.adversarial, b.adversarial)
    rows = list(csv.reader(io.StringIO(attacks.records_to_csv(records))))
    assert rows[0] == ["sample_id", "y", "y_hat", "delta_l2", "success", "steps"]
    with pytest.raises(archive.TruncatedError):
        attacks.loads_records(blob[:-20])


def test_target_flags(vae, clf):
    assert not attacks.classifier_target(clf).stochastic
    assert PurifierPipeline(vae, clf, make_schedule("linear", 3)).as_target().stochastic
    assert not purifier.base_pipeline(vae, clf).as_target().stochastic
    assert isinstance(attacks.classifier_target(clf), Target)
