"""Classifier and MLVGM behaviour on the session-trained toy models."""
import csv
import io

import numpy as np
import pytest

from latent_purify import archive, classifier, mlvgm
from latent_purify import ndgrad as nd
from latent_purify.layers import StateError
from latent_purify.mlvgm import LatentStack, Mlvgm, MlvgmSpec
from latent_purify.ndgrad import Tensor
from latent_purify.rng import stream

# ---------------------------------------------------------------------------
# classifier


def test_argmax_ties_go_to_lowest_index():
    assert classifier.argmax_lowest(np.array([0.1, 0.9, 0.3, 0.2])) == 1
    assert classifier.argmax_lowest(np.array([1.0, 1.0, 0.0, 0.0])) == 0


def test_classifier_accuracy(clf, splits):
    train, val, _ = splits
    val_acc = clf.accuracy(val.images, val.labels)
    assert val_acc >= 0.9
    assert clf.accuracy(train.images, train.labels) >= val_acc - 1e-12


def test_classifier_is_pure_and_batch_consistent(clf, val):
    batch = clf.logits(val.images[:8])
    single = np.stack([clf.logits(im) for im in val.images[:8]])
    np.testing.assert_allclose(batch, single, atol=1e-5)
    np.testing.assert_array_equal(clf.predict(val.images[:8]), clf.predict(val.images[:8]))
    assert isinstance(clf.predict(val.images[0]), int)


def test_untrained_classifier_refuses_inference():
    model = classifier.Classifier.initialize(classifier.ClassifierSpec(), stream(0, "x"))
    with pytest.raises(StateError):
        model.predict(np.zeros((16, 16)))


def test_classifier_checkpoint_round_trip(clf, tmp_path):
    blob = clf.save(tmp_path / "c.mlvc", {"note": "x"})
    back = classifier.Classifier.load(tmp_path / "c.mlvc")
    assert back.dumps({"note": "x"}) == blob
    with pytest.raises(archive.FormatError):
        Mlvgm.loads(blob)


def test_classifier_training_log_is_csv(small_ds):
    _, tlog = classifier.train(small_ds.images, small_ds.labels, classifier.ClassifierTrainConfig(epochs=2))
    rows = list(csv.DictReader(io.StringIO(tlog.to_csv())))
    assert [r["epoch"] for r in rows] == ["0", "1"]


# ---------------------------------------------------------------------------
# MLVGM


def test_spec_validation():
    with pytest.raises(ValueError):
        MlvgmSpec(latent_dims=(8,), encoder_widths=(8,), decoder_widths=(8,))
    with pytest.raises(ValueError):
        MlvgmSpec(latent_dims=(8, 0), encoder_widths=(8, 8), decoder_widths=(8, 8))


def test_encode_is_deterministic_and_shaped(vae, val):
    a, b = vae.encode(val.images[:5]), vae.encode(val.images[:5])
    assert a.provenance == "encoded" and len(a) == 3
    for code, dim in zip(a.codes, vae.spec.latent_dims):
        assert code.shape == (5, dim)
    for x, y in zip(a.codes, b.codes):
        np.testing.assert_array_equal(x, y)
    zero = vae.encode(np.zeros((16, 16)))
    assert [c.shape for c in zero.codes] == [(d,) for d in vae.spec.latent_dims]


def test_reconstruction_quality(vae, val):
    rec = vae.reconstruct(val.images)
    assert rec.shape == val.images.shape
    assert float(np.mean((rec - val.images) ** 2)) < 0.01


def test_reconstruction_is_a_contraction(vae, val):
    x = val.images
    once = vae.reconstruct(x)
    twice = vae.reconstruct(once)
    assert np.mean((twice - once) ** 2) <= np.mean((once - x) ** 2)


def test_prior_statistics(vae):
    z = vae.sample_prior(stream(0, "prior"), 10_000)
    assert z.provenance == "sampled"
    for code in z.codes:
        assert np.abs(code.mean(axis=0)).max() < 0.05
        assert np.abs(code.var(axis=0) - 1).max() < 0.05
    other = vae.sample_prior(stream(1, "prior"), 1)
    assert not np.array_equal(other.codes[0], vae.sample_prior(stream(0, "prior"), 1).codes[0])


def test_decoded_prior_samples_in_unit_box(vae):
    img = vae.decode(vae.sample_prior(stream(0, "decode"), 64))
    assert img.shape == (64, 16, 16)
    assert img.min() >= 0 and img.max() <= 1


def test_decode_shape_errors(vae):
    with pytest.raises(nd.ShapeError):
        vae.decode(LatentStack((np.zeros(8, np.float32), np.zeros(16, np.float32))))
    with pytest.raises(nd.ShapeError):
        vae.decode(LatentStack((np.zeros(8, np.float32), np.zeros(15, np.float32), np.zeros(32, np.float32))))


def test_latent_stack_rejects_non_finite():
    with pytest.raises(nd.NonFiniteError):
        LatentStack((np.array([np.inf]),))


def test_elbo_beta_zero_is_reconstruction(vae, val):
    x = val.images[:16].reshape(16, -1)
    loss, recon, _ = vae.elbo_graph(Tensor(x), 0.0, None)
    assert float(loss.data) == float(recon.data)
    mean_recon = vae.decode(vae.encode(x))
    expected = np.sum((mean_recon.reshape(16, -1) - x) ** 2) / 16
    assert float(recon.data) == pytest.approx(expected, rel=1e-4)


def test_kl_vanishes_at_the_prior():
    assert float(nd.gaussian_kl_standard(Tensor(np.zeros((4, 8))), Tensor(np.zeros((4, 8)))).data) == 0.0


def test_untrained_mlvgm_refuses_inference():
    model = Mlvgm.initialize(MlvgmSpec(), stream(0, "x"))
    with pytest.raises(StateError):
        model.encode(np.zeros((16, 16)))


def test_training_loss_falls_early(workspace):
    rows = list(csv.DictReader(open(workspace / "models" / "mlvgm_log.csv")))
    loss = [float(r["loss"]) for r in rows[:5]]
    assert all(b < a for a, b in zip(loss, loss[1:]))
    assert {r["active_levels"] for r in rows} == {"1", "2", "3"}


def test_progressive_schedule():
    seen = [mlvgm.active_levels(e, 60, 3) for e in range(60)]
    assert seen[0] == 1 and seen[-1] == 3
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert mlvgm.beta_schedule(0, 100, 1.0, 0.2) == 0.0
    assert mlvgm.beta_schedule(20, 100, 1.0, 0.2) == 1.0


def test_mlvgm_checkpoint_round_trip(vae, tmp_path):
    blob = vae.save(tmp_path / "m.mlvc")
    back = Mlvgm.load(tmp_path / "m.mlvc")
    assert back.spec == vae.spec and back.dumps() == blob
    manifest, _ = archive.unpack_checkpoint(blob)
    names = [p["name"] for p in manifest["params"]]
    assert names == sorted(names) and all("shape" in p and "offset" in p for p in manifest["params"])
    with pytest.raises(archive.ChecksumError):
        Mlvgm.loads(blob[:-1] + bytes([blob[-1] ^ 0xFF]))
