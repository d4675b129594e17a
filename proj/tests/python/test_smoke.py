import json

import numpy as np
import pytest

import nhvt


def small_config(variant="nucleihvt", **overrides):
    cfg = json.loads(nhvt.default_config(variant))
    cfg.update(base_channels=4, window=4, **overrides)
    return json.dumps(cfg)


def test_forward_shape_and_dtype():
    model = nhvt.Model(small_config())
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 48)).astype(np.float32)
    logits = model.forward(x)
    assert logits.shape == (2, 2, 32, 48)
    assert logits.dtype == np.float32
    assert np.isfinite(logits).all()


def test_cb_variant_has_more_parameters():
    single = nhvt.param_count(small_config())
    dual = nhvt.param_count(small_config("cb_nucleihvt"))
    assert dual > single
    assert nhvt.Model(small_config()).parameter_count() == single


def test_bad_input_shape_raises():
    model = nhvt.Model(small_config())
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 3, 40, 40), np.float32))


def test_unknown_config_key_raises():
    cfg = json.loads(small_config())
    cfg["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        nhvt.Model(json.dumps(cfg))


def test_metrics_identity():
    rng = np.random.default_rng(1)
    pred = rng.integers(0, 3, (2, 16, 16), dtype=np.uint8)
    truth = rng.integers(0, 3, (2, 16, 16), dtype=np.uint8)
    r = nhvt.classwise_report(pred, truth, 3)
    for i, d in zip(r["iou"], r["dice"]):
        assert d == pytest.approx(2 * i / (1 + i), abs=1e-12)
    perfect = nhvt.classwise_report(truth, truth, 3)
    assert perfect["mdice"] == pytest.approx(1.0)


def test_loss_prefers_correct_logits():
    labels = np.zeros((1, 8, 8), np.uint8)
    labels[:, :4] = 1
    good = np.stack([1 - labels, labels], axis=1).astype(np.float32) * 8 - 4
    assert nhvt.combined_loss(good, labels) < nhvt.combined_loss(-good, labels)
    assert nhvt.cross_entropy(good, labels) >= 0


def test_predict_and_checkpoint_round_trip(tmp_path):
    image, mask = nhvt.synthetic_pair(40, 52, seed=3)
    assert image.shape == (40, 52, 3) and mask.shape == (40, 52)
    model = nhvt.Model(small_config())
    norm = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    a = model.predict(image, norm)
    assert a.shape == (40, 52)
    path = tmp_path / "m.nhvt"
    model.save(str(path))
    b = nhvt.Model.from_checkpoint(str(path)).predict(image, norm)
    np.testing.assert_array_equal(a, b)


def test_missing_checkpoint_raises():
    with pytest.raises(OSError):
        nhvt.Model.from_checkpoint("/nonexistent/model.nhvt")


def test_gradcheck_ops_pass():
    rows = nhvt.gradcheck("loss")
    assert rows and all(r["passed"] for r in rows)
    assert all(r["max_rel_error"] <= nhvt.GRADCHECK_TOLERANCE for r in rows)
