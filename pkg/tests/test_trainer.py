import json
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from cdcl.data import Dataset, ShiftConfig, generate_shifted_pair, split_train_val
from cdcl.errors import InvalidConfigError
from cdcl.model import Domain, EncoderConfig, init_model, prepare_source_free
from cdcl.trainer import (HyperParams, evaluate, lr_schedule, pretrain_source, sgd_step,
                          train_sdf, train_source_only, train_uda)

from conftest import small_config

FAST = HyperParams(epochs=2, batch_size=16, seed=3)


@pytest.fixture(scope="module")
def pair():
    return generate_shifted_pair(ShiftConfig(per_class_count=25, seed=1))


@pytest.fixture(scope="module")
def model(pair):
    return init_model(EncoderConfig(input_dim=4, hidden_dims=(8,), feature_dim=4), 4, seed=0)


# -- schedule and optimizer ----------------------------------------------------

def test_lr_schedule_examples():
    assert lr_schedule(0.01, 0.0, 0.75) == 0.01
    assert all(lr_schedule(0.3, p, 0.0) == 0.3 for p in np.linspace(0, 1, 11))
    ref = float(mpmath.mpf("0.01") * mpmath.power(11, mpmath.mpf("-0.75")))
    assert lr_schedule(0.01, 1.0, 0.75) == pytest.approx(ref, rel=1e-14)
    assert ref == pytest.approx(1.6556002607617017e-3, rel=1e-15)


def test_lr_schedule_monotone():
    vals = [lr_schedule(1.0, p, 2.25) for p in np.linspace(0, 1, 50)]
    assert np.all(np.diff(vals) <= 0)
    with pytest.raises(ValueError):
        lr_schedule(1.0, 1.5, 0.75)


def test_sgd_plain_step(tiny_model):
    m = tiny_model.copy()
    g = {k: np.full_like(v, 0.25) for k, v in m.params.items()}
    sgd_step(m, g, 1.0, 0.0, {})
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], tiny_model.params[k] - 0.25)


def test_sgd_zero_gradient(tiny_model):
    m = tiny_model.copy()
    sgd_step(m, {k: np.zeros_like(v) for k, v in m.params.items()}, 0.1, 0.9, {})
    assert m.equal_params(tiny_model)


def test_sgd_two_step_unroll(rng, tiny_model):
    m = tiny_model.copy()
    g1 = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
    g2 = {k: rng.normal(size=v.shape) for k, v in m.params.items()}
    vel = {}
    sgd_step(m, g1, 0.05, 0.9, vel)
    sgd_step(m, g2, 0.02, 0.9, vel)
    for k, p0 in tiny_model.params.items():
        expect = p0 - 0.05 * g1[k] - 0.02 * (0.9 * g1[k] + g2[k])
        np.testing.assert_allclose(m.params[k], expect, atol=1e-15)


def test_sgd_group_rates():
    m = init_model(small_config(bottleneck=True), 3, seed=0)
    before = m.copy()
    sgd_step(m, {k: np.ones_like(v) for k, v in m.params.items()}, {"backbone": 1.0, "new": 2.0}, 0.0, {})
    for k in m.params:
        step = 2.0 if k.startswith(("cls.", "proj.")) else 1.0
        np.testing.assert_allclose(before.params[k] - m.params[k], step)


# -- evaluation ----------------------------------------------------------------

def _identity_model(M):
    cfg = EncoderConfig(input_dim=M, hidden_dims=(), feature_dim=M, bottleneck=False, classifier_bias=False)
    m = init_model(cfg, M, seed=0)
    m.params["proj.W"] = np.eye(M)
    m.params["proj.b"] = np.zeros(M)
    m.params["cls.W"] = np.eye(M)
    return m


def test_evaluate_examples():
    m = _identity_model(2)
    X = np.array([[1, 0], [1, 0], [0, 1], [1, 0], [0, 1], [1, 0.0]])
    y = np.array([0, 0, 1, 1, 1, 1])
    res = evaluate(m, Dataset(X, y, 2))
    assert res.per_class == [1.0, 0.5]
    assert res.mean_class_accuracy == 0.75
    assert res.accuracy == pytest.approx(4 / 6)
    assert evaluate(m, Dataset(X, np.argmax(X, 1), 2)).accuracy == 1.0
    assert evaluate(m, Dataset(X, 1 - np.argmax(X, 1), 2)).accuracy == 0.0


def test_evaluate_needs_labels(tiny_model):
    with pytest.raises(InvalidConfigError):
        evaluate(tiny_model, Dataset(np.zeros((2, 4)), [-1, -1], 3))


# -- pre-training --------------------------------------------------------------

def test_pretrain_separable_blobs():
    src = generate_shifted_pair(ShiftConfig(num_classes=3, seed=0)).source
    model, acc = pretrain_source(src, EncoderConfig(input_dim=4), HyperParams(seed=0))
    assert acc >= 0.95
    # a least-squares linear classifier agrees the data are easy
    A = np.hstack([src.features, np.ones((len(src), 1))])
    coef = np.linalg.lstsq(A, np.eye(3)[src.labels], rcond=None)[0]
    assert np.mean(np.argmax(A @ coef, 1) == src.labels) > 0.95


def test_pretrain_zero_epochs(pair):
    cfg = EncoderConfig(input_dim=4)
    hyper = HyperParams(epochs=0, seed=2)
    model, acc = pretrain_source(pair.source, cfg, hyper)
    assert model.equal_params(init_model(cfg, 4, seed=2))
    _, val = split_train_val(pair.source, 0.9, 2)
    assert acc == evaluate(model, val, Domain.SOURCE).accuracy


def test_pretrain_deterministic(pair):
    cfg = EncoderConfig(input_dim=4, hidden_dims=(8,))
    a = pretrain_source(pair.source, cfg, FAST)
    b = pretrain_source(pair.source, cfg, FAST)
    assert a[0].equal_params(b[0]) and a[1] == b[1]


# -- adaptation ----------------------------------------------------------------

def _ce_trace(report):
    return [r["CE"] for r in report.iteration_losses]


def test_lambda_zero_matches_source_only(pair, model):
    _, ref = train_source_only(model, pair.source, FAST)
    _, rep = train_uda(model, pair.source, pair.target, replace(FAST, lam=0.0))
    assert _ce_trace(rep) == _ce_trace(ref)
    assert [r["total"] for r in rep.iteration_losses] == _ce_trace(ref)


def test_all_filtered_matches_source_only(pair, model):
    _, ref = train_source_only(model, pair.source, FAST)
    m, rep = train_uda(model, pair.source, pair.target, replace(FAST, threshold=1 + 1e-9))
    assert _ce_trace(rep) == _ce_trace(ref)
    assert all(r["CDC_source_anchors"] == 0 and r["CDC_target_anchors"] == 0 for r in rep.iteration_losses)
    assert rep.retained_fraction == [0.0, 0.0]


def test_uda_deterministic(pair, model):
    lt = pair.labeled_target()
    a_m, a = train_uda(model, pair.source, pair.target, FAST, eval_target=lt)
    b_m, b = train_uda(model, pair.source, pair.target, FAST, eval_target=lt)
    assert a.to_json() == b.to_json()
    assert a_m.equal_params(b_m)


def test_uda_rejects_target_labels(pair, model):
    with pytest.raises(InvalidConfigError):
        train_uda(model, pair.source, pair.labeled_target(), FAST)


def test_uda_leaves_input_model(pair, model):
    before = model.copy()
    train_uda(model, pair.source, pair.target, FAST)
    assert model.equal_params(before)


def test_share_ce_batch(pair, model):
    _, rep = train_uda(model, pair.source, pair.target, replace(FAST, share_ce_batch=True))
    assert np.all(np.isfinite([r["total"] for r in rep.iteration_losses]))


def test_report_fields(pair, model):
    _, rep = train_uda(model, pair.source, pair.target, FAST, eval_target=pair.labeled_target())
    doc = json.loads(rep.to_json())
    for key in ("epochs", "losses", "retained_fraction", "target_accuracy", "per_class_accuracy", "seed", "config"):
        assert key in doc
    assert len(doc["losses"]) == 2 and doc["seed"] == 3
    assert 0 <= doc["target_accuracy"] <= 1
    assert all(np.isfinite(v) for e in doc["losses"] for v in e.values())


def test_sdf_freezes_classifier(pair):
    m = init_model(EncoderConfig(input_dim=4, hidden_dims=(8,), feature_dim=4, classifier_bias=False), 4, seed=0)
    prepared = prepare_source_free(m)
    out, rep = train_sdf(m, pair.target, FAST)
    assert out.params["cls.W"].tobytes() == prepared.params["cls.W"].tobytes()
    assert out.classifier_frozen and not out.has_bias
    assert not out.equal_params(prepared)


def test_sdf_zero_epochs(pair):
    m = prepare_source_free(init_model(EncoderConfig(input_dim=4, hidden_dims=(8,)), 4, seed=0))
    out, rep = train_sdf(m, pair.target, replace(FAST, epochs=0))
    assert out.equal_params(m) and rep.epochs == []


def test_sdf_rejects_labels(pair, model):
    with pytest.raises(InvalidConfigError):
        train_sdf(model, pair.labeled_target(), FAST)


@pytest.mark.slow
def test_pseudo_label_quality_trend():
    p = generate_shifted_pair(ShiftConfig(seed=0))
    hyper = HyperParams(seed=0)
    pre, _ = pretrain_source(p.source, EncoderConfig(input_dim=4), hyper)
    agree, kept = [], []

    def monitor(epoch, m, pl):
        agree.append(np.mean(pl.labels == p.target_labels))
        kept.append(pl.retained_fraction)

    train_uda(pre, p.source, p.target, hyper, monitor=monitor)
    assert np.all(np.diff(agree) >= -0.02)
    assert np.all(np.diff(kept) >= -0.02)
