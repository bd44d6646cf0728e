import math

import numpy as np
import pytest
import torch

from highratemos.data import kfold_split, load_manifest
from highratemos.encoders import ToyEncoder
from highratemos.errors import ConfigError, DivergenceError, ValidationError
from highratemos.features import FeatureConfig, FeatureExtractor
from highratemos.losses import LossConfig
from highratemos.model import ModelConfig
from highratemos.synthetic import make_synthetic
from highratemos.training import (AdamWState, EarlyStopping, TrainConfig, batch_loss, cross_validate,
                                  optimizer_step, predict, train)

SMALL_MODEL = ModelConfig.for_variant("M1", d_enc=8, d_sr=4, n_mels=20, n_mfcc=5, cnn_channels=4,
                                      blstm_hidden=8)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest, _ = make_synthetic(root, n_systems=4, per_system=3, seed=0, duration=0.3)
    recs = load_manifest(manifest)
    extractor = FeatureExtractor(FeatureConfig(n_mels=20, n_mfcc=5), ToyEncoder(dim=8))
    return recs, extractor


def small_cfg(**kw):
    base = dict(max_steps=30, validate_every=10, patience_steps=20, batch_size=4, model=SMALL_MODEL)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_gradient_leaves_exempt_params():
    p = {"w": torch.tensor([1.0, -2.0]), "b": torch.tensor([0.5])}
    optimizer_step(p, {"w": torch.zeros(2), "b": torch.zeros(1)}, AdamWState(), TrainConfig(), exempt={"b"})
    assert p["b"].item() == 0.5
    # decoupled decay still shrinks non-exempt weights
    torch.testing.assert_close(p["w"], torch.tensor([1.0, -2.0]) * (1 - 1e-3 * 1e-2))


def test_first_step_is_signed_lr():
    p = {"w": torch.tensor([1.0, 1.0, 1.0], dtype=torch.float64)}
    g = torch.tensor([0.3, -5.0, 1e-3], dtype=torch.float64)
    optimizer_step(p, {"w": g}, AdamWState(), TrainConfig(weight_decay=0.0))
    np.testing.assert_allclose(p["w"].numpy(), 1 - 1e-3 * np.sign(g.numpy()), atol=1e-7)


def adamw_oracle(w, grads, lr, wd, b1, b2, eps):
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    w = list(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            w[i] -= lr * wd * w[i]
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            w[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return w


def test_adamw_matches_closed_form():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(12)]
    cfg = TrainConfig(learning_rate=3e-2, weight_decay=0.1)
    p = {"w": torch.tensor(w0)}
    state = AdamWState()
    for g in grads:
        optimizer_step(p, {"w": torch.tensor(g)}, state, cfg)
    expected = adamw_oracle(w0, grads, 3e-2, 0.1, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p["w"].numpy(), expected, rtol=0, atol=1e-10)


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step({"w": torch.zeros(3)}, {"w": torch.zeros(2)}, AdamWState(), TrainConfig())


def run_stopper(values, every=100, patience=2000):
    stopper = EarlyStopping(patience)
    for i, v in enumerate(values, start=1):
        step = i * every
        stopper.update(step, v)
        if stopper.should_stop(step):
            return stopper.best_step, step
    return stopper.best_step, None


def test_early_stopping_peak():
    values = [0.1 * i for i in range(1, 7)] + [0.3] * 40
    assert run_stopper(values) == (600, 2600)


def test_early_stopping_ties_keep_first():
    assert run_stopper([0.5, 0.5, 0.5] + [0.1] * 30) == (100, 2100)


def test_early_stopping_never_plateaus():
    assert run_stopper([0.01 * i for i in range(50)]) == (5000, None)


def test_batch_loss_gradient_flows():
    preds = torch.tensor([1.0, 2.0, 3.5], dtype=torch.float64, requires_grad=True)
    loss = batch_loss(preds, [1.5, 2.0, 3.0], LossConfig(name="mse"))
    loss.backward()
    np.testing.assert_allclose(preds.grad.numpy(), 2 * np.array([-0.5, 0.0, 0.5]) / 3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(patience_steps=10, validate_every=100)


def test_training_is_deterministic(corpus):
    recs, ex = corpus
    tr, dev = recs[:9], recs[9:] + recs[:3]
    a, ha = train(tr, dev, small_cfg(), ex)
    b, hb = train(tr, dev, small_cfg(), ex)
    assert ha == hb
    assert a.step == ha.best_step
    for k in a.state:
        np.testing.assert_array_equal(a.state[k], b.state[k])
    pa, pb = predict(a, dev, ex), predict(b, dev, ex)
    assert pa == pb
    assert list(pa.entries) == [r.utterance_id for r in dev]


def test_predict_guards(corpus):
    recs, ex = corpus
    ckpt, _ = train(recs[:8], recs[8:], small_cfg(max_steps=10), ex)
    assert len(predict(ckpt, [], ex)) == 0
    other = FeatureExtractor(FeatureConfig(n_mels=20, n_mfcc=6), ToyEncoder(dim=8))
    with pytest.raises(ConfigError):
        predict(ckpt, recs, other)


def test_divergence_is_reported(corpus):
    recs, ex = corpus
    with pytest.raises(DivergenceError) as info:
        train(recs[:8], recs[8:], small_cfg(learning_rate=1e30, loss=LossConfig(name="mse")), ex)
    assert info.value.step >= 1


def test_empty_split_rejected(corpus):
    recs, ex = corpus
    with pytest.raises(ValidationError):
        train(recs, [], small_cfg(), ex)


def test_cross_validate_two_folds(corpus):
    recs, ex = corpus
    recs = kfold_split(recs, 2, seed=0)
    result = cross_validate(recs, small_cfg(max_steps=20), ex, k=2)
    assert len(result.checkpoints) == 2
    assert set(result.pooled.entries) == {r.utterance_id for r in recs}
    assert result.best_fold == int(np.argmax(result.dev_scores))
    with pytest.raises(ValidationError):
        cross_validate(recs, small_cfg(), ex, k=3)
