import math

import numpy as np
import pytest

from gatecap.data import Dataset, gen_synthetic, prepare_dataset
from gatecap.gradients import small_config
from gatecap.model import END, START, ModelConfig, ModelParams, init_params
from gatecap.optim import (
    NonFiniteGradient,
    RmsPropState,
    TrainConfig,
    batch_gradients,
    dropout_masks,
    fit,
    history_line,
    mean_loss,
    rmsprop_update,
    train,
    train_minibatch,
)


def _one_tensor(value):
    return ModelParams({"w": np.array(value, dtype=float)})


def test_train_config_validation():
    for bad in ({"dropout_p": 1.0}, {"rms_decay": 1.0}, {"clip_bound": 0}, {"learning_rate": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    tc = TrainConfig()
    assert (tc.batch_size, tc.epochs, tc.clip_bound, tc.dropout_p) == (100, 50, 5.0, 0.5)


def test_dropout_masks():
    cfg = small_config()
    none = dropout_masks(cfg, TrainConfig(dropout_p=0.0), 1, 4)
    np.testing.assert_array_equal(none.inputs, 1.0)
    np.testing.assert_array_equal(none.image, 1.0)
    half = dropout_masks(cfg, TrainConfig(dropout_p=0.5), 1, 4)
    assert half.inputs.shape == (4, 8) and half.image.shape == (10,)
    assert set(np.unique(half.inputs)) <= {0.0, 2.0}
    off = dropout_masks(cfg, TrainConfig(dropout_p=0.5, dropout_image=False), 1, 4)
    assert off.image is None


def test_dropout_keep_rate():
    cfg = ModelConfig(vocab_size=4, embed_dim=1000, hidden_dim=4, feature_dim=1)
    m = dropout_masks(cfg, TrainConfig(dropout_p=0.5), 42, 100)
    kept = np.count_nonzero(m.inputs) / m.inputs.size
    # binomial sd over 1e5 draws is ~0.0016
    assert abs(kept - 0.5) < 0.01


def test_rmsprop_formula():
    tc = TrainConfig(learning_rate=0.1, rms_decay=0.9, rms_eps=0.0)
    p = _one_tensor([0.0])
    st = RmsPropState.zeros_like(p)
    rmsprop_update(p, _one_tensor([1.0]), st, tc)
    assert st.cache["w"][0] == pytest.approx(0.1)
    # -0.1 / sqrt(0.1)
    assert p["w"][0] == pytest.approx(-0.31622776601683794, abs=1e-12)


def test_rmsprop_zero_gradient_and_symmetry():
    tc = TrainConfig(learning_rate=0.01, rms_decay=0.9)
    p = _one_tensor([1.0, 2.0])
    st = RmsPropState({"w": np.array([0.5, 0.25])})
    rmsprop_update(p, _one_tensor([0.0, 0.0]), st, tc)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])
    np.testing.assert_allclose(st.cache["w"], [0.45, 0.225])

    p = _one_tensor([0.0, 0.0])
    st = RmsPropState.zeros_like(p)
    rmsprop_update(p, _one_tensor([0.3, -0.3]), st, tc)
    assert p["w"][0] == -p["w"][1] != 0


def test_rmsprop_rejects_non_finite():
    p = _one_tensor([0.0])
    with pytest.raises(NonFiniteGradient, match="w"):
        rmsprop_update(p, _one_tensor([np.nan]), RmsPropState.zeros_like(p), TrainConfig())


def test_cache_stays_nonnegative(rng):
    p = _one_tensor(rng.normal(size=20))
    st = RmsPropState.zeros_like(p)
    tc = TrainConfig()
    for _ in range(50):
        rmsprop_update(p, _one_tensor(rng.normal(scale=10, size=20)), st, tc)
        assert np.all(st.cache["w"] >= 0)


def test_clipped_gradient_bound(tiny_model, monkeypatch):
    cfg, p = tiny_model
    seen = {}

    def capture(params, grads, state, train_cfg, lr=None):
        seen.update({k: v.copy() for k, v in grads.items()})

    monkeypatch.setattr("gatecap.optim.rmsprop_update", capture)
    tc = TrainConfig(clip_bound=5.0, l2_coeff=1e3, dropout_p=0.0)
    p = p.copy()
    for _, arr in p.items():
        arr *= 30  # large weights and a huge L2 term push gradients past the bound
    batch = [([START, 4, 5, END], np.ones(16))]
    raw = batch_gradients(p, batch, cfg, tc)[1]
    assert max(np.abs(v).max() for _, v in raw.items()) > 5
    train_minibatch(p, RmsPropState.zeros_like(p), batch, cfg, tc)
    assert max(np.abs(v).max() for v in seen.values()) <= 5.0
    assert any(np.abs(v).max() == 5.0 for v in seen.values())


def test_repeated_pair_batch_matches_single(tiny_model):
    cfg, p = tiny_model
    tc = TrainConfig(dropout_p=0.5)
    pair = ([START, 4, 9, 5, END], np.random.default_rng(0).normal(size=16))
    a, b = p.copy(), p.copy()
    sa, sb = RmsPropState.zeros_like(a), RmsPropState.zeros_like(b)
    la = train_minibatch(a, sa, [pair], cfg, tc, mask_seeds=[7])
    lb = train_minibatch(b, sb, [pair] * 3, cfg, tc, mask_seeds=[7] * 3)
    assert la == pytest.approx(lb, abs=1e-15)
    for name, arr in a.items():
        np.testing.assert_allclose(arr, b[name], atol=1e-15)


@pytest.mark.parametrize("V", [4, 25, 1000])
def test_zero_model_first_batch_loss(V):
    cfg = ModelConfig(vocab_size=V, embed_dim=4, hidden_dim=6, feature_dim=5)
    p = ModelParams.zeros(cfg)
    r = np.random.default_rng(V)
    batch = [([START, *r.integers(3, V, size=4).tolist(), END], r.normal(size=5)) for _ in range(8)]
    loss = train_minibatch(p, RmsPropState.zeros_like(p), batch, cfg, TrainConfig(dropout_p=0))
    assert abs(loss - math.log(V)) < 1e-9


def test_empty_batch_rejected(tiny_model):
    cfg, p = tiny_model
    with pytest.raises(ValueError):
        train_minibatch(p, RmsPropState.zeros_like(p), [], cfg, TrainConfig())


@pytest.fixture(scope="module")
def toy():
    rows, feats = gen_synthetic(30, 16, seed=5)
    groups = {}
    for i, t in rows:
        groups.setdefault(i.split("#")[0], []).append(t)
    ds, vocab = prepare_dataset(groups, feats, 5, 5, seed=0, min_count=1)
    cfg = ModelConfig(vocab_size=len(vocab), embed_dim=8, hidden_dim=12, feature_dim=16)
    return ds, cfg


def test_zero_epochs_returns_initial_params(toy):
    ds, cfg = toy
    params, history = train(ds, cfg, TrainConfig(epochs=0, seed=3))
    assert history == []
    assert params.equals(init_params(cfg, 3))


def test_training_is_deterministic_and_keeps_best(toy):
    ds, cfg = toy
    tc = TrainConfig(epochs=3, batch_size=16, learning_rate=3e-3, seed=1)
    p1, h1 = train(ds, cfg, tc)
    p2, h2 = train(ds, cfg, tc)
    assert h1 == h2
    assert p1.equals(p2)
    assert [history_line(r) for r in h1] == [history_line(r) for r in h2]
    best = min(r["dev_loss"] for r in h1)
    assert abs(mean_loss(p1, cfg, ds.dev_pairs()) - best) < 1e-12
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]


def test_lr_decay_per_epoch(toy):
    ds, cfg = toy
    st = fit(ds, cfg, TrainConfig(epochs=3, batch_size=64, lr_decay_per_epoch=0.5, learning_rate=1e-3))
    assert [r["lr"] for r in st.history] == [1e-3, 5e-4, 2.5e-4]


def test_resume_matches_uninterrupted(toy):
    ds, cfg = toy
    full = fit(ds, cfg, TrainConfig(epochs=4, batch_size=16, seed=2))
    part = fit(ds, cfg, TrainConfig(epochs=2, batch_size=16, seed=2))
    rest = fit(ds, cfg, TrainConfig(epochs=4, batch_size=16, seed=2), state=part)
    assert rest.history == full.history
    assert rest.params.equals(full.params)


def test_empty_split_is_fatal(toy):
    ds, cfg = toy
    with pytest.raises(ValueError):
        fit(Dataset(ds.train, [], []), cfg, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        fit(Dataset([], ds.dev, []), cfg, TrainConfig(epochs=1))
