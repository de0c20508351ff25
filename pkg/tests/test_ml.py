import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poul import ml
from poul.ml import Hyperparams, ModelParams


def _loss_only(model, X, y):
    return ml.loss_and_grads(model, X, y)[0]


def _as64(model):
    return ModelParams(*(a.astype(np.float64) for a in model.arrays()), slice_index=model.slice_index)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    model = _as64(ml.init_model((7, 5, 3), seed=1))
    X = rng.normal(size=(6, 7))
    y = rng.integers(0, 3, size=6)
    _, g = ml.loss_and_grads(model, X, y)
    eps = 1e-6
    for name in ("w1", "b1", "w2", "b2"):
        arr = getattr(model, name)
        grad = getattr(g, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = _loss_only(model, X, y)
            arr[idx] = old - eps
            down = _loss_only(model, X, y)
            arr[idx] = old
            assert abs((up - down) / (2 * eps) - grad[idx]) < 1e-6, (name, idx)


def test_single_sgd_step_matches_hand_update():
    model = ml.init_model((4, 3, 2), seed=2)
    X = np.arange(8, dtype=np.float32).reshape(2, 4) / 8
    y = np.array([0, 1])
    hp = Hyperparams(batch_size=2, epochs=1, learning_rate=0.5, rng_seed=0)
    _, g = ml.loss_and_grads(model, X, y)
    trained = ml.train_sgd(model, (X, y), hp)
    lr = np.float32(0.5)
    for a, b, ga in zip(trained.arrays(), model.arrays(), g.arrays()):
        np.testing.assert_array_equal(a, b - lr * ga)


def test_training_is_deterministic(small_ds):
    hp = Hyperparams(batch_size=32, epochs=3, rng_seed=5)
    m0 = ml.init_model((small_ds.dim, 16, 2), seed=0)
    a = ml.train_sgd(m0, (small_ds.X_train, small_ds.y_train), hp)
    b = ml.train_sgd(m0, (small_ds.X_train, small_ds.y_train), hp)
    assert ml.canonical_bytes(a) == ml.canonical_bytes(b)
    c = ml.train_sgd(m0, (small_ds.X_train, small_ds.y_train), Hyperparams(32, 3, 0.1, 6))
    assert a != c


def test_training_does_not_mutate_input():
    m0 = ml.init_model((4, 3, 2))
    before = ml.canonical_bytes(m0)
    ml.train_sgd(m0, (np.ones((3, 4)), np.array([0, 1, 0])), Hyperparams(2, 2))
    assert ml.canonical_bytes(m0) == before


def test_zero_epochs_is_identity():
    m0 = ml.init_model((4, 3, 2))
    assert ml.train_sgd(m0, (np.ones((3, 4)), np.zeros(3, int)), Hyperparams(2, 0)) is m0


@given(seed=st.integers(0, 2**32), k=st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_canonical_bytes_round_trip(seed, k):
    m = ml.with_slice_index(ml.init_model((5, 4, 3), seed), k)
    blob = ml.canonical_bytes(m)
    assert len(blob) == 4 * m.n_params + 8
    assert ml.from_canonical_bytes(blob, (5, 4, 3)) == m


def test_default_model_size():
    assert ml.init_model().n_params * 4 == 308_744


def test_from_canonical_bytes_rejects_wrong_length():
    with pytest.raises(ValueError):
        ml.from_canonical_bytes(b"\0" * 10, (5, 4, 3))


def test_predict_ties_go_to_lowest_index():
    m = ml.init_model((3, 2, 3))
    m = ModelParams(m.w1, m.b1, np.zeros_like(m.w2), np.zeros_like(m.b2))
    p = ml.predict(m, np.ones(3))
    assert p.label == 0
    assert p.scores == pytest.approx((1 / 3,) * 3)


def test_shape_errors():
    m = ml.init_model((3, 2, 2))
    with pytest.raises(ValueError):
        ml.predict(m, np.ones(4))
    with pytest.raises(ValueError):
        ml.loss_and_grads(m, np.ones((2, 4)), np.zeros(2, int))
    with pytest.raises(ValueError):
        Hyperparams(batch_size=0)


def test_non_finite_loss_raises():
    m = ml.init_model((3, 2, 2))
    X = np.ones((4, 3), dtype=np.float32)
    X[1, 1] = np.nan
    with pytest.raises(ml.TrainingError):
        ml.train_sgd(m, (X, np.array([0, 1, 0, 1])), Hyperparams(4, 1))
