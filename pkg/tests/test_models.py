import numpy as np
import pytest

from flowguard.dataset import Dataset, shifted_gaussian_set, train_test_split
from flowguard.models import (
    FeatureMismatch,
    ModelError,
    ModelKind,
    evaluate,
    load_model,
    predict_proba,
    save_model,
    train,
)
from flowguard.models.serialize import ModelFormatError, dumps, loads
from flowguard.models.trees import best_gini_split, grow_tree

from oracles import exhaustive_best_split

FAST_HP = {
    "mlp": {"hidden": 8, "epochs": 5},
    "lstm": {"units": 4, "layers": 1, "epochs": 3},
    "bilstm": {"units": 4, "epochs": 3},
    "etrees": {"n_trees": 10},
}


def small(seed=0, n=60):
    ds, _ = shifted_gaussian_set(n_per_class=n, n_informative=3, n_noise=2, seed=seed)
    return ds


def separated(n=150, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n)
    X = rng.standard_normal((2 * n, 4)) + 3.0 * y[:, None] * np.array([1, 1, 0, 0])
    return Dataset(("a", "b", "c", "d"), X, y)


def test_gnb_symmetric_example():
    X = np.array([[-1.5], [-0.5], [0.5], [1.5]])
    ds = Dataset(("x",), X, np.array([0, 0, 1, 1]))
    m = train("gnb", ds)
    # standardized class means sit at -+2/sqrt(5) with equal variances
    assert m.params["mean"][:, 0] == pytest.approx([-2 / np.sqrt(5), 2 / np.sqrt(5)])
    assert predict_proba(m, np.array([[0.0]]))[0] == pytest.approx(0.5)
    assert predict_proba(m, np.array([[3.0]]))[0] > 0.99


def test_gnb_point_mass_classes_use_the_variance_floor():
    ds = Dataset(("x",), np.array([[-1.0], [-1.0], [1.0], [1.0]]), np.array([0, 0, 1, 1]))
    m = train("gnb", ds)
    # the data already has mean 0 and std 1, so standardized means are the raw ones
    assert m.params["mean"][:, 0].tolist() == [-1.0, 1.0]
    assert m.params["var"][:, 0].tolist() == [1e-9, 1e-9]
    assert predict_proba(m, np.array([[0.0]]))[0] == 0.5


def test_lr_without_iterations_is_uninformative():
    m = train("lr", small(), {"max_iter": 0})
    assert np.all(predict_proba(m, small(1).X) == 0.5)


def test_lr_learns_shifted_gaussians():
    tr, te = train_test_split(separated(), 0.3, seed=0)
    m = train("lr", tr)
    assert evaluate(m, te).accuracy > 0.9
    # the two noise columns get much smaller weights than the shifted ones
    assert np.abs(m.params["w"][2:]).max() < 0.5 * np.abs(m.params["w"][:2]).min()


def test_cart_root_split_matches_exhaustive_search():
    rng = np.random.default_rng(5)
    for _ in range(30):
        X = rng.integers(0, 6, (25, 3)).astype(float)
        y = rng.integers(0, 2, 25)
        if y.min() == y.max():
            continue
        j, thr, imp = best_gini_split(X, y)
        rj, rthr, rimp = exhaustive_best_split(X, y)
        assert (j, thr) == (rj, rthr)
        assert imp == pytest.approx(float(rimp), abs=1e-12)


def test_tree_reaches_purity_when_deep_enough():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 2))
    y = (X[:, 0] * X[:, 1] > 0).astype(int)
    t = grow_tree(X, y, max_depth=20)
    assert np.array_equal(t.predict_proba(X) >= 0.5, y == 1)
    assert grow_tree(X, y, max_depth=3).depth() <= 3


def test_dtree_perfect_separation():
    ds = Dataset(("a", "b"), np.array([[0.0, 5], [1, 3], [2, 9], [10, 1], [11, 4], [12, 0]]), np.array([0, 0, 0, 1, 1, 1]))
    m = train("dtree", ds)
    assert evaluate(m, ds).accuracy == 1.0
    assert m.params["feature"][0] == 0 and m.params["feature"][1:].tolist() == [-1, -1]


def test_extra_trees_is_seeded_ensemble():
    ds = separated()
    a = train("etrees", ds, {"n_trees": 20}, seed=1)
    b = train("etrees", ds, {"n_trees": 20}, seed=1)
    c = train("etrees", ds, {"n_trees": 20}, seed=2)
    assert dumps(a) == dumps(b) and dumps(a) != dumps(c)
    assert a.params["tree_offsets"].size == 21
    assert evaluate(a, ds).accuracy > 0.9


@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_serialization_round_trip(kind, tmp_path):
    ds = small()
    m = train(kind, ds, FAST_HP.get(kind), seed=3)
    path = tmp_path / f"{kind}.model"
    n = save_model(m, path)
    assert path.stat().st_size == n
    back = load_model(path)
    assert back.kind == m.kind and back.feature_names == m.feature_names
    assert np.array_equal(predict_proba(back, ds), predict_proba(m, ds))
    # retraining on the same data and seed writes the same bytes
    assert dumps(train(kind, ds, FAST_HP.get(kind), seed=3)) == path.read_bytes()


def test_corrupt_model_files():
    blob = dumps(train("gnb", small()))
    with pytest.raises(ModelFormatError, match="magic"):
        loads(b"X" + blob[1:])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(ModelFormatError, match="checksum"):
        loads(bytes(flipped))
    with pytest.raises(ModelFormatError):
        loads(blob[:5])


def test_feature_mismatch_names_the_columns():
    ds = small()
    m = train("gnb", ds)
    names = list(ds.feature_names)
    names[0] = "bogus"
    with pytest.raises(FeatureMismatch, match="bogus") as err:
        predict_proba(m, ds.X, names)
    assert ds.feature_names[0] in str(err.value)
    with pytest.raises(FeatureMismatch):
        predict_proba(m, ds.X[:, :-1])


def test_training_errors():
    ds = small()
    one_class = Dataset(ds.feature_names, ds.X[ds.y == 0], ds.y[ds.y == 0])
    with pytest.raises(ModelError, match="both classes"):
        train("dtree", one_class)
    with pytest.raises(ModelError, match="unknown hyperparameters"):
        train("dtree", ds, {"depth": 3})
    with pytest.raises(ValueError):
        train("svm", ds)


@pytest.mark.parametrize("kind", ["gnb", "dtree"])
def test_predictions_invariant_to_positive_rescaling(kind):
    ds = small(seed=7)
    scale = np.linspace(0.01, 1000, ds.X.shape[1])
    shifted = Dataset(ds.feature_names, ds.X * scale + 17.0, ds.y)
    a = train(kind, ds).predict(ds.X)
    b = train(kind, shifted).predict(shifted.X)
    assert np.array_equal(a, b)


def test_neural_runs_the_full_epoch_budget():
    seen = []
    m = train("bilstm", small(), {"units": 4, "epochs": 50}, on_epoch=lambda e, loss: seen.append(e))
    assert m.meta["epochs"] == 50 and seen == list(range(1, 51))
    assert len(m.meta["loss_history"]) == 50
    assert isinstance(m.meta["smoothed_loss_violations"], list)
    assert m.meta["loss_history"][-1] < m.meta["loss_history"][0]


def test_mlp_early_stopping_is_recorded():
    m = train("mlp", small(), {"hidden": 4, "epochs": 300, "tol": 10.0, "patience": 2})
    # epoch 1 sets the best loss; epochs 2 and 3 fail to beat it by tol
    assert m.meta["stopped_early"] and m.meta["epochs"] == 3


@pytest.mark.parametrize("kind", ["mlp", "lstm", "bilstm"])
def test_smoothed_training_loss_never_rises_on_the_corpus(kind):
    from flowguard.pipeline import segment_dataset
    from flowguard.traffic import build_corpus

    ds = segment_dataset(build_corpus(300, 300, seed=5), window_s=None)
    m = train(kind, ds)
    assert m.meta["smoothed_loss_violations"] == []
