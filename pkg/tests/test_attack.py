import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poolleak.attack import (
    AttackDataset,
    MLPSpec,
    MIAExperiment,
    build_attack_dataset,
    default_space,
    evaluate,
    grid_search,
    kfold_indices,
    mlp_train,
    split_dataset,
    split_indices,
)
from poolleak.data import make_synthetic, make_train_query
from poolleak.engine import build_custom_cnn
from poolleak.errors import DegenerateInput, FormatError, InsufficientInputs, TooFewRows, ValidationError
from poolleak.harness import CollectionProtocol, SurrogateChannel
from poolleak.trainer import DPConfig, TrainConfig

from test_harness import ascending, line_pool_model


def line_pools(classes, per_class, width=12):
    """Class c inputs ascend over the first 2 + c cells, so update counts grow with c."""
    rng = np.random.default_rng(0)
    pools = {}
    for c in range(classes):
        items = []
        for _ in range(per_class):
            row = np.full(width, -1.0, np.float32) - rng.random(width).astype(np.float32)
            row[: 2 + c] = np.arange(2 + c)
            items.append(row.reshape(1, 1, width))
        pools[c] = items
    return line_pool_model(width), pools


def test_dataset_cardinality():
    model, pools = line_pools(2, 3)
    ds = build_attack_dataset(model, pools, 2, 3, 2, SurrogateChannel(), np.random.default_rng(0))
    assert ds.rows.shape == (4, 2) and sorted(ds.labels.tolist()) == [0, 0, 1, 1]
    assert ds.draws.shape == (4, 2)
    assert all(len(set(d)) == 2 for d in ds.draws.tolist())


@given(st.integers(2, 4), st.integers(1, 3), st.integers(1, 4))
def test_cardinality_law(classes, P, M):
    model, pools = line_pools(classes, 3)
    ds = build_attack_dataset(model, pools, P, 2, M, SurrogateChannel(), np.random.default_rng(M))
    assert len(ds) == classes * M and ds.P == P
    assert np.bincount(ds.labels).tolist() == [M] * classes


@pytest.mark.slow
def test_paper_scale_cardinality():
    model, pools = line_pools(10, 100)
    ds = build_attack_dataset(model, pools, 100, 1, 1000, SurrogateChannel(noise_std_ns=0), np.random.default_rng(0))
    assert ds.rows.shape == (10_000, 100)


def test_noiseless_rows_identical_for_fixed_inputs():
    model, pools = line_pools(3, 2)
    ds = build_attack_dataset(model, pools, 2, 4, 5, SurrogateChannel(noise_std_ns=0), np.random.default_rng(1))
    for c in range(3):
        rows = {tuple(sorted(r)) for r in ds.rows[ds.labels == c].tolist()}
        assert len(rows) == 1


def test_dataset_insufficient():
    model, pools = line_pools(2, 1)
    with pytest.raises(InsufficientInputs):
        build_attack_dataset(model, pools, 2, 1, 1, SurrogateChannel(), np.random.default_rng(0))


def test_save_load_roundtrip(tmp_path):
    model, pools = line_pools(3, 2)
    ds = build_attack_dataset(model, pools, 2, 3, 2, SurrogateChannel(seed=5), np.random.default_rng(0))
    ds.save(tmp_path / "a.csv")
    back = AttackDataset.load(tmp_path / "a.csv")
    assert np.array_equal(back.rows, ds.rows) and np.array_equal(back.labels, ds.labels)
    assert back.meta["channel"]["kind"] == "surrogate" and back.meta["M"] == 2
    (tmp_path / "b.csv").write_text("0,1,2\n")
    with pytest.raises(FormatError):
        AttackDataset.load(tmp_path / "b.csv")


# -------------------------------------------------------------------- split


def test_split_examples():
    labels = np.repeat(np.arange(3), 10)
    tr, te = split_indices(labels, 0.8, 7)
    assert np.bincount(labels[tr]).tolist() == [8, 8, 8] and np.bincount(labels[te]).tolist() == [2, 2, 2]
    tr2, te2 = split_indices(labels, 0.8, 7)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    with pytest.raises(TooFewRows):
        split_indices([0, 0, 1], 0.5, 0)
    with pytest.raises(ValidationError):
        split_indices(labels, 1.0, 0)


@given(st.lists(st.integers(2, 30), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_stratified_disjoint(sizes, frac, seed):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    tr, te = split_indices(labels, frac, seed)
    assert set(tr).isdisjoint(te) and sorted(np.concatenate([tr, te]).tolist()) == list(range(labels.size))
    for c, n in enumerate(sizes):
        assert abs(int((labels[tr] == c).sum()) - frac * n) <= 1


def test_split_dataset_keeps_rows():
    ds = AttackDataset(np.arange(20.0).reshape(10, 2), [0] * 5 + [1] * 5)
    a, b = split_dataset(ds, 0.6, 0)
    assert len(a) + len(b) == 10 and set(a.rows[:, 0]).isdisjoint(b.rows[:, 0])


def test_kfold_partition():
    labels = np.repeat(np.arange(4), 13)
    folds = kfold_indices(labels, 10, 0)
    flat = np.concatenate(folds)
    assert sorted(flat.tolist()) == list(range(labels.size))
    assert max(map(len, folds)) - min(map(len, folds)) <= 4


# ---------------------------------------------------------------------- MLP


def blobs(n_per, classes=2, dim=5, sep=4.0, seed=0):
    rng = np.random.default_rng(seed)
    rows = np.concatenate([rng.standard_normal((n_per, dim)) + sep * c for c in range(classes)])
    return AttackDataset(rows, np.repeat(np.arange(classes), n_per))


def test_mlp_separable():
    ds = blobs(40)
    net = mlp_train(ds, MLPSpec(epochs=50))
    assert evaluate(net, ds)[0] == 1.0


def test_mlp_shuffled_labels_chance():
    rng = np.random.default_rng(1)
    ds = AttackDataset(rng.standard_normal((5000, 10)), rng.integers(0, 10, 5000))
    tr, te = split_dataset(ds, 0.8, 0)
    acc = evaluate(mlp_train(tr, MLPSpec(epochs=20)), te)[0]
    assert abs(acc - 0.1) <= 0.05


def test_mlp_deterministic_and_standardization():
    ds = blobs(30, classes=3)
    a, b = mlp_train(ds, MLPSpec(epochs=20, seed=4)), mlp_train(ds, MLPSpec(epochs=20, seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert np.array_equal(a.predict(ds.rows), b.predict(ds.rows))
    z = a.standardize(ds.rows)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
    # test rows reuse the train statistics, so standardizing twice is stable
    test = blobs(5, classes=3, seed=9).rows
    assert np.array_equal(a.standardize(test), a.standardize(test))


def test_mlp_zero_variance_feature_dropped(caplog):
    ds = blobs(20)
    ds.rows[:, 2] = 3.0
    net = mlp_train(ds, MLPSpec(epochs=10))
    assert net.keep.tolist() == [True, True, False, True, True]
    assert "zero-variance" in caplog.text
    with pytest.raises(DegenerateInput):
        mlp_train(AttackDataset(np.zeros((4, 2)), [0, 1, 0, 1]), MLPSpec())
    with pytest.raises(DegenerateInput):
        mlp_train(blobs(5).subset(range(5)), MLPSpec())


def test_mlp_spec_validation():
    with pytest.raises(ValidationError):
        MLPSpec(activation="gelu")
    with pytest.raises(ValidationError):
        MLPSpec(learning_rate=0)
    assert len(default_space()) == 8


@pytest.mark.parametrize("act", ["relu", "tanh", "logistic"])
def test_activations_learn(act):
    ds = blobs(30, classes=3)
    assert evaluate(mlp_train(ds, MLPSpec((16,), act, 0.05, 100)), ds)[0] >= 0.95


def test_evaluate_matrices():
    ds = blobs(10, classes=3)
    net = mlp_train(ds, MLPSpec(learning_rate=0.05, epochs=200))
    acc, cm = evaluate(net, ds)
    assert acc == 1.0 and np.array_equal(cm.counts, np.diag([10, 10, 10]))
    net.biases[-1] = np.array([50.0, 0, 0])
    net.weights[-1] = np.zeros_like(net.weights[-1])
    acc, cm = evaluate(net, ds)
    assert np.count_nonzero(cm.counts.sum(axis=0)) == 1 and acc == pytest.approx(1 / 3)
    assert acc == np.trace(cm.counts) / cm.counts.sum()
    assert cm.counts.sum(axis=1).tolist() == [10, 10, 10]


def test_grid_search():
    ds = blobs(20, classes=3)
    one = [MLPSpec(epochs=5)]
    assert grid_search(ds, one, K=10)[0] == one[0]
    sane, crippled = MLPSpec(epochs=30), MLPSpec(learning_rate=1e3, epochs=30)
    best, scores = grid_search(ds, [crippled, sane], K=10)
    assert best == sane and scores[1] > scores[0]
    # equal specs tie; the earliest wins
    best, scores = grid_search(ds, [MLPSpec(epochs=10, seed=3), MLPSpec(epochs=10, seed=3)], K=4)
    assert scores[0] == scores[1] and best is not None
    with pytest.raises(ValidationError):
        grid_search(ds, one, K=1)
    with pytest.raises(ValidationError):
        grid_search(ds, [], K=2)


def test_grid_search_crippled_on_timing_data():
    model = build_custom_cnn((3, 16, 16), 10, 0)
    data = make_synthetic(10, seed=0)
    ds = build_attack_dataset(model, data.by_class(), 10, 20, 10, SurrogateChannel(seed=1), np.random.default_rng(0))
    sane, crippled = MLPSpec(epochs=100), MLPSpec(learning_rate=1e3, epochs=100)
    best, scores = grid_search(ds, [crippled, sane], K=5)
    assert best == sane and scores[1] >= scores[0]


# ---------------------------------------------------------------------- MIA


def small_mia(variant="naive", **kw):
    T, Q = make_train_query(4, 4, class_count=3, shape=(3, 16, 16), seed=0)
    return MIAExperiment(T, Q, TrainConfig(0.05, 2, 16, 0), DPConfig(True, 1.0, 0.5),
                         CollectionProtocol(5, 2, 4, 0), SurrogateChannel(seed=0),
                         variant=variant, space=[MLPSpec(epochs=50)], K=2, **kw)


def test_mia_constant_time_has_no_gap():
    res = small_mia("ct").run()
    assert res.acc_S1 == res.acc_S2
    assert 0 <= res.acc_S1 <= 1


def test_mia_shape_and_sweep():
    exp = small_mia()
    res = exp.run()
    assert set(res.to_dict()) == {"acc_S1", "acc_S2", "gap", "details"}
    assert res.gap == res.acc_S1 - res.acc_S2
    sw = exp.sweep([0.5])
    assert sw.ratios == [0.5] and len(sw.accuracies) == 1 and sw.baseline == res.acc_S1
    with pytest.raises(ValidationError):
        exp.sweep([1.0])


def test_mia_options_validated():
    with pytest.raises(ValidationError):
        small_mia(retrain_mode="warm")
    with pytest.raises(ValidationError):
        small_mia(model2_init="other")


def test_mia_deterministic():
    a, b = small_mia().run(), small_mia().run()
    assert (a.acc_S1, a.acc_S2) == (b.acc_S1, b.acc_S2)
