import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgm.data import (
    DataError,
    NodeDataset,
    StratificationWarning,
    fold_ids,
    latent_graph_homophily,
    load_tabular,
    make_splits,
    read_schema,
    read_shape,
    select_features,
    standardize,
    synth_clusters,
    synth_shapes,
    write_shape,
    write_tabular,
)
from dgm.data import ridge_weights


def linear_oracle_accuracy(x, labels, classes):
    """Least-squares one-vs-rest classifier fitted and scored on the same rows."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    y = np.eye(classes)[labels]
    w, *_ = np.linalg.lstsq(xb, y, rcond=None)
    return float(np.mean(np.argmax(xb @ w, axis=1) == labels))


# ---------------------------------------------------------------- dataset


def test_dataset_validation():
    with pytest.raises(DataError):
        NodeDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(DataError):
        NodeDataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(DataError):
        NodeDataset(np.zeros((2, 2)), [0, 1], 2, train=[True, True], test=[True, False])
    ds = NodeDataset(np.zeros((2, 2)), [0, 1], 2)
    with pytest.raises(DataError):
        ds.features("m2")
    with pytest.raises(DataError):
        ds.features("m3")


# ------------------------------------------------------------- synthetic


def test_synth_clusters_shapes_and_determinism():
    a = synth_clusters(N=60, classes=3, d_node=5, d_graph=4, seed=3)
    b = synth_clusters(N=60, classes=3, d_node=5, d_graph=4, seed=3)
    assert a.modality1.shape == (60, 5) and a.modality2.shape == (60, 4)
    assert a.modality1.tobytes() == b.modality1.tobytes()
    assert a.modality2.tobytes() == b.modality2.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    np.testing.assert_array_equal(np.bincount(a.labels), [20, 20, 20])
    with pytest.raises(DataError):
        synth_clusters(N=8, classes=3)


def test_synth_clusters_separable_at_large_separation():
    ds = synth_clusters(N=300, classes=3, separation=10.0, noise=0.1, seed=0)
    assert linear_oracle_accuracy(ds.modality2, ds.labels, 3) >= 0.95


def test_synth_clusters_chance_at_zero_separation():
    accs = []
    for seed in range(5):
        ds = synth_clusters(N=300, classes=3, separation=0.0, noise=1.0, seed=seed)
        half = np.arange(300) < 150
        xb = np.hstack([ds.features("m1+m2"), np.ones((300, 1))])
        w, *_ = np.linalg.lstsq(xb[half], np.eye(3)[ds.labels[half]], rcond=None)
        accs.append(np.mean(np.argmax(xb[~half] @ w, axis=1) == ds.labels[~half]))
    assert abs(np.mean(accs) - 1 / 3) < 0.08


def test_latent_graph_is_same_class_relation():
    adj = latent_graph_homophily([0, 1, 0])
    np.testing.assert_array_equal(adj, [[False, False, True], [False, False, False], [True, False, False]])


def test_synth_shapes():
    a = synth_shapes(count=4, points_per_shape=64, seed=1)
    b = synth_shapes(count=4, points_per_shape=64, seed=1)
    for s, t in zip(a.shapes, b.shapes):
        assert s.points.tobytes() == t.points.tobytes()
        assert s.points.shape == (64, 3)
        assert set(s.parts.tolist()) <= set(a.part_sets[s.category])
    assert [s.category for s in a.shapes] == [0, 1, 0, 1]
    assert synth_shapes(count=1).shapes[0].points.shape == (2048, 3)


def test_nearest_centroid_separates_stacked_spheres():
    shapes = synth_shapes(count=2, points_per_shape=400, seed=2, categories=(1,))
    for s in shapes.shapes:
        centroids = np.stack([s.points[s.parts == p].mean(axis=0) for p in (2, 3)])
        d = ((s.points[:, None, :] - centroids[None]) ** 2).sum(-1)
        pred = np.array([2, 3])[np.argmin(d, axis=1)]
        assert np.all(pred == s.parts)


def test_shape_file_round_trip(tmp_path):
    shape = synth_shapes(count=1, points_per_shape=32, seed=0).shapes[0]
    path = tmp_path / "lamp_000.txt"
    write_shape(shape, path)
    back = read_shape(path)
    np.testing.assert_array_equal(back.points, shape.points)
    np.testing.assert_array_equal(back.parts, shape.parts)
    assert back.category == 0
    bad = tmp_path / "chair_000.txt"
    bad.write_text("0 0 0 1\n")
    with pytest.raises(DataError):
        read_shape(bad)


# --------------------------------------------------------------- tabular


TOY_CSV = "label,a,b,c\n0,1.5,2,3\n1,-1,0.25,4\n1,0,0,1e3\n"
TOY_SCHEMA = "label=label\nmodality1=a,b\nmodality2=c\n"


def test_load_toy_file(tmp_path):
    (tmp_path / "d.csv").write_text(TOY_CSV)
    (tmp_path / "d.schema").write_text(TOY_SCHEMA)
    ds = load_tabular(tmp_path / "d.csv", tmp_path / "d.schema")
    assert ds.num_nodes == 3 and ds.class_count == 2
    np.testing.assert_array_equal(ds.modality1, [[1.5, 2], [-1, 0.25], [0, 0]])
    np.testing.assert_array_equal(ds.modality2, [[3], [4], [1000]])
    np.testing.assert_array_equal(ds.labels, [0, 1, 1])


@pytest.mark.parametrize("text,match", [
    ("label,a,b,c\n0,1,nan,3\n", r"line 2, column 'b'"),
    ("label,a,b,c\n0,1,2,3\n1,x,2,3\n", r"line 3, column 'a'"),
    ("label,a,b,c\n0.5,1,2,3\n", "non-integer label"),
    ("label,a,c\n0,1,3\n", "missing columns"),
    ("", "empty file"),
    ("label,a,b,c\n", "no data rows"),
])
def test_load_errors(tmp_path, text, match):
    (tmp_path / "d.csv").write_text(text)
    (tmp_path / "d.schema").write_text(TOY_SCHEMA)
    with pytest.raises(DataError, match=match):
        load_tabular(tmp_path / "d.csv", tmp_path / "d.schema")


def test_schema_errors(tmp_path):
    (tmp_path / "s").write_text("label=y\n")
    with pytest.raises(DataError):
        read_schema(tmp_path / "s")
    (tmp_path / "s").write_text("label y\n")
    with pytest.raises(DataError):
        read_schema(tmp_path / "s")


def test_tabular_round_trip(tmp_path):
    ds = synth_clusters(N=30, classes=3, d_node=3, d_graph=2, seed=4)
    schema = write_tabular(ds, tmp_path / "x.csv", tmp_path / "x.schema")
    back = load_tabular(tmp_path / "x.csv", tmp_path / "x.schema")
    assert read_schema(tmp_path / "x.schema") == schema
    np.testing.assert_array_equal(back.modality1, ds.modality1)
    np.testing.assert_array_equal(back.modality2, ds.modality2)
    np.testing.assert_array_equal(back.labels, ds.labels)


# ---------------------------------------------------------- preprocessing


def test_standardize_uses_training_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(5, 3, (50, 3))
    x[:, 2] = 7.0
    train = np.arange(50) < 40
    ds = NodeDataset(x, np.zeros(50, int), 1, train=train, test=~train)
    out = standardize(ds)
    assert out.standardized
    np.testing.assert_allclose(out.modality1[train, :2].mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(out.modality1[train, :2].std(axis=0), 1, atol=1e-9)
    np.testing.assert_array_equal(out.modality1[:, 2], 0.0)
    mu, sd = x[train, 0].mean(), x[train, 0].std()
    np.testing.assert_allclose(out.modality1[~train, 0], (x[~train, 0] - mu) / sd)
    with pytest.raises(DataError):
        standardize(NodeDataset(x, np.zeros(50, int), 1))


def test_standardize_selected_modalities():
    ds = synth_clusters(N=30, seed=0).with_masks(train=np.ones(30, bool))
    out = standardize(ds, modalities=("modality1",))
    np.testing.assert_array_equal(out.modality2, ds.modality2)
    assert not np.array_equal(out.modality1, ds.modality1)


def test_select_features_identity_and_errors():
    ds = synth_clusters(N=30, d_node=4, d_graph=2, seed=0).with_masks(train=np.ones(30, bool))
    same = select_features(ds, target_dim=4)
    np.testing.assert_array_equal(same.modality1, ds.modality1)
    assert same.selected["modality1"] == [0, 1, 2, 3]
    with pytest.raises(DataError):
        select_features(ds, target_dim=0)


def test_select_features_finds_informative_columns():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 200)
        x = rng.standard_normal((200, 30))
        x[:, 7] += 5.0 * labels
        x[:, 19] -= 5.0 * labels
        train = np.arange(200) < 160
        ds = NodeDataset(x, labels, 2, train=train, test=~train)
        out = select_features(ds, target_dim=2)
        hits += out.selected["modality1"] == [7, 19]
    assert hits / 20 >= 0.95


def test_select_features_ignores_test_rows():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 100)
    x = rng.standard_normal((100, 6))
    train = np.arange(100) < 80
    ds = NodeDataset(x, labels, 2, train=train, test=~train)
    a = select_features(ds, 3).selected
    x2 = x.copy()
    x2[~train] = rng.standard_normal((20, 6)) * 100
    b = select_features(NodeDataset(x2, labels, 2, train=train, test=~train), 3).selected
    assert a == b


def test_ridge_weights_shape():
    w = ridge_weights(np.random.default_rng(0).standard_normal((20, 4)), np.arange(20) % 3, 3)
    assert w.shape == (4, 3)


# ------------------------------------------------------------------ splits


def test_split_sizes():
    ds = synth_clusters(N=100, classes=2, seed=0)
    t = make_splits(ds, "transductive", seed=0)
    assert t["train"].sum() == 90 and t["test"].sum() == 90 // 9
    i = make_splits(ds, "inductive", seed=0)
    assert (i["train"].sum(), i["val"].sum(), i["unseen"].sum()) == (80, 10, 10)
    for masks in (t, i):
        stacked = np.stack(list(masks.values())).astype(int)
        np.testing.assert_array_equal(stacked.sum(axis=0), np.ones(100))
    with pytest.raises(DataError):
        make_splits(ds, "random")


@given(st.lists(st.integers(10, 40), min_size=2, max_size=4), st.integers(0, 1000))
def test_folds_stratified(sizes, seed):
    labels = np.random.default_rng(seed).permutation(np.repeat(np.arange(len(sizes)), sizes))
    ids = fold_ids(labels, 10, seed)
    assert set(np.unique(ids).tolist()) == set(range(10))
    assert np.bincount(ids).max() - np.bincount(ids).min() <= 1
    for c in range(len(sizes)):
        per_fold = np.bincount(ids[labels == c], minlength=10)
        assert per_fold.max() - per_fold.min() <= 1


def test_split_class_proportions_within_one_node():
    labels = np.repeat([0, 1, 2], [50, 30, 20])
    ds = NodeDataset(np.zeros((100, 1)), labels, 3)
    masks = make_splits(ds, "inductive", seed=3)
    for name, m in masks.items():
        for c in range(3):
            expected = np.mean(labels == c) * m.sum()
            assert abs(np.sum(labels[m] == c) - expected) <= 1.0


def test_fold_fallback_warns():
    labels = np.array([0] * 20 + [1] * 3)
    with pytest.warns(StratificationWarning):
        ids = fold_ids(labels, 10, 0)
    assert np.bincount(ids).min() >= 2
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fold_ids(np.repeat([0, 1], 10), 10, 0)
