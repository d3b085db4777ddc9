import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from habmap.forest import (
    ForestError,
    best_split,
    fit_forest,
    fit_tree,
    forest_from_bytes,
    forest_to_bytes,
    gini,
    load_forest,
    save_forest,
)

from oracles import brute_best_split


def test_gini_examples():
    assert gini([5, 5]) == pytest.approx(0.5)
    assert gini([10]) == 0.0
    assert gini([1, 1, 1, 1]) == pytest.approx(0.75)
    assert gini([2, 1, 1]) == pytest.approx(0.625)
    with pytest.raises(ForestError):
        gini([0, 0])


@given(hnp.arrays(np.int64, st.integers(1, 6), elements=st.integers(0, 50)))
def test_gini_bounds(counts):
    if counts.sum() == 0:
        return
    g = gini(counts)
    assert 0 <= g <= 1 - 1 / len(counts) + 1e-12


def test_best_split_simple():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    f, thr, dec = best_split(X, y, [0])
    assert (f, thr) == (0, 2.5)
    assert dec == pytest.approx(0.5)


def test_best_split_pure_or_constant():
    assert best_split(np.ones((4, 2)), np.array([0, 1, 0, 1]), [0, 1]) is None
    assert best_split(np.arange(4.0)[:, None], np.zeros(4, int), [0]) is None


@given(
    st.integers(0, 2**31 - 1),
    st.integers(2, 30),
    st.integers(1, 4),
    st.integers(2, 4),
)
def test_best_split_matches_brute_force(seed, n, d, K):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(n, d)).astype(float)
    y = rng.integers(0, K, n)
    got = best_split(X, y, range(d), K)
    want = brute_best_split(X, y, range(d))
    if want is None:
        assert got is None
    else:
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1])
        assert got[2] == pytest.approx(want[2])


def test_xor_depth_one_cannot_fit():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 5, dtype=float)
    y = np.array([0, 1, 1, 0] * 5)
    stump = fit_tree(X, y, max_depth=1)
    assert (stump.predict_proba(X).argmax(1) == y).mean() <= 0.75
    full = fit_tree(X + np.random.default_rng(0).normal(0, 0.01, X.shape), y)
    assert full.depth() >= 2


def test_tree_fits_training_data():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0.5).astype(int)
    t = fit_tree(X, y)
    assert (t.predict_proba(X).argmax(1) == y).all()


def test_forest_defaults_and_shape():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 9))
    y = rng.integers(0, 3, 40)
    m = fit_forest(X, y, seed=0)
    assert len(m.trees) == 100
    assert m.features_per_split == 3
    p = m.predict_proba(X)
    assert p.shape == (40, 3)
    np.testing.assert_allclose(p.sum(1), 1.0)
    assert m.predict_proba(X[0]).shape == (3,)
    with pytest.raises(ForestError):
        m.predict_proba(X[:, :4])


def test_forest_errors():
    with pytest.raises(ForestError):
        fit_forest(np.zeros((0, 2)), np.zeros(0, int))
    with pytest.raises(ForestError):
        fit_forest(np.zeros((3, 2)), np.zeros(3, int), n_trees=0)
    with pytest.raises(ForestError):
        fit_tree(np.zeros((3, 2)), np.zeros(3, int), features_per_split=3)


def test_forest_learns_separable():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 4))
    y = (X[:, 2] > 0).astype(int)
    m = fit_forest(X[:150], y[:150], n_trees=25, seed=1)
    assert (m.predict(X[150:]) == y[150:]).mean() > 0.9


def test_determinism_and_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 5))
    y = rng.integers(0, 4, 60)
    a = fit_forest(X, y, n_trees=10, seed=7)
    b = fit_forest(X, y, n_trees=10, seed=7)
    assert forest_to_bytes(a) == forest_to_bytes(b)
    assert forest_to_bytes(a) != forest_to_bytes(fit_forest(X, y, n_trees=10, seed=8))
    save_forest(tmp_path / "m.rfor", a)
    c = load_forest(tmp_path / "m.rfor")
    np.testing.assert_allclose(c.predict_proba(X), a.predict_proba(X), atol=1e-6)
    assert forest_to_bytes(c) == forest_to_bytes(a)
    assert [t.n_nodes for t in c.trees] == [t.n_nodes for t in a.trees]


def test_bad_magic():
    with pytest.raises(ForestError):
        forest_from_bytes(b"XXXX" + b"\0" * 40)


@given(st.integers(0, 1000), st.permutations([0, 1, 2]))
def test_label_permutation_equivariant(seed, perm):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    y = rng.integers(0, 3, 30)
    perm = np.array(perm)
    a = fit_forest(X, y, n_classes=3, n_trees=5, seed=seed)
    b = fit_forest(X, perm[y], n_classes=3, n_trees=5, seed=seed)
    np.testing.assert_allclose(b.predict_proba(X)[:, perm], a.predict_proba(X), atol=1e-12)
