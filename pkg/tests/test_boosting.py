import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scd2te import boosting as B
from scd2te.errors import InvalidArgumentError


def state(residuals, idx=None):
    return B.NodeBuildState.from_residuals(np.asarray(residuals, dtype=float), idx)


def leaf_quadratic(r, xi, w):
    return np.sum((r - w) ** 2) + 0.5 * xi * w * w


def brute_minimizer(r, xi, lo=-20.0, hi=20.0):
    """Grid scan, then bisection on the sign of symmetric differences.

    Uses function values only; ternary search on values alone stalls near
    sqrt(machine eps) because the quadratic is flat at its minimum.
    """
    grid = np.linspace(lo, hi, 4001)
    vals = np.array([leaf_quadratic(r, xi, w) for w in grid])
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    delta = 1e-3
    for _ in range(200):
        m = 0.5 * (a + b)
        if leaf_quadratic(r, xi, m + delta) >= leaf_quadratic(r, xi, m - delta):
            b = m
        else:
            a = m
        if b - a < 1e-13:
            break
    return 0.5 * (a + b)


def exhaustive_split(X, r, idx, xi, zeta, msl):
    """Every (feature, midpoint) candidate with gains from direct sums."""
    best = None
    h = xi / 2
    n = len(idx)
    G = r[idx].sum()
    for f in range(X.shape[1]):
        vals = np.unique(X[idx, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            t = lo + (hi - lo) / 2
            left = idx[X[idx, f] <= t]
            right = idx[X[idx, f] > t]
            if len(left) < msl or len(right) < msl:
                continue
            gl, gr = r[left].sum(), r[right].sum()
            gain = gl ** 2 / (len(left) + h) + gr ** 2 / (len(right) + h) - G ** 2 / (n + h) - zeta
            if gain > 0 and (best is None or gain > best[2] + 1e-12):
                best = (f, t, gain)
    return best


def oracle_tree(X, r, idx, depth, cfg):
    """Nested (feature, threshold, left, right) or leaf value."""
    split = None
    if depth < cfg.max_depth and len(idx) >= 2 * cfg.min_samples_leaf:
        split = exhaustive_split(X, r, idx, cfg.xi, cfg.zeta, cfg.min_samples_leaf)
    if split is None:
        return r[idx].sum() / (len(idx) + cfg.xi / 2)
    f, t, _ = split
    return (f, t, oracle_tree(X, r, idx[X[idx, f] <= t], depth + 1, cfg),
            oracle_tree(X, r, idx[X[idx, f] > t], depth + 1, cfg))


def as_nested(tree, i=0):
    if tree.left[i] < 0:
        return float(tree.value[i])
    return (int(tree.feature[i]), float(tree.threshold[i]),
            as_nested(tree, tree.left[i]), as_nested(tree, tree.right[i]))


def same_structure(a, b):
    if isinstance(a, tuple) != isinstance(b, tuple):
        return False
    if not isinstance(a, tuple):
        return abs(a - b) <= 1e-12
    return a[0] == b[0] and a[1] == b[1] and same_structure(a[2], b[2]) and same_structure(a[3], b[3])


# -- leaf weight and loss -------------------------------------------------------

def test_leaf_weight_examples():
    assert B.leaf_weight(state([2.0, 4.0]), 0.0) == 3.0
    assert B.leaf_weight(state([1.0]), 2.0) == 0.5
    assert B.leaf_weight(state([0.0, 0.0, 0.0]), 3.7) == 0.0


def test_leaf_weight_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        r = rng.normal(size=rng.integers(1, 20)) * 3
        xi = rng.uniform(0, 5)
        assert B.leaf_weight(state(r), xi) == pytest.approx(brute_minimizer(r, xi), abs=1e-8)


def test_leaf_weight_empty():
    with pytest.raises(InvalidArgumentError):
        B.leaf_weight(state([1.0, 2.0], np.array([], dtype=int)), 1.0)
    with pytest.raises(InvalidArgumentError):
        B.node_loss(state([1.0], np.array([], dtype=int)), 1.0)


def test_node_loss_examples():
    assert B.node_loss(state([1.0, 1.0]), 0.0) == -2.0
    assert B.node_loss(state([0.0, 0.0]), 1.0) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = rng.normal(size=8)
        xi = rng.uniform(0, 3)
        w = B.leaf_weight(state(r), xi)
        assert B.node_loss(state(r), xi) == pytest.approx(
            leaf_quadratic(r, xi, w) - np.sum(r ** 2), abs=1e-9)


def test_state_sums_match_members():
    rng = np.random.default_rng(2)
    r = rng.normal(size=30)
    idx = rng.choice(30, 11, replace=False)
    s = state(r, idx)
    assert s.grad_sum == pytest.approx(r[idx].sum(), abs=1e-9)
    assert s.hess_sum == 11


# -- split gain ---------------------------------------------------------------------

def test_split_gain_examples():
    r = np.array([-1.0, -1.0, 1.0, 1.0])
    p, lft, rgt = state(r), state(r, [0, 1]), state(r, [2, 3])
    assert B.split_gain(p, lft, rgt, 0.0, 0.0) == 4.0
    h = np.full(4, 0.7)
    assert B.split_gain(state(h), state(h, [0, 1]), state(h, [2, 3]), 0.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert B.split_gain(p, lft, rgt, 1.0, np.inf) < 0


def test_split_gain_rejects_non_partition():
    r = np.arange(4.0)
    with pytest.raises(InvalidArgumentError):
        B.split_gain(state(r), state(r, [0, 1]), state(r, [1, 2, 3]), 1.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        B.split_gain(state(r), state(r, [0]), state(r, [2, 3]), 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.floats(0, 4), st.floats(0, 2),
       st.data())
def test_split_gain_additivity(values, xi, zeta, data):
    r = np.array(values)
    n = len(r)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    if mask.all() or not mask.any():
        return
    idx = np.arange(n)
    p, lft, rgt = state(r), state(r, idx[mask]), state(r, idx[~mask])
    gain = B.split_gain(p, lft, rgt, xi, zeta)
    diff = B.node_loss(p, xi) - B.node_loss(lft, xi) - B.node_loss(rgt, xi)
    assert gain + zeta == pytest.approx(diff, abs=1e-9)


# -- split search and trees -----------------------------------------------------------

def test_find_best_split_example():
    s = B.SampleSet(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 0.0, 5.0, 5.0]))
    cfg = B.EnsembleConfig(xi=0.0, zeta=0.0, min_samples_leaf=1)
    split = B.find_best_split(s, state(s.residuals), cfg)
    assert (split.feature_index, split.threshold, split.gain) == (0, 2.5, 25.0)
    tree = B.fit_tree(s, cfg)
    assert tree.leaf_count == 2 and sorted(tree.value[tree.is_leaf]) == [0.0, 5.0]


def test_find_best_split_constant_features():
    s = B.SampleSet(np.ones((10, 3)), np.arange(10.0))
    assert B.find_best_split(s, state(s.residuals), B.EnsembleConfig(min_samples_leaf=1)) is None


def test_find_best_split_too_few_samples():
    s = B.SampleSet(np.arange(10.0), np.arange(10.0))
    assert B.find_best_split(s, state(s.residuals), B.EnsembleConfig(min_samples_leaf=6)) is None


def test_find_best_split_tie_breaks_low_feature():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    s = B.SampleSet(X, np.array([0.0, 0.0, 1.0, 1.0]))
    split = B.find_best_split(s, state(s.residuals), B.EnsembleConfig(xi=0, zeta=0, min_samples_leaf=1))
    assert split.feature_index == 0


def test_find_best_split_matches_exhaustive():
    rng = np.random.default_rng(3)
    cfg = B.EnsembleConfig(xi=1.0, zeta=0.0, min_samples_leaf=2)
    for _ in range(20):
        X = np.round(rng.normal(size=(50, 5)), 1)
        r = rng.normal(size=50) + X[:, rng.integers(5)]
        s = B.SampleSet(X, r)
        got = B.find_best_split(s, state(r), cfg)
        want = exhaustive_split(X, r, np.arange(50), 1.0, 0.0, 2)
        assert (got.feature_index, got.threshold) == want[:2]
        assert got.gain == pytest.approx(want[2], abs=1e-9)


def test_fit_tree_constant_and_depth_zero():
    s = B.SampleSet(np.random.default_rng(4).normal(size=(20, 2)), np.full(20, 0.3))
    tree = B.fit_tree(s, B.EnsembleConfig(xi=0.0, min_samples_leaf=1))
    assert tree.leaf_count == 1 and tree.value[0] == pytest.approx(0.3)
    s = B.SampleSet(np.arange(20.0), np.arange(20.0))
    tree = B.fit_tree(s, B.EnsembleConfig(xi=1.0, max_depth=0))
    assert tree.leaf_count == 1 and tree.value[0] == pytest.approx(190 / 20.5)


def test_fit_tree_matches_oracle_tree():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n, g = int(rng.integers(8, 65)), int(rng.integers(1, 4))
        X = rng.normal(size=(n, g))
        r = rng.normal(size=n)
        cfg = B.EnsembleConfig(xi=float(rng.uniform(0, 2)), zeta=float(rng.uniform(0, 0.5)),
                               max_depth=int(rng.integers(0, 3)), min_samples_leaf=int(rng.integers(1, 4)))
        tree = B.fit_tree(B.SampleSet(X, r), cfg)
        assert same_structure(as_nested(tree), oracle_tree(X, r, np.arange(n), 0, cfg))


def test_tree_invariants():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 4))
    y = (X[:, 0] > 0).astype(float) + X[:, 1]
    tree = B.fit_tree(B.SampleSet(X, y), B.EnsembleConfig(max_depth=3, min_samples_leaf=5))
    internal = (~tree.is_leaf).sum()
    assert tree.leaf_count == internal + 1
    assert tree.depth() <= 3
    leaves = tree.apply(rng.normal(size=(100, 4)))
    assert np.all(tree.is_leaf[leaves])
    with pytest.raises(InvalidArgumentError):
        B.DecisionTree([0, -1], [0.0, 0.0], [1, -1], [-1, -1], [0.0, 1.0])


# -- ensembles ------------------------------------------------------------------------

def fig6_ensemble():
    # instance 1 has x = 0 and falls in the left leaf of both trees, instance 2 the right
    t1 = B.DecisionTree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [0.0, 2.1, -1.0])
    t2 = B.DecisionTree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [0.0, 0.9, -0.9])
    return B.TreeEnsemble(trees=(t1, t2), weights=(0.5, 0.5), mode=B.AVERAGED, n_features=1)


def test_fig6_values():
    out = B.predict(fig6_ensemble(), np.array([[0.0], [1.0]]))
    assert out[0] == 1.5 and out[1] == -0.95


def test_ensemble_weight_invariants():
    t = B.DecisionTree.leaf(1.0)
    with pytest.raises(InvalidArgumentError):
        B.TreeEnsemble(trees=(t, t), weights=(0.5, 0.5), mode=B.ADDITIVE)
    with pytest.raises(InvalidArgumentError):
        B.TreeEnsemble(trees=(t, t), weights=(1.0, 1.0), mode=B.AVERAGED)
    with pytest.raises(InvalidArgumentError):
        B.TreeEnsemble(trees=(t,), weights=(1.0, 1.0))


def test_empty_ensemble_predicts_base():
    ens = B.TreeEnsemble(trees=(), weights=(), base=0.25, n_features=3)
    assert np.array_equal(B.predict(ens, np.zeros((4, 3))), np.full(4, 0.25))
    with pytest.raises(InvalidArgumentError):
        B.predict(ens, np.zeros((4, 2)))


def test_constant_model():
    rng = np.random.default_rng(7)
    y = rng.random(40)
    cfg = B.EnsembleConfig(tree_count=1, subsample_ratio=1.0, max_depth=0, xi=0.0)
    ens = B.fit_ensemble(B.SampleSet(rng.normal(size=(40, 2)), y), cfg)
    assert np.allclose(B.predict(ens, rng.normal(size=(5, 2))), y.mean(), atol=1e-12)


def test_additive_training_loss_monotone_and_matches_predict():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(400, 5))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2 + 0.1 * rng.normal(size=400)
    cfg = B.EnsembleConfig(tree_count=30, zeta=0.0, subsample_ratio=1.0, max_depth=3)
    ens = B.fit_ensemble(B.SampleSet(X, y), cfg)
    trace = np.array(ens.fit_trace)
    assert np.all(np.diff(trace) <= 1e-9)
    sse = float(np.sum((y - B.predict(ens, X)) ** 2))
    assert sse == pytest.approx(trace[-1], abs=1e-12, rel=1e-12)


def test_monotone_feature_transform_invariance():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] + X[:, 2] > 0).astype(float)
    cfg = B.EnsembleConfig(tree_count=5, max_depth=3)
    a = B.predict(B.fit_ensemble(B.SampleSet(X, y), cfg), X)
    Xt = X.copy()
    Xt[:, 0] = np.exp(Xt[:, 0])
    b = B.predict(B.fit_ensemble(B.SampleSet(Xt, y), cfg), Xt)
    assert np.array_equal(a, b)


def test_ensemble_deterministic_and_modes():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(300, 4))
    y = (X[:, 0] > 0).astype(float)
    cfg = B.EnsembleConfig(tree_count=4, seed=5)
    a = B.fit_ensemble(B.SampleSet(X, y), cfg)
    b = B.fit_ensemble(B.SampleSet(X, y), cfg)
    assert np.array_equal(B.predict(a, X), B.predict(b, X))
    avg = B.fit_ensemble(B.SampleSet(X, y), B.EnsembleConfig(tree_count=4, seed=5, mode=B.AVERAGED))
    assert avg.weights == (0.25,) * 4
    assert a.trees[0].value.tolist() == avg.trees[0].value.tolist()


def test_sampleset_validation():
    with pytest.raises(InvalidArgumentError):
        B.SampleSet(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(InvalidArgumentError):
        B.SampleSet(np.array([[np.nan]]), np.zeros(1))
    with pytest.raises(InvalidArgumentError):
        B.EnsembleConfig(subsample_ratio=0)
