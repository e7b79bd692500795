"""Second-order boosted regression trees with l2 leaf shrinkage and a per-leaf cost.

For squared loss every instance has gradient statistic ``y - phi`` and unit
curvature, so a node with residual sum ``G`` over ``H`` instances has optimal
response ``G / (H + xi/2)`` and loss ``-G**2 / (H + xi/2)``; a split is worth
its loss reduction minus ``zeta``.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError

ADDITIVE = "additive"
AVERAGED = "averaged"


@dataclass(frozen=True)
class EnsembleConfig:
    tree_count: int = 30
    xi: float = 1.0
    zeta: float = 1e-3
    max_depth: int = 6
    subsample_ratio: float = 0.5
    min_samples_leaf: int = 8
    seed: int = 42
    mode: str = ADDITIVE

    def __post_init__(self):
        if self.tree_count < 1:
            raise InvalidArgumentError("tree_count must be >= 1")
        if not 0 < self.subsample_ratio <= 1:
            raise InvalidArgumentError("subsample_ratio must lie in (0, 1]")
        if self.xi < 0 or self.zeta < 0:
            raise InvalidArgumentError("xi and zeta must be non-negative")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise InvalidArgumentError("max_depth >= 0 and min_samples_leaf >= 1 required")
        if self.mode not in (ADDITIVE, AVERAGED):
            raise InvalidArgumentError(f"unknown ensemble mode {self.mode!r}")


@dataclass
class SampleSet:
    features: np.ndarray
    targets: np.ndarray
    base_scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.targets = np.asarray(self.targets, dtype=np.float64)
        t = self.features.shape[0]
        if self.base_scores is None:
            self.base_scores = np.zeros(t)
        self.base_scores = np.asarray(self.base_scores, dtype=np.float64)
        if self.targets.shape != (t,) or self.base_scores.shape != (t,):
            raise InvalidArgumentError("features, targets and base_scores disagree in length")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))
                and np.all(np.isfinite(self.base_scores))):
            raise InvalidArgumentError("samples contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def residuals(self) -> np.ndarray:
        return self.targets - self.base_scores


@dataclass(frozen=True)
class NodeBuildState:
    instance_set: np.ndarray
    grad_sum: float
    hess_sum: float
    depth: int = 0

    @classmethod
    def from_residuals(cls, residuals, instance_set=None, depth: int = 0) -> "NodeBuildState":
        residuals = np.asarray(residuals, dtype=np.float64)
        if instance_set is None:
            instance_set = np.arange(residuals.shape[0])
        idx = np.asarray(instance_set, dtype=np.int64)
        return cls(instance_set=idx, grad_sum=float(residuals[idx].sum()),
                   hess_sum=float(idx.size), depth=depth)


def _require_nonempty(state: NodeBuildState):
    if state.instance_set.size == 0 or state.hess_sum <= 0:
        raise InvalidArgumentError("empty instance set")


def leaf_weight(state: NodeBuildState, xi: float) -> float:
    _require_nonempty(state)
    return state.grad_sum / (state.hess_sum + xi / 2.0)


def node_loss(state: NodeBuildState, xi: float) -> float:
    _require_nonempty(state)
    return -(state.grad_sum ** 2) / (state.hess_sum + xi / 2.0)


def split_gain(parent: NodeBuildState, left: NodeBuildState, right: NodeBuildState,
               xi: float, zeta: float) -> float:
    """Loss reduction of splitting ``parent`` into ``left``/``right``, minus ``zeta``."""
    lset, rset = left.instance_set, right.instance_set
    if (np.intersect1d(lset, rset).size
            or not np.array_equal(np.union1d(lset, rset), np.unique(parent.instance_set))
            or lset.size + rset.size != parent.instance_set.size):
        raise InvalidArgumentError("left and right do not partition parent")
    for s in (parent, left, right):
        _require_nonempty(s)
    h = xi / 2.0
    return (left.grad_sum ** 2 / (left.hess_sum + h)
            + right.grad_sum ** 2 / (right.hess_sum + h)
            - parent.grad_sum ** 2 / (parent.hess_sum + h)
            - zeta)


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    gain: float


def find_best_split(samples: SampleSet, node: NodeBuildState, cfg: EnsembleConfig,
                    residuals: Optional[np.ndarray] = None) -> Optional[Split]:
    """Exact greedy search over every midpoint between adjacent distinct values.

    Ties go to the lower feature index, then the lower threshold.  Returns
    ``None`` when no admissible split has positive gain.
    """
    idx = node.instance_set
    n = idx.size
    msl = cfg.min_samples_leaf
    if n < 2 * msl or n < 2:
        return None
    r = (samples.residuals if residuals is None else residuals)[idx]
    total = r.sum()
    h = cfg.xi / 2.0
    parent = total * total / (n + h)
    n_left = np.arange(1, n, dtype=np.float64)
    size_ok = (n_left >= msl) & (n - n_left >= msl)
    best: Optional[Split] = None
    for f in range(samples.features.shape[1]):
        x = samples.features[idx, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        gl = np.cumsum(r[order])[:-1]
        gr = total - gl
        gain = gl * gl / (n_left + h) + gr * gr / (n - n_left + h) - parent - cfg.zeta
        ok = size_ok & (xs[:-1] < xs[1:])
        if not ok.any():
            continue
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > 0 and (best is None or gain[k] > best.gain):
            lo, hi = xs[k], xs[k + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = Split(f, float(thr), float(gain[k]))
    return best


@dataclass(frozen=True)
class DecisionTree:
    """Binary tree in preorder arrays; internal nodes send ``x[f] <= threshold`` left.

    ``left``/``right`` are -1 at leaves; ``value`` holds leaf responses.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name, dt in (("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
                         ("right", np.int64), ("value", np.float64)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dt)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n = self.feature.size
        if not all(a.size == n for a in (self.threshold, self.left, self.right, self.value)) or n == 0:
            raise InvalidArgumentError("inconsistent tree arrays")
        leaves = self.left < 0
        if np.any(leaves != (self.right < 0)):
            raise InvalidArgumentError("every internal node needs two children")
        if leaves.sum() != (~leaves).sum() + 1:
            raise InvalidArgumentError("leaf count must equal internal count + 1")

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    @property
    def leaf_count(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def node_count(self) -> int:
        return self.feature.size

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.left[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf reached by every row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.node_count):
            inner = self.left[node] >= 0
            if not inner.any():
                break
            go_left = X[rows, np.maximum(self.feature[node], 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, nxt, node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @classmethod
    def leaf(cls, value: float) -> "DecisionTree":
        return cls(feature=[-1], threshold=[0.0], left=[-1], right=[-1], value=[value])


@dataclass
class _Node:
    state: NodeBuildState
    split: Optional[Split] = None
    children: Optional[tuple] = None


def fit_tree(samples: SampleSet, cfg: EnsembleConfig) -> DecisionTree:
    """Grow one tree best-first against ``samples.residuals``.

    The frontier node with the largest positive gain is split next; a node
    stays a leaf when no split gains, the depth cap is reached, or children
    would fall under ``min_samples_leaf``.
    """
    if len(samples) == 0:
        raise InvalidArgumentError("cannot fit a tree on no samples")
    residuals = samples.residuals
    root = _Node(NodeBuildState.from_residuals(residuals))
    heap: list = []
    counter = 0

    def consider(node: _Node):
        nonlocal counter
        if node.state.depth >= cfg.max_depth:
            return
        split = find_best_split(samples, node.state, cfg, residuals)
        if split is not None:
            node.split = split
            heapq.heappush(heap, (-split.gain, counter, node))
            counter += 1

    consider(root)
    while heap:
        _, _, node = heapq.heappop(heap)
        idx = node.state.instance_set
        go_left = samples.features[idx, node.split.feature_index] <= node.split.threshold
        d = node.state.depth + 1
        kids = (_Node(NodeBuildState.from_residuals(residuals, idx[go_left], d)),
                _Node(NodeBuildState.from_residuals(residuals, idx[~go_left], d)))
        node.children = kids
        for kid in kids:
            consider(kid)

    feature, threshold, left, right, value = [], [], [], [], []

    def emit(node: _Node) -> int:
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if node.children is None:
            value[i] = leaf_weight(node.state, cfg.xi)
        else:
            feature[i] = node.split.feature_index
            threshold[i] = node.split.threshold
            left[i] = emit(node.children[0])
            right[i] = emit(node.children[1])
        return i

    emit(root)
    return DecisionTree(np.array(feature), np.array(threshold), np.array(left),
                        np.array(right), np.array(value))


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple
    weights: tuple
    mode: str = ADDITIVE
    base: float = 0.0
    n_features: int = 0
    fit_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.trees) != len(self.weights):
            raise InvalidArgumentError("one weight per tree required")
        if self.mode == ADDITIVE and any(w != 1.0 for w in self.weights):
            raise InvalidArgumentError("additive ensembles use unit weights")
        if self.mode == AVERAGED and any(w != 1.0 / len(self.trees) for w in self.weights):
            raise InvalidArgumentError("averaged ensembles use weights 1/M")


def fit_ensemble(samples: SampleSet, cfg: EnsembleConfig) -> TreeEnsemble:
    """Stagewise boosting from the constant ``mean(y - base_scores)``.

    Each tree is fit on a seeded subsample of ``ceil(ratio * t)`` rows against
    the current residuals; the running score is then updated on all rows.
    ``fit_trace`` records the training sum of squared errors of the constant
    start and after each stage, so it has ``tree_count + 1`` entries.
    """
    t = len(samples)
    if t == 0:
        raise InvalidArgumentError("cannot fit an ensemble on no samples")
    X, y = samples.features, samples.targets
    base = float(np.mean(y - samples.base_scores))
    phi = samples.base_scores + base
    rng = np.random.default_rng(cfg.seed)
    n_sub = math.ceil(cfg.subsample_ratio * t)
    trees = []
    trace = [float(np.sum((y - phi) ** 2))]
    for _ in range(cfg.tree_count):
        if n_sub < t:
            rows = np.sort(rng.choice(t, size=n_sub, replace=False))
        else:
            rows = np.arange(t)
        tree = fit_tree(SampleSet(X[rows], y[rows], phi[rows]), cfg)
        trees.append(tree)
        phi = phi + tree.predict(X)
        trace.append(float(np.sum((y - phi) ** 2)))
    m = len(trees)
    weights = [1.0] * m if cfg.mode == ADDITIVE else [1.0 / m] * m
    return TreeEnsemble(trees=tuple(trees), weights=tuple(weights), mode=cfg.mode,
                        base=base, n_features=X.shape[1], fit_trace=tuple(trace))


def predict(ensemble: TreeEnsemble, features: np.ndarray) -> np.ndarray:
    """Per row: ``base + sum_m alpha_m * h_m(row)``."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if ensemble.n_features and X.shape[1] != ensemble.n_features:
        raise InvalidArgumentError(
            f"expected {ensemble.n_features} features, got {X.shape[1]}")
    out = np.full(X.shape[0], ensemble.base, dtype=np.float64)
    for tree, w in zip(ensemble.trees, ensemble.weights):
        out += w * tree.predict(X)
    return out
