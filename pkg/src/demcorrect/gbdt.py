"""Gradient-boosted regression trees for squared-error loss.

One engine, two growth strategies: depthwise expands every splittable node
level by level up to a depth cap; leafwise always splits the frontier leaf
with the largest gain until a leaf cap. Split search is exact greedy over
sorted feature values (no histogram binning), with the regularized gain

    G_L^2/(n_L + lambda) + G_R^2/(n_R + lambda) - G^2/(n + lambda)

where G sums the current residuals. Squared loss makes every row's hessian
constant, so leaf values are sum(residuals) / (n_leaf + lambda) and the
ensemble prediction is base_score + learning_rate * sum of leaf values.
Training is deterministic for a fixed table, parameter set, and row order.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .sampling import SampleTable

__all__ = [
    "GbdtParams",
    "RegressionTree",
    "GbdtModel",
    "ModelFormatError",
    "Split",
    "best_split",
    "fit_gbdt",
    "predict_gbdt",
    "serialize_model",
    "deserialize_model",
]

MODEL_FORMAT = "gbdt-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Model document is malformed or from an unsupported version."""


@dataclass(frozen=True)
class GbdtParams:
    """Training knobs; defaults mirror common library defaults.

    ``growth`` is "depthwise" (cap ``max_depth``, None = unbounded) or
    "leafwise" (cap ``max_leaves``). ``seed`` is reserved for subsampling
    strategies and currently unused.
    """

    n_trees: int = 100
    learning_rate: float = 0.1
    growth: str = "depthwise"
    max_depth: int | None = 6
    max_leaves: int = 31
    min_samples_leaf: int = 1
    min_gain: float = 0.0
    reg_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be a positive integer")
        if not (0 < self.learning_rate <= 1):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.growth not in ("depthwise", "leafwise"):
            raise ValueError("growth must be 'depthwise' or 'leafwise'")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be None or >= 1")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.min_gain < 0:
            raise ValueError("min_gain must be >= 0")
        if self.reg_lambda < 0:
            raise ValueError("lambda must be >= 0")

    def to_doc(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "learning_rate": self.learning_rate,
            "growth": self.growth,
            "max_depth": self.max_depth,
            "max_leaves": self.max_leaves,
            "min_samples_leaf": self.min_samples_leaf,
            "min_gain": self.min_gain,
            "lambda": self.reg_lambda,
            "seed": self.seed,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GbdtParams":
        return cls(
            n_trees=int(doc["n_trees"]),
            learning_rate=float(doc["learning_rate"]),
            growth=str(doc["growth"]),
            max_depth=None if doc["max_depth"] is None else int(doc["max_depth"]),
            max_leaves=int(doc["max_leaves"]),
            min_samples_leaf=int(doc["min_samples_leaf"]),
            min_gain=float(doc["min_gain"]),
            reg_lambda=float(doc["lambda"]),
            seed=int(doc["seed"]),
        )


class Split(NamedTuple):
    feature: int
    threshold: float
    gain: float


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flat-array binary tree; routing rule x[feature] <= threshold -> left.

    Leaves have feature == -1 and carry ``value``; internal nodes carry the
    split and child indices. Node 0 is the root.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        best = 0
        for node in range(self.n_nodes):  # children always follow their parent
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        if self.n_nodes:
            best = int(depths.max())
        return best

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            rows = np.flatnonzero(active)
            node = idx[rows]
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
        return self.value[idx]

    def predict_row(self, x: np.ndarray) -> float:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] \
                else self.right[node]
        return float(self.value[node])


@dataclass(frozen=True, eq=False)
class GbdtModel:
    """Additive ensemble: base_score + learning_rate * sum of tree outputs."""

    base_score: float
    trees: tuple[RegressionTree, ...]
    params: GbdtParams
    feature_names: tuple[str, ...]
    train_rmse: tuple[float, ...] = ()
    name: str = "gbdt"

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(
                f"expected (n, {len(self.feature_names)}) features, got {X.shape}"
            )
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.params.learning_rate * tree.predict_rows(X)
        return out


def best_split(
    features: np.ndarray,
    residuals: np.ndarray,
    node_rows: np.ndarray,
    params: GbdtParams,
) -> Split | None:
    """Exact greedy search over all features and distinct-value midpoints.

    Returns None when the best gain does not exceed ``min_gain`` or every
    candidate would violate ``min_samples_leaf``. Ties break to the lower
    feature index, then the lower threshold.
    """
    rows = np.asarray(node_rows)
    m = len(rows)
    if m < 2 * params.min_samples_leaf:
        return None
    res = residuals[rows]
    lam = params.reg_lambda
    total = float(res.sum())
    parent = total * total / (m + lam)

    best: Split | None = None
    for f in range(features.shape[1]):
        x = features[rows, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        prefix = np.cumsum(res[order])[:-1]
        n_left = np.arange(1, m)
        ok = xs[1:] > xs[:-1]
        if params.min_samples_leaf > 1:
            ok &= (n_left >= params.min_samples_leaf) & (m - n_left >= params.min_samples_leaf)
        if not ok.any():
            continue
        right = total - prefix
        gains = (prefix * prefix / (n_left + lam)
                 + right * right / (m - n_left + lam) - parent)
        gains[~ok] = -np.inf
        at = int(np.argmax(gains))  # first max = lowest threshold
        gain = float(gains[at])
        if best is None or gain > best.gain:
            threshold = float((xs[at] + xs[at + 1]) / 2)
            best = Split(f, threshold, gain)

    if best is None or not (best.gain > params.min_gain):
        return None
    return best


class _TreeBuilder:
    """Accumulates nodes in creation order; children follow their parent."""

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def finish(self) -> RegressionTree:
        return RegressionTree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=np.float64),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=np.float64),
        )


def _leaf_value(residuals: np.ndarray, rows: np.ndarray, lam: float) -> float:
    return float(residuals[rows].sum() / (len(rows) + lam))


def _partition(features: np.ndarray, rows: np.ndarray, split: Split):
    go_left = features[rows, split.feature] <= split.threshold
    return rows[go_left], rows[~go_left]


def _grow_depthwise(features, residuals, params) -> tuple[RegressionTree, np.ndarray]:
    tb = _TreeBuilder()
    root_rows = np.arange(len(residuals))
    leaf_of_row = np.zeros(len(residuals), dtype=np.int64)
    frontier = [(tb.add(), root_rows, 0)]
    while frontier:
        nxt = []
        for node, rows, depth in frontier:
            split = None
            if params.max_depth is None or depth < params.max_depth:
                split = best_split(features, residuals, rows, params)
            if split is None:
                tb.value[node] = _leaf_value(residuals, rows, params.reg_lambda)
                leaf_of_row[rows] = node
                continue
            lrows, rrows = _partition(features, rows, split)
            tb.feature[node] = split.feature
            tb.threshold[node] = split.threshold
            tb.left[node] = tb.add()
            tb.right[node] = tb.add()
            nxt.append((tb.left[node], lrows, depth + 1))
            nxt.append((tb.right[node], rrows, depth + 1))
        frontier = nxt
    return tb.finish(), leaf_of_row


def _grow_leafwise(features, residuals, params) -> tuple[RegressionTree, np.ndarray]:
    tb = _TreeBuilder()
    root_rows = np.arange(len(residuals))
    leaf_of_row = np.zeros(len(residuals), dtype=np.int64)
    root = tb.add()
    tb.value[root] = _leaf_value(residuals, root_rows, params.reg_lambda)
    leaf_rows = {root: root_rows}

    heap: list[tuple[float, int]] = []
    split_of: dict[int, Split] = {}

    def consider(node: int):
        split = best_split(features, residuals, leaf_rows[node], params)
        if split is not None:
            split_of[node] = split
            heapq.heappush(heap, (-split.gain, node))

    consider(root)
    n_leaves = 1
    while heap and n_leaves < params.max_leaves:
        _, node = heapq.heappop(heap)
        split = split_of.pop(node, None)
        if split is None or tb.feature[node] >= 0:
            continue
        rows = leaf_rows.pop(node)
        lrows, rrows = _partition(features, rows, split)
        tb.feature[node] = split.feature
        tb.threshold[node] = split.threshold
        lnode = tb.add()
        rnode = tb.add()
        tb.left[node] = lnode
        tb.right[node] = rnode
        for child, crows in ((lnode, lrows), (rnode, rrows)):
            tb.value[child] = _leaf_value(residuals, crows, params.reg_lambda)
            leaf_rows[child] = crows
            consider(child)
        n_leaves += 1
    for node, rows in leaf_rows.items():
        leaf_of_row[rows] = node
    return tb.finish(), leaf_of_row


def fit_gbdt(train: SampleTable, params: GbdtParams | None = None,
             name: str = "gbdt") -> GbdtModel:
    """Boost regression trees against the squared-error residuals.

    The base score is the mean target; each tree fits the current residuals
    and shifts predictions by learning_rate times its leaf values. Training
    stops early once a tree finds no split and adds nothing.
    """
    params = params or GbdtParams()
    if len(train) == 0:
        raise ValueError("cannot fit on an empty table")
    X = np.ascontiguousarray(train.features)
    y = train.targets

    base = float(y.mean())
    pred = np.full(len(y), base)
    grow = _grow_depthwise if params.growth == "depthwise" else _grow_leafwise

    trees: list[RegressionTree] = []
    rmse = [float(np.sqrt(np.mean((y - pred) ** 2)))]
    for _ in range(params.n_trees):
        residuals = y - pred
        tree, leaf_of_row = grow(X, residuals, params)
        if tree.n_nodes == 1 and tree.value[0] == 0.0:
            break  # converged: no split and a zero root value changes nothing
        trees.append(tree)
        pred = pred + params.learning_rate * tree.value[leaf_of_row]
        rmse.append(float(np.sqrt(np.mean((y - pred) ** 2))))

    return GbdtModel(base, tuple(trees), params, train.feature_names,
                     tuple(rmse), name)


def predict_gbdt(model: GbdtModel, x) -> float:
    """Ensemble prediction for a single feature vector."""
    vec = np.asarray(x, dtype=np.float64).ravel()
    if len(vec) != len(model.feature_names):
        raise ValueError(
            f"expected {len(model.feature_names)} feature values, got {len(vec)}"
        )
    out = model.base_score
    for tree in model.trees:
        out += model.params.learning_rate * tree.predict_row(vec)
    return float(out)


def serialize_model(model: GbdtModel) -> dict:
    """Versioned JSON-ready document; roundtrips losslessly."""
    trees = []
    for tree in model.trees:
        nodes = []
        for i in range(tree.n_nodes):
            if tree.feature[i] < 0:
                nodes.append({"value": float(tree.value[i])})
            else:
                nodes.append({
                    "feature": int(tree.feature[i]),
                    "threshold": float(tree.threshold[i]),
                    "left": int(tree.left[i]),
                    "right": int(tree.right[i]),
                })
        trees.append({"root": 0, "nodes": nodes})
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "model_name": model.name,
        "params": model.params.to_doc(),
        "base_score": model.base_score,
        "feature_names": list(model.feature_names),
        "train_rmse": list(model.train_rmse),
        "trees": trees,
    }


def _tree_from_doc(doc: dict, n_features: int, tree_index: int) -> RegressionTree:
    nodes = doc.get("nodes")
    if not isinstance(nodes, list) or not nodes:
        raise ModelFormatError(f"tree {tree_index}: missing node array")
    root = doc.get("root", 0)
    n = len(nodes)
    tb = _TreeBuilder()
    for _ in range(n):
        tb.add()
    for i, node in enumerate(nodes):
        if "value" in node:
            tb.value[i] = float(node["value"])
        else:
            try:
                f = int(node["feature"])
                tb.feature[i] = f
                tb.threshold[i] = float(node["threshold"])
                tb.left[i] = int(node["left"])
                tb.right[i] = int(node["right"])
            except KeyError as missing:
                raise ModelFormatError(
                    f"tree {tree_index}: node {i} lacks {missing} and has no value"
                ) from None
            if not (0 <= f < n_features):
                raise ModelFormatError(f"tree {tree_index}: node {i} splits unknown feature {f}")

    # the stored graph must be a proper binary tree over all nodes
    seen = set()
    stack = [root]
    while stack:
        i = stack.pop()
        if not (0 <= i < n):
            raise ModelFormatError(f"tree {tree_index}: node index {i} out of range")
        if i in seen:
            raise ModelFormatError(f"tree {tree_index}: node {i} reached twice (cycle or merge)")
        seen.add(i)
        if tb.feature[i] >= 0:
            stack.append(tb.right[i])
            stack.append(tb.left[i])
    if len(seen) != n:
        raise ModelFormatError(f"tree {tree_index}: {n - len(seen)} unreachable node(s)")

    if root != 0:
        raise ModelFormatError(f"tree {tree_index}: root must be node 0")
    return tb.finish()


def deserialize_model(doc: dict) -> GbdtModel:
    """Inverse of :func:`serialize_model`; validates the node graph."""
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a gbdt model document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        params = GbdtParams.from_doc(doc["params"])
        names = tuple(doc["feature_names"])
        base = float(doc["base_score"])
        tree_docs = doc["trees"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from None
    trees = tuple(
        _tree_from_doc(td, len(names), i) for i, td in enumerate(tree_docs)
    )
    if len(trees) > params.n_trees:
        raise ModelFormatError("document holds more trees than params.n_trees")
    return GbdtModel(base, trees, params, names,
                     tuple(float(v) for v in doc.get("train_rmse", [])),
                     doc.get("model_name", "gbdt"))
