"""Histogram-leaf structure learner for sum-product density networks.

The recursion is the classic one: slices with few rows (or one feature)
factorize into leaves; otherwise try to split the features into
independent groups (pairwise G-test on discretized columns) and emit a
product node; failing that, split the rows with 2-means and emit a sum
node weighted by cluster proportions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2
from sklearn.cluster import KMeans

from .schema import DatasetSchema
from .spn import CategoricalLeaf, HistogramLeaf, Node, ProductNode, Spn, SumNode, check_valid

CONTINUOUS = 0  # domain marker: 0 = continuous on [0, 1], k >= 2 = k-level categorical


@dataclass(frozen=True)
class LearnConfig:
    min_instances_slice: int = 64
    independence_threshold: float = 0.05
    histogram_bins: int = 10
    pseudo_count: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.min_instances_slice < 2:
            raise ValueError("min_instances_slice must be at least 2")
        if self.histogram_bins < 1:
            raise ValueError("histogram_bins must be at least 1")
        if not 0.0 < self.independence_threshold < 1.0:
            raise ValueError("independence_threshold must lie in (0, 1)")
        if self.pseudo_count < 0:
            raise ValueError("pseudo_count must be nonnegative")


def auto_min_slice(n_rows: int) -> int:
    """Default slice size: one twentieth of the data, rounded up."""
    return max(2, math.ceil(n_rows / 20))


def fit_histogram(column: np.ndarray, bins: int, pseudo_count: float) -> HistogramLeaf:
    """Equal-width histogram over [0, 1] with Laplace smoothing.

    Empty bins are floored at density 1e-9 so the stored log densities stay
    finite; the unit-integral invariant holds to well within 1e-6.
    """
    column = np.asarray(column, dtype=float)
    if column.size == 0:
        raise ValueError("cannot fit a histogram to an empty column")
    breakpoints = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(breakpoints, column, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    mass = (counts + pseudo_count) / (column.size + bins * pseudo_count)
    density = np.maximum(mass * bins, 1e-9)
    return HistogramLeaf(feature=-1, breakpoints=breakpoints, log_density=np.log(density))


def fit_categorical(column: np.ndarray, n_levels: int, pseudo_count: float) -> CategoricalLeaf:
    column = np.round(np.asarray(column, dtype=float)).astype(int)
    if column.size == 0:
        raise ValueError("cannot fit a categorical leaf to an empty column")
    counts = np.bincount(column, minlength=n_levels).astype(float)
    with np.errstate(divide="ignore"):
        log_probs = np.log((counts + pseudo_count) / (column.size + n_levels * pseudo_count))
    return CategoricalLeaf(feature=-1, log_probs=log_probs)


def _discretize(column: np.ndarray, domain: int, max_bins: int = 4) -> np.ndarray:
    if domain != CONTINUOUS:
        return np.round(column).astype(int)
    edges = np.linspace(0.0, 1.0, max_bins + 1)
    return np.clip(np.searchsorted(edges, column, side="right") - 1, 0, max_bins - 1)


def g_test_pvalue(col_a: np.ndarray, col_b: np.ndarray) -> float:
    """P-value of the G-test of independence on a contingency table."""
    a_levels, a_idx = np.unique(col_a, return_inverse=True)
    b_levels, b_idx = np.unique(col_b, return_inverse=True)
    if len(a_levels) < 2 or len(b_levels) < 2:
        return 1.0
    table = np.zeros((len(a_levels), len(b_levels)))
    np.add.at(table, (a_idx, b_idx), 1.0)
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / table.sum()
    observed = table[table > 0]
    g_stat = 2.0 * float(np.sum(observed * np.log(observed / expected[table > 0])))
    dof = (len(a_levels) - 1) * (len(b_levels) - 1)
    return float(chi2.sf(max(g_stat, 0.0), dof))


class _Builder:
    def __init__(self, data: np.ndarray, domains: list[int], config: LearnConfig):
        self.data = data
        self.domains = domains
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.nodes: dict[int, Node] = {}

    def add(self, node: Node) -> int:
        node_id = len(self.nodes)
        self.nodes[node_id] = node
        return node_id

    def leaf(self, rows: np.ndarray, feat: int) -> int:
        column = self.data[rows, feat]
        if self.domains[feat] == CONTINUOUS:
            bins = max(1, min(self.config.histogram_bins, len(np.unique(column))))
            leaf = fit_histogram(column, bins, self.config.pseudo_count)
            node: Node = HistogramLeaf(feat, leaf.breakpoints, leaf.log_density)
        else:
            leaf = fit_categorical(column, self.domains[feat], self.config.pseudo_count)
            node = CategoricalLeaf(feat, leaf.log_probs)
        return self.add(node)

    def factorize(self, rows: np.ndarray, feats: list[int]) -> int:
        children = [self.leaf(rows, f) for f in feats]
        if len(children) == 1:
            return children[0]
        return self.add(ProductNode(tuple(children)))

    def independent_groups(self, rows: np.ndarray, feats: list[int]) -> list[list[int]]:
        """Connected components of the dependency graph; features whose
        G-test p-value falls below the threshold count as dependent."""
        disc = {f: _discretize(self.data[rows, f], self.domains[f]) for f in feats}
        parent = {f: f for f in feats}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i, fa in enumerate(feats):
            for fb in feats[i + 1 :]:
                if g_test_pvalue(disc[fa], disc[fb]) < self.config.independence_threshold:
                    parent[find(fa)] = find(fb)
        groups: dict[int, list[int]] = {}
        for f in feats:
            groups.setdefault(find(f), []).append(f)
        return list(groups.values())

    def cluster_rows(self, rows: np.ndarray, feats: list[int]) -> list[np.ndarray]:
        columns = []
        for f in feats:
            col = self.data[rows, f]
            if self.domains[f] == CONTINUOUS:
                columns.append(col[:, None])
            else:
                onehot = np.zeros((len(rows), self.domains[f]))
                onehot[np.arange(len(rows)), np.round(col).astype(int)] = 1.0
                columns.append(onehot)
        matrix = np.hstack(columns)
        seed = int(self.rng.integers(0, 2**31 - 1))
        labels = KMeans(n_clusters=2, n_init=10, max_iter=50, random_state=seed).fit_predict(matrix)
        return [rows[labels == k] for k in range(2)]

    def build(self, rows: np.ndarray, feats: list[int]) -> int:
        if len(feats) == 1:
            return self.leaf(rows, feats[0])
        if len(rows) < self.config.min_instances_slice:
            return self.factorize(rows, feats)
        groups = self.independent_groups(rows, feats)
        if len(groups) > 1:
            children = tuple(self.build(rows, sorted(g)) for g in groups)
            return self.add(ProductNode(children))
        clusters = self.cluster_rows(rows, feats)
        if any(len(c) == 0 for c in clusters):
            return self.factorize(rows, feats)
        children = tuple(self.build(c, feats) for c in clusters)
        weights = np.array([len(c) / len(rows) for c in clusters])
        return self.add(SumNode(children, weights))


def learn(data: np.ndarray, domains: list[int], config: LearnConfig) -> Spn:
    """Learn a tree-shaped SPN over ``data``.

    ``data`` holds one column per feature (continuous values in [0, 1],
    categorical values as level indices); ``domains[f]`` is 0 for a
    continuous feature and the level count otherwise.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("learn requires a non-empty 2-D dataset")
    if data.shape[1] != len(domains):
        raise ValueError("domain list does not match data width")
    builder = _Builder(data, list(domains), config)
    root = builder.build(np.arange(data.shape[0]), list(range(data.shape[1])))
    spn = Spn(nodes=builder.nodes, root=root, n_features=data.shape[1])
    return check_valid(spn)


def spn_domains(schema: DatasetSchema, with_class: bool = True) -> list[int]:
    """Per-feature domain markers for density modeling; the class column is
    appended as an extra categorical feature."""
    domains = []
    for spec in schema.features:
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            domains.append(CONTINUOUS)
        elif tag in ("binary", "categorical", "ordinal"):
            domains.append(spec.kind.n_levels)
        else:
            raise ValueError(
                f"feature {spec.name!r}: mixed features are not supported by the "
                "density model; model the branches as separate features"
            )
    if with_class:
        domains.append(schema.n_classes)
    return domains


def spn_points(norm_rows: np.ndarray, schema: DatasetSchema, labels: np.ndarray | None = None) -> np.ndarray:
    """Density-model points from normalized rows, optionally with the class
    label appended as the final feature."""
    spn_domains(schema, with_class=False)  # rejects mixed features
    points = np.asarray(norm_rows, dtype=float)
    if labels is not None:
        points = np.hstack([points, np.asarray(labels, dtype=float)[:, None]])
    return points


try:
    from sklearn.base import BaseEstimator
except ImportError:  # pragma: no cover
    BaseEstimator = object


class SpnDensityEstimator(BaseEstimator):
    """Density estimator with the fit/score_samples surface.

    Parameters mirror LearnConfig; ``min_instances_slice=None`` picks the
    n/20 default at fit time.
    """

    def __init__(
        self,
        domains: list[int] | None = None,
        min_instances_slice: int | None = None,
        independence_threshold: float = 0.05,
        histogram_bins: int = 10,
        pseudo_count: float = 1.0,
        random_state: int = 0,
    ):
        self.domains = domains
        self.min_instances_slice = min_instances_slice
        self.independence_threshold = independence_threshold
        self.histogram_bins = histogram_bins
        self.pseudo_count = pseudo_count
        self.random_state = random_state

    def fit(self, X: np.ndarray, y=None) -> "SpnDensityEstimator":
        X = np.asarray(X, dtype=float)
        domains = self.domains if self.domains is not None else [CONTINUOUS] * X.shape[1]
        config = LearnConfig(
            min_instances_slice=self.min_instances_slice or auto_min_slice(X.shape[0]),
            independence_threshold=self.independence_threshold,
            histogram_bins=self.histogram_bins,
            pseudo_count=self.pseudo_count,
            rng_seed=self.random_state,
        )
        self.spn_ = learn(X, domains, config)
        return self

    def score_samples(self, X: np.ndarray) -> np.ndarray:
        from .spn import log_likelihood_batch

        return log_likelihood_batch(self.spn_, np.asarray(X, dtype=float))

    def score(self, X: np.ndarray, y=None) -> float:
        return float(np.mean(self.score_samples(X)))
