"""Sum-product density networks over normalized tabular features.

Inner nodes are weighted mixtures (sum nodes) and independent
factorizations (product nodes); leaves are piecewise-constant histograms on
[0, 1] for continuous-valued features and discrete distributions for
categorical ones. The network must be decomposable (product children have
pairwise disjoint scopes) and smooth (sum children share their scope),
which makes exact likelihood and marginalization a single bottom-up pass.

Points are float vectors with one entry per feature: continuous features in
[0, 1], categorical features as level indices, NaN for marginalized-out
features. Leaf log values are floored at ``LOG_FLOOR`` so downstream
optimization always works with finite numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
from scipy.special import logsumexp

from .schema import atomic_write_text

LOG_FLOOR = float(np.log(1e-9))
SPN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SumNode:
    children: tuple[int, ...]
    weights: np.ndarray


@dataclass(frozen=True)
class ProductNode:
    children: tuple[int, ...]


@dataclass(frozen=True)
class HistogramLeaf:
    feature: int
    breakpoints: np.ndarray  # B + 1 values, 0 = t_0 < ... < t_B = 1
    log_density: np.ndarray  # B values, log density per bin

    @property
    def n_bins(self) -> int:
        return len(self.log_density)


@dataclass(frozen=True)
class CategoricalLeaf:
    feature: int
    log_probs: np.ndarray


Node = Union[SumNode, ProductNode, HistogramLeaf, CategoricalLeaf]


class SpnValidationError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid SPN: " + "; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class Spn:
    nodes: dict[int, Node]
    root: int
    n_features: int

    def topo_order(self) -> list[int]:
        """Children-first order of every node reachable from the root."""
        order: list[int] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack = [(self.root, False)]
        while stack:
            node_id, expanded = stack.pop()
            if expanded:
                state[node_id] = 2
                order.append(node_id)
                continue
            if state.get(node_id) == 2:
                continue
            if state.get(node_id) == 1:
                raise SpnValidationError([f"node {node_id}: cycle detected"])
            state[node_id] = 1
            stack.append((node_id, True))
            node = self.nodes[node_id]
            if isinstance(node, (SumNode, ProductNode)):
                for child in node.children:
                    if state.get(child) == 1:
                        raise SpnValidationError([f"node {child}: cycle detected"])
                    if state.get(child) != 2:
                        stack.append((child, False))
        return order

    def scopes(self) -> dict[int, frozenset[int]]:
        scope: dict[int, frozenset[int]] = {}
        for node_id in self.topo_order():
            node = self.nodes[node_id]
            if isinstance(node, (HistogramLeaf, CategoricalLeaf)):
                scope[node_id] = frozenset([node.feature])
            else:
                scope[node_id] = frozenset().union(*(scope[c] for c in node.children))
        return scope

    def sum_nodes(self) -> list[int]:
        return [i for i in self.topo_order() if isinstance(self.nodes[i], SumNode)]

    def leaves(self) -> list[int]:
        return [
            i
            for i in self.topo_order()
            if isinstance(self.nodes[i], (HistogramLeaf, CategoricalLeaf))
        ]


def max_approx_gap_bound(spn: Spn) -> float:
    """Sum of log child counts over sum nodes: the worst-case shortfall of
    the max-approximate log-likelihood below the exact one."""
    return float(
        sum(np.log(len(spn.nodes[i].children)) for i in spn.sum_nodes())
    )


# ---------------------------------------------------------------------------
# validation


def validate(spn: Spn) -> list[str]:
    """Structural violations, empty when the network is a valid SPN."""
    violations: list[str] = []
    try:
        order = spn.topo_order()
    except SpnValidationError as exc:
        return list(exc.violations)
    if spn.root not in spn.nodes:
        return [f"root {spn.root} is not a node"]

    for node_id in order:
        node = spn.nodes[node_id]
        if isinstance(node, SumNode):
            if len(node.children) == 0:
                violations.append(f"node {node_id}: sum node without children")
            if len(node.weights) != len(node.children):
                violations.append(f"node {node_id}: weight/child count mismatch")
                continue
            if np.any(np.asarray(node.weights) <= 0):
                violations.append(f"node {node_id}: sum weights must be positive")
            if abs(float(np.sum(node.weights)) - 1.0) > 1e-9:
                violations.append(
                    f"node {node_id}: sum weights add to {float(np.sum(node.weights)):.12f}"
                )
        elif isinstance(node, ProductNode):
            if len(node.children) == 0:
                violations.append(f"node {node_id}: product node without children")
        elif isinstance(node, HistogramLeaf):
            t = np.asarray(node.breakpoints, dtype=float)
            q = np.asarray(node.log_density, dtype=float)
            if len(t) != len(q) + 1:
                violations.append(f"node {node_id}: need n_bins + 1 breakpoints")
                continue
            if t[0] != 0.0 or t[-1] != 1.0:
                violations.append(f"node {node_id}: breakpoints must cover [0, 1]")
            if np.any(np.diff(t) <= 0):
                violations.append(f"node {node_id}: breakpoints must strictly increase")
            mass = float(np.sum(np.exp(q) * np.diff(t)))
            if abs(mass - 1.0) > 1e-6:
                violations.append(f"node {node_id}: histogram integrates to {mass:.8f}")
            if not (0 <= node.feature < spn.n_features):
                violations.append(f"node {node_id}: feature index {node.feature} out of range")
        elif isinstance(node, CategoricalLeaf):
            total = float(np.sum(np.exp(node.log_probs)))
            if abs(total - 1.0) > 1e-9:
                violations.append(f"node {node_id}: probabilities add to {total:.12f}")
            if not (0 <= node.feature < spn.n_features):
                violations.append(f"node {node_id}: feature index {node.feature} out of range")
        else:
            violations.append(f"node {node_id}: unknown node type {type(node).__name__}")

    if violations:
        return violations

    scope = spn.scopes()
    for node_id in order:
        node = spn.nodes[node_id]
        if isinstance(node, ProductNode):
            seen: set[int] = set()
            for child in node.children:
                if scope[child] & seen:
                    violations.append(
                        f"node {node_id}: children share features {sorted(scope[child] & seen)}"
                    )
                seen |= scope[child]
        elif isinstance(node, SumNode):
            child_scopes = {scope[c] for c in node.children}
            if len(child_scopes) > 1:
                violations.append(f"node {node_id}: sum children have differing scopes")
    if scope[spn.root] != frozenset(range(spn.n_features)):
        violations.append(
            f"root scope {sorted(scope[spn.root])} does not cover all {spn.n_features} features"
        )
    return violations


def check_valid(spn: Spn) -> Spn:
    violations = validate(spn)
    if violations:
        raise SpnValidationError(violations)
    return spn


# ---------------------------------------------------------------------------
# inference


def histogram_bin_index(breakpoints: np.ndarray, value: float) -> int:
    """Bin containing ``value``: left-closed, right-open, last bin closed."""
    idx = int(np.searchsorted(breakpoints, value, side="right")) - 1
    return min(max(idx, 0), len(breakpoints) - 2)


def _leaf_log_values(node: Node, column: np.ndarray) -> np.ndarray:
    """Per-point floored log value of a leaf; NaN entries marginalize to 0."""
    out = np.zeros(len(column))
    assigned = ~np.isnan(column)
    if not np.any(assigned):
        return out
    vals = column[assigned]
    if isinstance(node, HistogramLeaf):
        idx = np.searchsorted(node.breakpoints, vals, side="right") - 1
        idx = np.clip(idx, 0, node.n_bins - 1)
        logs = np.asarray(node.log_density, dtype=float)[idx]
        # values outside [0, 1] carry no density
        logs = np.where((vals < 0.0) | (vals > 1.0), -np.inf, logs)
    else:
        levels = np.round(vals).astype(int)
        if np.any((levels < 0) | (levels >= len(node.log_probs))):
            raise ValueError(
                f"categorical value out of range for feature {node.feature}"
            )
        logs = np.asarray(node.log_probs, dtype=float)[levels]
    out[assigned] = np.maximum(logs, LOG_FLOOR)
    return out


def _evaluate(spn: Spn, points: np.ndarray, max_approx: bool) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != spn.n_features:
        raise ValueError(
            f"points have {points.shape[1]} features, SPN expects {spn.n_features}"
        )
    values: dict[int, np.ndarray] = {}
    for node_id in spn.topo_order():
        node = spn.nodes[node_id]
        if isinstance(node, (HistogramLeaf, CategoricalLeaf)):
            values[node_id] = _leaf_log_values(node, points[:, node.feature])
        elif isinstance(node, ProductNode):
            values[node_id] = np.sum([values[c] for c in node.children], axis=0)
        else:
            stacked = np.vstack([values[c] for c in node.children])
            stacked = stacked + np.log(np.asarray(node.weights, dtype=float))[:, None]
            if max_approx:
                values[node_id] = np.max(stacked, axis=0)
            else:
                values[node_id] = logsumexp(stacked, axis=0)
    return values[spn.root]


def log_likelihood(spn: Spn, point: Iterable[float]) -> float:
    """Exact log density/mass at a fully assigned point."""
    return float(_evaluate(spn, np.asarray(list(point), dtype=float), max_approx=False)[0])


def log_likelihood_batch(spn: Spn, points: np.ndarray) -> np.ndarray:
    return _evaluate(spn, points, max_approx=False)


def log_likelihood_max_approx(spn: Spn, point: Iterable[float]) -> float:
    """Same recursion with each mixture replaced by its best weighted
    component; a lower bound on the exact value, short by at most
    ``max_approx_gap_bound``."""
    return float(_evaluate(spn, np.asarray(list(point), dtype=float), max_approx=True)[0])


def log_likelihood_max_approx_batch(spn: Spn, points: np.ndarray) -> np.ndarray:
    return _evaluate(spn, points, max_approx=True)


def marginal_log_likelihood(spn: Spn, partial_point: Iterable[float]) -> float:
    """Log likelihood with NaN entries integrated out; all-NaN input gives 0."""
    return float(_evaluate(spn, np.asarray(list(partial_point), dtype=float), max_approx=False)[0])


# ---------------------------------------------------------------------------
# serialization


def spn_to_json(spn: Spn) -> dict:
    nodes = []
    for node_id in sorted(spn.nodes):
        node = spn.nodes[node_id]
        if isinstance(node, SumNode):
            nodes.append(
                {
                    "id": node_id,
                    "type": "sum",
                    "children": list(node.children),
                    "weights": [float(w) for w in node.weights],
                }
            )
        elif isinstance(node, ProductNode):
            nodes.append({"id": node_id, "type": "product", "children": list(node.children)})
        elif isinstance(node, HistogramLeaf):
            nodes.append(
                {
                    "id": node_id,
                    "type": "histogram",
                    "feature": node.feature,
                    "breakpoints": [float(t) for t in node.breakpoints],
                    "log_density": [float(q) for q in node.log_density],
                }
            )
        else:
            nodes.append(
                {
                    "id": node_id,
                    "type": "categorical",
                    "feature": node.feature,
                    "log_probs": [float(p) for p in node.log_probs],
                }
            )
    return {
        "format_version": SPN_FORMAT_VERSION,
        "n_features": spn.n_features,
        "root": spn.root,
        "nodes": nodes,
    }


def spn_from_json(data: dict) -> Spn:
    nodes: dict[int, Node] = {}
    try:
        for nd in data["nodes"]:
            node_id = int(nd["id"])
            kind = nd["type"]
            if kind == "sum":
                nodes[node_id] = SumNode(
                    tuple(int(c) for c in nd["children"]),
                    np.asarray(nd["weights"], dtype=float),
                )
            elif kind == "product":
                nodes[node_id] = ProductNode(tuple(int(c) for c in nd["children"]))
            elif kind == "histogram":
                nodes[node_id] = HistogramLeaf(
                    int(nd["feature"]),
                    np.asarray(nd["breakpoints"], dtype=float),
                    np.asarray(nd["log_density"], dtype=float),
                )
            elif kind == "categorical":
                nodes[node_id] = CategoricalLeaf(
                    int(nd["feature"]), np.asarray(nd["log_probs"], dtype=float)
                )
            else:
                raise SpnValidationError([f"node {node_id}: unknown type {kind!r}"])
        spn = Spn(nodes=nodes, root=int(data["root"]), n_features=int(data["n_features"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SpnValidationError):
            raise
        raise SpnValidationError([f"malformed document: {exc}"]) from exc
    missing = [
        c
        for n in nodes.values()
        if isinstance(n, (SumNode, ProductNode))
        for c in n.children
        if c not in nodes
    ]
    if missing:
        raise SpnValidationError([f"children reference missing nodes {sorted(set(missing))}"])
    return check_valid(spn)


def save_spn(spn: Spn, path: str) -> None:
    atomic_write_text(path, json.dumps(spn_to_json(spn), indent=1) + "\n")


def load_spn(path: str) -> Spn:
    with open(path) as handle:
        return spn_from_json(json.load(handle))
