"""Independent brute-force verifiers used by the tests.

Nothing here goes through the optimizer: counterfactual search is
exhaustive enumeration over a finite grid, and the density-bound check
samples random points. These are the reference implementations the
solver-based paths are measured against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoding import MadWeights
from .metrics import is_actionable, predicted_class, validity_margin
from .nn import Mlp
from .schema import DatasetSchema
from .spn import (
    CategoricalLeaf,
    HistogramLeaf,
    ProductNode,
    Spn,
    SumNode,
    check_valid,
    log_likelihood_batch,
    log_likelihood_max_approx,
    log_likelihood_max_approx_batch,
    max_approx_gap_bound,
)


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteGrid:
    """Finite candidate set per feature, in normalized coordinates."""

    values: tuple[tuple[float, ...], ...]
    cap: int = 10**6

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.values)

    def __post_init__(self):
        if self.size > self.cap:
            raise OracleError(f"grid size {self.size} exceeds cap {self.cap}")

    @staticmethod
    def from_schema(schema: DatasetSchema, cont_step: float = 1 / 16, cap: int = 10**6) -> "DiscreteGrid":
        values = []
        for spec in schema.features:
            tag = spec.kind.tag
            if tag == "continuous":
                n = int(round(1.0 / cont_step))
                values.append(tuple(i / n for i in range(n + 1)))
            elif tag == "discrete":
                lb, ub = int(spec.kind.lb), int(spec.kind.ub)
                values.append(tuple(spec.to_normalized(i) for i in range(lb, ub + 1)))
            elif tag == "binary":
                values.append((0.0, 1.0))
            elif tag in ("categorical", "ordinal"):
                values.append(tuple(float(k) for k in range(spec.kind.n_levels)))
            else:  # mixed: lattice plus the level codes
                n = int(round(1.0 / cont_step))
                lattice = [i / n for i in range(n + 1)]
                codes = [-(k + 1.0) for k in range(len(spec.kind.levels))]
                values.append(tuple(lattice + codes))
        return DiscreteGrid(values=tuple(values), cap=cap)


def mio_distance(
    f_norm: np.ndarray,
    cand_norm: np.ndarray,
    schema: DatasetSchema,
    weights: MadWeights,
    epsilon: float,
) -> float:
    """Distance exactly as the optimizer charges it: weighted L1 over the
    encoded dimensions, with same-branch continuous movement floored at
    epsilon (any nonzero move costs at least the minimal change)."""
    total = 0.0
    dim = 0
    for j, spec in enumerate(schema.features):
        tag = spec.kind.tag
        f, c = float(f_norm[j]), float(cand_norm[j])
        if tag in ("continuous", "discrete"):
            w = float(weights.per_dim[dim])
            delta = abs(c - f)
            if delta > 1e-12:
                total += w * max(delta, epsilon)
            dim += 1
        elif tag == "binary":
            w = float(weights.per_dim[dim])
            if int(round(f)) != int(round(c)):
                total += w
            dim += 1
        elif tag in ("categorical", "ordinal"):
            k_f, k_c = int(round(f)), int(round(c))
            if k_f != k_c:
                total += float(weights.per_dim[dim + k_f]) + float(weights.per_dim[dim + k_c])
            dim += spec.kind.n_levels
        else:  # mixed
            w = float(weights.per_dim[dim])
            f_cont = f if f >= 0 else 0.0
            c_cont = c if c >= 0 else 0.0
            if f >= 0 and c >= 0:
                delta = abs(c_cont - f_cont)
                if delta > 1e-12:
                    total += w * max(delta, epsilon)
            else:
                total += w * abs(c_cont - f_cont)
            dim += 1
            k_levels = len(spec.kind.levels)
            k_f = int(round(-f)) - 1 if f < 0 else None
            k_c = int(round(-c)) - 1 if c < 0 else None
            if k_f != k_c:
                if k_f is not None:
                    total += float(weights.per_dim[dim + k_f])
                if k_c is not None:
                    total += float(weights.per_dim[dim + k_c])
            dim += k_levels
    return total


@dataclass(frozen=True)
class OracleResult:
    best_norm: Optional[np.ndarray]
    best_objective: float
    n_feasible: int


def brute_force_ce(
    factual_norm: np.ndarray,
    grid: DiscreteGrid,
    schema: DatasetSchema,
    mlp: Mlp,
    weights: MadWeights,
    tau: float = 1e-4,
    epsilon: float = 1e-4,
    spn: Optional[Spn] = None,
    alpha: float = 0.0,
    delta_spn: Optional[float] = None,
    target_class: Optional[int] = None,
    spn_has_class: bool = True,
) -> OracleResult:
    """Exhaustively evaluate every grid point against the same validity,
    actionability and plausibility predicates the optimizer encodes, and
    return the objective minimizer (or none when no point is feasible)."""
    from .encoding import encoded_from_normalized

    factual_vec = encoded_from_normalized(factual_norm, schema)
    factual_class = predicted_class(mlp, factual_vec)
    best: Optional[np.ndarray] = None
    best_obj = math.inf
    n_feasible = 0
    for combo in itertools.product(*grid.values):
        cand = np.asarray(combo, dtype=float)
        cand_vec = encoded_from_normalized(cand, schema)
        cand_class = predicted_class(mlp, cand_vec)
        if cand_class == factual_class:
            continue
        if target_class is not None and cand_class != target_class:
            continue
        if validity_margin(mlp, cand_vec, factual_class, target_class) < tau:
            continue
        if not is_actionable(factual_norm, cand, schema, epsilon):
            continue
        objective = mio_distance(factual_norm, cand, schema, weights, epsilon)
        if spn is not None:
            point = list(cand) + ([float(cand_class)] if spn_has_class else [])
            approx_ll = log_likelihood_max_approx(spn, point)
            if delta_spn is not None and approx_ll < delta_spn:
                continue
            objective -= alpha * approx_ll
        n_feasible += 1
        if objective < best_obj - 1e-15:
            best = cand
            best_obj = objective
    return OracleResult(best_norm=best, best_objective=best_obj, n_feasible=n_feasible)


# ---------------------------------------------------------------------------
# density-bound checking


def infer_domains(spn: Spn) -> list[int]:
    """Per-feature domain markers recovered from the leaves (0 = continuous,
    k = categorical with k levels)."""
    domains = [0] * spn.n_features
    for node_id in spn.leaves():
        node = spn.nodes[node_id]
        if isinstance(node, CategoricalLeaf):
            domains[node.feature] = max(domains[node.feature], len(node.log_probs))
    return domains


def sample_points(spn: Spn, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    domains = infer_domains(spn)
    columns = []
    for d in domains:
        if d == 0:
            columns.append(rng.uniform(0.0, 1.0, size=n_samples))
        else:
            columns.append(rng.integers(0, d, size=n_samples).astype(float))
    return np.column_stack(columns)


def check_spn_bounds(spn: Spn, n_samples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Verify 0 <= exact - max_approx <= sum of log child counts on random
    points; raises on any violation and returns (max observed gap, bound)."""
    rng = np.random.default_rng(seed)
    points = sample_points(spn, n_samples, rng)
    exact = log_likelihood_batch(spn, points)
    approx = log_likelihood_max_approx_batch(spn, points)
    gaps = exact - approx
    bound = max_approx_gap_bound(spn)
    if np.any(gaps < -1e-9) or np.any(gaps > bound + 1e-9):
        worst_low = float(np.min(gaps))
        worst_high = float(np.max(gaps))
        raise RuntimeError(
            f"max-approximation bound violated: gaps in [{worst_low}, {worst_high}], "
            f"allowed [0, {bound}]"
        )
    return float(np.max(gaps)) if len(gaps) else 0.0, bound


# ---------------------------------------------------------------------------
# randomized valid networks for property tests


def random_valid_spn(
    rng: np.random.Generator,
    n_features: Optional[int] = None,
    max_depth: int = 4,
) -> Spn:
    """A random valid network: products split scopes, mixtures share them,
    leaves are random histograms or discrete distributions. Leaves over the
    same feature are occasionally shared between parents, so the result can
    be a DAG rather than a tree."""
    if n_features is None:
        n_features = int(rng.integers(1, 6))
    domains = [int(rng.integers(0, 4)) for _ in range(n_features)]
    domains = [0 if d == 0 else d + 1 for d in domains]  # 0 or 2..4 levels
    nodes: dict[int, object] = {}
    leaf_registry: dict[int, list[int]] = {}

    def add(node) -> int:
        node_id = len(nodes)
        nodes[node_id] = node
        return node_id

    def make_leaf(feature: int) -> int:
        existing = leaf_registry.get(feature, [])
        if existing and rng.random() < 0.3:
            return existing[int(rng.integers(0, len(existing)))]
        if domains[feature] == 0:
            n_bins = int(rng.integers(1, 6))
            interior = np.sort(rng.uniform(0.08, 0.92, size=n_bins - 1))
            # keep breakpoints strictly increasing with a safe gap
            for i in range(1, len(interior)):
                interior[i] = max(interior[i], interior[i - 1] + 0.02)
            breakpoints = np.concatenate([[0.0], interior, [1.0]])
            mass = rng.dirichlet(np.full(n_bins, 2.0)) + 1e-3
            mass /= mass.sum()
            density = mass / np.diff(breakpoints)
            leaf = add(HistogramLeaf(feature, breakpoints, np.log(density)))
        else:
            probs = rng.dirichlet(np.full(domains[feature], 2.0)) + 1e-4
            probs /= probs.sum()
            leaf = add(CategoricalLeaf(feature, np.log(probs)))
        leaf_registry.setdefault(feature, []).append(leaf)
        return leaf

    def build(scope: list[int], depth: int) -> int:
        if depth >= max_depth:
            if len(scope) == 1:
                return make_leaf(scope[0])
            return add(ProductNode(tuple(make_leaf(f) for f in scope)))
        roll = rng.random()
        if len(scope) == 1:
            if roll < 0.5:
                return make_leaf(scope[0])
            n_children = int(rng.integers(2, 4))
            children = tuple(build(scope, depth + 1) for _ in range(n_children))
            weights = rng.dirichlet(np.full(n_children, 3.0))
            weights = weights / weights.sum()
            return add(SumNode(children, weights))
        if roll < 0.5:
            split = int(rng.integers(1, len(scope)))
            shuffled = list(scope)
            rng.shuffle(shuffled)
            left, right = shuffled[:split], shuffled[split:]
            return add(ProductNode((build(sorted(left), depth + 1), build(sorted(right), depth + 1))))
        n_children = int(rng.integers(2, 4))
        children = tuple(build(scope, depth + 1) for _ in range(n_children))
        weights = rng.dirichlet(np.full(n_children, 3.0))
        weights = weights / weights.sum()
        return add(SumNode(children, weights))

    root = build(list(range(n_features)), 0)
    return check_valid(Spn(nodes=nodes, root=root, n_features=n_features))
