"""Compilation of the counterfactual search into one mixed-integer model.

The pieces, in the order they are usually assembled:

  build_input        two-sided change encoding of every feature (continuous
                     value as anchor - decrease + increase, one-hot levels,
                     the either/or selector for mixed features, an integer
                     proxy for discrete contiguous features)
  encode_classifier  exact big-M encoding of the ReLU network on top of the
                     encoded input dimensions
  add_validity       raw-score margin rows that force the counterfactual
                     class (binary sign, targeted or untargeted multiclass)
  encode_spn         log-likelihood of the density network as one variable:
                     products become sums, mixtures become a max picked out
                     by slack binaries, histograms become bin-membership
                     binaries
  add_desiderata     immutability, monotone directions, causal rules,
                     optional sparsity cap and likelihood threshold
  set_objective      inverse-MAD weighted L1 distance minus alpha times the
                     log-likelihood variable

``build_ce_model`` wires all of it together and marks the decision
variables (level indicators, branch selectors, integer proxies, histogram
bins) as the ones the solution pool enumerates over, so pool entries are
genuinely distinct counterfactuals rather than re-labelings of auxiliary
binaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import mio
from .encoding import MadWeights, encoded_from_normalized
from .mio import MioModel
from .nn import ActivationBounds, Mlp, interval_bounds
from .schema import DatasetSchema, Direction, FeatureSpec, Monotone
from .spn import LOG_FLOOR, CategoricalLeaf, HistogramLeaf, ProductNode, Spn, SumNode


class FormulationError(ValueError):
    pass


@dataclass(frozen=True)
class CeConstraints:
    """Search parameters: margins, minimal changes and optional extras."""

    tau: float = 1e-4
    epsilon: float = 1e-4
    sparsity_cap: Optional[int] = None
    delta_spn: Optional[float] = None
    alpha: float = 0.0
    target_class: Optional[int] = None
    big_m_ll: float = 100.0
    rho: Optional[float] = None  # relative pool distance cap, off by default

    def __post_init__(self):
        for label, value in (("tau", self.tau), ("epsilon", self.epsilon), ("alpha", self.alpha)):
            if not np.isfinite(value) or value < 0:
                raise FormulationError(f"{label} must be finite and nonnegative")
        if self.delta_spn is not None and not np.isfinite(self.delta_spn):
            raise FormulationError("delta_spn must be finite")
        if self.sparsity_cap is not None and self.sparsity_cap < 0:
            raise FormulationError("sparsity_cap must be nonnegative")
        if self.rho is not None and self.rho < 0:
            raise FormulationError("rho must be nonnegative")


@dataclass
class FeatureVars:
    spec: FeatureSpec
    factual: float  # normalized factual value (negative codes = mixed levels)
    anchor: Optional[float] = None  # F
    dec: Optional[int] = None  # l
    inc: Optional[int] = None  # u
    cont: Optional[int] = None  # c
    onehot: list[int] = field(default_factory=list)  # d_{j,k}
    cont_indicator: Optional[int] = None  # d_cont (mixed only)
    proxy_int: Optional[int] = None  # z (discrete contiguous only)
    change: Optional[int] = None  # minimal-movement indicator

    @property
    def factual_level(self) -> Optional[int]:
        tag = self.spec.kind.tag
        if tag in ("binary", "categorical", "ordinal"):
            return int(round(self.factual))
        if tag == "mixed" and self.factual < 0:
            return int(round(-self.factual)) - 1
        return None

    def level_expr(self, k: int) -> tuple[dict[int, float], float]:
        """Indicator of level k as (coefficients, constant)."""
        if self.spec.kind.tag == "binary":
            b = self.onehot[0]
            return ({b: 1.0}, 0.0) if k == 1 else ({b: -1.0}, 1.0)
        return ({self.onehot[k]: 1.0}, 0.0)

    def decision_vars(self) -> list[int]:
        out = list(self.onehot)
        for extra in (self.cont_indicator, self.proxy_int):
            if extra is not None:
                out.append(extra)
        return out


@dataclass
class InputHandles:
    features: list[FeatureVars]
    encoded_dims: list[int]  # var ids aligned with schema.encoded_layout()

    def decision_vars(self) -> list[int]:
        return [v for fv in self.features for v in fv.decision_vars()]


# ---------------------------------------------------------------------------
# input encoding


def _build_feature(model: MioModel, spec: FeatureSpec, value: float, eps: float) -> FeatureVars:
    tag = spec.kind.tag
    fv = FeatureVars(spec=spec, factual=float(value))
    name = spec.name

    if tag == "binary":
        fv.onehot = [model.add_var(name, mio.BINARY)]
        return fv

    if tag in ("categorical", "ordinal"):
        fv.onehot = [model.add_var(f"{name}={lvl}", mio.BINARY) for lvl in spec.kind.levels]
        model.add_constraint({d: 1.0 for d in fv.onehot}, "==", 1.0, f"{name}_onehot")
        return fv

    # continuous branch exists: continuous / discrete / mixed
    if tag == "mixed" and value < 0:
        anchor = spec.continuous_median
        if anchor is None:
            raise FormulationError(
                f"feature {name!r}: mixed feature needs continuous_median when the "
                "factual takes a categorical level"
            )
    else:
        anchor = float(value)
    fv.anchor = anchor
    fv.dec = model.add_var(f"{name}_dec", mio.CONTINUOUS, 0.0, max(anchor, 0.0))
    fv.inc = model.add_var(f"{name}_inc", mio.CONTINUOUS, 0.0, max(1.0 - anchor, 0.0))
    fv.cont = model.add_var(f"{name}_val", mio.CONTINUOUS, 0.0, 1.0)

    if tag == "mixed":
        fv.onehot = [model.add_var(f"{name}={lvl}", mio.BINARY) for lvl in spec.kind.levels]
        fv.cont_indicator = model.add_var(f"{name}_is_cont", mio.BINARY)
        selector = {d: 1.0 for d in fv.onehot}
        selector[fv.cont_indicator] = 1.0
        model.add_constraint(selector, "==", 1.0, f"{name}_selector")
        # c = F*d_cont - l + u ; movement exists only on the continuous branch
        model.add_constraint(
            {fv.cont: 1.0, fv.cont_indicator: -anchor, fv.dec: 1.0, fv.inc: -1.0},
            "==",
            0.0,
            f"{name}_value",
        )
        model.add_constraint({fv.dec: 1.0, fv.cont_indicator: -anchor}, "<=", 0.0, f"{name}_dec_gate")
        model.add_constraint(
            {fv.inc: 1.0, fv.cont_indicator: -(1.0 - anchor)}, "<=", 0.0, f"{name}_inc_gate"
        )
    else:
        model.add_constraint({fv.cont: 1.0, fv.dec: 1.0, fv.inc: -1.0}, "==", anchor, f"{name}_value")

    if tag == "discrete":
        fv.proxy_int = model.add_var(f"{name}_int", mio.INTEGER, spec.kind.lb, spec.kind.ub)
        # raw value (c - shift)/scale must land on the integer proxy
        model.add_constraint(
            {fv.cont: 1.0, fv.proxy_int: -spec.scale}, "==", spec.shift, f"{name}_integral"
        )

    if eps > 0:
        # any continuous movement must amount to at least eps
        fv.change = model.add_var(f"{name}_moved", mio.BINARY)
        model.add_constraint(
            {fv.dec: 1.0, fv.inc: 1.0, fv.change: -1.0}, "<=", 0.0, f"{name}_move_cap"
        )
        model.add_constraint(
            {fv.dec: 1.0, fv.inc: 1.0, fv.change: -eps}, ">=", 0.0, f"{name}_move_floor"
        )
    return fv


def build_input(
    model: MioModel,
    schema: DatasetSchema,
    factual_norm: np.ndarray,
    constraints: CeConstraints = CeConstraints(),
) -> InputHandles:
    """Add the change-encoding rows for every feature and return handles to
    the variables, including the flat encoded-dimension view the classifier
    and the distance objective consume."""
    features = [
        _build_feature(model, spec, value, constraints.epsilon)
        for spec, value in zip(schema.features, factual_norm)
    ]
    encoded_dims: list[int] = []
    for fv in features:
        tag = fv.spec.kind.tag
        if tag in ("continuous", "discrete"):
            encoded_dims.append(fv.cont)
        elif tag == "binary":
            encoded_dims.append(fv.onehot[0])
        elif tag in ("categorical", "ordinal"):
            encoded_dims.extend(fv.onehot)
        else:
            encoded_dims.append(fv.cont)
            encoded_dims.extend(fv.onehot)
    return InputHandles(features=features, encoded_dims=encoded_dims)


def fix_input(model: MioModel, handles: InputHandles, encoded_vector: np.ndarray) -> None:
    """Pin every encoded dimension to a concrete value (testing hook)."""
    for var_id, value in zip(handles.encoded_dims, encoded_vector):
        model.fix_var(var_id, float(value))


# ---------------------------------------------------------------------------
# classifier


def encode_classifier(
    model: MioModel,
    mlp: Mlp,
    handles: InputHandles,
    bounds: Optional[ActivationBounds] = None,
) -> list[int]:
    """Big-M ReLU encoding; returns the raw output variable ids.

    Units whose pre-activation interval is entirely nonpositive are fixed to
    zero, entirely nonnegative ones pass through linearly; only genuinely
    unstable units pay for a binary.
    """
    if mlp.n_inputs != len(handles.encoded_dims):
        raise FormulationError(
            f"network expects {mlp.n_inputs} inputs, schema encodes {len(handles.encoded_dims)}"
        )
    if bounds is None:
        bounds = interval_bounds(mlp)
    prev = list(handles.encoded_dims)
    for li, (w, b) in enumerate(mlp.layers):
        is_output = li == len(mlp.layers) - 1
        lo, hi = bounds.lower[li], bounds.upper[li]
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise FormulationError(f"layer {li}: non-finite activation bounds")
        current: list[int] = []
        for unit in range(w.shape[0]):
            affine = {prev[k]: -float(w[unit, k]) for k in range(w.shape[1]) if w[unit, k] != 0.0}
            bias = float(b[unit])
            unit_lo, unit_hi = float(lo[unit]), float(hi[unit])
            if is_output:
                out = model.add_var(f"raw_{unit}", mio.CONTINUOUS, unit_lo, unit_hi)
                row = dict(affine)
                row[out] = row.get(out, 0.0) + 1.0
                model.add_constraint(row, "==", bias, f"out_{unit}")
            elif unit_hi <= 0.0:
                out = model.add_var(f"h{li}_{unit}", mio.CONTINUOUS, 0.0, 0.0)
            elif unit_lo >= 0.0:
                out = model.add_var(f"h{li}_{unit}", mio.CONTINUOUS, unit_lo, unit_hi)
                row = dict(affine)
                row[out] = row.get(out, 0.0) + 1.0
                model.add_constraint(row, "==", bias, f"h{li}_{unit}_pass")
            else:
                out = model.add_var(f"h{li}_{unit}", mio.CONTINUOUS, 0.0, unit_hi)
                gate = model.add_var(f"h{li}_{unit}_on", mio.BINARY)
                ge_row = dict(affine)
                ge_row[out] = ge_row.get(out, 0.0) + 1.0
                model.add_constraint(ge_row, ">=", bias, f"h{li}_{unit}_ge")
                le_row = dict(affine)
                le_row[out] = le_row.get(out, 0.0) + 1.0
                le_row[gate] = le_row.get(gate, 0.0) - unit_lo
                model.add_constraint(le_row, "<=", bias - unit_lo, f"h{li}_{unit}_le")
                model.add_constraint({out: 1.0, gate: -unit_hi}, "<=", 0.0, f"h{li}_{unit}_cap")
            current.append(out)
        prev = current
    return prev


# ---------------------------------------------------------------------------
# validity


ClassExpr = tuple[dict[int, float], float]  # (coefficients, constant)


@dataclass(frozen=True)
class ValidityInfo:
    factual_class: int
    target_class: Optional[int]  # None = untargeted multiclass
    class_exprs: tuple[ClassExpr, ...]  # per-class indicator as an expression


def add_validity(
    model: MioModel,
    raw_vars: list[int],
    factual_class: int,
    n_classes: int,
    constraints: CeConstraints,
) -> ValidityInfo:
    """Force the counterfactual class with margin tau.

    Binary task: sign of the single raw score. Multiclass with a target:
    pairwise margin rows against every other class. Multiclass untargeted:
    per-class "beats the factual class" indicators of which at least one
    must fire; a winner indicator that additionally dominates every class
    marks the class fed to the density model.
    """
    tau = constraints.tau
    if n_classes == 2 and len(raw_vars) == 1:
        raw = raw_vars[0]
        target = constraints.target_class
        if target is None:
            target = 1 - factual_class
        if target == factual_class:
            raise FormulationError("target class equals the factual class")
        if target == 1:
            model.add_constraint({raw: 1.0}, ">=", tau, "validity")
        else:
            model.add_constraint({raw: 1.0}, "<=", -tau, "validity")
        exprs = [({}, 1.0 if c == target else 0.0) for c in range(2)]
        return ValidityInfo(factual_class, target, tuple(exprs))

    if len(raw_vars) != n_classes:
        raise FormulationError(f"{len(raw_vars)} raw outputs for {n_classes} classes")

    if constraints.target_class is not None:
        target = constraints.target_class
        if not 0 <= target < n_classes:
            raise FormulationError(f"target class {target} out of range")
        if target == factual_class:
            raise FormulationError("target class equals the factual class")
        for k in range(n_classes):
            if k != target:
                model.add_constraint(
                    {raw_vars[target]: 1.0, raw_vars[k]: -1.0}, ">=", tau, f"validity_{k}"
                )
        exprs = [({}, 1.0 if c == target else 0.0) for c in range(n_classes)]
        return ValidityInfo(factual_class, target, tuple(exprs))

    # untargeted: g_k = 1 iff class k beats the factual class by tau
    gates: dict[int, int] = {}
    for k in range(n_classes):
        if k == factual_class:
            continue
        g = model.add_var(f"beats_{k}", mio.BINARY)
        gates[k] = g
        diff = {raw_vars[k]: 1.0, raw_vars[factual_class]: -1.0}
        model.add_implication(g, 1, diff, ">=", tau, f"beats_{k}_on")
        model.add_implication(g, 0, diff, "<=", tau, f"beats_{k}_off")
    model.add_constraint({g: 1.0 for g in gates.values()}, ">=", 1.0, "some_class_beats")

    winners: list[ClassExpr] = []
    winner_vars: dict[int, int] = {}
    for k in range(n_classes):
        if k == factual_class:
            winners.append(({}, 0.0))
            continue
        y = model.add_var(f"cf_class_{k}", mio.BINARY)
        winner_vars[k] = y
        model.add_constraint({y: 1.0, gates[k]: -1.0}, "<=", 0.0, f"cf_class_{k}_beats")
        for m in range(n_classes):
            if m != k:
                model.add_implication(
                    y, 1, {raw_vars[k]: 1.0, raw_vars[m]: -1.0}, ">=", 0.0, f"cf_class_{k}_top"
                )
        winners.append(({y: 1.0}, 0.0))
    model.add_constraint({y: 1.0 for y in winner_vars.values()}, "==", 1.0, "one_cf_class")
    return ValidityInfo(factual_class, None, tuple(winners))


# ---------------------------------------------------------------------------
# density network


@dataclass(frozen=True)
class LeafBins:
    feature: int
    breakpoints: tuple[float, ...]
    outside_vars: tuple[int, ...]  # 1 = value not in that bin


@dataclass(frozen=True)
class SpnEncoding:
    root_var: int
    bin_vars: tuple[int, ...]  # histogram bin-membership binaries (pool decisions)
    leaf_bins: tuple[LeafBins, ...]


def encode_spn(
    model: MioModel,
    spn: Spn,
    handles: InputHandles,
    class_exprs: Optional[Sequence[ClassExpr]] = None,
    constraints: CeConstraints = CeConstraints(),
) -> SpnEncoding:
    """Add the log-likelihood rows of the density network and return the
    root value variable.

    The network may scope the schema features plus one trailing class
    feature, which is tied to the counterfactual-class expressions from
    add_validity. Products add child values; mixtures take the best
    weighted child, selected by slack binaries whose big-M constant is the
    spread of the children's value ranges (finite because every stored log
    value is floored).
    """
    n_schema = len(handles.features)
    if spn.n_features == n_schema + 1:
        class_feature = n_schema
        if class_exprs is None:
            raise FormulationError("density network includes a class feature; class_exprs required")
    elif spn.n_features == n_schema:
        class_feature = None
    else:
        raise FormulationError(
            f"density network covers {spn.n_features} features, schema has {n_schema}"
        )

    eps = constraints.epsilon
    values: dict[int, int] = {}
    ranges: dict[int, tuple[float, float]] = {}
    bin_vars: list[int] = []
    leaf_bins: list[LeafBins] = []

    for node_id in spn.topo_order():
        node = spn.nodes[node_id]
        tag = f"spn{node_id}"
        if isinstance(node, HistogramLeaf):
            fv = handles.features[node.feature]
            if fv.cont is None:
                raise FormulationError(
                    f"histogram leaf {node_id} over feature {node.feature} "
                    "which has no continuous value"
                )
            q = np.maximum(np.asarray(node.log_density, dtype=float), LOG_FLOOR)
            lo, hi = float(np.min(q)), float(np.max(q))
            o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, lo, hi)
            if node.n_bins == 1:
                model.fix_var(o, float(q[0]))
            else:
                t = np.asarray(node.breakpoints, dtype=float)
                outside = [model.add_var(f"{tag}_out{i}", mio.BINARY) for i in range(node.n_bins)]
                bin_vars.extend(outside)
                leaf_bins.append(
                    LeafBins(node.feature, tuple(float(v) for v in t), tuple(outside))
                )
                for i in range(node.n_bins):
                    # outside_i = 1 whenever x < t_i or x > t_{i+1} - eps;
                    # interior right boundaries are eps-strict, the last bin
                    # stays closed at 1 and the first-bin lower row is vacuous
                    if i > 0:
                        model.add_constraint(
                            {outside[i]: 1.0, fv.cont: 1.0}, ">=", float(t[i]), f"{tag}_lo{i}"
                        )
                    if i < node.n_bins - 1:
                        model.add_constraint(
                            {outside[i]: 1.0, fv.cont: -1.0},
                            ">=",
                            eps - float(t[i + 1]),
                            f"{tag}_hi{i}",
                        )
                model.add_constraint(
                    {b: 1.0 for b in outside}, "==", float(node.n_bins - 1), f"{tag}_onebin"
                )
                row = {o: 1.0}
                for i, b in enumerate(outside):
                    row[b] = float(q[i])
                model.add_constraint(row, "==", float(np.sum(q)), f"{tag}_value")
            values[node_id] = o
            ranges[node_id] = (lo, hi)
        elif isinstance(node, CategoricalLeaf):
            q = np.maximum(np.asarray(node.log_probs, dtype=float), LOG_FLOOR)
            lo, hi = float(np.min(q)), float(np.max(q))
            if class_feature is not None and node.feature == class_feature:
                if len(q) != len(class_exprs):
                    raise FormulationError(
                        f"class leaf {node_id} has {len(q)} levels for {len(class_exprs)} classes"
                    )
                if all(not coeffs for coeffs, _ in class_exprs):
                    # class known up front: the leaf is a constant
                    value = float(
                        sum(q[k] * const for k, (_, const) in enumerate(class_exprs))
                    )
                    o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, value, value)
                    lo = hi = value
                else:
                    o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, lo, hi)
                    row = {o: 1.0}
                    const = 0.0
                    for k, (coeffs, c0) in enumerate(class_exprs):
                        for var, coef in coeffs.items():
                            row[var] = row.get(var, 0.0) - float(q[k]) * coef
                        const += float(q[k]) * c0
                    model.add_constraint(row, "==", const, f"{tag}_class")
            else:
                fv = handles.features[node.feature]
                o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, lo, hi)
                if fv.spec.kind.tag == "binary":
                    model.add_constraint(
                        {o: 1.0, fv.onehot[0]: float(q[0]) - float(q[1])},
                        "==",
                        float(q[0]),
                        f"{tag}_value",
                    )
                elif fv.spec.kind.tag in ("categorical", "ordinal"):
                    if len(q) != len(fv.onehot):
                        raise FormulationError(
                            f"leaf {node_id} has {len(q)} levels, feature has {len(fv.onehot)}"
                        )
                    row = {o: 1.0}
                    for k, d in enumerate(fv.onehot):
                        row[d] = -float(q[k])
                    model.add_constraint(row, "==", 0.0, f"{tag}_value")
                else:
                    raise FormulationError(
                        f"categorical leaf {node_id} over non-categorical feature {node.feature}"
                    )
            values[node_id] = o
            ranges[node_id] = (lo, hi)
        elif isinstance(node, ProductNode):
            lo = sum(ranges[c][0] for c in node.children)
            hi = sum(ranges[c][1] for c in node.children)
            o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, lo, hi)
            row: dict[int, float] = {}
            for c in node.children:
                row[values[c]] = row.get(values[c], 0.0) - 1.0
            row[o] = row.get(o, 0.0) + 1.0
            model.add_constraint(row, "==", 0.0, f"{tag}_product")
            values[node_id] = o
            ranges[node_id] = (lo, hi)
        elif isinstance(node, SumNode):
            log_w = np.log(np.asarray(node.weights, dtype=float))
            z_lo = [ranges[c][0] + float(lw) for c, lw in zip(node.children, log_w)]
            z_hi = [ranges[c][1] + float(lw) for c, lw in zip(node.children, log_w)]
            lo, hi = max(z_lo), max(z_hi)
            big_m = max(hi - min(z_lo), 0.0)
            if not np.isfinite(big_m):
                big_m = constraints.big_m_ll
            o = model.add_var(f"{tag}_ll", mio.CONTINUOUS, lo, hi)
            slacks = [model.add_var(f"{tag}_m{k}", mio.BINARY) for k in range(len(node.children))]
            for k, child in enumerate(node.children):
                model.add_constraint(
                    {o: 1.0, values[child]: -1.0, slacks[k]: -big_m},
                    "<=",
                    float(log_w[k]),
                    f"{tag}_max{k}",
                )
            model.add_constraint(
                {m: 1.0 for m in slacks}, "==", float(len(node.children) - 1), f"{tag}_pick"
            )
            values[node_id] = o
            ranges[node_id] = (lo, hi)
        else:
            raise FormulationError(f"unknown node type {type(node).__name__}")
    return SpnEncoding(
        root_var=values[spn.root], bin_vars=tuple(bin_vars), leaf_bins=tuple(leaf_bins)
    )


# ---------------------------------------------------------------------------
# desiderata


def add_desiderata(
    model: MioModel,
    handles: InputHandles,
    schema: DatasetSchema,
    constraints: CeConstraints,
    o_root: Optional[int] = None,
) -> None:
    """Immutability, monotone directions, causal rules, optional sparsity
    cap and the likelihood threshold row. Contradictory rules surface as
    solver infeasibility, never as an exception here."""
    eps = constraints.epsilon

    for fv in handles.features:
        spec, tag = fv.spec, fv.spec.kind.tag
        if not spec.mutable:
            if fv.dec is not None:
                model.fix_var(fv.dec, 0.0)
                model.fix_var(fv.inc, 0.0)
            if tag == "mixed":
                model.fix_var(fv.cont_indicator, 1.0 if fv.factual >= 0 else 0.0)
            level = fv.factual_level
            if level is not None:
                if tag == "binary":
                    model.fix_var(fv.onehot[0], float(level))
                else:
                    for k, d in enumerate(fv.onehot):
                        model.fix_var(d, 1.0 if k == level else 0.0)
            continue
        if spec.monotone == Monotone.NONE:
            continue
        if tag in ("continuous", "discrete"):
            model.fix_var(fv.dec if spec.monotone == Monotone.NON_DECREASING else fv.inc, 0.0)
        else:  # ordinal
            level = fv.factual_level
            banned = (
                range(0, level)
                if spec.monotone == Monotone.NON_DECREASING
                else range(level + 1, len(fv.onehot))
            )
            for k in banned:
                model.fix_var(fv.onehot[k], 0.0)

    for idx, rule in enumerate(schema.causal_rules):
        cause = handles.features[schema.feature_index(rule.cause)]
        effect = handles.features[schema.feature_index(rule.effect)]
        r = model.add_var(f"causal_{idx}", mio.BINARY)
        # activation: r = 1 whenever the cause moved in its direction
        if cause.spec.kind.tag in ("continuous", "discrete"):
            if rule.cause_direction == Direction.INCREASE:
                row = {r: 1.0, cause.inc: -1.0, cause.dec: 1.0}
            else:
                row = {r: 1.0, cause.dec: -1.0, cause.inc: 1.0}
            model.add_constraint(row, ">=", 0.0, f"causal_{idx}_cause")
        else:  # ordinal cause
            level = cause.factual_level
            beyond = (
                range(level + 1, len(cause.onehot))
                if rule.cause_direction == Direction.INCREASE
                else range(0, level)
            )
            row = {r: 1.0}
            for k in beyond:
                row[cause.onehot[k]] = -1.0
            model.add_constraint(row, ">=", 0.0, f"causal_{idx}_cause")
        # enforcement: the effect must move along its direction when r = 1
        if effect.spec.kind.tag in ("continuous", "discrete"):
            step = effect.spec.scale if effect.spec.kind.tag == "discrete" else eps
            step = max(step, eps)
            if rule.effect_direction == Direction.DECREASE:
                model.add_constraint({effect.dec: 1.0, r: -step}, ">=", 0.0, f"causal_{idx}_dn")
                model.add_constraint({effect.inc: 1.0, r: 1.0}, "<=", 1.0, f"causal_{idx}_dn_cap")
            else:
                model.add_constraint({effect.inc: 1.0, r: -step}, ">=", 0.0, f"causal_{idx}_up")
                model.add_constraint({effect.dec: 1.0, r: 1.0}, "<=", 1.0, f"causal_{idx}_up_cap")
        else:  # ordinal effect: r = 1 bars any move past the factual level
            level = effect.factual_level
            allowed = (
                range(0, level + 1)
                if rule.effect_direction == Direction.DECREASE
                else range(level, len(effect.onehot))
            )
            row = {effect.onehot[k]: 1.0 for k in allowed}
            row[r] = row.get(r, 0.0) - 1.0
            model.add_constraint(row, ">=", 0.0, f"causal_{idx}_effect")

    if constraints.sparsity_cap is not None:
        flags = []
        for j, fv in enumerate(handles.features):
            s = model.add_var(f"changed_{j}", mio.BINARY)
            flags.append(s)
            if fv.dec is not None:
                model.add_constraint(
                    {s: 1.0, fv.dec: -1.0, fv.inc: -1.0}, ">=", 0.0, f"changed_{j}_move"
                )
            level = fv.factual_level
            tag = fv.spec.kind.tag
            if tag == "binary":
                coeffs, const = fv.level_expr(1 - level)
                row = {s: 1.0}
                for var, coef in coeffs.items():
                    row[var] = row.get(var, 0.0) - coef
                model.add_constraint(row, ">=", const, f"changed_{j}_flip")
            elif fv.onehot:
                if level is not None:
                    model.add_constraint(
                        {s: 1.0, fv.onehot[level]: 1.0}, ">=", 1.0, f"changed_{j}_left"
                    )
                    others = [k for k in range(len(fv.onehot)) if k != level]
                else:
                    others = list(range(len(fv.onehot)))
                for k in others:
                    model.add_constraint(
                        {s: 1.0, fv.onehot[k]: -1.0}, ">=", 0.0, f"changed_{j}_to{k}"
                    )
        model.add_constraint(
            {s: 1.0 for s in flags}, "<=", float(constraints.sparsity_cap), "sparsity_cap"
        )

    if constraints.delta_spn is not None:
        if o_root is None:
            raise FormulationError("likelihood threshold requires the density network")
        model.add_constraint({o_root: 1.0}, ">=", constraints.delta_spn, "plausibility")


# ---------------------------------------------------------------------------
# objective


def set_objective(
    model: MioModel,
    handles: InputHandles,
    schema: DatasetSchema,
    weights: MadWeights,
    factual_norm: np.ndarray,
    alpha: float = 0.0,
    o_root: Optional[int] = None,
) -> None:
    """Inverse-MAD weighted L1 distance to the factual, minus alpha times
    the log-likelihood variable.

    Continuous dimensions charge weight * (decrease + increase); one-hot
    dimensions charge weight * |d - d_factual| linearized against the
    constant factual indicators. At any per-subproblem optimum at least one
    of decrease/increase is zero, so the charge equals the distance of the
    decoded counterfactual exactly.
    """
    layout = schema.encoded_layout()
    factual_vec = encoded_from_normalized(factual_norm, schema)
    coeffs: dict[int, float] = {}
    constant = 0.0

    def add(var: int, coef: float) -> None:
        coeffs[var] = coeffs.get(var, 0.0) + coef

    dim = 0
    for fv in handles.features:
        tag = fv.spec.kind.tag
        if tag in ("continuous", "discrete"):
            weight = float(weights.per_dim[dim])
            add(fv.dec, weight)
            add(fv.inc, weight)
            dim += 1
        elif tag == "binary":
            weight = float(weights.per_dim[dim])
            if factual_vec[dim] >= 0.5:
                add(fv.onehot[0], -weight)
                constant += weight
            else:
                add(fv.onehot[0], weight)
            dim += 1
        elif tag in ("categorical", "ordinal"):
            for k, d in enumerate(fv.onehot):
                weight = float(weights.per_dim[dim])
                if factual_vec[dim] >= 0.5:
                    add(d, -weight)
                    constant += weight
                else:
                    add(d, weight)
                dim += 1
        else:  # mixed: the continuous slot moves, vanishes or appears
            weight = float(weights.per_dim[dim])
            if fv.factual < 0:
                # factual is a level, the factual continuous slot is 0, so
                # the distance on this slot equals c itself
                add(fv.cont, weight)
            else:
                # |c - F| while continuous, F when switching to a level
                add(fv.dec, weight)
                add(fv.inc, weight)
                add(fv.cont_indicator, -weight * fv.anchor)
                constant += weight * fv.anchor
            dim += 1
            for k, d in enumerate(fv.onehot):
                weight = float(weights.per_dim[dim])
                if factual_vec[dim] >= 0.5:
                    add(d, -weight)
                    constant += weight
                else:
                    add(d, weight)
                dim += 1
    assert dim == len(layout)

    if alpha > 0.0:
        if o_root is None:
            raise FormulationError("alpha > 0 requires the density network")
        add(o_root, -alpha)
    model.set_objective(coeffs, constant)


# ---------------------------------------------------------------------------
# one-shot assembly


@dataclass
class CeModel:
    model: MioModel
    handles: InputHandles
    raw_vars: list[int]
    validity: ValidityInfo
    o_root: Optional[int]
    spn_encoding: Optional[SpnEncoding] = None

    def snap_to_claimed_bins(self, assignment) -> None:
        """Lift continuous values sitting a solver tolerance below the left
        edge of their claimed histogram bin back onto the edge.

        Piecewise-constant densities are discontinuous at breakpoints, so a
        1e-9 feasibility slack would otherwise re-evaluate into the wrong
        bin and break the exact-likelihood lower bound of the root value.
        """
        if self.spn_encoding is None:
            return
        for leaf in self.spn_encoding.leaf_bins:
            fv = self.handles.features[leaf.feature]
            outside = [assignment[v] for v in leaf.outside_vars]
            active = [i for i, value in enumerate(outside) if value < 0.5]
            if len(active) != 1:
                continue  # leave inconsistent solutions untouched
            left_edge = leaf.breakpoints[active[0]]
            value = assignment[fv.cont]
            if left_edge - 1e-5 <= value < left_edge:
                assignment[fv.cont] = left_edge


def build_ce_model(
    schema: DatasetSchema,
    factual_norm: np.ndarray,
    mlp: Mlp,
    weights: MadWeights,
    factual_class: int,
    constraints: CeConstraints,
    spn: Optional[Spn] = None,
) -> CeModel:
    """Assemble the full counterfactual model for one factual."""
    model = MioModel()
    handles = build_input(model, schema, factual_norm, constraints)
    raw_vars = encode_classifier(model, mlp, handles)
    validity = add_validity(model, raw_vars, factual_class, schema.n_classes, constraints)
    encoding = (
        encode_spn(model, spn, handles, validity.class_exprs, constraints)
        if spn is not None
        else None
    )
    o_root = encoding.root_var if encoding is not None else None
    add_desiderata(model, handles, schema, constraints, o_root)
    set_objective(model, handles, schema, weights, factual_norm, constraints.alpha, o_root)
    pool_vars = handles.decision_vars()
    if encoding is not None:
        pool_vars.extend(encoding.bin_vars)
    model.pool_vars = pool_vars
    return CeModel(
        model=model,
        handles=handles,
        raw_vars=raw_vars,
        validity=validity,
        o_root=o_root,
        spn_encoding=encoding,
    )
