"""Metric predicates recomputed from decoded rows.

Validity, actionability and sparsity flags are always derived from the
decoded counterfactual via these functions, never copied out of solver
state, so a buggy encoding cannot report itself healthy.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .nn import Mlp, forward_raw
from .schema import DatasetSchema, Direction, Monotone

FLAG_TOL = 1e-6


def predicted_class(mlp: Mlp, encoded_vec: np.ndarray) -> int:
    raw = forward_raw(mlp, encoded_vec)
    if mlp.n_outputs == 1:
        return int(raw[0] >= 0.0)
    return int(np.argmax(raw))


def validity_margin(
    mlp: Mlp,
    encoded_vec: np.ndarray,
    factual_class: int,
    target_class: Optional[int],
) -> float:
    """Raw-score margin of the class change; >= tau means a valid CE.

    Binary: signed distance of the single raw score from the decision
    boundary, toward the target side. Targeted multiclass: worst gap of the
    target score over every other class. Untargeted: best gap of any other
    class over the factual class.
    """
    raw = forward_raw(mlp, encoded_vec)
    if mlp.n_outputs == 1:
        target = target_class if target_class is not None else 1 - factual_class
        return float(raw[0]) if target == 1 else float(-raw[0])
    if target_class is not None:
        others = [raw[k] for k in range(len(raw)) if k != target_class]
        return float(raw[target_class] - max(others))
    others = [raw[k] for k in range(len(raw)) if k != factual_class]
    return float(max(others) - raw[factual_class])


def _moved(f_val: float, ce_val: float, direction: Direction, tol: float = FLAG_TOL) -> bool:
    if direction == Direction.INCREASE:
        return ce_val > f_val + tol
    return ce_val < f_val - tol


def _norm_value_pair(f: float, ce: float, tag: str):
    """(kind, factual, counterfactual) where kind distinguishes the mixed
    branches; mixed level codes are negative."""
    if tag == "mixed":
        f_cat = f < 0
        ce_cat = ce < 0
        return ("cat" if f_cat else "cont", "cat" if ce_cat else "cont", f, ce)
    return (None, None, f, ce)


def feature_changed(
    f_norm: np.ndarray, ce_norm: np.ndarray, schema: DatasetSchema, j: int, epsilon: float
) -> bool:
    tag = schema.features[j].kind.tag
    f, ce = float(f_norm[j]), float(ce_norm[j])
    if tag in ("binary", "categorical", "ordinal"):
        return int(round(f)) != int(round(ce))
    if tag == "mixed":
        if (f < 0) != (ce < 0):
            return True
        if f < 0:
            return int(round(-f)) != int(round(-ce))
        return abs(ce - f) > epsilon - 1e-9
    return abs(ce - f) > epsilon - 1e-9


def sparsity_count(
    f_norm: np.ndarray, ce_norm: np.ndarray, schema: DatasetSchema, epsilon: float
) -> int:
    """Number of original features whose value changed (continuous moves
    below the minimal-change epsilon count as unchanged)."""
    return sum(
        feature_changed(f_norm, ce_norm, schema, j, epsilon)
        for j in range(schema.n_features)
    )


def is_actionable(
    f_norm: np.ndarray, ce_norm: np.ndarray, schema: DatasetSchema, epsilon: float
) -> bool:
    """Immutability, monotone directions and causal rules, checked on the
    decoded values with the same semantics the optimizer enforces."""
    for j, spec in enumerate(schema.features):
        tag = spec.kind.tag
        f, ce = float(f_norm[j]), float(ce_norm[j])
        if not spec.mutable:
            if tag in ("binary", "categorical", "ordinal"):
                if int(round(f)) != int(round(ce)):
                    return False
            elif tag == "mixed":
                if (f < 0) != (ce < 0):
                    return False
                if f < 0 and int(round(-f)) != int(round(-ce)):
                    return False
                if f >= 0 and abs(ce - f) > FLAG_TOL:
                    return False
            elif abs(ce - f) > FLAG_TOL:
                return False
            continue
        if spec.monotone == Monotone.NONE:
            continue
        if tag in ("continuous", "discrete"):
            if spec.monotone == Monotone.NON_DECREASING and ce < f - FLAG_TOL:
                return False
            if spec.monotone == Monotone.NON_INCREASING and ce > f + FLAG_TOL:
                return False
        else:  # ordinal
            f_level, ce_level = int(round(f)), int(round(ce))
            if spec.monotone == Monotone.NON_DECREASING and ce_level < f_level:
                return False
            if spec.monotone == Monotone.NON_INCREASING and ce_level > f_level:
                return False

    for rule in schema.causal_rules:
        ci = schema.feature_index(rule.cause)
        ei = schema.feature_index(rule.effect)
        cause_tag = schema.features[ci].kind.tag
        effect_tag = schema.features[ei].kind.tag
        if cause_tag in ("continuous", "discrete"):
            cause_active = _moved(float(f_norm[ci]), float(ce_norm[ci]), rule.cause_direction)
        else:
            f_level, ce_level = int(round(f_norm[ci])), int(round(ce_norm[ci]))
            cause_active = (
                ce_level > f_level
                if rule.cause_direction == Direction.INCREASE
                else ce_level < f_level
            )
        if not cause_active:
            continue
        if effect_tag in ("continuous", "discrete"):
            delta = float(ce_norm[ei]) - float(f_norm[ei])
            need = epsilon - FLAG_TOL
            ok = delta >= need if rule.effect_direction == Direction.INCREASE else -delta >= need
            if not ok:
                return False
        else:  # ordinal effect must not cross the factual level the wrong way
            f_level, ce_level = int(round(f_norm[ei])), int(round(ce_norm[ei]))
            if rule.effect_direction == Direction.INCREASE and ce_level < f_level:
                return False
            if rule.effect_direction == Direction.DECREASE and ce_level > f_level:
                return False
    return True
