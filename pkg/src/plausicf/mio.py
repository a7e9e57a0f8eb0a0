"""Solver-agnostic mixed-integer linear model with a ranked solution pool.

Models are plain data: variables with bounds, sparse linear rows, and one
minimization objective. Solving is delegated to the HiGHS backend behind
``scipy.optimize.milp``; the top-M pool is recovered by re-solving with
no-good cuts that exclude each found discrete assignment, which yields
distinct solutions in nondecreasing objective order. Every returned
assignment is re-checked against the stored rows, so a misbehaving backend
surfaces as a ``numeric_error`` status instead of silent garbage.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

FEASIBILITY_TOL = 1e-6

CONTINUOUS = "continuous"
BINARY = "binary"
INTEGER = "integer"

OPTIMAL = "optimal"
FEASIBLE_TIMEOUT = "feasible_timeout"
INFEASIBLE = "infeasible"
NO_INCUMBENT_TIMEOUT = "no_incumbent_timeout"
NUMERIC_ERROR = "numeric_error"


class MioError(ValueError):
    pass


@dataclass
class Variable:
    name: str
    kind: str
    lb: float
    ub: float


@dataclass
class Row:
    coeffs: dict[int, float]
    sense: str  # "<=", "==", ">="
    rhs: float
    name: Optional[str] = None


@dataclass(frozen=True)
class SolveParams:
    time_limit: float = 120.0
    pool_size: int = 10
    mip_gap: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.time_limit <= 0:
            raise MioError("time_limit must be positive")
        if self.pool_size < 1:
            raise MioError("pool_size must be at least 1")


@dataclass(frozen=True)
class PoolEntry:
    assignment: np.ndarray
    objective: float
    optimal: bool

    def value(self, var_id: int) -> float:
        return float(self.assignment[var_id])


@dataclass(frozen=True)
class SolutionPool:
    entries: tuple[PoolEntry, ...]
    status: str
    message: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def best(self) -> Optional[PoolEntry]:
        return self.entries[0] if self.entries else None


class MioModel:
    def __init__(self):
        self.variables: list[Variable] = []
        self.rows: list[Row] = []
        self.objective: Optional[dict[int, float]] = None
        self.objective_constant: float = 0.0
        # discrete variables the solution pool enumerates over; None means
        # every discrete variable
        self.pool_vars: Optional[list[int]] = None

    def add_var(self, name: str, kind: str = CONTINUOUS, lb: float = 0.0, ub: float = 1.0) -> int:
        if kind not in (CONTINUOUS, BINARY, INTEGER):
            raise MioError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            lb, ub = 0.0, 1.0
        if not (math.isfinite(lb) and math.isfinite(ub)):
            raise MioError(f"variable {name!r} needs finite bounds")
        if lb > ub:
            raise MioError(f"variable {name!r} has lb > ub")
        self.variables.append(Variable(name, kind, float(lb), float(ub)))
        return len(self.variables) - 1

    def fix_var(self, var_id: int, value: float) -> None:
        var = self.variables[var_id]
        if value < var.lb - FEASIBILITY_TOL or value > var.ub + FEASIBILITY_TOL:
            raise MioError(f"cannot fix {var.name!r} to {value}: outside [{var.lb}, {var.ub}]")
        var.lb = var.ub = float(value)

    def _check_coeffs(self, coeffs: dict[int, float]) -> dict[int, float]:
        clean = {}
        for var_id, coef in coeffs.items():
            if not (0 <= var_id < len(self.variables)):
                raise MioError(f"unknown variable id {var_id}")
            if not math.isfinite(coef):
                raise MioError(f"non-finite coefficient {coef} on variable {var_id}")
            if coef != 0.0:
                clean[int(var_id)] = float(coef)
        return clean

    def add_constraint(
        self, coeffs: dict[int, float], sense: str, rhs: float, name: Optional[str] = None
    ) -> int:
        if sense not in ("<=", "==", ">="):
            raise MioError(f"unknown sense {sense!r}")
        if not math.isfinite(rhs):
            raise MioError("constraint rhs must be finite")
        self.rows.append(Row(self._check_coeffs(coeffs), sense, float(rhs), name))
        return len(self.rows) - 1

    def set_objective(self, coeffs: dict[int, float], constant: float = 0.0) -> None:
        """Minimization objective; ``constant`` is carried into reported
        objective values but not handed to the backend."""
        self.objective = self._check_coeffs(coeffs)
        self.objective_constant = float(constant)

    def expr_bounds(self, coeffs: dict[int, float]) -> tuple[float, float]:
        lo = hi = 0.0
        for var_id, coef in coeffs.items():
            var = self.variables[var_id]
            if coef >= 0:
                lo += coef * var.lb
                hi += coef * var.ub
            else:
                lo += coef * var.ub
                hi += coef * var.lb
        return lo, hi

    def add_implication(
        self,
        indicator: int,
        active_value: int,
        coeffs: dict[int, float],
        sense: str,
        rhs: float,
        name: Optional[str] = None,
    ) -> int:
        """Big-M compilation of ``indicator == active_value  =>  expr sense rhs``.

        The big-M constant comes from the variable bounds, which must be
        finite (they are, by construction).
        """
        if self.variables[indicator].kind != BINARY:
            raise MioError("implication indicator must be binary")
        coeffs = self._check_coeffs(dict(coeffs))
        if indicator in coeffs:
            raise MioError("indicator must not appear in the implied expression")
        lo, hi = self.expr_bounds(coeffs)
        row = dict(coeffs)
        if sense == "<=":
            # relaxed by big_m whenever the indicator is inactive
            big_m = max(hi - rhs, 0.0)
            if active_value == 1:
                row[indicator] = big_m
                return self.add_constraint(row, "<=", rhs + big_m, name)
            row[indicator] = -big_m
            return self.add_constraint(row, "<=", rhs, name)
        if sense == ">=":
            big_m = max(rhs - lo, 0.0)
            if active_value == 1:
                row[indicator] = -big_m
                return self.add_constraint(row, ">=", rhs - big_m, name)
            row[indicator] = big_m
            return self.add_constraint(row, ">=", rhs, name)
        raise MioError("implications support only inequality senses")

    # -- verification helpers -------------------------------------------------

    def row_violation(self, row: Row, assignment: np.ndarray) -> float:
        value = sum(coef * assignment[var_id] for var_id, coef in row.coeffs.items())
        if row.sense == "<=":
            return max(0.0, value - row.rhs)
        if row.sense == ">=":
            return max(0.0, row.rhs - value)
        return abs(value - row.rhs)

    def max_violation(self, assignment: np.ndarray) -> float:
        worst = 0.0
        for row in self.rows:
            worst = max(worst, self.row_violation(row, assignment))
        for var_id, var in enumerate(self.variables):
            value = assignment[var_id]
            worst = max(worst, var.lb - value, value - var.ub)
            if var.kind in (BINARY, INTEGER):
                worst = max(worst, abs(value - round(value)))
        return worst

    def objective_value(self, assignment: np.ndarray) -> float:
        if self.objective is None:
            raise MioError("model has no objective")
        return (
            sum(coef * assignment[var_id] for var_id, coef in self.objective.items())
            + self.objective_constant
        )


# ---------------------------------------------------------------------------
# solving


def _build_backend_inputs(model: MioModel):
    n = len(model.variables)
    c = np.zeros(n)
    for var_id, coef in (model.objective or {}).items():
        c[var_id] = coef
    integrality = np.array(
        [0 if v.kind == CONTINUOUS else 1 for v in model.variables], dtype=int
    )
    bounds = Bounds(
        np.array([v.lb for v in model.variables]),
        np.array([v.ub for v in model.variables]),
    )
    return c, integrality, bounds


def _rows_to_constraint(model: MioModel) -> Optional[LinearConstraint]:
    if not model.rows:
        return None
    data, rows_idx, cols_idx = [], [], []
    lo = np.empty(len(model.rows))
    hi = np.empty(len(model.rows))
    for i, row in enumerate(model.rows):
        for var_id, coef in row.coeffs.items():
            data.append(coef)
            rows_idx.append(i)
            cols_idx.append(var_id)
        if row.sense == "<=":
            lo[i], hi[i] = -np.inf, row.rhs
        elif row.sense == ">=":
            lo[i], hi[i] = row.rhs, np.inf
        else:
            lo[i] = hi[i] = row.rhs
    matrix = sparse.csr_matrix(
        (data, (rows_idx, cols_idx)), shape=(len(model.rows), len(model.variables))
    )
    return LinearConstraint(matrix, lo, hi)


def _exclude_assignment(model: MioModel, assignment: np.ndarray, pool_vars: list[int]) -> None:
    """No-good cut: at least one pool variable must differ from the given
    assignment. General integers are separated with a fresh binary pair
    (above / below the excluded value)."""
    cut: dict[int, float] = {}
    rhs = 1.0
    saw_discrete = False
    for var_id in pool_vars:
        var = model.variables[var_id]
        if var.lb == var.ub:
            continue
        value = round(assignment[var_id])
        if var.kind == BINARY:
            saw_discrete = True
            if value == 0:
                cut[var_id] = cut.get(var_id, 0.0) + 1.0
            else:
                cut[var_id] = cut.get(var_id, 0.0) - 1.0
                rhs -= 1.0
        elif var.kind == INTEGER:
            saw_discrete = True
            above = model.add_var(f"_cut_above_{var.name}", BINARY)
            below = model.add_var(f"_cut_below_{var.name}", BINARY)
            # above = 1 => var >= value + 1 ; below = 1 => var <= value - 1
            model.add_constraint(
                {var_id: 1.0, above: -(value + 1.0 - var.lb)}, ">=", var.lb
            )
            model.add_constraint(
                {var_id: 1.0, below: (var.ub - value + 1.0)}, "<=", var.ub
            )
            cut[above] = 1.0
            cut[below] = 1.0
    if not saw_discrete:
        raise MioError("no free discrete variables left to exclude")
    model.add_constraint(cut, ">=", rhs, name="no_good")


def _map_status(result) -> tuple[str, str]:
    if result.status == 0:
        return OPTIMAL, result.message
    if result.status == 1:
        if result.x is not None:
            return FEASIBLE_TIMEOUT, result.message
        return NO_INCUMBENT_TIMEOUT, result.message
    if result.status == 2:
        return INFEASIBLE, result.message
    return NUMERIC_ERROR, result.message


def solve(model: MioModel, params: SolveParams = SolveParams()) -> SolutionPool:
    """Solve to proven optimality (within tolerances / time limit) and
    enumerate up to ``pool_size`` best distinct discrete assignments.

    The pool is ordered by nondecreasing objective; only the first entry is
    flagged optimal, and only when the primary solve proved optimality.
    ``time_limit`` is the total budget across pool iterations.
    """
    if model.objective is None:
        raise MioError("model has no objective")
    work = copy.deepcopy(model)  # pool cuts must not leak into the caller's model
    started = time.monotonic()

    def remaining() -> float:
        return params.time_limit - (time.monotonic() - started)

    def run(budget: float):
        c, integrality, bounds = _build_backend_inputs(work)
        constraints = _rows_to_constraint(work)
        options = {"time_limit": max(budget, 1e-6), "presolve": True}
        if params.mip_gap is not None:
            options["mip_rel_gap"] = params.mip_gap
        return milp(
            c=c,
            integrality=integrality,
            bounds=bounds,
            constraints=[constraints] if constraints is not None else (),
            options=options,
        )

    result = run(params.time_limit)
    status, message = _map_status(result)
    if result.x is None:
        return SolutionPool(entries=(), status=status, message=message)

    entries: list[PoolEntry] = []
    n_original = len(model.variables)
    if model.pool_vars is not None:
        pool_vars = list(model.pool_vars)
    else:
        pool_vars = [i for i, v in enumerate(model.variables) if v.kind != CONTINUOUS]

    def accept(x: np.ndarray, backend_fun: float, optimal: bool) -> bool:
        assignment = np.asarray(x[:n_original], dtype=float)
        if model.max_violation(assignment) > FEASIBILITY_TOL + 1e-9:
            return False
        objective = model.objective_value(assignment)
        if abs(backend_fun + model.objective_constant - objective) > 1e-6 * max(
            1.0, abs(objective)
        ):
            return False
        entries.append(PoolEntry(assignment=assignment, objective=objective, optimal=optimal))
        return True

    if not accept(result.x, float(result.fun), optimal=status == OPTIMAL):
        return SolutionPool(entries=(), status=NUMERIC_ERROR, message="backend solution failed re-check")

    while len(entries) < params.pool_size and remaining() > 0.01:
        try:
            _exclude_assignment(work, entries[-1].assignment, pool_vars)
        except MioError:
            break  # no free pool variable left to branch on
        result = run(remaining())
        if result.x is None:
            break
        if not accept(result.x, float(result.fun), optimal=False):
            break

    entries.sort(key=lambda e: e.objective)
    return SolutionPool(entries=tuple(entries), status=status, message=message)


# ---------------------------------------------------------------------------
# LP-format export


def _lp_name(prefix: str, index: int, name: Optional[str]) -> str:
    if name:
        safe = "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in name)
        if safe and not safe[0].isdigit():
            return safe
    return f"{prefix}{index}"


def write_lp(model: MioModel) -> str:
    """Human-readable LP-format text of the model, one constraint per line."""
    var_names = [_lp_name("x", i, v.name) for i, v in enumerate(model.variables)]
    seen: dict[str, int] = {}
    for i, name in enumerate(var_names):
        if name in seen:
            var_names[i] = f"{name}__{i}"
        seen[name] = i

    def term_string(coeffs: dict[int, float]) -> str:
        parts = []
        for var_id in sorted(coeffs):
            coef = coeffs[var_id]
            sign = "-" if coef < 0 else "+"
            parts.append(f"{sign} {abs(coef):.12g} {var_names[var_id]}")
        if not parts:
            return "0"
        return " ".join(parts).lstrip("+ ")

    lines = ["\\ exported mixed-integer model", "Minimize"]
    obj = term_string(model.objective or {})
    if model.objective_constant:
        obj += f" + {model.objective_constant:.12g}"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    sense_map = {"<=": "<=", ">=": ">=", "==": "="}
    for i, row in enumerate(model.rows):
        lines.append(
            f" {_lp_name('c', i, row.name)}: {term_string(row.coeffs)} "
            f"{sense_map[row.sense]} {row.rhs:.12g}"
        )
    lines.append("Bounds")
    for i, var in enumerate(model.variables):
        lines.append(f" {var.lb:.12g} <= {var_names[i]} <= {var.ub:.12g}")
    binaries = [var_names[i] for i, v in enumerate(model.variables) if v.kind == BINARY]
    generals = [var_names[i] for i, v in enumerate(model.variables) if v.kind == INTEGER]
    if binaries:
        lines.append("Binaries")
        lines.append(" " + " ".join(binaries))
    if generals:
        lines.append("Generals")
        lines.append(" " + " ".join(generals))
    lines.append("End")
    return "\n".join(lines) + "\n"
