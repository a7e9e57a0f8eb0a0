"""Counterfactual generation variants, post-hoc selection and batch runs.

Three model families share one pipeline:

  mio_posthoc    distance-only model without density rows; the density
                 network only ranks the returned pool afterwards
  lice_optimize  density rows in the model, log-likelihood weighted into
                 the objective by alpha
  lice_median / lice_quartile / lice_sample
                 density rows in the model, distance-only objective, and a
                 log-likelihood floor at the chosen training quantile (the
                 sample mode relaxes the median by the factual's own value)

Every returned counterfactual re-derives its validity/actionability flags
and metrics from the decoded row; solver state is never trusted for flags.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import mio
from .encoding import (
    decode_vector,
    encoded_from_normalized,
    mad_distance,
    normalize,
    normalized_from_encoded,
)
from .formulation import CeConstraints, build_ce_model
from .metrics import (
    is_actionable,
    predicted_class,
    sparsity_count,
    validity_margin,
)
from .mio import SolutionPool, SolveParams
from .nn import Mlp
from .schema import DatasetSchema
from .spn import Spn, log_likelihood, log_likelihood_batch, log_likelihood_max_approx
from .spn_learn import spn_domains

VARIANTS = ("mio_posthoc", "lice_optimize", "lice_median", "lice_quartile", "lice_sample")
THRESHOLD_MODES = ("median", "quartile", "sample")


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "mio_posthoc"
    alpha: float = 0.1
    pool_size: int = 10
    time_limit: float = 120.0
    tau: float = 1e-4
    epsilon: float = 1e-4
    sparsity_cap: Optional[int] = None
    target_class: Optional[int] = None
    rho: Optional[float] = None
    mip_gap: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise EngineError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "lice_optimize" and self.alpha < 0:
            raise EngineError("lice_optimize requires alpha >= 0")

    @property
    def threshold_mode(self) -> Optional[str]:
        if self.variant.startswith("lice_") and self.variant != "lice_optimize":
            return self.variant.split("_", 1)[1]
        return None


@dataclass(frozen=True)
class CeResult:
    ce_row: list
    nll_exact: float
    o_root_mio: float
    distance_mad: float
    sparsity: int
    valid: bool
    actionable: bool
    solver_status: str
    wall_time_s: float
    objective: float
    pool_rank: int

    def to_json(self) -> dict:
        return {
            "ce_row": self.ce_row,
            "nll_exact": self.nll_exact,
            "o_root_mio": self.o_root_mio,
            "distance_mad": self.distance_mad,
            "sparsity": self.sparsity,
            "valid": self.valid,
            "actionable": self.actionable,
            "solver_status": self.solver_status,
            "wall_time_s": round(self.wall_time_s, 1),
            "objective": self.objective,
            "pool_rank": self.pool_rank,
        }


@dataclass(frozen=True)
class ExplainOutcome:
    status: str  # "ok" | "infeasible" | "timeout" | "error"
    results: tuple[CeResult, ...]
    selected: Optional[CeResult]
    message: str = ""
    wall_time_s: float = 0.0


def compute_threshold(
    spn: Spn,
    training_points: np.ndarray,
    mode: str,
    factual_point: Optional[Sequence[float]] = None,
) -> float:
    """Log-likelihood floor from the training data.

    median: the median training log-likelihood. quartile: the lower
    quartile under lower interpolation (the element at index ceil(n/4) - 1
    of the sorted values). sample: the factual's own log-likelihood or the
    median, whichever is lower.
    """
    if mode not in THRESHOLD_MODES:
        raise EngineError(f"unknown threshold mode {mode!r}")
    lls = np.sort(log_likelihood_batch(spn, np.asarray(training_points, dtype=float)))
    if lls.size == 0:
        raise EngineError("threshold requires a non-empty training set")
    median = float(np.median(lls))
    if mode == "median":
        return median
    if mode == "quartile":
        index = int(np.ceil(lls.size / 4)) - 1
        return float(lls[max(index, 0)])
    if factual_point is None:
        raise EngineError("sample mode requires the factual point")
    return min(median, log_likelihood(spn, factual_point))


try:
    from sklearn.base import BaseEstimator
except ImportError:  # pragma: no cover
    BaseEstimator = object


class CounterfactualExplainer(BaseEstimator):
    """Binds schema, classifier and density model; fit on training rows to
    learn the distance weights, then explain factuals."""

    def __init__(self, schema: DatasetSchema, mlp: Mlp, spn: Optional[Spn] = None):
        self.schema = schema
        self.mlp = mlp
        self.spn = spn
        if spn is not None:
            expected = (schema.n_features, schema.n_features + 1)
            if spn.n_features not in expected:
                raise EngineError(
                    f"density network covers {spn.n_features} features, expected one of {expected}"
                )
            spn_domains(schema, with_class=False)  # rejects mixed-feature schemas

    @property
    def _spn_has_class(self) -> bool:
        return self.spn is not None and self.spn.n_features == self.schema.n_features + 1

    def fit(self, X: Sequence[Sequence], y: Optional[Sequence[int]] = None) -> "CounterfactualExplainer":
        from .encoding import encode_dataset, mad_weights, normalize_dataset

        self.norm_rows_ = normalize_dataset(X, self.schema)
        self.mad_weights_ = mad_weights(encode_dataset(X, self.schema), self.schema)
        if self.spn is not None:
            if self._spn_has_class:
                if y is None:
                    raise EngineError("density network includes the class; fit needs labels")
                labels = np.asarray(y, dtype=float)
                if labels.shape[0] != self.norm_rows_.shape[0]:
                    raise EngineError("labels do not match the rows")
                self.train_points_ = np.hstack([self.norm_rows_, labels[:, None]])
            else:
                self.train_points_ = self.norm_rows_.copy()
        return self

    # -- internals ----------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "mad_weights_"):
            raise EngineError("explainer is not fitted")

    def _spn_point(self, norm_row: np.ndarray, class_id: int) -> list[float]:
        point = [float(v) for v in norm_row]
        if self._spn_has_class:
            point.append(float(class_id))
        return point

    def _constraints_for(self, config: VariantConfig, factual_norm: np.ndarray, factual_class: int) -> tuple[CeConstraints, bool]:
        base = CeConstraints(
            tau=config.tau,
            epsilon=config.epsilon,
            sparsity_cap=config.sparsity_cap,
            target_class=config.target_class,
            rho=config.rho,
        )
        if config.variant == "mio_posthoc":
            return base, False
        if self.spn is None:
            raise EngineError(f"variant {config.variant!r} requires a density network")
        if config.variant == "lice_optimize":
            return replace(base, alpha=config.alpha), True
        mode = config.threshold_mode
        factual_point = None
        if mode == "sample":
            factual_point = self._spn_point(factual_norm, factual_class)
        delta = compute_threshold(self.spn, self.train_points_, mode, factual_point)
        return replace(base, delta_spn=delta), True

    def _result_from_entry(
        self,
        entry: mio.PoolEntry,
        ce_model,
        factual_norm: np.ndarray,
        factual_class: int,
        config: VariantConfig,
        rank: int,
        status: str,
        wall_time: float,
    ) -> CeResult:
        vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
        ce_norm = normalized_from_encoded(vec, self.schema)
        ce_vec = encoded_from_normalized(ce_norm, self.schema)
        ce_row = decode_vector(ce_vec, self.schema)
        ce_class = predicted_class(self.mlp, ce_vec)
        margin = validity_margin(self.mlp, ce_vec, factual_class, config.target_class)
        valid = ce_class != factual_class and margin >= config.tau - 1e-6
        if config.target_class is not None:
            valid = valid and ce_class == config.target_class
        actionable = is_actionable(factual_norm, ce_norm, self.schema, config.epsilon)
        if self.spn is not None:
            point = self._spn_point(ce_norm, ce_class)
            nll_exact = -log_likelihood(self.spn, point)
            max_approx = log_likelihood_max_approx(self.spn, point)
        else:
            nll_exact = float("nan")
            max_approx = float("nan")
        o_root = entry.value(ce_model.o_root) if ce_model.o_root is not None else max_approx
        factual_vec = encoded_from_normalized(factual_norm, self.schema)
        return CeResult(
            ce_row=ce_row,
            nll_exact=float(nll_exact),
            o_root_mio=float(o_root),
            distance_mad=mad_distance(factual_vec, ce_vec, self.mad_weights_),
            sparsity=sparsity_count(factual_norm, ce_norm, self.schema, config.epsilon),
            valid=bool(valid),
            actionable=bool(actionable),
            solver_status=status,
            wall_time_s=wall_time,
            objective=entry.objective,
            pool_rank=rank,
        )

    @staticmethod
    def select_best(results: Sequence[CeResult]) -> Optional[CeResult]:
        """Most plausible valid entry: lowest exact NLL, ties broken by
        smaller distance, then pool order."""
        valid = [r for r in results if r.valid]
        if not valid:
            return None
        return min(valid, key=lambda r: (r.nll_exact, r.distance_mad, r.pool_rank))

    # -- public surface -------------------------------------------------------

    def explain(self, factual_row: Sequence, config: VariantConfig = VariantConfig()) -> ExplainOutcome:
        self._require_fitted()
        started = time.monotonic()
        factual_norm = normalize(factual_row, self.schema)
        factual_vec = encoded_from_normalized(factual_norm, self.schema)
        factual_class = predicted_class(self.mlp, factual_vec)
        constraints, with_spn = self._constraints_for(config, factual_norm, factual_class)
        ce_model = build_ce_model(
            self.schema,
            factual_norm,
            self.mlp,
            self.mad_weights_,
            factual_class,
            constraints,
            spn=self.spn if with_spn else None,
        )
        params = SolveParams(
            time_limit=config.time_limit, pool_size=config.pool_size, mip_gap=config.mip_gap
        )
        if config.rho is not None:
            pool = self._solve_with_distance_cap(ce_model, params, config.rho)
        else:
            pool = mio.solve(ce_model.model, params)
        wall = time.monotonic() - started

        if pool.status == mio.INFEASIBLE:
            return ExplainOutcome(
                "infeasible", (), None, "no actionable counterfactual exists", wall
            )
        if pool.status == mio.NO_INCUMBENT_TIMEOUT:
            return ExplainOutcome(
                "timeout", (), None, "no counterfactual candidate found in time", wall
            )
        if not pool.entries:
            return ExplainOutcome("error", (), None, pool.message or pool.status, wall)

        results = tuple(
            self._result_from_entry(
                entry, ce_model, factual_norm, factual_class, config, rank, pool.status, wall
            )
            for rank, entry in enumerate(pool.entries)
        )
        return ExplainOutcome("ok", results, self.select_best(results), pool.message, wall)

    def _solve_with_distance_cap(self, ce_model, params: SolveParams, rho: float) -> SolutionPool:
        """Optional pool filter: first find the optimum, then cap every pool
        entry's objective at (1 + rho) times it."""
        first = mio.solve(ce_model.model, replace(params, pool_size=1))
        if first.status != mio.OPTIMAL or not first.entries:
            return first
        cap = (1.0 + rho) * first.entries[0].objective
        model = ce_model.model
        model.add_constraint(
            dict(model.objective), "<=", cap - model.objective_constant, "pool_distance_cap"
        )
        return mio.solve(model, params)

    def evaluate_metrics(self, factual_row: Sequence, ce_row: Sequence, config: VariantConfig = VariantConfig()) -> dict:
        """Metric bundle for an arbitrary counterfactual candidate."""
        self._require_fitted()
        f_norm = normalize(factual_row, self.schema)
        ce_norm = normalize(ce_row, self.schema)
        f_vec = encoded_from_normalized(f_norm, self.schema)
        ce_vec = encoded_from_normalized(ce_norm, self.schema)
        factual_class = predicted_class(self.mlp, f_vec)
        ce_class = predicted_class(self.mlp, ce_vec)
        margin = validity_margin(self.mlp, ce_vec, factual_class, config.target_class)
        if self.spn is not None:
            nll = -log_likelihood(self.spn, self._spn_point(ce_norm, ce_class))
        else:
            nll = float("nan")
        return {
            "nll_exact": float(nll),
            "distance_mad": mad_distance(f_vec, ce_vec, self.mad_weights_),
            "sparsity": sparsity_count(f_norm, ce_norm, self.schema, config.epsilon),
            "valid": bool(ce_class != factual_class and margin >= config.tau - 1e-6),
            "actionable": bool(is_actionable(f_norm, ce_norm, self.schema, config.epsilon)),
        }


# ---------------------------------------------------------------------------
# benchmark


REPORT_COLUMNS = (
    "variant",
    "valid_rate",
    "actionable_rate",
    "nll_mean",
    "nll_sd",
    "dist_mean",
    "dist_sd",
    "sparsity_mean",
    "sparsity_sd",
    "approx_err_mean",
    "median_time_s",
)


@dataclass(frozen=True)
class BenchmarkReport:
    rows: tuple[dict, ...]

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(str(row[c]) for c in REPORT_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        import json

        return json.dumps({"columns": list(REPORT_COLUMNS), "rows": list(self.rows)}, indent=1) + "\n"


def _explain_one(explainer: CounterfactualExplainer, row, config: VariantConfig):
    outcome = explainer.explain(row, config)
    selected = outcome.selected
    approx_err = None
    if selected is not None and explainer.spn is not None:
        ce_norm = normalize(selected.ce_row, explainer.schema)
        ce_class = predicted_class(
            explainer.mlp, encoded_from_normalized(ce_norm, explainer.schema)
        )
        point = explainer._spn_point(ce_norm, ce_class)
        approx_err = abs(
            log_likelihood(explainer.spn, point) - log_likelihood_max_approx(explainer.spn, point)
        )
    return outcome, approx_err


def run_benchmark(
    explainer: CounterfactualExplainer,
    factual_rows: Sequence[Sequence],
    variants: Sequence[VariantConfig],
    jobs: int = 1,
    clock=time.monotonic,
) -> BenchmarkReport:
    """Aggregate results per variant over the given factuals.

    Per-factual failures (infeasibility, timeouts) lower the rates but never
    abort the batch. Every reported statistic is a deterministic function of
    the inputs except wall time, which is read from ``clock``; injecting a
    deterministic clock makes the whole report reproducible byte-for-byte.
    """
    rows = []
    for config in variants:
        if jobs > 1 and len(factual_rows) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(
                    pool.map(_explain_one, [explainer] * len(factual_rows), factual_rows, [config] * len(factual_rows))
                )
            times = [o.wall_time_s for o, _ in outcomes]
        else:
            outcomes = []
            times = []
            for row in factual_rows:
                tick = clock()
                outcomes.append(_explain_one(explainer, row, config))
                times.append(clock() - tick)

        selected = [o.selected for o, _ in outcomes]
        approx_errs = [err for (_, err), s in zip(outcomes, selected) if s is not None and s.valid and err is not None]
        n = len(factual_rows)
        valid = [s for s in selected if s is not None and s.valid]
        actionable = [s for s in valid if s.actionable]

        def stats(values):
            if not values:
                return float("nan"), float("nan")
            arr = np.asarray(values, dtype=float)
            return float(arr.mean()), float(arr.std())

        nll_mean, nll_sd = stats([s.nll_exact for s in valid])
        dist_mean, dist_sd = stats([s.distance_mad for s in valid])
        sp_mean, sp_sd = stats([s.sparsity for s in valid])
        rows.append(
            {
                "variant": config.variant,
                "valid_rate": (len(valid) / n) if n else float("nan"),
                "actionable_rate": (len(actionable) / n) if n else float("nan"),
                "nll_mean": nll_mean,
                "nll_sd": nll_sd,
                "dist_mean": dist_mean,
                "dist_sd": dist_sd,
                "sparsity_mean": sp_mean,
                "sparsity_sd": sp_sd,
                "approx_err_mean": stats(approx_errs)[0],
                "median_time_s": round(float(np.median(times)), 1) if times else float("nan"),
            }
        )
    return BenchmarkReport(rows=tuple(rows))
