"""Command-line front door.

Subcommands: gen-synth (seeded synthetic fixture), learn-spn (density model
training), explain (one factual), marginal-grid (2-D marginal
log-likelihood as CSV data), benchmark (batch runs with a report).

Exit codes: 0 success, 2 input/usage error, 3 proven infeasible,
4 timeout without any incumbent. All file writes are atomic.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .dataio import read_dataset_csv, write_dataset_csv
from .encoding import EncodingError
from .engine import (
    CounterfactualExplainer,
    EngineError,
    VariantConfig,
    run_benchmark,
)
from .formulation import FormulationError
from .mio import MioError, write_lp
from .nn import NnError, load_mlp, save_mlp
from .schema import SchemaError, atomic_write_text, load_schema, save_schema
from .spn import (
    SpnValidationError,
    load_spn,
    marginal_log_likelihood,
    save_spn,
    validate,
)
from .spn_learn import LearnConfig, auto_min_slice, learn, spn_domains

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_TIMEOUT = 4

VARIANT_NAMES = {
    "mio": "mio_posthoc",
    "lice-opt": "lice_optimize",
    "lice-med": "lice_median",
    "lice-q": "lice_quartile",
    "lice-sample": "lice_sample",
}


class CliError(Exception):
    pass


def _load_artifacts(args, need_spn: bool):
    schema = load_schema(args.schema)
    rows, labels = read_dataset_csv(args.data, schema)
    mlp = load_mlp(args.nn, expected_fingerprint=schema.encoded_fingerprint())
    spn = load_spn(args.spn) if (need_spn or args.spn) else None
    explainer = CounterfactualExplainer(schema, mlp, spn)
    explainer.fit(rows, labels)
    return schema, rows, labels, explainer


def _variant_config(args) -> VariantConfig:
    if args.variant not in VARIANT_NAMES:
        raise CliError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANT_NAMES)}")
    return VariantConfig(
        variant=VARIANT_NAMES[args.variant],
        alpha=args.alpha,
        pool_size=args.pool,
        time_limit=args.time_limit,
        tau=args.tau,
        epsilon=args.epsilon,
        sparsity_cap=args.sparsity_cap,
        target_class=args.target_class,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    from .synthetic import make_credit_fixture

    schema, rows, labels, mlp = make_credit_fixture(n=args.n, seed=args.seed)
    import os

    os.makedirs(args.out_dir, exist_ok=True)
    save_schema(schema, os.path.join(args.out_dir, "schema.json"))
    write_dataset_csv(os.path.join(args.out_dir, "data.csv"), schema, rows, labels)
    save_mlp(mlp, os.path.join(args.out_dir, "nn.json"))
    print(f"wrote schema.json, data.csv ({len(rows)} rows), nn.json to {args.out_dir}")
    return EXIT_OK


def cmd_learn_spn(args) -> int:
    schema = load_schema(args.schema)
    rows, labels = read_dataset_csv(args.data, schema)
    from .encoding import normalize_dataset

    norm = normalize_dataset(rows, schema)
    points = np.hstack([norm, labels[:, None].astype(float)])
    domains = spn_domains(schema, with_class=True)
    if args.min_slice == "auto":
        min_slice = auto_min_slice(len(rows))
    else:
        min_slice = int(args.min_slice)
    config = LearnConfig(
        min_instances_slice=min_slice,
        histogram_bins=args.bins,
        pseudo_count=args.pseudo_count,
        rng_seed=args.seed,
    )
    spn = learn(points, domains, config)
    violations = validate(spn)
    save_spn(spn, args.out)
    print(
        f"learned density network: {len(spn.nodes)} nodes "
        f"({len(spn.sum_nodes())} mixtures, {len(spn.leaves())} leaves), "
        f"min_instances_slice={min_slice}"
    )
    print("validation: " + ("ok" if not violations else "; ".join(violations)))
    return EXIT_OK if not violations else EXIT_INPUT


def cmd_explain(args) -> int:
    _, rows, _, explainer = _load_artifacts(args, need_spn=True)
    if not 0 <= args.factual_row < len(rows):
        raise CliError(f"--factual-row {args.factual_row} out of range (0..{len(rows) - 1})")
    config = _variant_config(args)
    factual = rows[args.factual_row]
    if args.dump_lp:
        from .encoding import encoded_from_normalized, normalize
        from .formulation import build_ce_model
        from .metrics import predicted_class

        factual_norm = normalize(factual, explainer.schema)
        constraints, with_spn = explainer._constraints_for(
            config, factual_norm, predicted_class(
                explainer.mlp, encoded_from_normalized(factual_norm, explainer.schema)
            )
        )
        ce_model = build_ce_model(
            explainer.schema, factual_norm, explainer.mlp, explainer.mad_weights_,
            predicted_class(explainer.mlp, encoded_from_normalized(factual_norm, explainer.schema)),
            constraints, spn=explainer.spn if with_spn else None,
        )
        atomic_write_text(args.dump_lp, write_lp(ce_model.model))
        print(f"wrote model export to {args.dump_lp}")
    outcome = explainer.explain(factual, config)
    payload = {
        "format_version": 1,
        "tool_version": __version__,
        "variant": config.variant,
        "seed": args.seed,
        "factual_row_index": args.factual_row,
        "factual_row": factual,
        "status": outcome.status,
        "message": outcome.message,
        "selected": outcome.selected.to_json() if outcome.selected else None,
        "pool": [r.to_json() for r in outcome.results],
    }
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if outcome.status == "infeasible":
        print("no actionable counterfactual exists", file=sys.stderr)
        return EXIT_INFEASIBLE
    if outcome.status == "timeout":
        print("no counterfactual candidate found in time", file=sys.stderr)
        return EXIT_TIMEOUT
    if outcome.status != "ok":
        print(f"solver error: {outcome.message}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_marginal_grid(args) -> int:
    schema = load_schema(args.schema)
    spn = load_spn(args.spn)
    names = [n.strip() for n in args.features.split(",")]
    if len(names) != 2:
        raise CliError("--features expects exactly two comma-separated names")
    indices = [schema.feature_index(n) for n in names]
    for n, j in zip(names, indices):
        if schema.features[j].kind.tag not in ("continuous", "discrete"):
            raise CliError(f"feature {n!r} is not continuous-valued")
    r = args.resolution
    if r < 1:
        raise CliError("--resolution must be at least 1")
    lines = [f"{names[0]},{names[1]},marginal_log_likelihood"]
    for i in range(r):
        for j in range(r):
            x = (i + 0.5) / r
            y = (j + 0.5) / r
            point = np.full(spn.n_features, np.nan)
            point[indices[0]] = x
            point[indices[1]] = y
            value = marginal_log_likelihood(spn, point)
            lines.append(f"{x:.10g},{y:.10g},{value:.10g}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {r}x{r} marginal grid to {args.out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    _, rows, _, explainer = _load_artifacts(args, need_spn=True)
    rng = np.random.default_rng(args.seed)
    n = min(args.n, len(rows))
    indices = sorted(rng.choice(len(rows), size=n, replace=False).tolist()) if n else []
    factuals = [rows[i] for i in indices]
    variants = []
    for name in args.variants.split(","):
        name = name.strip()
        if name not in VARIANT_NAMES:
            raise CliError(f"unknown variant {name!r}; choose from {sorted(VARIANT_NAMES)}")
        variants.append(
            VariantConfig(
                variant=VARIANT_NAMES[name],
                alpha=args.alpha,
                pool_size=args.pool,
                time_limit=args.time_limit,
                tau=args.tau,
                epsilon=args.epsilon,
            )
        )
    report = run_benchmark(explainer, factuals, variants, jobs=args.jobs)
    atomic_write_text(args.report + ".csv", report.to_csv())
    atomic_write_text(args.report + ".json", report.to_json())
    print(f"wrote {args.report}.csv and {args.report}.json ({len(report.rows)} variants, {n} factuals)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common_solve_args(parser):
    parser.add_argument("--pool", type=int, default=10, help="solution pool size (default 10)")
    parser.add_argument("--time-limit", type=float, default=120.0, help="seconds per solve (default 120)")
    parser.add_argument("--alpha", type=float, default=0.1, help="likelihood weight for lice-opt (default 0.1)")
    parser.add_argument("--tau", type=float, default=1e-4, help="validity margin (default 1e-4)")
    parser.add_argument("--epsilon", type=float, default=1e-4, help="minimal continuous change (default 1e-4)")
    parser.add_argument("--sparsity-cap", type=int, default=None, help="max changed features")
    parser.add_argument("--target-class", type=int, default=None, help="desired counterfactual class")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plausicf",
        description="Plausibility-aware counterfactual explanations for tabular ReLU classifiers",
    )
    parser.add_argument("--version", action="version", version=f"plausicf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the seeded synthetic credit fixture")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("learn-spn", help="learn the density network from a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-slice", default="auto", help="rows per slice, or 'auto' for n/20")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--pseudo-count", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_learn_spn)

    p = sub.add_parser("explain", help="explain one factual row")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--nn", required=True)
    p.add_argument("--spn", required=True)
    p.add_argument("--factual-row", type=int, required=True)
    p.add_argument("--variant", default="mio", help="mio | lice-opt | lice-med | lice-q | lice-sample")
    p.add_argument("--out", default=None, help="write the result JSON here (stdout otherwise)")
    p.add_argument("--dump-lp", default=None, help="also export the model in LP format")
    p.add_argument("--seed", type=int, default=0)
    _add_common_solve_args(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("marginal-grid", help="marginal log-likelihood grid over two features")
    p.add_argument("--schema", required=True)
    p.add_argument("--spn", required=True)
    p.add_argument("--features", required=True, help="two comma-separated feature names")
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_marginal_grid)

    p = sub.add_parser("benchmark", help="batch run over sampled factuals")
    p.add_argument("--schema", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--nn", required=True)
    p.add_argument("--spn", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--variants", default="mio,lice-opt", help="comma-separated variant names")
    p.add_argument("--report", required=True, help="output path prefix (.csv and .json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _add_common_solve_args(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        SchemaError,
        EncodingError,
        SpnValidationError,
        NnError,
        MioError,
        EngineError,
        FormulationError,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
