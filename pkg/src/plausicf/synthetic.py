"""Seeded synthetic credit-scoring fixture.

Stands in for licensed credit datasets in tests and benchmarks: correlated
tabular features, actionability metadata (an immutable flag, a monotone
age, one causal rule), and a hand-constructed ReLU network whose sign
defines the ground-truth labels, so no training is involved anywhere.
"""

from __future__ import annotations

import numpy as np

from .encoding import encode_dataset
from .nn import Mlp
from .schema import (
    CausalRule,
    DatasetSchema,
    Direction,
    FeatureSpec,
    Monotone,
    binary,
    categorical,
    continuous,
    discrete_contiguous,
)

HOUSING_LEVELS = ("own", "mortgage", "rent")


def make_credit_schema() -> DatasetSchema:
    return DatasetSchema(
        features=(
            FeatureSpec("income", continuous(0, 120_000)),
            FeatureSpec("savings", continuous(0, 50_000)),
            FeatureSpec("employment_years", discrete_contiguous(0, 40)),
            FeatureSpec("housing", categorical(HOUSING_LEVELS)),
            FeatureSpec("has_delinquency", binary(), mutable=False),
            FeatureSpec("age", continuous(18, 75), monotone=Monotone.NON_DECREASING),
        ),
        n_classes=2,
        causal_rules=(
            CausalRule("employment_years", Direction.INCREASE, "age", Direction.INCREASE),
        ),
    )


def sample_rows(n: int, seed: int = 0) -> list[list]:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        age = rng.uniform(21.0, 70.0)
        employment = int(np.clip(round(rng.normal((age - 21.0) * 0.45, 5.0)), 0, min(40, age - 18)))
        income = float(
            np.clip(4000.0 + employment * 1300.0 + rng.lognormal(9.4, 0.55), 0.0, 120_000.0)
        )
        savings = float(np.clip(income * rng.beta(2.0, 6.0) * 0.8 + rng.normal(0, 700), 0.0, 50_000.0))
        wealth = income / 120_000.0 + savings / 50_000.0
        housing_probs = np.array([0.15 + 0.4 * wealth, 0.35, 0.5 - 0.4 * wealth])
        housing_probs = np.clip(housing_probs, 0.05, None)
        housing_probs /= housing_probs.sum()
        housing = HOUSING_LEVELS[rng.choice(3, p=housing_probs)]
        p_delinquent = float(np.clip(0.45 - 0.35 * wealth, 0.02, 0.95))
        delinquent = int(rng.random() < p_delinquent)
        rows.append([income, savings, employment, housing, delinquent, round(age, 2)])
    return rows


def make_credit_mlp(schema: DatasetSchema, seed: int = 0, calibration_rows: int = 2000) -> Mlp:
    """Hand-constructed 2-hidden-layer network over the encoded features;
    the output bias is shifted so the classes split roughly evenly on the
    sampling distribution."""
    rng = np.random.default_rng(seed + 17)
    n_in = schema.n_encoded
    w1 = rng.normal(0.0, 0.9, size=(8, n_in))
    b1 = rng.normal(0.0, 0.2, size=8)
    w2 = rng.normal(0.0, 0.7, size=(4, 8))
    b2 = rng.normal(0.0, 0.2, size=4)
    w3 = rng.normal(0.0, 0.8, size=(1, 4))
    b3 = np.zeros(1)
    mlp = Mlp(layers=((w1, b1), (w2, b2), (w3, b3)), n_classes=2)
    sample = encode_dataset(sample_rows(calibration_rows, seed=seed + 99), schema)
    raw = np.array([float(_forward(mlp, x)) for x in sample])
    b3_shifted = b3 - np.median(raw)
    mlp = Mlp(
        layers=((w1, b1), (w2, b2), (w3, b3_shifted)),
        n_classes=2,
        fingerprint=schema.encoded_fingerprint(),
    )
    return mlp


def _forward(mlp: Mlp, x: np.ndarray) -> float:
    from .nn import forward_raw

    return float(forward_raw(mlp, x)[0])


def label_rows(rows: list[list], mlp: Mlp, schema: DatasetSchema) -> np.ndarray:
    encoded = encode_dataset(rows, schema)
    return (np.array([_forward(mlp, x) for x in encoded]) >= 0.0).astype(int)


def make_credit_fixture(n: int = 1000, seed: int = 0) -> tuple[DatasetSchema, list[list], np.ndarray, Mlp]:
    schema = make_credit_schema()
    rows = sample_rows(n, seed=seed)
    mlp = make_credit_mlp(schema, seed=seed)
    labels = label_rows(rows, mlp, schema)
    return schema, rows, labels, mlp


def make_infeasible_fixture() -> tuple[DatasetSchema, list[list], np.ndarray, Mlp]:
    """A fixture where no actionable counterfactual exists: the only feature
    the classifier reads is immutable."""
    schema = DatasetSchema(
        features=(
            FeatureSpec("score", continuous(0, 1), mutable=False),
            FeatureSpec("noise_flag", binary()),
        ),
        n_classes=2,
    )
    mlp = Mlp(
        layers=((np.array([[2.0, 0.0]]), np.array([-1.0])),),
        n_classes=2,
        fingerprint=schema.encoded_fingerprint(),
    )
    rows = [[0.2, 0], [0.8, 1], [0.4, 1], [0.9, 0]]
    labels = label_rows(rows, mlp, schema)
    return schema, rows, labels, mlp
