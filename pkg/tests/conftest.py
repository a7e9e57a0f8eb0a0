import numpy as np
import pytest

from plausicf.encoding import normalize_dataset
from plausicf.engine import CounterfactualExplainer
from plausicf.schema import (
    DatasetSchema,
    FeatureSpec,
    binary,
    categorical,
    continuous,
    discrete_contiguous,
)
from plausicf.spn_learn import LearnConfig, learn, spn_domains
from plausicf.synthetic import make_credit_fixture


@pytest.fixture(scope="session")
def credit():
    """Small synthetic credit fixture with a learned density network."""
    schema, rows, labels, mlp = make_credit_fixture(n=400, seed=1)
    norm = normalize_dataset(rows, schema)
    points = np.hstack([norm, labels[:, None].astype(float)])
    spn = learn(
        points,
        spn_domains(schema),
        LearnConfig(min_instances_slice=20, histogram_bins=8, rng_seed=0),
    )
    return {"schema": schema, "rows": rows, "labels": labels, "mlp": mlp, "spn": spn}


@pytest.fixture(scope="session")
def credit_explainer(credit):
    explainer = CounterfactualExplainer(credit["schema"], credit["mlp"], credit["spn"])
    return explainer.fit(credit["rows"], credit["labels"])


@pytest.fixture
def basic_schema():
    return DatasetSchema(
        features=(
            FeatureSpec("income", continuous(0, 50_000)),
            FeatureSpec("housing", categorical(["A", "B", "C"])),
            FeatureSpec("years", discrete_contiguous(0, 9)),
            FeatureSpec("flag", binary()),
        )
    )
