import itertools

import numpy as np
import pytest

from plausicf import mio
from plausicf.encoding import (
    encoded_from_normalized,
    mad_weights,
    normalize,
    normalized_from_encoded,
)
from plausicf.formulation import (
    CeConstraints,
    FormulationError,
    add_desiderata,
    add_validity,
    build_ce_model,
    build_input,
    encode_classifier,
    encode_spn,
    fix_input,
    set_objective,
)
from plausicf.metrics import predicted_class
from plausicf.mio import BINARY, MioModel, SolveParams, solve
from plausicf.nn import Mlp, forward_raw
from plausicf.schema import (
    CausalRule,
    DatasetSchema,
    Direction,
    FeatureSpec,
    Monotone,
    binary,
    categorical,
    continuous,
    discrete_contiguous,
    mixed,
    ordinal,
)
from plausicf.spn import (
    CategoricalLeaf,
    HistogramLeaf,
    ProductNode,
    Spn,
    SumNode,
    log_likelihood,
    log_likelihood_max_approx,
)


def uniform_weights(schema):
    return mad_weights(np.zeros((1, schema.n_encoded)), schema)


def linear_net(coefs, bias=0.0, n_classes=2):
    return Mlp(
        layers=((np.asarray(coefs, dtype=float).reshape(1, -1), np.array([bias])),),
        n_classes=n_classes,
    )


class TestBuildInput:
    def test_factual_is_feasible_with_zero_distance(self, basic_schema):
        norm = normalize([25_000, "B", 3, 1], basic_schema)
        model = MioModel()
        handles = build_input(model, basic_schema, norm)
        fix_input(model, handles, encoded_from_normalized(norm, basic_schema))
        set_objective(model, handles, basic_schema, uniform_weights(basic_schema), norm)
        pool = solve(model, SolveParams(pool_size=1))
        assert pool.status == mio.OPTIMAL
        assert pool.entries[0].objective == pytest.approx(0.0, abs=1e-9)

    def test_categorical_has_exactly_one_row_and_no_continuous_branch(self):
        schema = DatasetSchema(features=(FeatureSpec("c", categorical(["x", "y", "z"])),))
        model = MioModel()
        handles = build_input(model, schema, normalize(["y"], schema))
        fv = handles.features[0]
        assert fv.cont is None and fv.cont_indicator is None
        onehot_rows = [r for r in model.rows if r.name == "c_onehot"]
        assert len(onehot_rows) == 1
        assert onehot_rows[0].sense == "==" and onehot_rows[0].rhs == 1.0

    def test_discrete_feature_lands_on_integers(self):
        schema = DatasetSchema(
            features=(FeatureSpec("n", discrete_contiguous(0, 9)),
                      FeatureSpec("pad", binary()))
        )
        mlp = linear_net([1.0, 0.0], bias=-0.35)
        norm = normalize([1, 0], schema)
        weights = uniform_weights(schema)
        seen = set()
        for pool_rank in range(3):
            ce_model = build_ce_model(schema, norm, mlp, weights, 0, CeConstraints())
            pool = solve(ce_model.model, SolveParams(pool_size=6))
            for entry in pool.entries:
                vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
                raw_value = vec[0] * 9.0
                assert raw_value == pytest.approx(round(raw_value), abs=1e-6)
                seen.add(round(raw_value))
            break
        # the class flip needs n/9 >= 0.35 -> n >= 4 (approximately)
        assert seen and all(v >= 4 for v in seen)

    def test_mixed_feature_selector(self):
        schema = DatasetSchema(
            features=(FeatureSpec("m", mixed(0, 10, ["na"]), continuous_median=0.5),
                      FeatureSpec("pad", binary()))
        )
        norm = normalize(["na", 0], schema)
        model = MioModel()
        handles = build_input(model, schema, norm)
        fv = handles.features[0]
        assert fv.cont_indicator is not None and len(fv.onehot) == 1
        selector = [r for r in model.rows if r.name == "m_selector"]
        assert len(selector) == 1 and selector[0].rhs == 1.0


class TestEncodeClassifier:
    def test_fidelity_on_random_inputs(self, basic_schema):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(5, basic_schema.n_encoded))
        w2 = rng.normal(size=(1, 5))
        mlp = Mlp(layers=((w1, rng.normal(size=5) * 0.1), (w2, np.zeros(1))), n_classes=2)
        for _ in range(40):
            norm = np.array(
                [rng.uniform(), float(rng.integers(3)), rng.integers(10) / 9, float(rng.integers(2))]
            )
            vec = encoded_from_normalized(norm, basic_schema)
            model = MioModel()
            handles = build_input(model, basic_schema, norm)
            raw = encode_classifier(model, mlp, handles)
            fix_input(model, handles, vec)
            model.set_objective({raw[0]: 1.0})
            pool = solve(model, SolveParams(pool_size=1))
            assert pool.status == mio.OPTIMAL
            assert pool.entries[0].value(raw[0]) == pytest.approx(
                forward_raw(mlp, vec)[0], abs=1e-5
            )

    def test_stable_units_use_no_binaries(self):
        schema = DatasetSchema(features=(FeatureSpec("x", continuous(0, 1)),))
        # unit 1 always active (w=1, b=1), unit 2 always dead (w=-1, b=-2)
        mlp = Mlp(
            layers=(
                (np.array([[1.0], [-1.0]]), np.array([1.0, -2.0])),
                (np.array([[1.0, 1.0]]), np.zeros(1)),
            ),
            n_classes=2,
        )
        model = MioModel()
        handles = build_input(model, schema, np.array([0.5]))
        encode_classifier(model, mlp, handles)
        assert not any(v.kind == BINARY and v.name.endswith("_on") for v in model.variables)

    def test_input_width_mismatch(self, basic_schema):
        mlp = linear_net([1.0, 2.0])
        model = MioModel()
        handles = build_input(model, basic_schema, normalize([0, "A", 0, 0], basic_schema))
        with pytest.raises(FormulationError):
            encode_classifier(model, mlp, handles)


class TestValidity:
    def test_binary_flip_direction(self):
        schema = DatasetSchema(features=(FeatureSpec("x", continuous(0, 1)),
                                         FeatureSpec("b", binary())))
        mlp = linear_net([2.0, 0.5], bias=-1.2)
        weights = uniform_weights(schema)
        for factual_raw, factual_class in (([0.1, 0], 0), ([0.9, 1], 1)):
            norm = normalize(factual_raw, schema)
            ce_model = build_ce_model(schema, norm, mlp, weights, factual_class, CeConstraints(tau=0.01))
            pool = solve(ce_model.model, SolveParams(pool_size=3))
            assert pool.status == mio.OPTIMAL
            for entry in pool.entries:
                vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
                raw = forward_raw(mlp, vec)[0]
                if factual_class == 1:
                    assert raw <= -0.01 + 1e-6
                else:
                    assert raw >= 0.01 - 1e-6

    @staticmethod
    def _achievable_margins(mlp, factual_class):
        """Grid-scan oracle: best achievable margin per counterfactual class."""
        best = {k: -np.inf for k in range(3) if k != factual_class}
        for x in np.linspace(0, 1, 41):
            for y in np.linspace(0, 1, 41):
                raw = forward_raw(mlp, [x, y])
                for k in best:
                    margin = raw[k] - max(raw[m] for m in range(3) if m != k)
                    best[k] = max(best[k], margin)
        return best

    def test_multiclass_targeted_margins(self):
        schema = DatasetSchema(
            features=(FeatureSpec("x", continuous(0, 1)), FeatureSpec("y", continuous(0, 1))),
            n_classes=3,
        )
        rng = np.random.default_rng(1)
        mlp = Mlp(layers=((rng.normal(size=(3, 2)), rng.normal(size=3) * 0.1),), n_classes=3)
        norm = np.array([0.2, 0.8])
        factual_class = predicted_class(mlp, encoded_from_normalized(norm, schema))
        margins = self._achievable_margins(mlp, factual_class)
        target = max(margins, key=margins.get)
        assert margins[target] > 0.05  # the fixture must be feasible
        constraints = CeConstraints(tau=0.05, target_class=target)
        ce_model = build_ce_model(schema, norm, mlp, uniform_weights(schema), factual_class, constraints)
        pool = solve(ce_model.model, SolveParams(pool_size=2))
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            raw = forward_raw(mlp, vec)
            for k in range(3):
                if k != target:
                    assert raw[target] - raw[k] >= 0.05 - 1e-6

    def test_multiclass_untargeted_beats_factual(self):
        schema = DatasetSchema(
            features=(FeatureSpec("x", continuous(0, 1)), FeatureSpec("y", continuous(0, 1))),
            n_classes=3,
        )
        rng = np.random.default_rng(3)
        mlp = Mlp(layers=((rng.normal(size=(3, 2)), np.zeros(3)),), n_classes=3)
        norm = np.array([0.5, 0.5])
        factual_class = predicted_class(mlp, encoded_from_normalized(norm, schema))
        assert max(self._achievable_margins(mlp, factual_class).values()) > 0.02
        ce_model = build_ce_model(
            schema, norm, mlp, uniform_weights(schema), factual_class, CeConstraints(tau=0.02)
        )
        pool = solve(ce_model.model, SolveParams(pool_size=2))
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            raw = forward_raw(mlp, vec)
            assert max(raw[k] for k in range(3) if k != factual_class) - raw[factual_class] >= 0.02 - 1e-6
            assert predicted_class(mlp, vec) != factual_class

    def test_target_equal_factual_rejected(self):
        model = MioModel()
        raw = model.add_var("raw", mio.CONTINUOUS, -5, 5)
        with pytest.raises(FormulationError):
            add_validity(model, [raw], 1, 2, CeConstraints(target_class=1))


def two_feature_spn_with_class():
    """Mixture over (continuous, 3-level categorical, class)."""
    nodes = {
        0: HistogramLeaf(0, np.array([0.0, 0.25, 0.5, 0.75, 1.0]), np.log([0.4, 1.6, 1.2, 0.8])),
        1: CategoricalLeaf(1, np.log([0.2, 0.5, 0.3])),
        2: CategoricalLeaf(2, np.log([0.6, 0.4])),
        3: HistogramLeaf(0, np.array([0.0, 0.5, 1.0]), np.log([1.8, 0.2])),
        4: CategoricalLeaf(1, np.log([0.5, 0.25, 0.25])),
        5: CategoricalLeaf(2, np.log([0.1, 0.9])),
        6: ProductNode((0, 1, 2)),
        7: ProductNode((3, 4, 5)),
        8: SumNode((6, 7), np.array([0.35, 0.65])),
    }
    return Spn(nodes, 8, 3)


SPN_SCHEMA = DatasetSchema(
    features=(FeatureSpec("x", continuous(0, 1)), FeatureSpec("c", categorical(["a", "b", "c"])))
)


class TestEncodeSpn:
    def test_product_only_matches_exact(self):
        spn = Spn(
            {
                0: HistogramLeaf(0, np.array([0.0, 0.5, 1.0]), np.log([0.6, 1.4])),
                1: CategoricalLeaf(1, np.log([0.2, 0.5, 0.3])),
                2: ProductNode((0, 1)),
            },
            2,
            2,
        )
        rng = np.random.default_rng(3)
        for _ in range(20):
            norm = np.array([rng.uniform(), float(rng.integers(3))])
            if abs(norm[0] - 0.5) < 2e-4 or norm[0] > 1 - 2e-4:
                continue
            model = MioModel()
            handles = build_input(model, SPN_SCHEMA, norm)
            enc = encode_spn(model, spn, handles)
            fix_input(model, handles, encoded_from_normalized(norm, SPN_SCHEMA))
            model.set_objective({enc.root_var: -1.0})
            pool = solve(model, SolveParams(pool_size=1))
            assert pool.entries[0].value(enc.root_var) == pytest.approx(
                log_likelihood(spn, norm), abs=1e-6
            )

    def test_two_child_mixture_takes_max(self):
        spn = Spn(
            {
                0: CategoricalLeaf(0, np.log([0.2, 0.8])),
                1: CategoricalLeaf(0, np.log([0.4, 0.6])),
                2: SumNode((0, 1), np.array([0.5, 0.5])),
            },
            2,
            1,
        )
        schema = DatasetSchema(features=(FeatureSpec("b", binary()),))
        norm = np.array([0.0])
        model = MioModel()
        handles = build_input(model, schema, norm)
        enc = encode_spn(model, spn, handles)
        fix_input(model, handles, encoded_from_normalized(norm, schema))
        model.set_objective({enc.root_var: -1.0})
        pool = solve(model, SolveParams(pool_size=1))
        assert pool.entries[0].value(enc.root_var) == pytest.approx(np.log(0.2), abs=1e-6)

    def test_class_feature_ties_to_counterfactual_class(self):
        spn = two_feature_spn_with_class()
        rng = np.random.default_rng(4)
        for cf_class in (0, 1):
            norm = np.array([0.3141, 1.0])
            class_exprs = [({}, 1.0 if c == cf_class else 0.0) for c in range(2)]
            model = MioModel()
            handles = build_input(model, SPN_SCHEMA, norm)
            enc = encode_spn(model, spn, handles, class_exprs)
            fix_input(model, handles, encoded_from_normalized(norm, SPN_SCHEMA))
            model.set_objective({enc.root_var: -1.0})
            pool = solve(model, SolveParams(pool_size=1))
            expected = log_likelihood_max_approx(spn, list(norm) + [cf_class])
            assert pool.entries[0].value(enc.root_var) == pytest.approx(expected, abs=1e-6)

    def test_bin_selector_rows_hold(self):
        spn = two_feature_spn_with_class()
        norm = np.array([0.6, 0.0])
        class_exprs = [({}, 1.0), ({}, 0.0)]
        model = MioModel()
        handles = build_input(model, SPN_SCHEMA, norm)
        enc = encode_spn(model, spn, handles, class_exprs)
        fix_input(model, handles, encoded_from_normalized(norm, SPN_SCHEMA))
        model.set_objective({enc.root_var: -1.0})
        pool = solve(model, SolveParams(pool_size=1))
        entry = pool.entries[0]
        # every histogram leaf has exactly one active bin
        for node_id in (0, 3):
            leaf = spn.nodes[node_id]
            outside = [
                i
                for i, v in enumerate(model.variables)
                if v.name.startswith(f"spn{node_id}_out")
            ]
            assert sum(round(entry.value(v)) for v in outside) == leaf.n_bins - 1

    def test_schema_spn_width_mismatch(self):
        spn = two_feature_spn_with_class()
        schema = DatasetSchema(features=(FeatureSpec("x", continuous(0, 1)),))
        model = MioModel()
        handles = build_input(model, schema, np.array([0.5]))
        with pytest.raises(FormulationError):
            encode_spn(model, spn, handles, [({}, 1.0), ({}, 0.0)])

    def test_histogram_over_categorical_rejected(self):
        spn = Spn({0: HistogramLeaf(0, np.array([0.0, 1.0]), np.array([0.0]))}, 0, 1)
        schema = DatasetSchema(features=(FeatureSpec("b", binary()),))
        model = MioModel()
        handles = build_input(model, schema, np.array([0.0]))
        with pytest.raises(FormulationError):
            encode_spn(model, spn, handles)


ACTION_SCHEMA = DatasetSchema(
    features=(
        FeatureSpec("wage", continuous(0, 1)),
        FeatureSpec("age", continuous(0, 1), monotone=Monotone.NON_DECREASING),
        FeatureSpec("fixed", binary(), mutable=False),
        FeatureSpec("edu", ordinal(["lo", "mid", "hi"]), monotone=Monotone.NON_DECREASING),
    ),
    causal_rules=(CausalRule("edu", Direction.INCREASE, "age", Direction.INCREASE),),
)


class TestDesiderata:
    def _solve(self, factual_raw, mlp, constraints=CeConstraints(), pool=5):
        norm = normalize(factual_raw, ACTION_SCHEMA)
        vec = encoded_from_normalized(norm, ACTION_SCHEMA)
        factual_class = predicted_class(mlp, vec)
        ce_model = build_ce_model(
            ACTION_SCHEMA, norm, mlp, uniform_weights(ACTION_SCHEMA), factual_class, constraints
        )
        return norm, ce_model, solve(ce_model.model, SolveParams(pool_size=pool))

    def test_immutable_feature_never_changes(self):
        mlp = linear_net([1.0, 0.4, 3.0, 0.0, 0.1, 0.2], bias=-1.0)
        norm, ce_model, pool = self._solve([0.3, 0.4, 0, "lo"], mlp)
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            assert vec[2] == pytest.approx(0.0, abs=1e-6)  # `fixed` stays 0

    def test_monotone_continuous_never_decreases(self):
        mlp = linear_net([2.0, -1.5, 0.0, 0.0, 0.3, 0.6], bias=-0.8)
        norm, ce_model, pool = self._solve([0.2, 0.4, 0, "mid"], mlp)
        for entry in pool.entries:
            vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            assert vec[1] >= norm[1] - 1e-6  # age

    def test_monotone_ordinal_never_downgrades(self):
        mlp = linear_net([0.0, 0.0, 0.0, 1.5, 0.0, -1.5], bias=-0.2)
        # factual edu = hi and positive weight only on lo: flipping the class
        # would need a downgrade, which monotonicity forbids
        norm, ce_model, pool = self._solve([0.5, 0.5, 0, "hi"], mlp, pool=3)
        assert pool.status == mio.INFEASIBLE

    def test_causal_rule_forces_effect(self):
        # class flip requires edu=hi; the causal rule then forces age up
        mlp = linear_net([0.0, 0.0, 0.0, 0.0, 0.0, 2.0], bias=-1.0)
        norm, ce_model, pool = self._solve([0.5, 0.4, 0, "lo"], mlp)
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            edu_hi = vec[5]
            if edu_hi > 0.5:
                assert vec[1] >= norm[1] + 1e-4 - 1e-9  # age rose by >= epsilon

    def test_sparsity_cap_infeasible_when_two_changes_needed(self):
        # flipping the class needs wage + age together; cap S=1 makes it
        # infeasible (verified by enumeration below)
        schema = DatasetSchema(
            features=(FeatureSpec("a", binary()), FeatureSpec("b", binary()),
                      FeatureSpec("c", binary()))
        )
        mlp = linear_net([1.0, 1.0, 0.0], bias=-1.5)
        norm = normalize([0, 0, 0], schema)
        # oracle: enumerate all 8 points
        feasible_single = [
            p
            for p in itertools.product([0, 1], repeat=3)
            if sum(p) <= 1 and forward_raw(mlp, np.array(p, dtype=float))[0] >= 1e-4
        ]
        assert not feasible_single
        ce_model = build_ce_model(
            schema, norm, mlp, uniform_weights(schema), 0, CeConstraints(sparsity_cap=1)
        )
        assert solve(ce_model.model).status == mio.INFEASIBLE
        ce_model2 = build_ce_model(
            schema, norm, mlp, uniform_weights(schema), 0, CeConstraints(sparsity_cap=2)
        )
        assert solve(ce_model2.model).status == mio.OPTIMAL

    def test_plausibility_threshold_row(self):
        spn = two_feature_spn_with_class()
        norm = np.array([0.6, 0.0])
        mlp = linear_net([3.0, 0.0, 0.0, 0.0], bias=-1.0)
        weights = uniform_weights(SPN_SCHEMA)
        constraints = CeConstraints(delta_spn=-0.8)
        ce_model = build_ce_model(SPN_SCHEMA, norm, mlp, weights, 0, constraints, spn=spn)
        pool = solve(ce_model.model, SolveParams(pool_size=3))
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            assert entry.value(ce_model.o_root) >= -0.8 - 1e-6

    def test_threshold_without_spn_rejected(self):
        model = MioModel()
        handles = build_input(model, SPN_SCHEMA, np.array([0.5, 0.0]))
        with pytest.raises(FormulationError):
            add_desiderata(model, handles, SPN_SCHEMA, CeConstraints(delta_spn=0.0), o_root=None)


class TestObjective:
    def test_single_move_distance(self):
        schema = DatasetSchema(features=(FeatureSpec("x", continuous(0, 1)),
                                         FeatureSpec("b", binary())))
        rows = np.array([[0.0, 0.0], [0.2, 0.0], [0.4, 1.0], [0.6, 1.0], [0.8, 0.0]])
        weights = mad_weights(rows, schema)
        assert weights.per_dim[0] == pytest.approx(5.0)
        mlp = linear_net([1.0, 0.0], bias=-0.3001)
        norm = np.array([0.1, 0.0])
        ce_model = build_ce_model(schema, norm, mlp, weights, 0, CeConstraints(tau=0.0005))
        pool = solve(ce_model.model, SolveParams(pool_size=1))
        # must move x from 0.1 to ~0.3006: distance = 5 * 0.2006
        assert pool.entries[0].objective == pytest.approx(5 * 0.2006, abs=1e-3)

    def test_zero_distance_objective_is_likelihood_term(self):
        spn = two_feature_spn_with_class()
        norm = np.array([0.6, 0.0])
        model = MioModel()
        handles = build_input(model, SPN_SCHEMA, norm)
        class_exprs = [({}, 1.0), ({}, 0.0)]
        enc = encode_spn(model, spn, handles, class_exprs)
        fix_input(model, handles, encoded_from_normalized(norm, SPN_SCHEMA))
        set_objective(
            model, handles, SPN_SCHEMA, uniform_weights(SPN_SCHEMA), norm, alpha=0.1, o_root=enc.root_var
        )
        pool = solve(model, SolveParams(pool_size=1))
        expected = -0.1 * log_likelihood_max_approx(spn, [0.6, 0.0, 0])
        assert pool.entries[0].objective == pytest.approx(expected, abs=1e-6)

    def test_pool_entries_have_minimal_two_sided_change(self):
        # at each per-subproblem optimum at least one of dec/inc is zero
        schema = DatasetSchema(features=(FeatureSpec("x", continuous(0, 1)),
                                         FeatureSpec("b", binary())))
        mlp = linear_net([1.0, 0.5], bias=-0.6)
        norm = np.array([0.35, 0.0])
        ce_model = build_ce_model(schema, norm, mlp, uniform_weights(schema), 0, CeConstraints())
        pool = solve(ce_model.model, SolveParams(pool_size=4))
        fv = ce_model.handles.features[0]
        for entry in pool.entries:
            assert min(entry.value(fv.dec), entry.value(fv.inc)) == pytest.approx(0.0, abs=1e-9)

    def test_lower_bound_property_on_pool(self):
        spn = two_feature_spn_with_class()
        mlp = linear_net([2.0, 0.0, 1.0, -1.0], bias=-1.2)
        norm = np.array([0.3, 2.0])
        vec = encoded_from_normalized(norm, SPN_SCHEMA)
        factual_class = predicted_class(mlp, vec)
        ce_model = build_ce_model(
            SPN_SCHEMA, norm, mlp, uniform_weights(SPN_SCHEMA), factual_class,
            CeConstraints(alpha=0.1), spn=spn,
        )
        pool = solve(ce_model.model, SolveParams(pool_size=5))
        assert pool.status == mio.OPTIMAL
        for entry in pool.entries:
            out_vec = np.array([entry.value(v) for v in ce_model.handles.encoded_dims])
            ce_norm = normalized_from_encoded(out_vec, SPN_SCHEMA)
            ce_class = predicted_class(mlp, out_vec)
            exact = log_likelihood(spn, list(ce_norm) + [ce_class])
            assert exact >= entry.value(ce_model.o_root) - 1e-6

    def test_alpha_without_spn_rejected(self):
        model = MioModel()
        handles = build_input(model, SPN_SCHEMA, np.array([0.5, 0.0]))
        with pytest.raises(FormulationError):
            set_objective(
                model, handles, SPN_SCHEMA, uniform_weights(SPN_SCHEMA), np.array([0.5, 0.0]),
                alpha=0.1, o_root=None,
            )
