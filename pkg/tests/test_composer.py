"""System specs, group stitching, percentile ranking, and 4-to-3 merge estimation."""

import json

import numpy as np
import pytest

from thermoforge.composer import (
    ComplexSystemSpec,
    JunctionNode,
    MergePattern,
    NodeGroup,
    PercentileReport,
    _assignment_of,
    _objectives,
    _predict_local,
    compose_design,
    compose_estimate,
    estimate_via_merge,
    expand_merge,
    merge_patterns,
    percentile_score,
)
from thermoforge.config_enum import (
    TANK,
    ConfigGraph,
    canonicalize,
    classify_shape,
    composite_space_size,
    enumerate_single_split,
    group_by_parent,
    is_all_parallel,
    is_series_chain,
)
from thermoforge.errors import StructureError, ValidationError
from thermoforge.knowledge import FeatureSpec, featurize, train_knn
from thermoforge.oloc_solver import OlocOptions

FAM3 = enumerate_single_split(3)
AP3 = next(i for i, g in enumerate(FAM3) if is_all_parallel(g))
CHAIN123 = next(i for i, g in enumerate(FAM3) if is_series_chain(g, (1, 2, 3)))

FAST = OlocOptions(segments=8)


def two_junction_system(loads=(5, 5, 7, 5, 4, 4, 4, 4)):
    return ComplexSystemSpec(
        junctions=(JunctionNode(1, TANK), JunctionNode(2, TANK)),
        groups=(NodeGroup(1, (3, 4, 5)), NodeGroup(2, (6, 7, 8))),
        loads={i + 1: float(d) for i, d in enumerate(loads)},
    ).validate()


def constant_model(label, n_features=2, mode="normalized_drop_last"):
    """1-NN with a single stored row predicts `label` for every query."""
    return train_knn(
        [[0.5] * n_features], [label], k=1, spec=FeatureSpec(mode=mode)
    )


class TestSystemSpec:
    def test_two_junction_layout(self):
        sys8 = two_junction_system()
        groups = group_by_parent(sys8)
        assert groups == [(1, (3, 4, 5)), (2, (6, 7, 8))]
        assert composite_space_size(groups) == 169
        assert sys8.n_nodes == 8
        assert sys8.load_vector() == [5, 5, 7, 5, 4, 4, 4, 4]

    def test_dict_round_trip(self):
        sys8 = two_junction_system()
        clone = ComplexSystemSpec.from_dict(sys8.to_dict())
        assert clone.junctions == sys8.junctions
        assert clone.groups == sys8.groups
        assert clone.loads == {k: float(v) for k, v in sys8.loads.items()}

    def test_json_loads_keys_are_strings(self):
        blob = json.dumps(two_junction_system().to_dict())
        clone = ComplexSystemSpec.from_dict(json.loads(blob))
        assert clone.loads[1] == 5.0

    def test_group_loads_conflict_rejected(self):
        obj = two_junction_system().to_dict()
        obj["loads"]["3"] = 9.0  # group block already says 7.0
        with pytest.raises(ValidationError):
            ComplexSystemSpec.from_dict(obj)

    def test_group_loads_length_mismatch(self):
        obj = two_junction_system().to_dict()
        obj["groups"][0]["loads"] = [7.0, 5.0]
        with pytest.raises(ValidationError):
            ComplexSystemSpec.from_dict(obj)

    def test_missing_load_rejected(self):
        with pytest.raises(ValidationError):
            ComplexSystemSpec(
                junctions=(JunctionNode(1, TANK),),
                groups=(NodeGroup(1, (2, 3)),),
                loads={1: 5.0, 2: 4.0},
            ).validate()

    def test_unknown_node_load_rejected(self):
        with pytest.raises(ValidationError):
            ComplexSystemSpec(
                junctions=(),
                groups=(NodeGroup(TANK, (1, 2)),),
                loads={1: 5.0, 2: 4.0, 7: 1.0},
            ).validate()

    def test_negative_load_rejected(self):
        with pytest.raises(ValidationError):
            ComplexSystemSpec(
                junctions=(),
                groups=(NodeGroup(TANK, (1, 2)),),
                loads={1: 5.0, 2: -4.0},
            ).validate()

    def test_dangling_junction_anchor(self):
        with pytest.raises(StructureError):
            ComplexSystemSpec(
                junctions=(JunctionNode(1, 9),),
                groups=(NodeGroup(1, (2,)),),
                loads={1: 5.0, 2: 4.0},
            ).validate()

    def test_node_in_two_groups_rejected(self):
        with pytest.raises(ValidationError):
            ComplexSystemSpec(
                junctions=(),
                groups=(NodeGroup(TANK, (1, 2)), NodeGroup(TANK, (2, 3))),
                loads={1: 5.0, 2: 4.0, 3: 3.0},
            ).validate()


class TestComposeDesign:
    def test_all_parallel_assignment(self):
        g = compose_design(two_junction_system(), [AP3, AP3])
        assert g.parents == (TANK, TANK, 1, 1, 1, 2, 2, 2)

    def test_assignment_decode_is_a_bijection(self):
        sizes = [13, 13]
        seen = {tuple(_assignment_of(i, sizes)) for i in range(169)}
        assert len(seen) == 169
        assert tuple(_assignment_of(14, sizes)) == (1, 1)

    def test_every_point_is_a_valid_covering_forest(self):
        sys8 = two_junction_system()
        rng = np.random.default_rng(3)
        for idx in rng.integers(0, 169, size=12):
            g = compose_design(sys8, _assignment_of(int(idx), [13, 13]))
            assert g.n_nodes == 8
            assert canonicalize(g).parents == g.parents
            assert g.parent(1) == TANK and g.parent(2) == TANK
            # leaves stay inside their junction's subtree
            for node in (3, 4, 5):
                assert g.parent(node) in (1, 3, 4, 5)
            for node in (6, 7, 8):
                assert g.parent(node) in (2, 6, 7, 8)

    def test_assignment_length_checked(self):
        with pytest.raises(ValidationError):
            compose_design(two_junction_system(), [AP3])

    def test_assignment_range_checked(self):
        with pytest.raises(ValidationError):
            compose_design(two_junction_system(), [AP3, 13])


class TestComposeEstimate:
    def test_forced_labels_stitch_exactly(self):
        sys8 = two_junction_system()
        est = compose_estimate(sys8, {3: constant_model(CHAIN123)})
        # both groups become chains in member order under their junction
        assert est.parents == (TANK, TANK, 1, 3, 4, 2, 6, 7)

    def test_single_node_group_needs_no_model(self):
        spec = ComplexSystemSpec(
            junctions=(JunctionNode(1, TANK),),
            groups=(NodeGroup(1, (2,)), NodeGroup(TANK, (3,))),
            loads={1: 5.0, 2: 4.0, 3: 3.0},
        )
        est = compose_estimate(spec, {})
        assert est.parents == (TANK, 1, TANK)

    def test_missing_model_size_rejected(self):
        with pytest.raises(ValidationError, match="no trained model"):
            compose_estimate(two_junction_system(), {4: constant_model(0, 3)})

    def test_magnitude_model_queries_sorted_and_relabels(self):
        spec_pm = FeatureSpec(mode="normalized_plus_magnitude")
        row = featurize([7.0, 5.0, 4.0], spec_pm)
        model = train_knn([row], [CHAIN123], k=1, spec=spec_pm)
        local = _predict_local(model, [4.0, 7.0, 5.0], 3)
        assert is_series_chain(local, (2, 3, 1))

    def test_drop_last_model_queries_natural_order(self):
        local = _predict_local(constant_model(CHAIN123), [4.0, 7.0, 5.0], 3)
        assert is_series_chain(local, (1, 2, 3))

    def test_estimate_is_deterministic(self):
        sys8 = two_junction_system()
        models = {3: constant_model(AP3)}
        assert compose_estimate(sys8, models).to_json() == compose_estimate(
            sys8, models
        ).to_json()

    def test_output_covers_every_node_once(self):
        sys8 = two_junction_system()
        est = compose_estimate(sys8, {3: constant_model(AP3)})
        assert sorted(range(1, 9)) == list(range(1, est.n_nodes + 1))
        assert canonicalize(est).parents == est.parents


class TestMergePatterns:
    def test_pair_table(self):
        pats = merge_patterns([10, 8, 6, 4])
        assert [p.pair for p in pats] == [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
        assert pats[0].loads3 == (18.0, 6.0, 4.0)
        assert pats[3].loads3 == (10.0, 14.0, 4.0)
        assert pats[5].loads3 == (10.0, 8.0, 10.0)

    def test_conservation(self):
        for p in merge_patterns([10, 8, 6, 4]):
            assert sum(p.loads3) == pytest.approx(28.0)

    def test_count_is_six(self):
        assert len(merge_patterns([1.0, 2.0, 3.0, 4.0])) == 6

    def test_wrong_length_rejected(self):
        with pytest.raises(ValidationError):
            merge_patterns([1.0, 2.0, 3.0])

    def test_negative_load_rejected(self):
        with pytest.raises(ValidationError):
            merge_patterns([1.0, -2.0, 3.0, 4.0])


class TestExpandMerge:
    def test_chain_expansion(self):
        pats = merge_patterns([10, 8, 6, 4])
        chain = ConfigGraph(3, (TANK, 1, 2))
        g = expand_merge([10, 8, 6, 4], pats[3], chain)  # merge (2,3): 8 >= 6
        assert g.parents == (TANK, 1, 2, 3)

    def test_larger_member_goes_upstream(self):
        pats = merge_patterns([4, 9, 6, 4])
        g = expand_merge([4, 9, 6, 4], pats[0], FAM3[AP3])  # merge (1,2): 9 > 4
        assert g.parent(2) == TANK
        assert g.parent(1) == 2

    def test_tie_keeps_lower_index_upstream(self):
        pats = merge_patterns([5, 5, 6, 4])
        g = expand_merge([5, 5, 6, 4], pats[0], FAM3[AP3])
        assert g.parent(1) == TANK
        assert g.parent(2) == 1

    def test_downstream_routing_reattaches_below_the_pair(self):
        # slot 2 is the merged node in the middle of a chain; slot 3's node
        # must end up under the downstream member, keeping one 4-chain
        pats = merge_patterns([10, 8, 6, 4])
        chain = ConfigGraph(3, (TANK, 1, 2))
        g = expand_merge([10, 8, 6, 4], pats[3], chain)
        assert is_series_chain(g, (1, 2, 3, 4))

    def test_every_expansion_is_single_split_and_covers_nodes(self):
        loads = [10.0, 8.0, 6.0, 4.0]
        for pattern in merge_patterns(loads):
            for local in FAM3:
                g = expand_merge(loads, pattern, local)
                assert g.n_nodes == 4
                assert classify_shape(g).kind == "single_split"

    def test_rejects_wrong_local_size(self):
        pats = merge_patterns([1.0, 2.0, 3.0, 4.0])
        with pytest.raises(ValidationError):
            expand_merge([1.0, 2.0, 3.0, 4.0], pats[0], ConfigGraph(2, (TANK, 1)))

    def test_rejects_malformed_pair(self):
        bad = MergePattern(pair=(3, 2), loads3=(1.0, 5.0, 4.0))
        with pytest.raises(ValidationError):
            expand_merge([1.0, 2.0, 3.0, 4.0], bad, FAM3[AP3])


@pytest.fixture(scope="module")
def pair_system():
    return ComplexSystemSpec(
        junctions=(),
        groups=(NodeGroup(TANK, (1, 2)),),
        loads={1: 10.0, 2: 6.0},
    ).validate()


@pytest.fixture(scope="module")
def pair_family_objectives(pair_system):
    fam = enumerate_single_split(2)
    objs, conv = _objectives(fam, pair_system.load_vector(), FAST, None)
    assert conv.all()
    return fam, objs


class TestPercentile:
    def test_exhaustive_best_scores_100(self, pair_system, pair_family_objectives):
        fam, objs = pair_family_objectives
        best = fam[int(np.argmax(objs))]
        report = percentile_score(best, pair_system, n_random=100, options=FAST)
        assert report.exhaustive
        assert report.space_size == 3
        assert report.percentile == 100.0
        assert report.design_converged

    def test_worst_counts_only_itself(self, pair_system, pair_family_objectives):
        fam, objs = pair_family_objectives
        worst = fam[int(np.argmin(objs))]
        report = percentile_score(worst, pair_system, n_random=100, options=FAST)
        assert report.percentile == pytest.approx(100.0 / 3.0)
        assert 0.0 <= report.percentile <= 100.0

    def test_subsample_draws_distinct_sorted_indices(
        self, pair_system, pair_family_objectives
    ):
        fam, objs = pair_family_objectives
        best = fam[int(np.argmax(objs))]
        report = percentile_score(best, pair_system, n_random=2, seed=5, options=FAST)
        assert not report.exhaustive
        assert report.indices.shape == (2,)
        assert report.indices[0] < report.indices[1]
        assert report.percentile == 100.0  # true best dominates any subsample

    def test_report_round_trip(self, pair_system, pair_family_objectives):
        fam, objs = pair_family_objectives
        report = percentile_score(fam[0], pair_system, n_random=100, options=FAST)
        clone = PercentileReport.from_dict(json.loads(json.dumps(report.to_dict())))
        assert clone.to_dict() == report.to_dict()

    def test_parallel_workers_match_serial(self, pair_system, pair_family_objectives):
        fam, objs = pair_family_objectives
        a = percentile_score(fam[0], pair_system, n_random=100, options=FAST)
        b = percentile_score(fam[0], pair_system, n_random=100, options=FAST, workers=2)
        assert a.to_dict() == b.to_dict()

    def test_design_size_mismatch_rejected(self, pair_system):
        with pytest.raises(ValidationError):
            percentile_score(FAM3[AP3], pair_system, n_random=10, options=FAST)

    def test_n_random_must_be_positive(self, pair_system):
        with pytest.raises(ValidationError):
            percentile_score(
                enumerate_single_split(2)[0], pair_system, n_random=0, options=FAST
            )


class TestMergeEstimate:
    def test_symmetric_loads_track_all_parallel(self):
        # every candidate carries one series pair, so the estimate sits a few
        # percent under the unreachable all-parallel optimum; 4.5% bounds the
        # measured 3.66% gap with headroom for solver jitter
        est = estimate_via_merge([6.0, 6.0, 6.0, 6.0], constant_model(AP3), options=FAST)
        fam4 = enumerate_single_split(4)
        ap4 = next(g for g in fam4 if is_all_parallel(g))
        (y_ap,), _ = _objectives([ap4], [6.0] * 4, FAST, None)
        assert est.objective <= y_ap
        assert (y_ap - est.objective) / y_ap <= 0.045
        assert len(est.candidates) == 6
        assert all(est.converged)
        json.dumps(est.to_dict())  # serializable

    def test_reference_regret_in_unit_interval(self):
        model = train_knn(
            [[1 / 3, 1 / 3], [0.6, 0.25]], [AP3, CHAIN123], k=1, spec=FeatureSpec()
        )
        est = estimate_via_merge([10.0, 8.0, 6.0, 4.0], model, reference=True, options=FAST)
        assert est.regret is not None
        assert 0.0 <= est.regret <= 1.0
        y_min, y_max = est.reference_range
        assert y_min <= est.objective <= y_max
        assert est.objective == max(v for _, _, v in est.candidates)

    def test_without_reference_no_regret(self):
        est = estimate_via_merge([9.0, 7.0, 5.0, 3.0], constant_model(AP3), options=FAST)
        assert est.regret is None
        assert est.reference_range is None
        assert est.graph.n_nodes == 4
