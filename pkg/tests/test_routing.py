import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odfuse.core import (
    CATEGORY_ORDER,
    NodeId,
    NodeKind,
    RoadTag,
    RoutingReportObservation,
    VehicleType,
    make_hour_key,
)
from odfuse.errors import DataError
from odfuse.fusion import GbtHyperparams, train
from odfuse.ingest import BiasProfile, build_dataset, generate_synthetic
from odfuse.network import trondheim_fixture
from odfuse.routing import (
    FlowDecision,
    JointDistribution,
    Scenario,
    build_od_matrix,
    conservation_violations,
    decide_flows,
    distribute,
    infer_joint_distribution,
    joint_from_predictions,
    largest_remainder,
    marginals,
    write_od_csv,
)

from _helpers import (
    expected_hour_total,
    minimax_apportionment,
    pair_only_network,
    ramp_network,
)

HOUR = make_hour_key("2025-01-30T17:00")

C1, C2, C3 = CATEGORY_ORDER[0], CATEGORY_ORDER[1], CATEGORY_ORDER[2]


def worked_example_joint(hour=HOUR) -> JointDistribution:
    """Worked-example joint: Brøttemsvegen 0.3 (22/5/3 mix), Heimsdalvegen
    0.2, a third destination absorbing the remaining half, so 100 net
    vehicles send 50 to the {Brøttemsvegen, Heimsdalvegen} subset split
    60/40 after renormalization."""
    return JointDistribution(
        hour=hour,
        mass={
            ("Brøttemsvegen", C1): 0.22,
            ("Brøttemsvegen", C2): 0.05,
            ("Brøttemsvegen", C3): 0.03,
            ("Heimsdalvegen", C1): 0.20,
            ("Industripark", C1): 0.50,
        },
    )


class TestLargestRemainder:
    def test_exact_quotas(self):
        assert largest_remainder(10, [0.5, 0.5]) == [5, 5]

    def test_worked_example_split(self):
        assert largest_remainder(50, [0.6, 0.4]) == [30, 20]

    def test_three_way_against_minimax_oracle(self):
        weights = [0.4, 0.35, 0.25]
        got = largest_remainder(7, weights)
        assert got == [3, 2, 2]
        assert got == minimax_apportionment(7, weights)

    def test_remainder_tie_prefers_larger_weight(self):
        # quotas 1.5 / 1.0 / 0.5: the two .5 remainders tie, weight wins
        assert largest_remainder(3, [0.5, 1 / 3, 1 / 6]) == [2, 1, 0]

    def test_all_equal_tie_prefers_earlier_index(self):
        assert largest_remainder(2, [0.25, 0.25, 0.25, 0.25]) == [1, 1, 0, 0]

    def test_unnormalized_weights_rejected(self):
        with pytest.raises(DataError, match="sum"):
            largest_remainder(5, [0.5, 0.4])

    def test_zero_total(self):
        assert largest_remainder(0, [0.3, 0.7]) == [0, 0]

    @settings(max_examples=200, deadline=None)
    @given(
        st.integers(min_value=0, max_value=100000),
        st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=1, max_size=50),
    )
    def test_sum_exact_and_quota_rule(self, total, raw):
        weights = [w / sum(raw) for w in raw]
        result = largest_remainder(total, weights)
        assert sum(result) == total
        for r, w in zip(result, weights):
            q = total * w
            assert np.floor(q) <= r <= np.ceil(q)


class TestJointAndMarginals:
    def test_single_destination_normalization(self):
        joint = joint_from_predictions(HOUR, ["A"], np.array([[90.0, 0, 10.0, 0, 0, 0]]), [False])
        assert joint.mass[("A", C1)] == pytest.approx(0.9)
        assert joint.mass[("A", C3)] == pytest.approx(0.1)
        assert sum(joint.mass.values()) == pytest.approx(1.0, abs=1e-9)

    def test_identical_predictions_split_evenly(self):
        preds = np.array([[50.0, 10, 0, 0, 0, 0], [50.0, 10, 0, 0, 0, 0]])
        joint = joint_from_predictions(HOUR, ["A", "B"], preds, [False, False])
        marg = marginals(joint)
        assert marg.global_by_destination["A"] == pytest.approx(0.5)
        assert marg.global_by_destination["B"] == pytest.approx(0.5)

    def test_all_censored_falls_back_to_uniform(self):
        preds = np.array([[50.0, 0, 0, 0, 0, 0], [30.0, 0, 0, 0, 0, 0]])
        joint = joint_from_predictions(HOUR, ["A", "B"], preds, [True, True])
        assert joint.fallback_uniform
        assert all(v == pytest.approx(1 / 12) for v in joint.mass.values())

    def test_negative_predictions_clamped(self):
        preds = np.array([[100.0, -50.0, 0, 0, 0, 0]])
        joint = joint_from_predictions(HOUR, ["A"], preds, [False])
        assert joint.mass[("A", C2)] == 0.0

    def test_marginals_mixed(self):
        joint = JointDistribution(
            hour=HOUR, mass={("A", C1): 0.3, ("A", C2): 0.3, ("B", C1): 0.4}
        )
        marg = marginals(joint)
        assert marg.global_by_destination == pytest.approx({"A": 0.6, "B": 0.4})
        assert marg.per_destination["A"][C1] == pytest.approx(0.5)
        assert marg.per_destination["A"][C2] == pytest.approx(0.5)
        assert marg.per_destination["B"][C1] == pytest.approx(1.0)

    def test_zero_marginal_destination_flagged_uniform(self):
        joint = JointDistribution(hour=HOUR, mass={("A", C1): 1.0, ("B", C1): 0.0})
        marg = marginals(joint)
        assert marg.uniform_category_destinations == ("B",)
        assert marg.per_destination["B"][C3] == pytest.approx(1 / 6)

    def test_mass_must_sum_to_one(self):
        with pytest.raises(DataError, match="sums"):
            JointDistribution(hour=HOUR, mass={("A", C1): 0.5})

    def test_subset_renormalization_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            raw = rng.random(5) + 1e-3
            names = list("ABCDE")
            mass = {(n, C1): float(v / raw.sum()) for n, v in zip(names, raw)}
            joint = JointDistribution(hour=HOUR, mass=mass)
            marg = marginals(joint)
            small = ["A", "B"]
            big = ["A", "B", "C"]
            share_small = marg.global_by_destination["A"] / sum(
                marg.global_by_destination[d] for d in small
            )
            share_big = marg.global_by_destination["A"] / sum(
                marg.global_by_destination[d] for d in big
            )
            assert share_big <= share_small + 1e-12


class TestInferJointDistribution:
    def test_requires_rows_for_hour(self):
        from odfuse.fusion import FusionModel, TargetModel
        from odfuse.ingest import FEATURE_NAMES, TARGET_NAMES

        model = FusionModel(hyperparams=GbtHyperparams(), feature_names=FEATURE_NAMES)
        for name in TARGET_NAMES:
            model.targets[name] = TargetModel(base_score=1.0, trees=[])
        with pytest.raises(DataError, match="2025-01-30T17:00"):
            infer_joint_distribution(model, [], HOUR)

    def test_constant_model_uniform_destinations(self):
        from odfuse.fusion import FusionModel, TargetModel
        from odfuse.ingest import FEATURE_NAMES, TARGET_NAMES

        model = FusionModel(hyperparams=GbtHyperparams(), feature_names=FEATURE_NAMES)
        for name in TARGET_NAMES:
            model.targets[name] = TargetModel(base_score=10.0, trees=[])
        rows = [
            RoutingReportObservation(
                node=NodeId(name=n, kind=NodeKind.INFERRED_DESTINATION),
                hour=HOUR,
                people_flow=100.0,
                road_tag=RoadTag.SECONDARY,
            )
            for n in ("A", "B")
        ]
        joint = infer_joint_distribution(model, rows, HOUR)
        marg = marginals(joint)
        assert marg.global_by_destination["A"] == pytest.approx(0.5)


class TestDecideFlows:
    def test_500_400_worked_example(self):
        net = pair_only_network()
        counts = {"E6-Klett": 500, "Storlersbakken-Trondheim": 400}
        decisions, events = decide_flows(net, counts, HOUR)
        by_scenario = {d.scenario: d for d in decisions}
        net_d = by_scenario[Scenario.PASSTHROUGH_NET]
        bypass = by_scenario[Scenario.PASSTHROUGH_BYPASS]
        assert net_d.volume == 100
        assert net_d.direction == "northbound:inflow"
        assert net_d.origin == "E6-Klett"
        assert bypass.volume == 400
        assert bypass.eligible_destinations == ("Storlersbakken-Trondheim",)
        balance = [e for e in events if e.entry_type == "balance"][0]
        assert balance.amount == 500

    def test_balanced_pair(self):
        net = pair_only_network()
        counts = {"E6-Klett": 250, "Storlersbakken-Trondheim": 250}
        decisions, _ = decide_flows(net, counts, HOUR)
        by_scenario = {d.scenario: d for d in decisions}
        assert by_scenario[Scenario.PASSTHROUGH_NET].volume == 0
        assert by_scenario[Scenario.PASSTHROUGH_BYPASS].volume == 250

    def test_downstream_heavy_pair_is_outflow(self):
        net = pair_only_network()
        counts = {"E6-Klett": 300, "Storlersbakken-Trondheim": 420}
        decisions, _ = decide_flows(net, counts, HOUR)
        net_d = next(d for d in decisions if d.scenario is Scenario.PASSTHROUGH_NET)
        assert net_d.volume == 120
        assert net_d.reversed_roles
        assert net_d.origin == "Storlersbakken-Trondheim"
        assert net_d.direction == "northbound:outflow"

    def test_internal_consumes_ramp_before_local(self):
        net = ramp_network()
        counts = {
            "Boundary|Inbound": 80,
            "Boundary|Outbound": 50,
            "Onramp": 80,
            "Offramp": 30,
        }
        decisions, events = decide_flows(net, counts, HOUR)
        by_scenario = {d.scenario: d for d in decisions}
        internal = by_scenario[Scenario.INTERNAL]
        assert internal.volume == 30
        assert internal.direction == "eastbound"
        assert internal.eligible_destinations == ("East-A", "East-B")
        assert by_scenario[Scenario.LOCAL_INFLOW].volume == 50
        assert by_scenario[Scenario.LOCAL_OUTFLOW].volume == 30
        assert by_scenario[Scenario.LOCAL_OUTFLOW].reversed_roles
        consumed = [e for e in events if e.entry_type == "consume"][0]
        assert (consumed.key, consumed.amount) == ("Onramp", 30)
        # conservation ledger: 30 internal + 50 in + 30 out
        balance = [e for e in events if e.entry_type == "balance"][0]
        assert balance.amount == 110
        assert balance.amount == expected_hour_total(net, counts)

    def test_westbound_consumes_offramp(self):
        net = ramp_network()
        counts = {
            "Boundary|Inbound": 40,
            "Boundary|Outbound": 65,
            "Onramp": 20,
            "Offramp": 70,
        }
        decisions, _ = decide_flows(net, counts, HOUR)
        by_scenario = {d.scenario: d for d in decisions}
        assert by_scenario[Scenario.INTERNAL].volume == 25
        assert by_scenario[Scenario.INTERNAL].direction == "westbound"
        assert by_scenario[Scenario.LOCAL_OUTFLOW].volume == 45
        assert by_scenario[Scenario.LOCAL_INFLOW].volume == 20

    def test_capped_consumption_is_flagged(self):
        net = ramp_network()
        counts = {
            "Boundary|Inbound": 200,
            "Boundary|Outbound": 50,
            "Onramp": 40,
            "Offramp": 10,
        }
        decisions, events = decide_flows(net, counts, HOUR)
        by_scenario = {d.scenario: d for d in decisions}
        assert by_scenario[Scenario.INTERNAL].volume == 150
        assert Scenario.LOCAL_INFLOW not in by_scenario  # onramp fully consumed
        consumed = [e for e in events if e.entry_type == "consume"][0]
        assert consumed.amount == 40
        assert consumed.flag == "capped"
        assert [e for e in events if e.entry_type == "balance"][0].amount == expected_hour_total(
            net, counts
        )

    def test_missing_counts_listed(self):
        net = pair_only_network()
        with pytest.raises(DataError, match="Storlersbakken-Trondheim"):
            decide_flows(net, {"E6-Klett": 10}, HOUR)

    def test_non_integer_count_rejected(self):
        net = pair_only_network()
        with pytest.raises(DataError, match="non-negative integer"):
            decide_flows(net, {"E6-Klett": 1.5, "Storlersbakken-Trondheim": 2}, HOUR)


class TestDistribute:
    def test_worked_example_destination_split(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.PASSTHROUGH_NET,
            direction="northbound:inflow",
            volume=50,
            origin="E6-Klett",
            eligible_destinations=("Brøttemsvegen", "Heimsdalvegen"),
        )
        entries = distribute(decision, worked_example_joint())
        per_dest = {}
        for e in entries:
            per_dest[e.destination] = per_dest.get(e.destination, 0) + e.count
        assert per_dest == {"Brøttemsvegen": 30, "Heimsdalvegen": 20}

    def test_worked_example_category_breakdown(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.PASSTHROUGH_NET,
            direction="northbound:inflow",
            volume=100,
            origin="E6-Klett",
            eligible_destinations=("Brøttemsvegen", "Heimsdalvegen", "Industripark"),
        )
        entries = distribute(decision, worked_example_joint())
        bro = {e.vehicle_type: e.count for e in entries if e.destination == "Brøttemsvegen"}
        assert bro == {
            VehicleType.PASSENGER_VEHICLE: 22,
            VehicleType.LIGHT_COMMERCIAL: 5,
            VehicleType.BUS_MEDIUM_TRUCK: 3,
        }
        assert sum(e.count for e in entries) == 100

    def test_zero_volume_no_entries(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.LOCAL_INFLOW,
            direction="onramp:in",
            volume=0,
            origin="Onramp",
            eligible_destinations=("Brøttemsvegen",),
        )
        assert distribute(decision, worked_example_joint()) == []

    def test_bypass_single_aggregate_entry(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.PASSTHROUGH_BYPASS,
            direction="northbound:bypass",
            volume=400,
            origin="E6-Klett",
            eligible_destinations=("Storlersbakken-Trondheim",),
        )
        entries = distribute(decision, worked_example_joint())
        assert len(entries) == 1
        assert entries[0].vehicle_type is VehicleType.ALL
        assert entries[0].count == 400
        assert entries[0].destination == "Storlersbakken-Trondheim"

    def test_reversed_roles_swap_origin_destination(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.LOCAL_OUTFLOW,
            direction="offramp:out",
            volume=10,
            origin="Offramp",
            eligible_destinations=("Brøttemsvegen",),
            reversed_roles=True,
        )
        joint = JointDistribution(hour=HOUR, mass={("Brøttemsvegen", C1): 1.0})
        entries = distribute(decision, joint)
        assert entries[0].origin == "Brøttemsvegen"
        assert entries[0].destination == "Offramp"

    def test_zero_mass_subset_uniform_fallback(self):
        joint = JointDistribution(
            hour=HOUR, mass={("A", C1): 1.0, ("B", C1): 0.0, ("C", C1): 0.0}
        )
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.LOCAL_INFLOW,
            direction="onramp:in",
            volume=10,
            origin="Onramp",
            eligible_destinations=("B", "C"),
        )
        entries = distribute(decision, joint)
        per_dest: dict[str, int] = {}
        for e in entries:
            per_dest[e.destination] = per_dest.get(e.destination, 0) + e.count
        assert sum(per_dest.values()) == 10
        assert per_dest == {"B": 5, "C": 5}

    def test_unknown_destination_rejected(self):
        decision = FlowDecision(
            hour=HOUR,
            scenario=Scenario.LOCAL_INFLOW,
            direction="onramp:in",
            volume=10,
            origin="Onramp",
            eligible_destinations=("Nowhere",),
        )
        with pytest.raises(DataError, match="Nowhere"):
            distribute(decision, worked_example_joint())


def destination_rows(net, hour, flows):
    rows = []
    for node in net.destinations():
        rows.append(
            RoutingReportObservation(
                node=node.node,
                hour=hour,
                people_flow=float(flows.get(node.node.name, 0.0)),
                road_tag=node.road_tag,
            )
        )
    return rows


@pytest.fixture(scope="module")
def trained_small():
    net = trondheim_fixture()
    profile = BiasProfile(
        gains={RoadTag.PRIMARY: 1.4, RoadTag.TRUNK: 1.0, RoadTag.SECONDARY: 0.7},
        noise_scale=0.1,
        censor_threshold=120,
        seed=23,
    )
    tb, rt = generate_synthetic(net, 2, profile)
    ds = build_dataset(tb, rt, 0.2)
    model = train(ds, GbtHyperparams(n_trees=15, max_depth=3))
    return net, model, tb, rt


class TestBuildOdMatrix:
    def test_full_run_conserves_every_hour(self, trained_small):
        net, model, tb, rt = trained_small
        run = build_od_matrix(net, model, tb, rt)
        assert conservation_violations(run) == []
        # independent recomputation from the raw counts
        counts_by_hour = {}
        for obs in tb:
            counts_by_hour.setdefault(obs.hour.timestamp, {})[obs.join_key()] = int(
                obs.counts.total
            )
        decided = {}
        for d in run.decisions:
            decided[d.hour.timestamp] = decided.get(d.hour.timestamp, 0) + d.volume
        for ts, counts in counts_by_hour.items():
            assert decided[ts] == expected_hour_total(net, counts)
        # every entry group sums to its decision volume
        for decision, entries in run.entries_by_decision:
            assert sum(e.count for e in entries) == decision.volume

    def test_deterministic_od_csv(self, trained_small, tmp_path):
        net, model, tb, rt = trained_small
        for tag in ("a", "b"):
            run = build_od_matrix(net, model, tb, rt)
            write_od_csv(tmp_path / f"od_{tag}.csv", run.matrix)
        assert (tmp_path / "od_a.csv").read_bytes() == (tmp_path / "od_b.csv").read_bytes()

    def test_balanced_hour_emits_only_bypass(self):
        net = pair_only_network()
        hour = HOUR
        from odfuse.core import CountsByCategory, Direction, TollboothObservation

        tb = [
            TollboothObservation(
                node=NodeId(name=name, kind=NodeKind.MAIN_TOLLBOOTH),
                direction=Direction.UNDIRECTED,
                hour=hour,
                counts=CountsByCategory.from_categories({C1: 250.0}),
            )
            for name in ("E6-Klett", "Storlersbakken-Trondheim")
        ]
        rt = destination_rows(net, hour, {"Brøttemsvegen": 60, "Heimsdalvegen": 40, "Industripark": 50})
        from odfuse.fusion import FusionModel, TargetModel
        from odfuse.ingest import FEATURE_NAMES, TARGET_NAMES

        model = FusionModel(hyperparams=GbtHyperparams(), feature_names=FEATURE_NAMES)
        for name in TARGET_NAMES:
            model.targets[name] = TargetModel(base_score=10.0, trees=[])
        run = build_od_matrix(net, model, tb, rt)
        assert run.matrix.entries
        assert all(e.scenario is Scenario.PASSTHROUGH_BYPASS for e in run.matrix.entries)

    def test_missing_destination_rows_fail_with_hour(self, trained_small):
        net, model, tb, _ = trained_small
        with pytest.raises(DataError, match="destination routing rows"):
            build_od_matrix(net, model, tb, [])

    def test_joint_sums_to_one_every_hour(self, trained_small):
        net, model, tb, rt = trained_small
        dest_names = set(net.destination_names())
        by_hour = {}
        for obs in rt:
            if obs.node.name in dest_names:
                by_hour.setdefault(obs.hour, []).append(obs)
        for hour, rows in list(by_hour.items())[:24]:
            joint = infer_joint_distribution(model, rows, hour)
            assert sum(joint.mass.values()) == pytest.approx(1.0, abs=1e-9)
