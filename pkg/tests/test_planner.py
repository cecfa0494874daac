"""Training-order enumeration, pruning, schedules, and budget ranking,
checked against the published Fashion-MNIST CW cost/accuracy numbers."""

import csv
import importlib.resources
import random
import types

import numpy as np
import pytest

from defswap import metrics, planner
from defswap.planner import AE, CLF, DAE, DAE_RED_CLF


@pytest.fixture(scope="module")
def orders():
    return planner.enumerate_orders()


@pytest.fixture(scope="module")
def fashion_matrix():
    path = (importlib.resources.files("defswap")
            / "fixtures" / "tables" / "fashion_cw.csv")
    return metrics.AccuracyMatrix.from_csv(path)


@pytest.fixture(scope="module")
def digit_matrix():
    path = (importlib.resources.files("defswap")
            / "fixtures" / "tables" / "digit_cw.csv")
    return metrics.AccuracyMatrix.from_csv(path)


@pytest.fixture(scope="module")
def survivors(orders):
    return planner.prune(orders).survivors


COST = planner.CostModel()

# Published per-order schedules: cumulative seconds, defenses added, and
# the average accuracy under attack-all-available, per step.
REFERENCE_SCHEDULES = {
    1: ((CLF, DAE, AE, DAE_RED_CLF),
        (42.13, 342.13, 417.59, 433.05),
        (("none",), ("dae",), ("cascade", "ae"), ("hl",)),
        (6.55, 46.95, 77.97, 79.85)),
    4: ((CLF, AE, DAE, DAE_RED_CLF),
        (42.13, 117.59, 417.59, 433.05),
        (("none",), ("ae",), ("dae", "cascade"), ("hl",)),
        (6.55, 80.8, 77.97, 79.85)),
    8: ((DAE, DAE_RED_CLF, CLF, AE),
        (300.0, 315.46, 357.59, 433.05),
        ((), ("hl",), ("none", "dae"), ("cascade", "ae")),
        (None, 8.8, 75.04, 79.85)),
    9: ((DAE, DAE_RED_CLF, AE, CLF),
        (300.0, 315.46, 390.92, 433.05),
        ((), ("hl",), ("ae",), ("none", "dae", "cascade")),
        (None, 8.8, 31.52, 79.85)),
    12: ((AE, CLF, DAE, DAE_RED_CLF),
         (75.46, 117.59, 417.59, 433.05),
         (("ae",), ("none",), ("dae", "cascade"), ("hl",)),
         (8.79, 80.8, 77.97, 79.85)),
}


class TestEnumerate:
    def test_eighteen_orders_in_id_order(self, orders):
        assert len(orders) == 18
        assert [o.order_id for o in orders] == list(range(18))
        assert len({o.components for o in orders}) == 18

    def test_root_grouping(self, orders):
        assert all(o.root == CLF for o in orders[0:6])
        assert all(o.root == DAE for o in orders[6:12])
        assert all(o.root == AE for o in orders[12:18])

    @pytest.mark.parametrize("oid,components", [
        (1, (CLF, DAE, AE, DAE_RED_CLF)),
        (4, (CLF, AE, DAE, DAE_RED_CLF)),
        (8, (DAE, DAE_RED_CLF, CLF, AE)),
        (9, (DAE, DAE_RED_CLF, AE, CLF)),
        (12, (AE, CLF, DAE, DAE_RED_CLF)),
        (14, (AE, DAE, CLF, DAE_RED_CLF)),
        (15, (AE, DAE, DAE_RED_CLF, CLF)),
    ])
    def test_named_ids(self, orders, oid, components):
        assert orders[oid].components == components

    def test_not_a_permutation_rejected(self):
        with pytest.raises(ValueError, match="permutation"):
            planner.TrainingOrder(0, (CLF, CLF, DAE, AE))


class TestCostModel:
    def test_defaults(self):
        assert COST.ae_bundle == pytest.approx(75.46)
        assert COST.total == pytest.approx(433.05)

    def test_component_costs(self):
        assert COST.component_cost(CLF) == pytest.approx(42.13)
        assert COST.component_cost(DAE) == pytest.approx(300.0)
        assert COST.component_cost(AE) == pytest.approx(75.46)
        assert COST.component_cost(DAE_RED_CLF) == pytest.approx(15.46)

    def test_unknown_component(self):
        with pytest.raises(ValueError, match="unknown component"):
            COST.component_cost("vae")

    @pytest.mark.parametrize("bad", [0.0, -3.0, float("nan")])
    def test_nonpositive_rejected(self, bad):
        with pytest.raises(ValueError, match="positive"):
            planner.CostModel(clf=bad)

    def test_from_measured_times(self):
        def model(seconds):
            return types.SimpleNamespace(provenance={"train_seconds": seconds})
        cost = planner.CostModel.from_models(
            clf=model(40.0), dae=model(290.0), ae=model(55.0),
            reduced_clf=model(14.0))
        assert cost.ae_bundle == pytest.approx(69.0)
        assert cost.total == pytest.approx(413.0)


class TestAvailability:
    @pytest.mark.parametrize("components,expected", [
        ((), ()),
        ((CLF,), ("none",)),
        ((AE,), ("ae",)),
        ((DAE,), ()),
        ((DAE_RED_CLF, DAE), ("hl",)),
        ((CLF, DAE), ("none", "dae")),
        ((DAE, AE), ("ae",)),
        ((CLF, DAE, AE), ("none", "dae", "cascade", "ae")),
        ((CLF, DAE, AE, DAE_RED_CLF), ("none", "dae", "cascade", "hl", "ae")),
    ])
    def test_deployable(self, components, expected):
        assert planner.available_defenses(components) == expected

    def test_unlock_view_is_looser_for_cascade(self):
        # the pruning heuristic counts the cascade as soon as both
        # autoencoders exist; deployment additionally waits for clf
        have = (DAE, AE)
        assert "cascade" in planner.available_defenses(
            have, planner.UNLOCK_REQUIREMENTS)
        assert "cascade" not in planner.available_defenses(have)

    def test_unknown_component(self):
        with pytest.raises(ValueError, match="unknown component"):
            planner.available_defenses(("clf", "vae"))

    def test_monotone_along_every_order(self, orders):
        for order in orders:
            seen = set()
            for k in range(1, 5):
                now = set(planner.available_defenses(order.components[:k]))
                assert now >= seen
                seen = now


class TestPrune:
    def test_survivor_ids(self, orders):
        assert planner.prune(orders).survivor_ids() == (1, 4, 8, 9, 12)

    def test_rule_partition(self, orders):
        result = planner.prune(orders)
        by_rule = {}
        for oid, (rule, _) in result.eliminated.items():
            by_rule.setdefault(rule, set()).add(oid)
        assert by_rule == {"R1": {2, 3, 5, 13, 16, 17},
                           "R2": {6, 7, 14},
                           "R3": {10, 11},
                           "R4": {0, 15}}

    def test_reasons_name_the_components(self, orders):
        eliminated = planner.prune(orders).eliminated
        rule, reason = eliminated[2]
        assert rule == "R1" and DAE_RED_CLF in reason
        rule, reason = eliminated[0]
        assert rule == "R4" and "unlocks" in reason

    def test_order_15_loses_to_a_pruned_sibling(self, orders):
        # its 2-prefix sibling (order 14) was already removed by R2, but
        # still witnesses that training clf third unlocks more
        rule, reason = planner.prune(orders).eliminated[15]
        assert rule == "R4"
        assert "order 14" in reason

    @pytest.mark.parametrize("shuffle_seed", [0, 1, 7])
    def test_input_order_invariance(self, orders, shuffle_seed):
        shuffled = list(orders)
        random.Random(shuffle_seed).shuffle(shuffled)
        result = planner.prune(shuffled)
        assert result.survivor_ids() == (1, 4, 8, 9, 12)
        assert result.eliminated == planner.prune(orders).eliminated

    def test_idempotent_on_survivors(self, survivors):
        again = planner.prune(survivors)
        assert again.survivors == survivors
        assert again.eliminated == {}

    def test_duplicate_ids_rejected(self, orders):
        with pytest.raises(ValueError, match="duplicate"):
            planner.prune([orders[1], orders[1]])


class TestSchedule:
    @pytest.mark.parametrize("oid", sorted(REFERENCE_SCHEDULES))
    def test_reference_rows(self, orders, fashion_matrix, oid):
        components, times, added, accs = REFERENCE_SCHEDULES[oid]
        sched = planner.schedule(orders[oid], COST, fashion_matrix)
        assert orders[oid].components == components
        assert [s.component for s in sched.steps] == list(components)
        assert [s.step for s in sched.steps] == [1, 2, 3, 4]
        for step, t, d, a in zip(sched.steps, times, added, accs):
            assert step.cumulative_seconds == pytest.approx(t, abs=1e-6)
            assert step.defenses_added == d
            if a is None:
                assert step.avg_accuracy is None
            else:
                # published values are the exact means rounded to 2 dp
                assert step.avg_accuracy == pytest.approx(a, abs=0.0051)

    def test_avg_is_mean_of_attack_all_row(self, orders, fashion_matrix):
        sched = planner.schedule(orders[1], COST, fashion_matrix)
        available = ("none", "dae", "cascade", "ae")
        expected = np.mean([fashion_matrix.cell(available, e)
                            for e in available])
        assert sched.steps[2].avg_accuracy == pytest.approx(expected)

    def test_total_time_is_order_invariant(self, orders):
        for order in orders:
            sched = planner.schedule(order, COST)
            assert sched.total_seconds == pytest.approx(433.05)

    def test_cumulative_strictly_increasing(self, orders):
        for order in orders:
            times = [s.cumulative_seconds
                     for s in planner.schedule(order, COST).steps]
            assert all(a < b for a, b in zip(times, times[1:]))

    def test_every_defense_added_exactly_once(self, orders):
        for order in orders:
            added = [k for s in planner.schedule(order, COST).steps
                     for k in s.defenses_added]
            assert sorted(added) == sorted(
                ("none", "dae", "cascade", "hl", "ae"))

    def test_defenses_after(self, orders, fashion_matrix):
        sched = planner.schedule(orders[9], COST, fashion_matrix)
        assert sched.defenses_after(1) == ()
        assert sched.defenses_after(3) == ("hl", "ae")
        assert sched.defenses_after(4) == ("none", "dae", "cascade",
                                           "hl", "ae")

    def test_without_matrix_accuracy_absent(self, orders):
        sched = planner.schedule(orders[4], COST)
        assert all(s.avg_accuracy is None for s in sched.steps)

    def test_missing_row_leaves_accuracy_absent(self, orders, digit_matrix):
        # the digit table only has single-defense rows, so only step 1
        # (one deployable defense) can be scored
        sched = planner.schedule(orders[1], COST, digit_matrix)
        assert sched.steps[0].avg_accuracy == pytest.approx(
            digit_matrix.cell(("none",), "none"))
        assert all(s.avg_accuracy is None for s in sched.steps[1:])
        assert sched.steps[3].cumulative_seconds == pytest.approx(433.05)


class TestRecommend:
    def test_budget_120(self, survivors, fashion_matrix):
        result = planner.recommend(survivors, fashion_matrix, 120.0)
        assert result.diagnostic is None
        got = [(r.order.order_id, r.step, r.completion_seconds,
                r.avg_accuracy) for r in result.ranking]
        assert [g[0] for g in got] == [4, 12, 1]
        assert [g[1] for g in got] == [2, 2, 1]
        assert got[0][2] == pytest.approx(117.59)
        assert got[0][3] == pytest.approx(80.8, abs=0.0051)
        assert got[1][3] == pytest.approx(80.8, abs=0.0051)
        assert got[2][3] == pytest.approx(6.55, abs=0.0051)

    def test_budget_full_build(self, survivors, fashion_matrix):
        result = planner.recommend(survivors, fashion_matrix, 433.05)
        assert [r.order.order_id for r in result.ranking] == [1, 4, 8, 9, 12]
        for r in result.ranking:
            assert r.step == 4
            assert r.avg_accuracy == pytest.approx(79.85, abs=0.0051)

    def test_budget_between(self, survivors, fashion_matrix):
        # 8 and 9 finish their HL step at 315.46 and beat order 1's
        # lone classifier; 4 and 12 still lead
        result = planner.recommend(survivors, fashion_matrix, 315.46)
        got = [(r.order.order_id, r.avg_accuracy) for r in result.ranking]
        assert [g[0] for g in got] == [4, 12, 8, 9, 1]
        assert got[2][1] == pytest.approx(8.8, abs=0.0051)

    def test_unknown_accuracy_ranks_last(self, survivors, fashion_matrix):
        # at 300 s orders 8 and 9 have trained only the DAE: no defense
        # deployable, so no accuracy, so they sort below order 1's 6.55
        result = planner.recommend(survivors, fashion_matrix, 300.0)
        got = [(r.order.order_id, r.avg_accuracy) for r in result.ranking]
        assert [g[0] for g in got] == [4, 12, 1, 8, 9]
        assert got[3][1] is None and got[4][1] is None

    def test_infeasible_budget(self, survivors, fashion_matrix):
        result = planner.recommend(survivors, fashion_matrix, 10.0)
        assert result.ranking == ()
        assert "no training order completes" in result.diagnostic

    @pytest.mark.parametrize("bad", [0.0, -5.0])
    def test_nonpositive_budget_rejected(self, survivors, fashion_matrix,
                                         bad):
        with pytest.raises(ValueError, match="positive"):
            planner.recommend(survivors, fashion_matrix, bad)


class TestPlanCsv:
    def test_layout_and_values(self, survivors, fashion_matrix, tmp_path):
        scheds = [planner.schedule(o, COST, fashion_matrix)
                  for o in survivors]
        path = tmp_path / "plan.csv"
        planner.write_plan_csv(scheds, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["order_id", "step", "component",
                           "cumulative_seconds", "defenses_added",
                           "avg_accuracy"]
        assert len(rows) == 1 + 4 * len(survivors)

        by_key = {(r[0], r[1]): r for r in rows[1:]}
        first = by_key[("9", "1")]
        assert first[2] == DAE
        assert first[3] == "300"
        assert first[4] == "" and first[5] == ""
        third = by_key[("9", "3")]
        assert third[3] == "390.92"
        assert third[4] == "ae"
        assert float(third[5]) == pytest.approx(31.52, abs=0.0051)
        last = by_key[("1", "4")]
        assert last[3] == "433.05"
        assert last[4] == "hl"
        assert float(last[5]) == pytest.approx(79.85, abs=0.0051)
        two = by_key[("8", "3")]
        assert two[4] == "none+dae"
