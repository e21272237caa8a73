import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modeshift.core import (BASELINE, NO_SFHV, CellArrays, DemandCell, Mode, ModeAttributes,
                            Scenario, WageGroup, Zone, apply_scenario, build_cell_arrays,
                            generalized_cost, hourly_wage_from_bracket, surcharge_scenario)
from modeshift.errors import InvalidInputError, MissingAttributesError, MissingZoneError

pos = st.floats(0.01, 100, allow_nan=False)


def attrs(t=0.5, c=2.75):
    return ModeAttributes(t, 0.0, c, 0.0, 1.0)


class TestGeneralizedCost:
    def test_hand_value(self):
        assert generalized_cost(attrs(0.5, 2.75), 20.0, 1.0) == pytest.approx(12.75)

    def test_reference_beta(self):
        assert generalized_cost(attrs(1.0, 0.0), 30.0, 0.71) == pytest.approx(21.30)

    def test_unavailable_is_inf(self):
        assert generalized_cost(ModeAttributes.unavailable(), 20.0, 0.7) == math.inf

    def test_overrides_replace_means(self):
        a = attrs(1.0, 5.0)
        assert generalized_cost(a, 10.0, 1.0, time_override=2.0, cost_override=1.0) == 21.0

    @pytest.mark.parametrize("kw", [{"time_override": -1.0}, {"cost_override": -0.1}])
    def test_negative_override_rejected(self, kw):
        with pytest.raises(InvalidInputError):
            generalized_cost(attrs(), 20.0, 1.0, **kw)

    @pytest.mark.parametrize("wage,beta", [(0.0, 1.0), (20.0, 0.0), (-1.0, 1.0)])
    def test_bad_wage_or_beta(self, wage, beta):
        with pytest.raises(InvalidInputError):
            generalized_cost(attrs(), wage, beta)

    @given(t=pos, c=pos, w=pos, b=pos, dt=pos, dc=pos, dw=pos, db=pos)
    def test_monotone(self, t, c, w, b, dt, dc, dw, db):
        base = generalized_cost(attrs(t, c), w, b)
        assert generalized_cost(attrs(t + dt, c), w, b) >= base
        assert generalized_cost(attrs(t, c + dc), w, b) >= base
        assert generalized_cost(attrs(t, c), w + dw, b) >= base
        assert generalized_cost(attrs(t, c), w, b + db) >= base


class TestTypes:
    def test_unavailable_needs_all_inf(self):
        with pytest.raises(InvalidInputError):
            ModeAttributes(math.inf, 0.0, 3.0, 0.0, math.inf)

    def test_negative_attribute_rejected(self):
        with pytest.raises(InvalidInputError):
            ModeAttributes(0.5, -0.1, 1.0, 0.0, 1.0)

    def test_wage_group_positive(self):
        with pytest.raises(InvalidInputError):
            WageGroup("w", 0.0)

    def test_demand_cell_counts(self):
        c = DemandCell.from_mapping("A", "B", "W1", {"taxi": 2, "walk": 1.5})
        assert c.trips == (2.0, 0.0, 1.5, 0.0, 0.0, 0.0)
        assert c.total == 3.5
        with pytest.raises(InvalidInputError):
            DemandCell("A", "B", None, (1, 2, 3, 4, 5, -1))

    def test_mode_parse(self):
        assert Mode.parse(" SFHV ") is Mode.SFHV
        with pytest.raises(InvalidInputError):
            Mode.parse("bike")

    def test_bracket_midpoint(self):
        assert hourly_wage_from_bracket(30_000, 60_000) == pytest.approx(45_000 / 2080)


class TestApplyScenario:
    def test_empty_scenario_identity(self, two_zone_table):
        zones, table = two_zone_table
        assert apply_scenario(table, zones, BASELINE) == table

    def test_removal(self, two_zone_table):
        zones, table = two_zone_table
        out = apply_scenario(table, zones, NO_SFHV)
        for key, a in out.items():
            if key[2] == Mode.SFHV:
                assert not a.available
            else:
                assert a is table[key]

    def test_surcharge_on_matching_origin(self):
        zones = {"M": Zone("M", "Manhattan"), "Q": Zone("Q", "Queens")}
        row = ModeAttributes(0.3, 0.0, 10.0, 0.5, 2.0)
        table = {(o, "Q", m): row for o in zones for m in Mode}
        out = apply_scenario(table, zones, surcharge_scenario("Manhattan", 2.0))
        assert out[("M", "Q", Mode.TAXI)].cost_mean == pytest.approx(12.50)
        assert out[("M", "Q", Mode.FHV)].cost_mean == pytest.approx(12.75)
        assert out[("M", "Q", Mode.SFHV)].cost_mean == pytest.approx(11.50)
        assert out[("M", "Q", Mode.TRANSIT)] is row
        assert out[("Q", "Q", Mode.TAXI)] is row

    def test_input_not_mutated(self, two_zone_table):
        zones, table = two_zone_table
        before = dict(table)
        apply_scenario(table, zones, surcharge_scenario())
        assert table == before

    def test_unknown_zone(self, two_zone_table):
        zones, table = two_zone_table
        table[("X", "A", Mode.TAXI)] = attrs()
        with pytest.raises(MissingZoneError):
            apply_scenario(table, zones, NO_SFHV)

    def test_removal_wins_over_surcharge(self, two_zone_table):
        zones, table = two_zone_table
        s = Scenario("both", removed_modes={Mode.TAXI}, surcharges={Mode.TAXI: 5.0})
        out = apply_scenario(table, zones, s)
        assert not out[("A", "B", Mode.TAXI)].available

    def test_removal_idempotent(self, two_zone_table):
        zones, table = two_zone_table
        once = apply_scenario(table, zones, NO_SFHV)
        assert apply_scenario(once, zones, NO_SFHV) == once

    @settings(max_examples=50)
    @given(a=st.floats(0, 20), b=st.floats(0, 20))
    def test_surcharges_additive(self, a, b):
        zones = {"A": Zone("A", "Manhattan")}
        table = {("A", "A", Mode.TAXI): attrs(0.4, 7.0)}
        sa = Scenario("a", surcharges={Mode.TAXI: a})
        sb = Scenario("b", surcharges={Mode.TAXI: b})
        twice = apply_scenario(apply_scenario(table, zones, sa), zones, sb)
        once = apply_scenario(table, zones, Scenario("ab", surcharges={Mode.TAXI: a + b}))
        assert twice[("A", "A", Mode.TAXI)].cost_mean == pytest.approx(
            once[("A", "A", Mode.TAXI)].cost_mean, rel=1e-12)

    def test_composition_equals_merged(self, two_zone_table):
        zones, table = two_zone_table
        surch = surcharge_scenario("Manhattan")
        seq = apply_scenario(apply_scenario(table, zones, NO_SFHV), zones, surch)
        assert seq == apply_scenario(table, zones, NO_SFHV.merged(surch))

    def test_scenario_round_trip(self):
        s = surcharge_scenario("Manhattan", 3.0)
        assert Scenario.from_dict(s.to_dict()) == s

    def test_negative_surcharge_rejected(self):
        with pytest.raises(InvalidInputError):
            Scenario(surcharges={"taxi": -1.0})


class TestCellArrays:
    def test_build_and_gen_costs(self, two_zone_table):
        _, table = two_zone_table
        table[("A", "B", Mode.WALK)] = ModeAttributes.unavailable()
        cells = [DemandCell.from_mapping("A", "B", "w", {"taxi": 3})]
        ca = build_cell_arrays(cells, table, {"w": 20.0})
        assert isinstance(ca, CellArrays)
        g = ca.gen_costs(1.0)
        assert g[0, Mode.TAXI] == pytest.approx(20.0)
        assert g[0, Mode.WALK] == math.inf
        r = ca.restrict([Mode.TAXI])
        assert np.isinf(r.gen_costs(1.0)[0, 1:]).all()

    def test_missing_attributes_listed(self, two_zone_table):
        _, table = two_zone_table
        cells = [DemandCell.from_mapping("A", "C", "w", {"taxi": 1})]
        with pytest.raises(MissingAttributesError) as exc:
            build_cell_arrays(cells, table, {"w": 20.0})
        assert "('A', 'C', 'taxi')" in str(exc.value)
