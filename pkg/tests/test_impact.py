import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from modeshift import impact as im
from modeshift.core import (BASELINE, NO_SFHV, DemandCell, Mode, ModeAttributes, Zone,
                            build_cell_arrays, surcharge_scenario)
from modeshift.errors import InternalConsistencyError, InvalidInputError, UndefinedSharesError
from modeshift.inference import ParameterSample
from modeshift.simulator import REFERENCE_PARAMS, SimParams, correlate, rng_stream, simulate_cells

TR, SF = Mode.TRANSIT, Mode.SFHV
SURCHARGED = [Mode.TAXI, Mode.FHV, Mode.SFHV]


def posterior(*pairs):
    return [ParameterSample(p, 0.0, 0.0, w) for p, w in pairs]


def one_cell(table, wage=20.0, trips=None):
    cell = DemandCell.from_mapping("A", "B", "w", trips or {"taxi": 1})
    return build_cell_arrays([cell], table, {"w": wage})


def simple_table(**over):
    base = {m: ModeAttributes(0.5, 0.0, 5.0, 0.0, 4.0) for m in Mode}
    base[TR] = ModeAttributes(0.75, 0.0, 2.75, 0.0, 0.0)
    base[Mode.WALK] = ModeAttributes.unavailable()
    base.update(over)
    return {("A", "B", m): a for m, a in base.items()}


@pytest.fixture(scope="module")
def surcharge_run(small_bundle):
    b, _ = small_bundle
    post = posterior((REFERENCE_PARAMS, 0.7), (SimParams(0.5, 0.6, 0.2, 0.4), 0.3))
    return im.run_scenario(b.demand4, b.attrs, b.zones, b.wage_map, BASELINE,
                           surcharge_scenario("Manhattan"), post, 200, seed=5)


class TestConstants:
    def test_defaults(self):
        c = im.ImpactConstants()
        assert (c.miles_per_gallon, c.co2_kg_per_gallon, c.transit_fare, c.sfhv_occupancy) == \
            (20.0, 8.0, 2.75, 2.0)

    @pytest.mark.parametrize("kw", [{"miles_per_gallon": 0}, {"sfhv_occupancy": -2},
                                    {"transit_fare": math.inf}])
    def test_positive(self, kw):
        with pytest.raises(InvalidInputError):
            im.ImpactConstants(**kw)

    def test_fuel_arithmetic(self):
        gal, co2 = im.fuel_and_co2(940_000)
        assert gal == 47_000.0 and co2 == 376_000.0
        assert abs(co2 - 375_000) / 375_000 <= 0.01


class TestShiftShares:
    def test_all_to_taxi(self):
        m = np.zeros((6, 6))
        m[SF, Mode.TAXI] = 12.0
        assert im.shift_shares(im.ShiftMatrix(m), "sfhv")[Mode.TAXI] == 1.0

    def test_uniform(self):
        m = np.zeros((6, 6))
        m[SF, :] = 3.0
        m[SF, SF] = 0.0
        s = im.shift_shares(m, Mode.SFHV)
        assert s[SF] == 0.0
        assert all(s[k] == pytest.approx(0.2) for k in Mode if k != SF)

    def test_zero_row(self):
        with pytest.raises(UndefinedSharesError):
            im.shift_shares(np.eye(6) * (1 - np.eye(6)[SF]), SF)

    def test_matrix_validation(self):
        with pytest.raises(InvalidInputError):
            im.ShiftMatrix(-np.eye(6))
        with pytest.raises(InvalidInputError):
            im.ShiftMatrix(np.eye(5))
        assert im.ShiftMatrix(np.full((6, 6), 0.1)).trips == pytest.approx(3.6)

    def test_enumerated_second_choices(self):
        g = np.array([[6.0, 5.0, 9.0, 8.0, 5.5, 4.0]])
        gb = g.copy()
        gb[0, SF] = np.inf
        p = REFERENCE_PARAMS
        m = simulate_cells(np.array([1000.0]), g, gb, p, 5000, seed=2)
        # replay the cell's noise stream and enumerate who switches where
        eps = p.sigma * correlate(rng_stream(2, 0, 0).standard_normal((5000, 6)), p.cor_tfs, p.cor_fs)
        u = np.log(g[0]) + eps
        first = np.argmin(u, axis=1)
        second = np.argsort(u, axis=1, kind="stable")[:, 1]
        moved = second[first == SF]
        hand = np.bincount(moved, minlength=6) / len(moved)
        got = im.shift_shares(m[0], SF)
        np.testing.assert_allclose([got[k] for k in Mode], hand, atol=1e-12)


class TestTranslate:
    def test_transit_to_sfhv(self):
        table = simple_table()
        ca = cb = one_cell(table, wage=20.0)
        shift = np.zeros((6, 6))
        shift[TR, SF] = 1.0
        comp = im.translate_impacts(shift, ca, cb)
        met = dict(zip(im.METRICS, im.derive_metrics(comp.sum(axis=0))))
        assert met["delta_miles"] == 2.0
        assert met["fuel_gallons"] == pytest.approx(0.1, abs=1e-15)
        assert met["co2_kg"] == pytest.approx(0.8, abs=1e-15)
        assert met["delta_time_hours"] == -0.25
        assert met["time_cost_value"] == -5.0
        assert met["transit_revenue_delta"] == -2.75
        assert met["fhv_revenue_delta"] == 5.0
        assert met["taxi_revenue_delta"] == 0.0
        assert met["delta_time_pct"] == pytest.approx(-100 / 3)
        assert math.isnan(met["delta_miles_pct"])

    def test_zero_shift(self):
        ca = one_cell(simple_table())
        comp = im.translate_impacts(np.zeros((6, 6)), ca, ca)
        assert np.all(im.derive_metrics(comp) == 0)

    def test_surcharged_fare_in_revenue(self):
        zones = {"A": Zone("A", "Manhattan"), "B": Zone("B", "Queens")}
        table = simple_table()
        cell = [DemandCell.from_mapping("A", "B", "w", {"taxi": 1})]
        ca = im.scenario_cells(cell, table, zones, {"w": 20.0}, BASELINE)
        cb = im.scenario_cells(cell, table, zones, {"w": 20.0}, surcharge_scenario())
        shift = np.zeros((6, 6))
        shift[Mode.TAXI, Mode.TAXI] = 10.0
        met = dict(zip(im.METRICS, im.derive_metrics(im.translate_impacts(shift, ca, cb)[0])))
        assert met["taxi_revenue_delta"] == pytest.approx(25.0)
        assert met["delta_time_hours"] == 0.0

    def test_infinite_chosen_mode(self):
        ca = one_cell(simple_table())
        shift = np.zeros((6, 6))
        shift[Mode.TAXI, Mode.WALK] = 1.0
        with pytest.raises(InternalConsistencyError, match="walk"):
            im.translate_impacts(shift, ca, ca)

    def test_alignment(self):
        ca = one_cell(simple_table())
        with pytest.raises(InvalidInputError):
            im.translate_impacts(np.zeros((2, 6, 6)), ca, ca)

    def test_mileage_rule_on_removal(self, small_bundle):
        b, _ = small_bundle
        p = REFERENCE_PARAMS
        ca = build_cell_arrays(b.demand4, b.attrs, b.wage_map)
        cb = im.scenario_cells(b.demand4, b.attrs, b.zones, b.wage_map, NO_SFHV)
        tot = ca.trips.sum(axis=1)
        m = simulate_cells(tot, ca.gen_costs(p.beta), cb.gen_costs(p.beta), p, 300, seed=1)
        comp = im.translate_impacts(m, ca, cb).sum(axis=0)
        got = comp[im.COMPONENTS.index("delta_miles")]
        hand = 0.0
        for i in range(len(ca)):
            d = ca.distance[i]
            for k in Mode:
                if k == SF:
                    continue
                new = 0.0 if k in (TR, Mode.WALK) else d[k]
                hand += m[i, SF, k] * (new - d[SF] / 2)
        assert m[:, SF, :].sum() > 0
        assert got == pytest.approx(hand, rel=1e-12)


class TestRunScenario:
    def test_null_is_exactly_zero(self, small_bundle):
        b, _ = small_bundle
        post = posterior((REFERENCE_PARAMS, 0.5), (SimParams(0.4, 0.9, 0.1, 0.3), 0.5))
        s = surcharge_scenario()
        run = im.run_scenario(b.demand4, b.attrs, b.zones, b.wage_map, s, s, post, 100, seed=1)
        for scope in ("citywide", "per_zone", "per_wage"):
            assert np.all(run.metrics(scope) == 0)
        off = ~np.eye(6, dtype=bool)
        assert np.all(run.shift[:, off] == 0)
        rep = im.aggregate_posterior(run, b.zones)
        for e in rep.citywide.values():
            assert e == {"mean": 0.0, "std": 0.0, "ci95": [0.0, 0.0]}

    def test_conservation(self, surcharge_run, small_bundle):
        b, _ = small_bundle
        demand = math.fsum(c.total for c in b.demand4)
        assert surcharge_run.demand_total == demand
        for m in surcharge_run.shift:
            assert abs(math.fsum(m.ravel()) - demand) <= 1e-9 * demand

    def test_surcharge_never_attracts(self, surcharge_run):
        # with shared noise, raising some fares can only push riders off those modes
        for m in surcharge_run.shift:
            free = [k for k in Mode if k not in SURCHARGED]
            assert np.all(m[np.ix_(free, SURCHARGED)] == 0)
            assert m[:, SURCHARGED].sum() <= m[SURCHARGED, :].sum()

    def test_pct_consistency(self, surcharge_run):
        comp = surcharge_run.components["per_zone"]
        met = surcharge_run.metrics("per_zone")
        j = im.METRICS.index("delta_time_pct")
        base = comp[..., im.COMPONENTS.index("baseline_time_hours")]
        delta = comp[..., im.COMPONENTS.index("delta_time_hours")]
        np.testing.assert_allclose(met[..., j] * base / 100, delta, rtol=1e-9, atol=0)

    def test_groups_sum_to_citywide(self, surcharge_run):
        city = surcharge_run.components["citywide"][:, 0]
        for scope in ("per_zone", "per_wage"):
            np.testing.assert_allclose(surcharge_run.components[scope].sum(axis=1), city,
                                       rtol=1e-12, atol=1e-9)

    def test_deterministic(self, small_bundle, surcharge_run):
        b, _ = small_bundle
        post = posterior((REFERENCE_PARAMS, 0.7), (SimParams(0.5, 0.6, 0.2, 0.4), 0.3))
        again = im.run_scenario(b.demand4, b.attrs, b.zones, b.wage_map, BASELINE,
                                surcharge_scenario("Manhattan"), post, 200, seed=5)
        np.testing.assert_array_equal(again.shift, surcharge_run.shift)

    def test_zero_sigma_is_argmin(self):
        zones = {"A": Zone("A", "Queens"), "B": Zone("B", "Queens")}
        table = simple_table()
        table[("A", "B", SF)] = ModeAttributes(0.5, 0.0, 1.0, 0.0, 4.0)
        cells = [DemandCell.from_mapping("A", "B", "w", {"taxi": 4, "transit": 3})]
        p = SimParams(1.0, 0.0)
        run = im.run_scenario(cells, table, zones, {"w": 20.0}, BASELINE, NO_SFHV,
                              posterior((p, 1.0)), 10, seed=0)
        # costs: taxi/drive/fhv 15, transit 17.75, sfhv 11 -> everyone on sfhv, then taxi
        m = run.shift[0]
        assert m[SF, Mode.TAXI] == 7.0 and m.sum() == 7.0

    def test_bad_reps(self, small_bundle):
        b, _ = small_bundle
        with pytest.raises(InvalidInputError):
            im.run_scenario(b.demand4, b.attrs, b.zones, b.wage_map, BASELINE, NO_SFHV,
                            posterior((REFERENCE_PARAMS, 1.0)), 0, seed=0)


class TestSelectSamples:
    def test_full_mass_drops_zero_weight(self):
        post = posterior((REFERENCE_PARAMS, 0.6), (SimParams(0.5, 0.5), 0.0),
                         (SimParams(0.6, 0.5), 0.4))
        out = im.select_samples(post)
        assert [i for i, _ in out] == [0, 2]
        assert [s.weight for _, s in out] == [0.6, 0.4]

    def test_partial_mass_renormalizes(self):
        post = posterior((REFERENCE_PARAMS, 0.2), (SimParams(0.5, 0.5), 0.7),
                         (SimParams(0.6, 0.5), 0.1))
        out = im.select_samples(post, 0.75)
        assert [i for i, _ in out] == [0, 1]
        assert sum(s.weight for _, s in out) == pytest.approx(1.0)
        assert [i for i, _ in im.select_samples(post, 0.5)] == [1]

    @pytest.mark.parametrize("mass", [0.0, 1.5])
    def test_bad_mass(self, mass):
        with pytest.raises(InvalidInputError):
            im.select_samples(posterior((REFERENCE_PARAMS, 1.0)), mass)


def manual_run(values, weights, n_groups=1):
    comps = np.zeros((len(values), n_groups, len(im.COMPONENTS)))
    comps[:, :, im.COMPONENTS.index("delta_time_hours")] = np.asarray(values)[:, None]
    comps[:, :, im.COMPONENTS.index("baseline_time_hours")] = 10.0
    samples = posterior(*[(SimParams(0.5 + 0.1 * i, 0.5), w) for i, w in enumerate(weights)])
    shift = np.stack([np.eye(6) * (i + 1) for i in range(len(values))])
    return im.ScenarioRun(BASELINE, NO_SFHV, samples, list(range(len(values))), shift,
                          {"citywide": comps[:, :1], "per_zone": comps, "per_wage": comps},
                          {"citywide": ["all"], "per_zone": [f"Z{g}" for g in range(n_groups)],
                           "per_wage": [f"W{g}" for g in range(n_groups)]}, 100.0)


class TestAggregate:
    def test_single_sample(self):
        rep = im.aggregate_posterior(manual_run([-2.0], [1.0]))
        e = rep.citywide["delta_time_hours"]
        assert e == {"mean": -2.0, "std": 0.0, "ci95": [-2.0, -2.0]}
        assert rep.citywide["delta_time_pct"]["mean"] == -20.0

    def test_two_samples_hand(self):
        rep = im.aggregate_posterior(manual_run([1.0, 3.0], [0.25, 0.75]))
        e = rep.citywide["delta_time_hours"]
        assert e["mean"] == pytest.approx(2.5)
        assert e["std"] == pytest.approx(math.sqrt(0.75))
        np.testing.assert_allclose(rep.shift_matrix, np.eye(6) * 1.75)

    def test_scale(self):
        rep = im.aggregate_posterior(manual_run([1.0, 3.0], [0.25, 0.75]), scale=10)
        assert rep.citywide["delta_time_hours"]["mean"] == pytest.approx(25.0)
        assert rep.citywide["delta_time_pct"]["mean"] == pytest.approx(25.0)
        assert rep.demand_total == 1000.0
        with pytest.raises(InvalidInputError):
            im.aggregate_posterior(manual_run([1.0], [1.0]), scale=0)

    def test_nan_pct_is_null_and_json_safe(self, tmp_path):
        run = manual_run([1.0], [1.0])
        run.components["citywide"][..., im.COMPONENTS.index("delta_miles")] = 3.0
        rep = im.aggregate_posterior(run, {"Z0": Zone("Z0", "Queens")})
        assert rep.citywide["delta_miles_pct"]["mean"] is None
        assert rep.per_zone[0]["borough"] == "Queens"
        back = im.ImpactReport.from_dict(json.loads(rep.to_json()))
        assert back.citywide == rep.citywide
        paths = rep.write_tables(tmp_path)
        assert [p.name for p in paths] == ["citywide.csv", "per_zone.csv", "per_wage.csv",
                                           "shift_matrix.csv"]
        rows = (tmp_path / "citywide.csv").read_text().splitlines()
        assert rows[0] == "scope,metric,mean,std,ci95_low,ci95_high"
        assert len(rows) == 1 + len(im.METRICS)

    def test_config_digest_stable(self):
        assert im.config_digest({"a": 1, "b": [2]}) == im.config_digest({"b": [2], "a": 1})
        assert im.config_digest({"a": 1}) != im.config_digest({"a": 2})


class TestDataUncertainty:
    def test_zero_stds_give_zero_spread(self, small_bundle):
        b, _ = small_bundle
        cells = b.cells4()
        for f in ("time_std", "cost_std"):
            getattr(cells, f)[:] = 0.0
        out = im.data_uncertainty(cells, REFERENCE_PARAMS, 5, seed=2, n_reps=200)
        assert np.all(out["std"] == 0.0)
        assert out["mean"].sum() == pytest.approx(cells.trips.sum(), rel=1e-12)

    def test_binomial_propagation(self):
        # no preference noise: the cell flips between two modes with the fare draw
        table = {("A", "B", m): ModeAttributes.unavailable() for m in Mode}
        table[("A", "B", Mode.TAXI)] = ModeAttributes(0.1, 0.0, 10.0, 2.0, 1.0)
        table[("A", "B", TR)] = ModeAttributes(0.1, 0.0, 11.0, 0.0, 0.0)
        cells = one_cell(table, wage=20.0, trips={"taxi": 60, "transit": 40})
        out = im.data_uncertainty(cells, SimParams(1.0, 0.0), 2000, seed=4, n_reps=1)
        p = norm.cdf(0.5)
        assert out["mean"][Mode.TAXI] == pytest.approx(100 * p, rel=0.05)
        assert out["std"][Mode.TAXI] == pytest.approx(100 * math.sqrt(p * (1 - p)), rel=0.2)
        assert out["std"][Mode.WALK] == 0.0

    def test_small_attribute_noise_small_spread(self, small_bundle):
        b, _ = small_bundle
        cells = b.cells4().restrict([Mode.TAXI, TR, Mode.WALK, Mode.DRIVE])
        for f in ("time_std", "cost_std"):
            getattr(cells, f)[:] *= 0.1
        out = im.data_uncertainty(cells, REFERENCE_PARAMS, 20, seed=3, n_reps=200)
        big = out["mean"] > 100
        assert big.sum() >= 3
        assert np.all(out["std"][big] < 0.05 * out["mean"][big])
