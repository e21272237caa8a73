import json
import logging
import math
import shutil

import pytest

from modeshift.core import FOUR_MODES, Mode
from modeshift.data import fmt, gen_fixture, ingest_route_cache, load_bundle, save_bundle
from modeshift.errors import (DanglingKeyError, DataError, InvalidInputError, MissingFileError,
                              NegativeValueError, SchemaError)
from modeshift.simulator import SimParams, choice_frequencies
from modeshift import SHIPPED_FIXTURE


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture
def bundle_copy(small_bundle, tmp_path):
    _, src = small_bundle
    dst = tmp_path / "b"
    shutil.copytree(src, dst)
    return dst


def edit(path, old, new):
    text = path.read_text()
    assert old in text
    path.write_text(text.replace(old, new, 1))


class TestLoad:
    def test_shipped_fixture(self, caplog):
        with caplog.at_level(logging.WARNING):
            b = load_bundle(SHIPPED_FIXTURE)
        assert not caplog.records
        assert len(b.zones) == 12 and len(b.wages) == 4
        assert len(b.demand4) == 576
        assert b.manifest["true_params"] == {"beta": 0.71, "sigma": 0.38, "cor_tfs": 0.31,
                                             "cor_fs": 0.58}

    def test_round_trip_bytes(self, small_bundle, tmp_path):
        _, src = small_bundle
        save_bundle(load_bundle(src), tmp_path / "again")
        assert files(tmp_path / "again") == files(src)

    def test_inf_round_trip(self, bundle_copy, tmp_path):
        b = load_bundle(bundle_copy)
        unavailable = [k for k, a in b.attrs.items() if not a.available]
        assert unavailable and all(k[2] == Mode.WALK for k in unavailable)
        assert "inf" in (bundle_copy / "attrs.csv").read_text()
        back = load_bundle(save_bundle(b, tmp_path / "rt"))
        assert not back.attrs[unavailable[0]].available
        assert math.isinf(back.attrs[unavailable[0]].time_mean)

    def test_missing_file(self, bundle_copy):
        (bundle_copy / "wages.csv").unlink()
        with pytest.raises(MissingFileError, match="wages.csv"):
            load_bundle(bundle_copy)

    def test_bad_header(self, bundle_copy):
        edit(bundle_copy / "zones.csv", "zone_id,borough,name", "zone,borough,name")
        with pytest.raises(SchemaError, match="zones.csv"):
            load_bundle(bundle_copy)

    def test_dangling_zone_names_row(self, bundle_copy):
        p = bundle_copy / "demand4.csv"
        lines = p.read_text().splitlines()
        first = lines[1].split(",")
        lines.append(",".join(["Z99", first[1], first[2], "1", "0", "0", "0"]))
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(DanglingKeyError, match=f"row Z99,{first[1]},{first[2]}"):
            load_bundle(bundle_copy)

    def test_negative_value(self, bundle_copy):
        p = bundle_copy / "demand_tlc.csv"
        lines = p.read_text().splitlines()
        parts = lines[1].split(",")
        parts[2] = "-3"
        lines[1] = ",".join(parts)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(NegativeValueError, match="demand_tlc.csv:2"):
            load_bundle(bundle_copy)

    def test_shares_must_sum_to_one(self, bundle_copy):
        p = bundle_copy / "wage_dist.csv"
        lines = p.read_text().splitlines()
        parts = lines[1].split(",")
        parts[2] = repr(float(parts[2]) + 0.01)
        lines[1] = ",".join(parts)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError, match="sum to"):
            load_bundle(bundle_copy)

    def test_error_classes_distinct(self):
        kinds = {MissingFileError, SchemaError, DanglingKeyError, NegativeValueError}
        assert len(kinds) == 4 and all(issubclass(k, DataError) for k in kinds)

    @pytest.mark.parametrize("x,s", [(3.0, "3"), (0.25, "0.25"), (math.inf, "inf"), (1e20, "1e+20")])
    def test_fmt(self, x, s):
        assert fmt(x) == s


class TestFixture:
    def test_seed_is_byte_identical(self, small_bundle, tmp_path):
        _, src = small_bundle
        gen_fixture(tmp_path / "again", n_zones=4, n_wage_groups=2, seed=3)
        assert files(tmp_path / "again") == files(src)

    def test_other_seed_differs(self, small_bundle, tmp_path):
        _, src = small_bundle
        gen_fixture(tmp_path / "other", n_zones=4, n_wage_groups=2, seed=4)
        assert files(tmp_path / "other") != files(src)

    def test_shape(self, small_bundle):
        b, _ = small_bundle
        assert len(b.demand4) == 4 * 4 * 2 and len(b.demand_tlc) == 16
        assert {z.borough for z in b.zones.values()} >= {"Manhattan"}
        assert all(len([k for k in b.attrs if k[:2] == (o, d)]) == 6
                   for o in b.zones for d in b.zones)
        for c in b.demand4:
            assert c.trips[Mode.FHV] == c.trips[Mode.SFHV] == 0

    def test_rejects_bad_sizes(self, tmp_path):
        with pytest.raises(InvalidInputError):
            gen_fixture(tmp_path, n_zones=1)
        with pytest.raises(InvalidInputError):
            gen_fixture(tmp_path, n_wage_groups=0)

    def test_frequencies_match_generating_probabilities(self, small_bundle):
        b, _ = small_bundle
        p = SimParams(0.71, 0.38, 0.31, 0.58)
        cells = b.cells4().restrict(FOUR_MODES)
        probs = choice_frequencies(cells.gen_costs(p.beta), p, 200_000, seed=11)
        n = cells.trips.sum(axis=1)
        expect = (n[:, None] * probs).sum(axis=0)
        var = (n[:, None] * probs * (1 - probs)).sum(axis=0)
        obs = cells.trips.sum(axis=0)
        for m in FOUR_MODES:
            assert abs(obs[m] - expect[m]) <= 4 * math.sqrt(var[m]) + 1, m.label

    def test_other_params_are_distinguishable(self, small_bundle):
        # the same check at a far-off beta fails, so the test above has power
        b, _ = small_bundle
        p = SimParams(0.2, 0.38)
        cells = b.cells4().restrict(FOUR_MODES)
        probs = choice_frequencies(cells.gen_costs(p.beta), p, 50_000, seed=11)
        n = cells.trips.sum(axis=1)
        expect = (n[:, None] * probs).sum(axis=0)
        var = (n[:, None] * probs * (1 - probs)).sum(axis=0)
        obs = cells.trips.sum(axis=0)
        assert any(abs(obs[m] - expect[m]) > 4 * math.sqrt(var[m]) + 1 for m in FOUR_MODES)


def write_doc(d, name, mode, obs, o="A", dest="B"):
    (d / name).write_text(json.dumps({"origin": o, "destination": dest, "mode": mode,
                                      "observations": obs}))


class TestRouteCache:
    def test_three_observations(self, tmp_path):
        obs = [{"duration_seconds": s, "cost": c, "distance_miles": 2.0}
               for s, c in ((600, 10.0), (660, 12.0), (720, 14.0))]
        write_doc(tmp_path, "a.json", "taxi", obs)
        a = ingest_route_cache(tmp_path).attrs[("A", "B", Mode.TAXI)]
        assert a.time_mean == pytest.approx(0.18333333, abs=1e-8)
        assert a.time_std == pytest.approx(60 / 3600, abs=1e-12)
        assert a.cost_mean == 12.0 and a.cost_std == 2.0
        assert a.distance == 2.0

    def test_repeated_retrievals_pooled(self, tmp_path):
        write_doc(tmp_path, "a1.json", "fhv", [{"duration_seconds": 600, "cost": 8, "distance_miles": 2}])
        write_doc(tmp_path, "a2.json", "fhv", [{"duration_seconds": 720, "cost": 10, "distance_miles": 2}])
        a = ingest_route_cache(tmp_path).attrs[("A", "B", Mode.FHV)]
        assert a.time_mean == pytest.approx(0.18333333, abs=1e-8)
        assert a.cost_mean == 9.0

    def test_single_observation(self, tmp_path):
        write_doc(tmp_path, "a.json", "walk", [{"duration_seconds": 1800, "cost": 0,
                                                "distance_miles": 1.5}])
        a = ingest_route_cache(tmp_path).attrs[("A", "B", Mode.WALK)]
        assert a.time_mean == 0.5 and a.time_std == 0.0 and a.cost_std == 0.0

    def test_empty_cache(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            out = ingest_route_cache(tmp_path)
        assert out.attrs == {} and out.n_files == 0
        assert "empty" in caplog.text

    def test_malformed_skipped(self, tmp_path, caplog):
        write_doc(tmp_path, "good.json", "taxi", [{"duration_seconds": 600, "cost": 5,
                                                   "distance_miles": 1}])
        (tmp_path / "broken.json").write_text("{not json")
        write_doc(tmp_path, "badmode.json", "bike", [])
        write_doc(tmp_path, "neg.json", "taxi", [{"duration_seconds": -1, "cost": 5,
                                                  "distance_miles": 1}], o="C")
        write_doc(tmp_path, "none.json", "drive", [], o="D")
        with caplog.at_level(logging.WARNING):
            out = ingest_route_cache(tmp_path)
        assert out.n_files == 5 and out.n_skipped == 3
        assert sorted(out.skipped) == ["badmode.json", "broken.json", "neg.json"]
        assert list(out.attrs) == [("A", "B", Mode.TAXI)]
        assert "skipped 3 of 5" in caplog.text

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingFileError):
            ingest_route_cache(tmp_path / "nope")
