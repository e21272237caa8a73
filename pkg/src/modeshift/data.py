"""Dataset bundles: CSV loading/saving, synthetic fixtures, route-cache ingestion.

A bundle is a directory of six CSV files (UTF-8, header row, ``inf`` for
unavailable modes) plus an optional ``manifest.json``::

    zones.csv       zone_id,borough,name
    wages.csv       wage_group,hourly_wage_usd
    wage_dist.csv   zone_id,wage_group,share
    demand4.csv     origin,destination,wage_group,trips_taxi,trips_transit,trips_walk,trips_drive
    demand_tlc.csv  origin,destination,trips_taxi,trips_fhv,trips_sfhv
    attrs.csv       origin,destination,mode,time_mean_hr,time_std_hr,cost_mean_usd,cost_std_usd,distance_miles

Inputs are assumed to be pre-filtered to the hours of interest.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (FOUR_MODES, MODES, N_MODES, TLC_MODES, DemandCell, Mode, ModeAttributes,
                   WageGroup, Zone, build_cell_arrays, hourly_wage_from_bracket)
from .errors import (DanglingKeyError, InvalidInputError, MissingFileError, NegativeValueError,
                     SchemaError)
from .simulator import SimParams, draw_epsilon, rng_stream

log = logging.getLogger(__name__)

FILES = {
    "zones": ("zones.csv", ("zone_id", "borough", "name")),
    "wages": ("wages.csv", ("wage_group", "hourly_wage_usd")),
    "wage_dist": ("wage_dist.csv", ("zone_id", "wage_group", "share")),
    "demand4": ("demand4.csv", ("origin", "destination", "wage_group")
                + tuple(f"trips_{m.label}" for m in FOUR_MODES)),
    "demand_tlc": ("demand_tlc.csv", ("origin", "destination")
                   + tuple(f"trips_{m.label}" for m in TLC_MODES)),
    "attrs": ("attrs.csv", ("origin", "destination", "mode", "time_mean_hr", "time_std_hr",
                            "cost_mean_usd", "cost_std_usd", "distance_miles")),
}
MANIFEST = "manifest.json"
SHARE_TOL = 1e-9


@dataclass
class DatasetBundle:
    zones: dict            # zone_id -> Zone
    wages: dict            # group_id -> WageGroup
    wage_dist: dict        # zone_id -> {group_id: share}
    demand4: list          # DemandCell with wage groups, four modes
    demand_tlc: list       # DemandCell without wage group, taxi-nest modes
    attrs: dict            # (origin, destination, Mode) -> ModeAttributes
    manifest: dict = field(default_factory=dict)

    @property
    def wage_map(self) -> dict:
        return {g: w.hourly_wage for g, w in self.wages.items()}

    def cells4(self):
        return build_cell_arrays(self.demand4, self.attrs, self.wage_map)

    def nest_demand(self):
        """Taxi-nest cells with their expansion across the origin's wage groups."""
        from .inference import nest_demand
        return nest_demand(self.demand_tlc, self.wage_dist, self.attrs, self.wage_map)

    def validate(self) -> None:
        for zid, shares in self.wage_dist.items():
            if zid not in self.zones:
                raise DanglingKeyError(f"wage_dist.csv: unknown zone {zid!r}")
            for g in shares:
                if g not in self.wages:
                    raise DanglingKeyError(f"wage_dist.csv: unknown wage group {g!r} for zone {zid!r}")
            tot = math.fsum(shares.values())
            if abs(tot - 1.0) > SHARE_TOL:
                raise SchemaError(f"wage_dist.csv: shares for zone {zid!r} sum to {tot!r}")
        for (o, d, _m) in self.attrs:
            for z in (o, d):
                if z not in self.zones:
                    raise DanglingKeyError(f"attrs.csv: unknown zone {z!r} in row {o},{d}")
        for name, cells in (("demand4.csv", self.demand4), ("demand_tlc.csv", self.demand_tlc)):
            for c in cells:
                row = f"{c.origin},{c.destination}" + (f",{c.wage_group}" if c.wage_group else "")
                for z in (c.origin, c.destination):
                    if z not in self.zones:
                        raise DanglingKeyError(f"{name}: row {row} references unknown zone {z!r}")
                if c.wage_group is not None and c.wage_group not in self.wages:
                    raise DanglingKeyError(f"{name}: row {row} references unknown wage group "
                                           f"{c.wage_group!r}")
                missing = [m.label for m in MODES if (c.origin, c.destination, m) not in self.attrs]
                if missing:
                    raise DanglingKeyError(f"{name}: row {row} has no attrs.csv rows for "
                                           f"{', '.join(missing)}")
        for c in self.demand_tlc:
            if c.origin not in self.wage_dist:
                raise DanglingKeyError(f"demand_tlc.csv: origin {c.origin!r} has no wage distribution")


# --- number formatting --------------------------------------------------------

def fmt(x: float) -> str:
    """Canonical text for a number: ``inf``, integers without a fraction, else repr."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _num(text: str, where: str, allow_inf: bool = False) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: not a number: {text!r}") from None
    if math.isnan(v) or (math.isinf(v) and not allow_inf):
        raise SchemaError(f"{where}: value must be finite, got {text!r}")
    if v < 0:
        raise NegativeValueError(f"{where}: negative value {text!r}")
    return v


def _read(directory: Path, key: str):
    name, cols = FILES[key]
    path = directory / name
    if not path.is_file():
        raise MissingFileError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(h.strip() for h in header) != cols:
            raise SchemaError(f"{name}: expected header {','.join(cols)}, got "
                              f"{','.join(header or [])}")
        for line, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != len(cols):
                raise SchemaError(f"{name}:{line}: expected {len(cols)} fields, got {len(row)}")
            yield f"{name}:{line}", dict(zip(cols, (v.strip() for v in row)))


def load_bundle(directory) -> DatasetBundle:
    """Parse and validate a bundle directory; raises a :class:`DataError` subclass."""
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"not a directory: {d}")
    zones = {}
    for where, r in _read(d, "zones"):
        if r["zone_id"] in zones:
            raise SchemaError(f"{where}: duplicate zone_id {r['zone_id']!r}")
        if not r["borough"]:
            raise SchemaError(f"{where}: empty borough")
        zones[r["zone_id"]] = Zone(r["zone_id"], r["borough"], r["name"])
    wages = {}
    for where, r in _read(d, "wages"):
        w = _num(r["hourly_wage_usd"], where)
        if w == 0:
            raise SchemaError(f"{where}: hourly wage must be positive")
        wages[r["wage_group"]] = WageGroup(r["wage_group"], w)
    wage_dist: dict = {}
    for where, r in _read(d, "wage_dist"):
        wage_dist.setdefault(r["zone_id"], {})[r["wage_group"]] = _num(r["share"], where)
    attrs = {}
    for where, r in _read(d, "attrs"):
        try:
            mode = Mode.parse(r["mode"])
        except InvalidInputError:
            raise SchemaError(f"{where}: unknown mode {r['mode']!r}") from None
        vals = [_num(r[c], f"{where} ({c})", allow_inf=True) for c in FILES["attrs"][1][3:]]
        try:
            a = ModeAttributes(*vals)
        except InvalidInputError as exc:
            raise SchemaError(f"{where}: {exc}") from None
        key = (r["origin"], r["destination"], mode)
        if key in attrs:
            raise SchemaError(f"{where}: duplicate attribute row")
        attrs[key] = a
    demand4 = []
    for where, r in _read(d, "demand4"):
        trips = {m: _num(r[f"trips_{m.label}"], where) for m in FOUR_MODES}
        demand4.append(DemandCell.from_mapping(r["origin"], r["destination"], r["wage_group"], trips))
    demand_tlc = []
    for where, r in _read(d, "demand_tlc"):
        trips = {m: _num(r[f"trips_{m.label}"], where) for m in TLC_MODES}
        demand_tlc.append(DemandCell.from_mapping(r["origin"], r["destination"], None, trips))
    manifest = {}
    if (d / MANIFEST).is_file():
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    bundle = DatasetBundle(zones, wages, wage_dist, demand4, demand_tlc, attrs, manifest)
    bundle.validate()
    return bundle


def _write(directory: Path, key: str, rows) -> None:
    name, cols = FILES[key]
    with open(directory / name, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        wr.writerows(rows)


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write(d, "zones", ([z.zone_id, z.borough, z.name] for z in bundle.zones.values()))
    _write(d, "wages", ([g.group_id, fmt(g.hourly_wage)] for g in bundle.wages.values()))
    _write(d, "wage_dist", ([z, g, fmt(s)] for z, sh in bundle.wage_dist.items()
                            for g, s in sh.items()))
    _write(d, "demand4", ([c.origin, c.destination, c.wage_group]
                          + [fmt(c.trips[m]) for m in FOUR_MODES] for c in bundle.demand4))
    _write(d, "demand_tlc", ([c.origin, c.destination] + [fmt(c.trips[m]) for m in TLC_MODES]
                             for c in bundle.demand_tlc))
    _write(d, "attrs", ([o, dd, m.label, fmt(a.time_mean), fmt(a.time_std), fmt(a.cost_mean),
                         fmt(a.cost_std), fmt(a.distance)]
                        for (o, dd, m), a in bundle.attrs.items()))
    if bundle.manifest:
        (d / MANIFEST).write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return d


# --- synthetic fixture ----------------------------------------------------------

SURCHARGE_BOROUGH = "Manhattan"
OTHER_BOROUGHS = ("Brooklyn", "Queens", "Bronx")
WAGE_BRACKETS = ((0, 30_000), (30_000, 60_000), (60_000, 100_000), (100_000, 200_000),
                 (200_000, 300_000), (300_000, 500_000))


@dataclass(frozen=True)
class FixtureConfig:
    """Knobs of the synthetic city; defaults give ~500 O-D-wage cells."""

    n_zones: int = 12
    n_wage_groups: int = 4
    extent_miles: float = 8.0
    trips_scale: float = 900.0      # four-mode trips from a zone pair at zero distance
    tlc_fraction: float = 0.4       # taxi-nest trips relative to four-mode trips
    walk_max_miles: float = 3.5
    noise: float = 0.15             # per-pair multiplicative spread of times and fares
    nest_fare_noise: float = 0.15   # fare spread for taxi/fhv/sfhv
    digits: int = 4


def _mode_surfaces(dist: float, dest_core: bool, origin_core: bool) -> dict:
    """Mean time (h) and fare ($) per mode for one O-D pair at ``dist`` miles."""
    slow = 0.7 if (dest_core or origin_core) else 1.0   # congested core
    t_car = dist / (16.0 * slow) + 0.05
    return {
        Mode.TAXI: (t_car + 0.08, 3.0 + 2.5 * dist),
        Mode.TRANSIT: (dist / 10.0 + 0.2 + (0.0 if dest_core else 0.1), 2.75),
        Mode.WALK: (dist / 3.0, 0.0),
        Mode.DRIVE: (t_car + (0.15 if dest_core else 0.05),
                     0.6 * dist + (15.0 if dest_core else 3.0)),
        Mode.FHV: (t_car + 0.12, 2.5 + 2.2 * dist),
        Mode.SFHV: (1.3 * t_car + 0.2, 0.6 * (2.5 + 2.2 * dist)),
    }


def gen_fixture(out, n_zones: int = 12, n_wage_groups: int = 4,
                true_params: SimParams = SimParams(0.71, 0.38, 0.31, 0.58), seed: int = 0,
                config: FixtureConfig | None = None) -> DatasetBundle:
    """Synthesize a city and sample its ridership from the choice model.

    Four-mode demand is sampled with fhv/sfhv unavailable. Taxi-nest demand
    splits each pair's nest trips over the origin's wage groups and samples
    the within-nest choice with all six modes offered; only the taxi, fhv
    and sfhv counts summed over wages are kept. Byte-identical for a seed.
    """
    if n_zones < 2:
        raise InvalidInputError("n_zones must be >= 2")
    if not 1 <= n_wage_groups <= len(WAGE_BRACKETS):
        raise InvalidInputError(f"n_wage_groups must be in 1..{len(WAGE_BRACKETS)}")
    cfg = config or FixtureConfig(n_zones=n_zones, n_wage_groups=n_wage_groups)
    rnd = lambda x: round(float(x), cfg.digits)  # noqa: E731
    geo = rng_stream(seed, 1)

    n_core = max(1, n_zones // 3)
    zones, xy, mass = {}, {}, {}
    for i in range(n_zones):
        zid = f"Z{i + 1:02d}"
        core = i < n_core
        borough = SURCHARGE_BOROUGH if core else OTHER_BOROUGHS[(i - n_core) % len(OTHER_BOROUGHS)]
        zones[zid] = Zone(zid, borough, f"{borough} {i + 1}")
        if core:
            xy[zid] = (geo.uniform(0.0, 1.5), geo.uniform(0.25, 0.75) * cfg.extent_miles)
        else:
            xy[zid] = (geo.uniform(1.5, cfg.extent_miles), geo.uniform(0.0, cfg.extent_miles))
        mass[zid] = geo.lognormal(0.0, 0.4) * (1.5 if core else 1.0)

    wages = {}
    for k in range(n_wage_groups):
        gid = f"W{k + 1}"
        wages[gid] = WageGroup(gid, rnd(hourly_wage_from_bracket(*WAGE_BRACKETS[k])))
    wage_dist = {}
    for zid in zones:
        sh = geo.dirichlet(np.full(n_wage_groups, 3.0))
        sh = np.round(sh, 6)
        sh[-1] = round(1.0 - float(np.sum(sh[:-1])), 6)
        wage_dist[zid] = {g: float(s) for g, s in zip(wages, sh)}

    attrs = {}
    for o in zones:
        for d in zones:
            if o == d:
                dist = geo.uniform(0.5, 1.2)
            else:
                dx, dy = xy[o][0] - xy[d][0], xy[o][1] - xy[d][1]
                dist = 1.25 * math.hypot(dx, dy) + 0.3
            core_o = zones[o].borough == SURCHARGE_BOROUGH
            core_d = zones[d].borough == SURCHARGE_BOROUGH
            surf = _mode_surfaces(dist, core_d, core_o)
            for m in MODES:
                t, c = surf[m]
                if m == Mode.WALK and dist > cfg.walk_max_miles:
                    attrs[(o, d, m)] = ModeAttributes.unavailable()
                    continue
                t *= math.exp(geo.normal(0.0, cfg.noise))
                if c > 0 and m != Mode.TRANSIT:
                    spread = cfg.nest_fare_noise if m in TLC_MODES else cfg.noise
                    c *= math.exp(geo.normal(0.0, spread))
                ts = t * geo.uniform(0.05, 0.15)
                cs = 0.0 if m in (Mode.TRANSIT, Mode.WALK) else c * geo.uniform(0.02, 0.1)
                dmiles = 0.0 if m in (Mode.TRANSIT, Mode.WALK) else dist
                attrs[(o, d, m)] = ModeAttributes(rnd(t), rnd(ts), rnd(c), rnd(cs), rnd(dmiles))

    wage_of = {g: w.hourly_wage for g, w in wages.items()}
    demand4, demand_tlc = [], []
    p = true_params
    for i, o in enumerate(zones):
        for j, d in enumerate(zones):
            dist = attrs[(o, d, Mode.TAXI)].distance
            lam = cfg.trips_scale * mass[o] * mass[d] * math.exp(-dist / 4.0) / n_zones * 12
            dem = rng_stream(seed, 2, i, j)
            n_od = int(dem.poisson(lam))
            n_nest = int(dem.poisson(lam * cfg.tlc_fraction))
            shares = np.array([wage_dist[o][g] for g in wages])
            split4 = dem.multinomial(n_od, shares / shares.sum())
            split_nest = dem.multinomial(n_nest, shares / shares.sum())
            nest_counts = np.zeros(N_MODES)
            for k, g in enumerate(wages):
                gen = np.array([p.beta * wage_of[g] * attrs[(o, d, m)].time_mean
                                + attrs[(o, d, m)].cost_mean for m in MODES])
                with np.errstate(divide="ignore", invalid="ignore"):
                    lg = np.log(gen)
                counts = np.zeros(N_MODES)
                if split4[k]:
                    lg4 = lg.copy()
                    lg4[[Mode.FHV, Mode.SFHV]] = np.inf
                    eps = draw_epsilon(p, dem, int(split4[k]))
                    counts = np.bincount(np.argmin(lg4 + eps, axis=1), minlength=N_MODES)
                demand4.append(DemandCell.from_mapping(
                    o, d, g, {m: float(counts[m]) for m in FOUR_MODES}))
                need = int(split_nest[k])
                while need > 0:
                    eps = draw_epsilon(p, dem, max(64, 4 * need))
                    ch = np.argmin(lg + eps, axis=1)
                    ch = ch[np.isin(ch, list(TLC_MODES))][:need]
                    nest_counts += np.bincount(ch, minlength=N_MODES)
                    need -= len(ch)
            demand_tlc.append(DemandCell.from_mapping(
                o, d, None, {m: float(nest_counts[m]) for m in TLC_MODES}))

    manifest = {
        "generator": "modeshift.data.gen_fixture",
        "seed": int(seed),
        "n_zones": n_zones,
        "n_wage_groups": n_wage_groups,
        "surcharge_borough": SURCHARGE_BOROUGH,
        "true_params": {"beta": p.beta, "sigma": p.sigma, "cor_tfs": p.cor_tfs, "cor_fs": p.cor_fs},
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
    }
    bundle = DatasetBundle(zones, wages, wage_dist, demand4, demand_tlc, attrs, manifest)
    bundle.validate()
    if out is not None:
        save_bundle(bundle, out)
    return bundle


# --- route cache -----------------------------------------------------------------

@dataclass
class CacheIngest:
    attrs: dict
    n_files: int = 0
    n_skipped: int = 0
    skipped: list = field(default_factory=list)


def _stats(xs: list) -> tuple[float, float]:
    mean = math.fsum(xs) / len(xs)
    std = statistics.stdev(xs) if len(xs) > 1 else 0.0
    return mean, std


def ingest_route_cache(directory) -> CacheIngest:
    """Average cached route queries into attribute rows.

    Each ``*.json`` document holds ``origin``, ``destination``, ``mode`` and
    ``observations``: a list of ``{duration_seconds, cost, distance_miles}``.
    Documents for the same key (repeated retrievals) are pooled. Time is
    converted to hours; stds use the sample formula (0 for one observation).
    """
    d = Path(directory)
    if not d.is_dir():
        raise MissingFileError(f"not a directory: {d}")
    pooled: dict = {}
    out = CacheIngest({})
    for path in sorted(d.glob("*.json")):
        out.n_files += 1
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            key = (str(doc["origin"]), str(doc["destination"]), Mode.parse(doc["mode"]))
            obs = [(float(o["duration_seconds"]), float(o["cost"]), float(o["distance_miles"]))
                   for o in doc["observations"]]
            if any(not all(math.isfinite(v) and v >= 0 for v in ob) for ob in obs):
                raise ValueError("observations must be finite and >= 0")
        except (ValueError, KeyError, TypeError, InvalidInputError) as exc:
            log.warning("skipping malformed route cache document %s: %s", path.name, exc)
            out.n_skipped += 1
            out.skipped.append(path.name)
            continue
        pooled.setdefault(key, []).extend(obs)
    for key in sorted(pooled, key=lambda k: (k[0], k[1], int(k[2]))):
        obs = pooled[key]
        if not obs:
            continue
        tm, ts = _stats([o[0] / 3600.0 for o in obs])
        cm, cs = _stats([o[1] for o in obs])
        dm, _ = _stats([o[2] for o in obs])
        out.attrs[key] = ModeAttributes(tm, ts, cm, cs, dm)
    if out.n_files == 0:
        log.warning("route cache %s is empty", d)
    if out.n_skipped:
        log.warning("skipped %d of %d route cache documents", out.n_skipped, out.n_files)
    return out
