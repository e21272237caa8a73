"""Counterfactual scenario simulation and impact accounting.

Every traveller in a demand cell is simulated twice, under a baseline
scenario ``A`` and an intervention ``B``, with the same preference noise
(common random numbers). The resulting shift matrix ``M[a, b]`` counts trips
choosing mode ``a`` under ``A`` and ``b`` under ``B``; impacts are linear in
``M``, so identical scenarios give exactly zero impacts.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import MODES, N_MODES, CellArrays, DemandCell, Mode, Scenario, apply_scenario, build_cell_arrays
from .errors import InternalConsistencyError, InvalidInputError, UndefinedSharesError
from .inference import ParameterSample, weighted_stats
from .simulator import SimParams, choice_frequencies, rng_stream, simulate_cells

# additive per-cell components; derived metrics are computed from these sums
COMPONENTS = ("trips", "baseline_time_hours", "delta_time_hours", "baseline_miles", "delta_miles",
              "time_cost_value", "transit_revenue_delta", "taxi_revenue_delta", "fhv_revenue_delta")
METRICS = ("delta_time_hours", "delta_time_pct", "delta_miles", "delta_miles_pct", "fuel_gallons",
           "co2_kg", "time_cost_value", "transit_revenue_delta", "taxi_revenue_delta",
           "fhv_revenue_delta")
# metrics that scale with the citywide multiplier
ABSOLUTE = tuple(m for m in METRICS if not m.endswith("_pct"))


@dataclass(frozen=True)
class ImpactConstants:
    miles_per_gallon: float = 20.0
    co2_kg_per_gallon: float = 8.0
    transit_fare: float = 2.75
    sfhv_occupancy: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidInputError(f"{f.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ShiftMatrix:
    """Trips by (mode under A, mode under B)."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, float)
        if c.shape != (N_MODES, N_MODES):
            raise InvalidInputError(f"shift matrix must be {N_MODES}x{N_MODES}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidInputError("shift matrix entries must be finite and >= 0")
        object.__setattr__(self, "counts", c)

    @property
    def trips(self) -> float:
        return math.fsum(self.counts.ravel())


def shift_shares(matrix, from_mode) -> dict:
    """Where trips that used ``from_mode`` under A go under B, as shares.

    When ``from_mode`` is removed under B the shares cover the other modes;
    otherwise the retained share sits on ``from_mode`` itself.
    """
    m = Mode.parse(from_mode)
    counts = matrix.counts if isinstance(matrix, ShiftMatrix) else np.asarray(matrix, float)
    row = counts[m]
    tot = math.fsum(row)
    if not tot > 0:
        raise UndefinedSharesError(f"no trips used {m.label} under the baseline")
    return {k: float(row[k] / tot) for k in MODES}


# --- impact translation -------------------------------------------------------------

def vehicle_miles(cells: CellArrays, constants: ImpactConstants) -> np.ndarray:
    """Per-trip vehicle miles by mode: shared rides split by occupancy; walk/transit 0."""
    vm = np.where(np.isfinite(cells.distance), cells.distance, np.inf)
    vm = vm.copy()
    vm[:, Mode.SFHV] = vm[:, Mode.SFHV] / constants.sfhv_occupancy
    vm[:, [Mode.WALK, Mode.TRANSIT]] = np.where(np.isfinite(vm[:, [Mode.WALK, Mode.TRANSIT]]),
                                                0.0, np.inf)
    return vm


def _per_trip(m: np.ndarray, value: np.ndarray, name: str) -> np.ndarray:
    """``value[i, mode]`` masked to zero where no trips were assigned."""
    used = m > 0
    bad = used & ~np.isfinite(value)
    if np.any(bad):
        i, k = np.argwhere(bad)[0]
        raise InternalConsistencyError(
            f"{name} is infinite for chosen mode {Mode(int(k)).label} in cell {int(i)}")
    return np.where(used, value, 0.0)


def translate_impacts(shift: np.ndarray, cells_a: CellArrays, cells_b: CellArrays,
                      constants: ImpactConstants = ImpactConstants()) -> np.ndarray:
    """Additive impact components per cell, shape ``(n_cells, len(COMPONENTS))``.

    ``shift[i, a, b]`` are trips of cell ``i`` using mode ``a`` under A and
    ``b`` under B. Times, distances and fares are read from each scenario's
    own attributes (so surcharges enter the fares under B).
    """
    shift = np.asarray(shift, float)
    if shift.ndim == 2:
        shift = shift[None]
    n = shift.shape[0]
    if len(cells_a) != n or len(cells_b) != n:
        raise InvalidInputError("shift matrices and cell attributes are not aligned")
    from_a = shift.sum(axis=2)   # trips per mode under A
    to_b = shift.sum(axis=1)     # trips per mode under B
    ta = _per_trip(from_a, cells_a.time, "time")
    tb = _per_trip(to_b, cells_b.time, "time")
    va = _per_trip(from_a, vehicle_miles(cells_a, constants), "distance")
    vb = _per_trip(to_b, vehicle_miles(cells_b, constants), "distance")
    fa = _per_trip(from_a, cells_a.cost, "fare")
    fb = _per_trip(to_b, cells_b.cost, "fare")
    wage = cells_a.wage
    out = np.zeros((n, len(COMPONENTS)))
    c = {name: k for k, name in enumerate(COMPONENTS)}
    out[:, c["trips"]] = from_a.sum(axis=1)
    base_t = (from_a * ta).sum(axis=1)
    new_t = (to_b * tb).sum(axis=1)
    out[:, c["baseline_time_hours"]] = base_t
    out[:, c["delta_time_hours"]] = new_t - base_t
    base_v = (from_a * va).sum(axis=1)
    out[:, c["baseline_miles"]] = base_v
    out[:, c["delta_miles"]] = (to_b * vb).sum(axis=1) - base_v
    out[:, c["time_cost_value"]] = wage * (new_t - base_t)
    tr = Mode.TRANSIT
    out[:, c["transit_revenue_delta"]] = (to_b[:, tr] - from_a[:, tr]) * constants.transit_fare
    out[:, c["taxi_revenue_delta"]] = (to_b[:, Mode.TAXI] * fb[:, Mode.TAXI]
                                       - from_a[:, Mode.TAXI] * fa[:, Mode.TAXI])
    hv = [Mode.FHV, Mode.SFHV]
    out[:, c["fhv_revenue_delta"]] = ((to_b[:, hv] * fb[:, hv]).sum(axis=1)
                                      - (from_a[:, hv] * fa[:, hv]).sum(axis=1))
    return out


def derive_metrics(components: np.ndarray, constants: ImpactConstants = ImpactConstants()
                   ) -> np.ndarray:
    """Map summed components ``(..., len(COMPONENTS))`` to ``(..., len(METRICS))``.

    Percentages are in percent units; a zero baseline gives 0 when the delta
    is also 0 and NaN otherwise.
    """
    comp = np.asarray(components, float)
    c = {name: comp[..., k] for k, name in enumerate(COMPONENTS)}

    def pct(delta, base):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(base != 0, 100.0 * delta / np.where(base != 0, base, 1.0),
                            np.where(delta == 0, 0.0, np.nan))

    fuel = c["delta_miles"] / constants.miles_per_gallon
    vals = {
        "delta_time_hours": c["delta_time_hours"],
        "delta_time_pct": pct(c["delta_time_hours"], c["baseline_time_hours"]),
        "delta_miles": c["delta_miles"],
        "delta_miles_pct": pct(c["delta_miles"], c["baseline_miles"]),
        "fuel_gallons": fuel,
        "co2_kg": fuel * constants.co2_kg_per_gallon,
        "time_cost_value": c["time_cost_value"],
        "transit_revenue_delta": c["transit_revenue_delta"],
        "taxi_revenue_delta": c["taxi_revenue_delta"],
        "fhv_revenue_delta": c["fhv_revenue_delta"],
    }
    return np.stack([np.asarray(vals[m], float) for m in METRICS], axis=-1)


def fuel_and_co2(extra_miles: float, constants: ImpactConstants = ImpactConstants()):
    gallons = extra_miles / constants.miles_per_gallon
    return gallons, gallons * constants.co2_kg_per_gallon


# --- scenario runs --------------------------------------------------------------

def scenario_cells(cells: Sequence[DemandCell], attrs, zones, wages: Mapping[str, float],
                   scenario: Scenario) -> CellArrays:
    return build_cell_arrays(cells, apply_scenario(attrs, zones, scenario), wages)


def select_samples(posterior: Sequence[ParameterSample], mass: float = 1.0
                   ) -> list[tuple[int, ParameterSample]]:
    """Highest-weight samples covering ``mass`` of the posterior, with original indices.

    Zero-weight samples are always dropped; weights are renormalized.
    """
    if not posterior:
        raise InvalidInputError("empty posterior")
    if not 0 < mass <= 1:
        raise InvalidInputError("mass must lie in (0, 1]")
    w = np.array([s.weight for s in posterior], float)
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidInputError("posterior weights must be nonnegative with positive sum")
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    keep, acc, tot = [], 0.0, math.fsum(w)
    for i in order:
        if w[i] <= 0 or (acc >= mass * tot and keep):
            break
        keep.append(i)
        acc += w[i]
    keep.sort()
    norm = math.fsum(w[i] for i in keep)
    return [(i, _reweight(posterior[i], w[i] / norm)) for i in keep]


def _reweight(s: ParameterSample, w: float) -> ParameterSample:
    from dataclasses import replace
    return replace(s, weight=float(w))


@dataclass
class ScenarioRun:
    """Per-sample outputs of a paired-scenario simulation."""

    scenario_a: Scenario
    scenario_b: Scenario
    samples: list            # ParameterSample with renormalized weights
    sample_index: list       # index of each sample in the input posterior
    shift: np.ndarray        # (n_samples, 6, 6) citywide shift matrices
    components: dict         # scope -> (n_samples, n_groups, len(COMPONENTS))
    groups: dict             # scope -> list of group keys
    demand_total: float
    constants: ImpactConstants = field(default_factory=ImpactConstants)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.samples])

    def metrics(self, scope: str) -> np.ndarray:
        """``(n_samples, n_groups, len(METRICS))``."""
        return derive_metrics(self.components[scope], self.constants)


def run_scenario(cells: Sequence[DemandCell], attrs, zones, wages: Mapping[str, float],
                 scenario_a: Scenario, scenario_b: Scenario,
                 posterior: Sequence[ParameterSample], n_reps: int, seed: int,
                 constants: ImpactConstants = ImpactConstants(),
                 mass: float = 1.0) -> ScenarioRun:
    """Simulate every demand cell under A and B for each posterior sample.

    The cells' total trips are re-distributed over all modes available under
    each scenario. Sample ``k`` of the input posterior and cell ``i`` use
    the noise stream ``(seed, i, k)`` for both scenarios.
    """
    cells = list(cells)
    if n_reps < 1:
        raise InvalidInputError("n_reps must be >= 1")
    if not isinstance(zones, Mapping):
        zones = {z.zone_id: z for z in zones}
    ca = scenario_cells(cells, attrs, zones, wages, scenario_a)
    cb = scenario_cells(cells, attrs, zones, wages, scenario_b)
    totals = np.array([c.total for c in cells], float)
    ga_cache: dict = {}
    chosen = select_samples(posterior, mass)
    zone_keys = sorted({c.origin for c in cells})
    wage_keys = sorted({c.wage_group for c in cells}, key=str)
    zidx = np.array([zone_keys.index(c.origin) for c in cells], int)
    widx = np.array([wage_keys.index(c.wage_group) for c in cells], int)
    shifts, comps = [], {"citywide": [], "per_zone": [], "per_wage": []}
    for k, s in chosen:
        p = s.params
        if p.beta not in ga_cache:
            ga_cache = {p.beta: (ca.gen_costs(p.beta), cb.gen_costs(p.beta))}
        ga, gb = ga_cache[p.beta]
        m = simulate_cells(totals, ga, gb, p, n_reps, seed, param_index=k)
        per_cell = translate_impacts(m, ca, cb, constants)
        shifts.append(m.sum(axis=0))
        comps["citywide"].append(per_cell.sum(axis=0)[None])
        comps["per_zone"].append(_group_sum(per_cell, zidx, len(zone_keys)))
        comps["per_wage"].append(_group_sum(per_cell, widx, len(wage_keys)))
    return ScenarioRun(
        scenario_a, scenario_b, [s for _, s in chosen], [k for k, _ in chosen],
        np.array(shifts), {k: np.array(v) for k, v in comps.items()},
        {"citywide": ["all"], "per_zone": zone_keys, "per_wage": wage_keys},
        math.fsum(totals), constants)


def _group_sum(x: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, idx, x)
    return out


# --- posterior aggregation --------------------------------------------------------

def _stats_entry(values, weights) -> dict:
    v = np.asarray(values, float)
    if np.any(np.isnan(v)):
        return {"mean": None, "std": None, "ci95": [None, None]}
    st = weighted_stats(v, weights)
    return {"mean": st["mean"], "std": st["std"], "ci95": [st["ci95_low"], st["ci95_high"]]}


@dataclass
class ImpactReport:
    scenario: dict
    config_digest: str
    citywide: dict
    per_zone: list
    per_wage: list
    shift_matrix: list
    modes: list = field(default_factory=lambda: [m.label for m in MODES])
    demand_total: float = 0.0
    scale: float = 1.0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImpactReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def write_tables(self, directory) -> list[Path]:
        """Per-scope CSV tables (one row per group and metric) plus the shift matrix."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        scopes = [("citywide", [dict(self.citywide, _key="all")], "scope"),
                  ("per_zone", self.per_zone, "zone_id"),
                  ("per_wage", self.per_wage, "wage_group")]
        for name, rows, key in scopes:
            path = d / f"{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow([key, "metric", "mean", "std", "ci95_low", "ci95_high"])
                for row in rows:
                    gid = row.get("_key", row.get(key))
                    for m in METRICS:
                        e = row[m]
                        wr.writerow([gid, m] + [_cell(x) for x in
                                                (e["mean"], e["std"], e["ci95"][0], e["ci95"][1])])
            paths.append(path)
        path = d / "shift_matrix.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["from\\to"] + self.modes)
            for label, row in zip(self.modes, self.shift_matrix):
                wr.writerow([label] + [_cell(x) for x in row])
        paths.append(path)
        return paths


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def config_digest(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def aggregate_posterior(run: ScenarioRun, zones=None, scale: float = 1.0,
                        config: Mapping | None = None) -> ImpactReport:
    """Weighted mean/std/95% interval of every metric in every scope.

    ``scale`` multiplies absolute metrics and the shift matrix (e.g. to
    extrapolate a sample day to a year); percentages are unaffected.
    """
    if not scale > 0:
        raise InvalidInputError("scale must be > 0")
    w = run.weights
    factor = np.array([scale if m in ABSOLUTE else 1.0 for m in METRICS])

    def scope_rows(scope):
        vals = run.metrics(scope) * factor     # (S, G, M)
        rows = []
        for g in range(vals.shape[1]):
            rows.append({m: _stats_entry(vals[:, g, j], w) for j, m in enumerate(METRICS)})
        return rows

    city = scope_rows("citywide")[0]
    per_zone = []
    for key, row in zip(run.groups["per_zone"], scope_rows("per_zone")):
        z = zones.get(key) if zones else None
        per_zone.append(dict(row, zone_id=key, borough=z.borough if z else None))
    per_wage = [dict(row, wage_group=key)
                for key, row in zip(run.groups["per_wage"], scope_rows("per_wage"))]
    mean_shift = np.tensordot(w, run.shift, axes=1) * scale
    mean_shift[np.all(run.shift == 0, axis=0)] = 0.0
    cfg = dict(config or {})
    return ImpactReport(
        scenario={"baseline": run.scenario_a.to_dict(), "intervention": run.scenario_b.to_dict()},
        config_digest=config_digest(cfg),
        citywide=city, per_zone=per_zone, per_wage=per_wage,
        shift_matrix=mean_shift.tolist(), demand_total=run.demand_total * scale,
        scale=scale, n_samples=len(run.samples))


# --- data uncertainty ---------------------------------------------------------------

def _truncated_normal(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Normal draws conditioned on being >= 0 (by redrawing negatives)."""
    out = mean + std * rng.standard_normal(mean.shape)
    bad = out < 0
    for _ in range(1000):
        if not bad.any():
            break
        out[bad] = mean[bad] + std[bad] * rng.standard_normal(int(bad.sum()))
        bad = out < 0
    return np.maximum(out, 0.0)


def data_uncertainty(cells: CellArrays, params: SimParams, n_resamples: int, seed: int,
                     n_reps: int = 1000) -> dict:
    """Spread of per-mode trip totals under resampled travel times and fares.

    Each resample draws every time and fare from a normal with the
    attribute's mean and std truncated at 0, then re-simulates choices. The
    preference noise is shared across resamples, so only attribute noise
    moves the totals.
    """
    if n_resamples < 1:
        raise InvalidInputError("n_resamples must be >= 1")
    avail = cells.available
    totals = cells.trips.sum(axis=1)
    out = np.zeros((n_resamples, N_MODES))
    for r in range(n_resamples):
        rng = rng_stream(seed, 3, r)
        t = np.where(avail, _truncated_normal(np.where(avail, cells.time, 0.0), cells.time_std, rng),
                     np.inf)
        c = np.where(avail, _truncated_normal(np.where(avail, cells.cost, 0.0), cells.cost_std, rng),
                     np.inf)
        g = cells.gen_costs(params.beta, time=t, cost=c)
        freq = choice_frequencies(g, params, n_reps, seed)
        out[r] = (freq * totals[:, None]).sum(axis=0)
    std = np.zeros(N_MODES)
    for m in range(N_MODES):
        col = out[:, m]
        if n_resamples > 1 and not np.all(col == col[0]):
            std[m] = float(np.std(col, ddof=1))
    return {"modes": [m.label for m in MODES], "mean": out.mean(axis=0), "std": std,
            "totals": out}
