"""Domain types, generalized cost and scenario transforms.

Unavailable modes are encoded as ``+inf`` attributes everywhere, so the
downstream formulas assign them zero probability without special cases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Mapping

import numpy as np

from .errors import InvalidInputError, MissingAttributesError, MissingZoneError

INF = math.inf
HOURS_PER_WORK_YEAR = 2080.0
SFHV_OCCUPANCY = 2.0


class Mode(IntEnum):
    TAXI = 0
    TRANSIT = 1
    WALK = 2
    DRIVE = 3
    FHV = 4
    SFHV = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str | "Mode") -> "Mode":
        if isinstance(name, Mode):
            return name
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise InvalidInputError(f"unknown mode {name!r}") from None


MODES: tuple[Mode, ...] = tuple(Mode)
N_MODES = len(MODES)
TAXI_NEST = frozenset({Mode.TAXI, Mode.FHV, Mode.SFHV})
FHV_NEST = frozenset({Mode.FHV, Mode.SFHV})
FOUR_MODES = (Mode.TAXI, Mode.TRANSIT, Mode.WALK, Mode.DRIVE)
TLC_MODES = (Mode.TAXI, Mode.FHV, Mode.SFHV)


@dataclass(frozen=True)
class Zone:
    zone_id: str
    borough: str
    name: str = ""

    def __post_init__(self):
        if not self.borough:
            raise InvalidInputError(f"zone {self.zone_id!r} has an empty borough")


@dataclass(frozen=True)
class WageGroup:
    group_id: str
    hourly_wage: float

    def __post_init__(self):
        if not (math.isfinite(self.hourly_wage) and self.hourly_wage > 0):
            raise InvalidInputError(
                f"wage group {self.group_id!r}: hourly wage must be positive "
                f"and finite, got {self.hourly_wage}")


def hourly_wage_from_bracket(annual_low: float, annual_high: float) -> float:
    """Hourly wage at the midpoint of an annual income bracket."""
    return 0.5 * (annual_low + annual_high) / HOURS_PER_WORK_YEAR


@dataclass(frozen=True)
class ModeAttributes:
    """Travel time (h), fare (currency) and driving distance (mi) of one mode
    on one O-D pair, with the spread of repeated observations."""

    time_mean: float
    time_std: float
    cost_mean: float
    cost_std: float
    distance: float

    def __post_init__(self):
        if math.isinf(self.time_mean):
            if not (math.isinf(self.cost_mean) and math.isinf(self.distance)
                    and self.time_std == 0 and self.cost_std == 0):
                raise InvalidInputError(
                    "unavailable mode must have infinite cost/distance and zero stds")
            return
        for name in ("time_mean", "time_std", "cost_mean", "cost_std", "distance"):
            v = getattr(self, name)
            if math.isnan(v) or v < 0 or math.isinf(v):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def unavailable(cls) -> "ModeAttributes":
        return cls(INF, 0.0, INF, 0.0, INF)

    @property
    def available(self) -> bool:
        return not math.isinf(self.time_mean)


@dataclass(frozen=True)
class DemandCell:
    """Observed trips per mode for one origin/destination(/wage) cell.

    ``trips`` is indexed by :class:`Mode`. TLC-style cells carry no wage
    group (``wage_group is None``).
    """

    origin: str
    destination: str
    wage_group: str | None
    trips: tuple[float, ...]

    def __post_init__(self):
        if len(self.trips) != N_MODES:
            raise InvalidInputError(f"trips must have {N_MODES} entries")
        if any(not (t >= 0) or math.isinf(t) for t in self.trips):
            raise InvalidInputError(f"trip counts must be finite and >= 0: {self.trips}")

    @classmethod
    def from_mapping(cls, origin, destination, wage_group, trips_per_mode: Mapping) -> "DemandCell":
        trips = [0.0] * N_MODES
        for m, v in trips_per_mode.items():
            trips[Mode.parse(m)] = float(v)
        return cls(origin, destination, wage_group, tuple(trips))

    @property
    def trips_per_mode(self) -> dict[Mode, float]:
        return {m: self.trips[m] for m in MODES}

    @property
    def total(self) -> float:
        return math.fsum(self.trips)

    @property
    def key(self) -> tuple:
        return (self.origin, self.destination, self.wage_group)


@dataclass(frozen=True)
class Scenario:
    name: str = "baseline"
    removed_modes: frozenset = frozenset()
    surcharges: Mapping = field(default_factory=dict)
    surcharge_origin_filter: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "removed_modes",
                           frozenset(Mode.parse(m) for m in self.removed_modes))
        surch = {Mode.parse(m): float(v) for m, v in dict(self.surcharges).items()}
        for m, v in surch.items():
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidInputError(f"surcharge for {m.label} must be >= 0, got {v}")
        object.__setattr__(self, "surcharges", surch)

    def merged(self, other: "Scenario") -> "Scenario":
        """Union of removals and sum of surcharges; filters must agree."""
        if (self.surcharges and other.surcharges
                and self.surcharge_origin_filter != other.surcharge_origin_filter):
            raise InvalidInputError("cannot merge surcharges with different origin filters")
        surch = dict(self.surcharges)
        for m, v in other.surcharges.items():
            surch[m] = surch.get(m, 0.0) + v
        filt = self.surcharge_origin_filter if self.surcharges else other.surcharge_origin_filter
        return Scenario(f"{self.name}+{other.name}", self.removed_modes | other.removed_modes,
                        surch, filt)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "removed_modes": sorted(m.label for m in self.removed_modes),
            "surcharges": {m.label: v for m, v in sorted(self.surcharges.items())},
            "surcharge_origin_filter": self.surcharge_origin_filter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(
            name=d.get("name", "custom"),
            removed_modes=frozenset(d.get("removed_modes", ())),
            surcharges=d.get("surcharges", {}),
            surcharge_origin_filter=d.get("surcharge_origin_filter"),
        )


BASELINE = Scenario()
NO_SFHV = Scenario("no-sfhv", removed_modes=frozenset({Mode.SFHV}))


def surcharge_scenario(borough: str = "Manhattan", occupancy: float = SFHV_OCCUPANCY) -> Scenario:
    """Fixed per-trip congestion surcharge on trips originating in ``borough``.

    Shared rides pay $0.75 per passenger, so the per-vehicle-trip amount
    scales with ``occupancy``.
    """
    return Scenario("surcharge",
                    surcharges={Mode.TAXI: 2.50, Mode.FHV: 2.75, Mode.SFHV: 0.75 * occupancy},
                    surcharge_origin_filter=borough)


AttrTable = Mapping[tuple[str, str, Mode], ModeAttributes]


def generalized_cost(attrs: ModeAttributes, wage: float, beta: float,
                     time_override: float | None = None,
                     cost_override: float | None = None) -> float:
    """Monetized disutility ``beta * wage * time + cost``; ``inf`` if unavailable."""
    if not beta > 0:
        raise InvalidInputError(f"beta must be > 0, got {beta}")
    if not wage > 0:
        raise InvalidInputError(f"wage must be > 0, got {wage}")
    for name, v in (("time_override", time_override), ("cost_override", cost_override)):
        if v is not None and not v >= 0:
            raise InvalidInputError(f"{name} must be >= 0, got {v}")
    if not attrs.available:
        return INF
    t = attrs.time_mean if time_override is None else time_override
    c = attrs.cost_mean if cost_override is None else cost_override
    return beta * wage * t + c


def apply_scenario(table: AttrTable, zones: Mapping[str, Zone] | Iterable[Zone],
                   scenario: Scenario) -> dict:
    """Return a new attribute table with ``scenario`` applied.

    Removed modes become unavailable; surcharged modes gain a fixed amount on
    ``cost_mean`` for rows whose origin borough matches the filter (all rows
    if there is no filter). Removal wins over surcharge.
    """
    if not isinstance(zones, Mapping):
        zones = {z.zone_id: z for z in zones}
    out = {}
    gone = ModeAttributes.unavailable()
    for key, attrs in table.items():
        origin, _, mode = key
        zone = zones.get(origin)
        if zone is None:
            raise MissingZoneError(f"origin zone {origin!r} not found")
        if mode in scenario.removed_modes:
            out[key] = gone
            continue
        extra = scenario.surcharges.get(mode, 0.0)
        if extra and attrs.available and (
                scenario.surcharge_origin_filter is None
                or zone.borough == scenario.surcharge_origin_filter):
            attrs = replace(attrs, cost_mean=attrs.cost_mean + extra)
        out[key] = attrs
    return out


@dataclass(frozen=True)
class CellArrays:
    """Dense per-cell arrays used by the vectorized model code.

    Row ``i`` corresponds to ``keys[i]``; mode columns follow :class:`Mode`.
    """

    keys: tuple
    wage: np.ndarray
    time: np.ndarray
    time_std: np.ndarray
    cost: np.ndarray
    cost_std: np.ndarray
    distance: np.ndarray
    trips: np.ndarray

    def __len__(self):
        return len(self.keys)

    @property
    def available(self) -> np.ndarray:
        return np.isfinite(self.time)

    def gen_costs(self, beta: float, time: np.ndarray | None = None,
                  cost: np.ndarray | None = None) -> np.ndarray:
        t = self.time if time is None else time
        c = self.cost if cost is None else cost
        g = beta * self.wage[:, None] * t + c
        g[~self.available] = INF
        return g

    def restrict(self, modes: Iterable[Mode]) -> "CellArrays":
        """Mark modes outside ``modes`` unavailable."""
        keep = np.zeros(N_MODES, bool)
        keep[list(modes)] = True
        drop = ~keep
        t = self.time.copy(); t[:, drop] = INF
        c = self.cost.copy(); c[:, drop] = INF
        d = self.distance.copy(); d[:, drop] = INF
        ts = self.time_std.copy(); ts[:, drop] = 0
        cs = self.cost_std.copy(); cs[:, drop] = 0
        return replace(self, time=t, cost=c, distance=d, time_std=ts, cost_std=cs)


def build_cell_arrays(cells: Iterable[DemandCell], attrs: AttrTable,
                      wages: Mapping[str, float]) -> CellArrays:
    """Gather attributes for each cell; every mode row must be present."""
    cells = list(cells)
    n = len(cells)
    arr = {k: np.empty((n, N_MODES)) for k in
           ("time", "time_std", "cost", "cost_std", "distance")}
    wage = np.empty(n)
    missing = []
    for i, cell in enumerate(cells):
        wage[i] = wages[cell.wage_group]
        for m in MODES:
            a = attrs.get((cell.origin, cell.destination, m))
            if a is None:
                missing.append((cell.origin, cell.destination, m.label))
                continue
            arr["time"][i, m] = a.time_mean
            arr["time_std"][i, m] = a.time_std
            arr["cost"][i, m] = a.cost_mean
            arr["cost_std"][i, m] = a.cost_std
            arr["distance"][i, m] = a.distance
    if missing:
        raise MissingAttributesError(missing)
    trips = np.array([c.trips for c in cells], float).reshape(n, N_MODES)
    return CellArrays(tuple(c.key for c in cells), wage, trips=trips, **arr)
