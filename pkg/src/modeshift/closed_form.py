"""Closed-form discrete-choice models and their grid-search fitting.

Three variants share the generalized cost ``g = beta * wage * time + fare``:

* ``mnl``    -- additive utilities ``V = -lam * g``
* ``logmnl`` -- log utilities ``V = -lam * ln g`` (multiplicative noise)
* ``nested`` -- ``mnl`` utilities in a taxi/fhv nest with an fhv/sfhv sub-nest

Probabilities are returned as ``(..., 6)`` arrays indexed by :class:`Mode`,
with exact zeros on unavailable modes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .core import MODES, N_MODES, CellArrays, Mode, build_cell_arrays
from .errors import (InvalidCostError, InvalidInputError, InvalidParameterError,
                     NoAvailableModeError, UndefinedRSquaredError)

MODEL_KINDS = ("mnl", "logmnl", "nested")


@dataclass(frozen=True, order=True)
class ClosedFormParams:
    lam: float
    beta: float
    tau_taxi_fhv: float = 1.0
    tau_fhv: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.beta > 0:
            raise InvalidParameterError(f"beta must be > 0, got {self.beta}")
        for name in ("tau_taxi_fhv", "tau_fhv"):
            _check_tau(getattr(self, name), name)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_tau(tau, name="tau"):
    t = np.asarray(tau, float)
    if np.any(~(t > 0)) or np.any(t > 1):
        raise InvalidParameterError(f"{name} must lie in (0, 1], got {tau}")


@dataclass(frozen=True)
class Nest:
    """A nest of modes and/or sub-nests sharing dissimilarity parameter ``tau``.

    ``tau`` names a field of :class:`ClosedFormParams` (or a key of the
    ``taus`` mapping passed to :func:`nested_logit`).
    """

    tau: str
    members: tuple


DEFAULT_NESTS = (Mode.TRANSIT, Mode.WALK, Mode.DRIVE,
                 Nest("tau_taxi_fhv", (Mode.TAXI, Nest("tau_fhv", (Mode.FHV, Mode.SFHV)))))


def _cost_array(gen_costs) -> np.ndarray:
    if isinstance(gen_costs, Mapping):
        g = np.full(N_MODES, math.inf)
        for m, v in gen_costs.items():
            g[Mode.parse(m)] = v
        return g
    g = np.asarray(gen_costs, float)
    if g.shape[-1] != N_MODES:
        # shorter vectors are read as the first k modes in canonical order
        pad = np.full(g.shape[:-1] + (N_MODES - g.shape[-1],), math.inf)
        g = np.concatenate([g, pad], axis=-1)
    return g


def softmax_available(v: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis; ``-inf`` entries get exactly 0."""
    top = np.max(v, axis=-1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise NoAvailableModeError("all modes unavailable")
    e = np.exp(v - top)
    return e / e.sum(axis=-1, keepdims=True)


def mnl_probs(gen_costs, lam: float) -> np.ndarray:
    """``P_m`` proportional to ``exp(-lam * g_m)`` over available modes."""
    g = _cost_array(gen_costs)
    avail = np.isfinite(g)
    with np.errstate(invalid="ignore"):
        v = np.where(avail, -lam * np.where(avail, g, 0.0), -np.inf)
    return softmax_available(v)


def logmnl_probs(gen_costs, lam: float) -> np.ndarray:
    """``P_m`` proportional to ``g_m ** -lam`` over available modes."""
    g = _cost_array(gen_costs)
    avail = np.isfinite(g)
    if np.any(avail & ~(g > 0)):
        raise InvalidCostError("log-utility model needs strictly positive costs")
    v = np.where(avail, -lam * np.log(np.where(avail, g, 1.0)), -np.inf)
    return softmax_available(v)


def _logsumexp(x: np.ndarray, axis=0) -> np.ndarray:
    top = np.max(x, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def nested_logit(v: np.ndarray, taus: Mapping[str, float | np.ndarray],
                 nests: Sequence = DEFAULT_NESTS) -> np.ndarray:
    """Nested-logit probabilities from systematic utilities ``v[..., 6]``.

    Within a nest with dissimilarity ``tau`` whose members have utilities
    ``U_i`` (a leaf's own ``V``, or ``tau_c * IV_c`` for a sub-nest),
    ``IV = ln sum_i exp(U_i / tau)`` and ``P(i | nest) = exp(U_i / tau - IV)``.
    The top level is a plain logit over the composite utilities. ``taus``
    values may be arrays broadcasting against ``v[..., 0]``.
    """
    v = np.asarray(v, float)
    for name, t in taus.items():
        _check_tau(t, name)
    logp = np.zeros_like(v)

    def composite(node):
        # returns (utility, [(mode, conditional log-prob within node)])
        if isinstance(node, Nest):
            tau = np.asarray(taus[node.tau], float)
            parts = [composite(m) for m in node.members]
            u = np.stack([p[0] for p in parts])
            iv = _logsumexp(u / tau, axis=0)
            leaves = []
            with np.errstate(invalid="ignore"):
                for (ui, sub) in parts:
                    cond = np.where(np.isneginf(ui), -np.inf, ui / tau - iv)
                    leaves += [(m, lp + cond) for m, lp in sub]
            return np.where(np.isneginf(iv), -np.inf, tau * iv), leaves
        m = Mode(node)
        return v[..., m], [(m, np.zeros(v.shape[:-1]))]

    parts = [composite(n) for n in nests]
    top = np.stack([p[0] for p in parts], axis=-1)
    ptop = softmax_available(top)
    seen = set()
    for k, (_, leaves) in enumerate(parts):
        for m, lp in leaves:
            seen.add(m)
            with np.errstate(invalid="ignore", divide="ignore"):
                logp[..., m] = np.where(ptop[..., k] > 0, np.log(ptop[..., k]) + lp, -np.inf)
    if len(seen) != N_MODES:
        raise InvalidInputError("nest specification must cover all six modes")
    p = np.exp(logp)
    p[~np.isfinite(logp)] = 0.0
    # renormalize away rounding so the simplex holds to ~1e-16
    return p / p.sum(axis=-1, keepdims=True)


def nested_probs(gen_costs, params: ClosedFormParams, nests: Sequence = DEFAULT_NESTS) -> np.ndarray:
    g = _cost_array(gen_costs)
    avail = np.isfinite(g)
    with np.errstate(invalid="ignore"):
        v = np.where(avail, -params.lam * np.where(avail, g, 0.0), -np.inf)
    taus = {"tau_taxi_fhv": params.tau_taxi_fhv, "tau_fhv": params.tau_fhv}
    return nested_logit(v, taus, nests)


def model_probs(gen_costs, params: ClosedFormParams, kind: str) -> np.ndarray:
    if kind == "mnl":
        return mnl_probs(gen_costs, params.lam)
    if kind == "logmnl":
        return logmnl_probs(gen_costs, params.lam)
    if kind == "nested":
        return nested_probs(gen_costs, params)
    raise InvalidInputError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def present_modes(trips: np.ndarray) -> tuple[Mode, ...]:
    tot = np.asarray(trips).sum(axis=0)
    return tuple(m for m in MODES if tot[m] > 0)


def predict_table(demand, params: ClosedFormParams, kind: str, attrs=None, wages=None,
                  modes: Sequence[Mode] | None = None) -> np.ndarray:
    """Expected trips per (cell, mode): cell total times model probability.

    ``demand`` is a :class:`CellArrays` or a list of cells (then ``attrs``
    and ``wages`` are required). Only ``modes`` (default: modes with any
    observed trips) are offered to the model.
    """
    cells = demand if isinstance(demand, CellArrays) else build_cell_arrays(demand, attrs, wages)
    if modes is None:
        modes = present_modes(cells.trips)
    cells = cells.restrict(modes)
    g = cells.gen_costs(params.beta)
    p = model_probs(g, params, kind)
    return cells.trips.sum(axis=1, keepdims=True) * p


def _as_entries(pred, obs):
    if isinstance(pred, Mapping):
        if set(pred) != set(obs):
            raise InvalidInputError("pred and obs must share the same keys")
        keys = sorted(obs, key=repr)
        cell_tot: dict = {}
        for (cell, _m), v in obs.items():
            cell_tot[cell] = cell_tot.get(cell, 0.0) + v
        p = np.array([pred[k] for k in keys], float)
        o = np.array([obs[k] for k in keys], float)
        w = np.array([cell_tot[k[0]] for k in keys], float)
        return p, o, w
    p = np.atleast_2d(np.asarray(pred, float))
    o = np.atleast_2d(np.asarray(obs, float))
    if p.shape != o.shape:
        raise InvalidInputError(f"shape mismatch {p.shape} vs {o.shape}")
    w = np.broadcast_to(o.sum(axis=1, keepdims=True), o.shape)
    return p.ravel(), o.ravel(), w.ravel()


def wrmse(pred, obs) -> float:
    """Trip-weighted RMSE over (cell, mode) entries.

    Each entry is weighted by its cell's total observed trips. Arrays are
    ``(n_cells, n_modes)``; mappings are keyed by ``(cell, mode)``.
    """
    p, o, w = _as_entries(pred, obs)
    if p.size == 0:
        raise InvalidInputError("wrmse of an empty set")
    sw = math.fsum(w)
    if not sw > 0:
        raise InvalidInputError("total weight is zero")
    return math.sqrt(math.fsum(w * (p - o) ** 2) / sw)


def r_squared(pred_totals, obs_totals) -> float:
    p = np.asarray(pred_totals, float)
    o = np.asarray(obs_totals, float)
    if o.size < 2 or p.shape != o.shape:
        raise InvalidInputError("need at least two aligned totals")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedRSquaredError("observations have zero variance")
    return 1.0 - float(np.sum((o - p) ** 2)) / ss_tot


FREE_PARAMS = {
    "mnl": ("lam", "beta"),
    "logmnl": ("lam", "beta"),
    "nested": ("lam", "beta", "tau_taxi_fhv", "tau_fhv"),
}


def parse_grid(spec: str) -> dict[str, list[float]]:
    """Parse ``"lam=0.01:0.2:20,beta=0.5,0.7"``-style grid specs.

    ``lo:hi:n`` gives ``n`` evenly spaced values; a bare list of numbers is
    taken literally (values after the first without ``=`` extend the
    previous parameter).
    """
    grid: dict[str, list[float]] = {}
    current = None
    for tok in filter(None, (t.strip() for t in spec.split(","))):
        if "=" in tok:
            current, tok = (s.strip() for s in tok.split("=", 1))
            grid[current] = []
        if current is None:
            raise InvalidInputError(f"bad grid spec {spec!r}")
        if ":" in tok:
            lo, hi, n = tok.split(":")
            grid[current] += list(np.linspace(float(lo), float(hi), int(n)))
        else:
            grid[current].append(float(tok))
    return grid


@dataclass(frozen=True)
class FitResult:
    params: ClosedFormParams
    wrmse: float
    trace: tuple  # ((ClosedFormParams, wrmse), ...) in lexicographic grid order


def fit_grid(demand: CellArrays, kind: str, grid: Mapping[str, Sequence[float]],
             modes: Sequence[Mode] | None = None) -> FitResult:
    """Exhaustive grid search minimizing WRMSE.

    Grid points are visited in lexicographic order of
    ``(lam, beta, tau_taxi_fhv, tau_fhv)`` and only a strictly smaller WRMSE
    replaces the incumbent, so ties resolve to the lexicographically smallest
    point.
    """
    if kind not in FREE_PARAMS:
        raise InvalidInputError(f"unknown model kind {kind!r}")
    names = FREE_PARAMS[kind]
    axes = []
    for name in names:
        vals = sorted(set(float(x) for x in grid.get(name, [])))
        if not vals:
            raise InvalidInputError(f"empty grid for {name!r}")
        axes.append(vals)
    if modes is None:
        modes = present_modes(demand.trips)
    cells = demand.restrict(modes)
    cols = list(modes)
    obs = cells.trips[:, cols]
    totals = cells.trips.sum(axis=1, keepdims=True)
    trace = []
    best = None
    for combo in itertools.product(*axes):
        params = ClosedFormParams(**dict(zip(names, combo)))
        p = model_probs(cells.gen_costs(params.beta), params, kind)
        err = wrmse(totals * p[:, cols], obs)
        trace.append((params, err))
        if best is None or err < best[1]:
            best = (params, err)
    return FitResult(best[0], best[1], tuple(trace))


def mode_totals(expected: np.ndarray, modes: Sequence[Mode]) -> np.ndarray:
    return np.asarray(expected)[:, list(modes)].sum(axis=0)


def comparison_table(obs_totals, rows: Mapping[str, Sequence[float]],
                     modes: Sequence[Mode]) -> list[dict]:
    """Per-mode aggregated totals per model plus R^2 against ``obs_totals``."""
    out = [{"model": "observed", **{m.label: float(v) for m, v in zip(modes, obs_totals)},
            "r2": None}]
    for name, tot in rows.items():
        out.append({"model": name, **{m.label: float(v) for m, v in zip(modes, tot)},
                    "r2": r_squared(tot, obs_totals)})
    return out
