"""Grid-based Bayesian inference for the individual-choice parameters.

Parameters are drawn at evenly spaced percentiles of their priors (so every
grid point carries equal prior mass) and weighted by the joint likelihood of
two data sources:

* stage 1 -- four-mode ridership per (origin, destination, wage) cell,
  evaluated with fhv/sfhv unavailable: ``L1 = sum R_m ln P_m``;
* stage 2 -- taxi/fhv/sfhv counts per (origin, destination), evaluated as
  the choice *within* the taxi nest with all six modes on offer:
  ``L2 = sum R_m ln(P_m / (P_taxi + P_fhv + P_sfhv))``.

Stage 1 does not depend on the correlations (with fhv/sfhv removed the
taxi noise is uncorrelated with every other available mode), so it is
computed once per (beta, sigma) and shared across correlation pairs.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .core import FOUR_MODES, MODES, N_MODES, TLC_MODES, CellArrays, DemandCell, Mode
from .errors import DegeneratePosteriorError, InvalidInputError, InvalidParameterError
from .simulator import SimParams, estimate_probs_mc_batch, rng_stream

ProbBackend = Callable[[np.ndarray, np.ndarray], np.ndarray]

SMOOTHING_FLOOR = 1e-12
# Any pair works for stage 1; the centroid of the correlation triangle keeps
# surrogate inputs in the middle of its training range.
STAGE1_CORS = (1.0 / 3.0, 2.0 / 3.0)
POSTERIOR_COLUMNS = ("beta", "sigma", "corTFS", "corFS", "loglik1", "loglik2", "weight")


@dataclass(frozen=True)
class PriorSpec:
    """Log-normal priors on beta and sigma, uniform on the correlation triangle.

    The correlation lattice has ``n_cor_fs`` strata along ``cor_fs`` and
    ``n_cor_tfs`` points per stratum along ``cor_tfs / cor_fs``.
    ``anchor`` (optional) snaps the nearest lattice value in every
    coordinate onto the given parameters, so that a known truth is a grid
    point; used for recovery experiments.
    """

    ln_mu_beta: float = -math.log(3.0) / 2.0
    sd_beta: float = math.log(3.0) / 2.0
    ln_mu_sigma: float = math.log(math.log(2.0))
    sd_sigma: float = abs(math.log(math.log(2.0)))
    n_beta: int = 10
    n_sigma: int = 10
    n_cor_fs: int = 10
    n_cor_tfs: int = 10
    anchor: SimParams | None = None

    def __post_init__(self):
        for name in ("sd_beta", "sd_sigma"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be > 0")
        for name in ("n_beta", "n_sigma", "n_cor_fs", "n_cor_tfs"):
            if int(getattr(self, name)) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")

    @property
    def n_corr_pairs(self) -> int:
        return self.n_cor_fs * self.n_cor_tfs

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_beta, self.n_sigma, self.n_cor_fs, self.n_cor_tfs)

    @classmethod
    def from_grid(cls, grid: str, **kw) -> "PriorSpec":
        """Parse ``"BxSxC"`` (C correlation pairs) or ``"BxSxRxK"``.

        A bare pair count ``C`` is split into ``R`` cor_fs strata times ``K``
        points per stratum with ``R >= K`` as close to square as possible.
        """
        try:
            parts = [int(p) for p in grid.lower().replace("×", "x").split("x")]
        except ValueError:
            raise InvalidInputError(f"bad grid {grid!r}; expected BxSxC or BxSxRxK") from None
        if len(parts) == 3:
            rows, cols = split_pairs(parts[2])
            parts = parts[:2] + [rows, cols]
        if len(parts) != 4 or min(parts) < 1:
            raise InvalidInputError(f"bad grid {grid!r}; expected BxSxC or BxSxRxK")
        return cls(n_beta=parts[0], n_sigma=parts[1], n_cor_fs=parts[2], n_cor_tfs=parts[3], **kw)


def split_pairs(n: int) -> tuple[int, int]:
    if n < 1:
        raise InvalidInputError("need at least one correlation pair")
    k = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    return n // k, k


def percentile_points(n: int) -> np.ndarray:
    return (np.arange(1, n + 1) - 0.5) / n


def lognormal_quantile(p, ln_mu: float, sd: float) -> np.ndarray:
    return np.exp(ln_mu + sd * norm.ppf(p))


def _snap(values: np.ndarray, target: float) -> np.ndarray:
    out = values.copy()
    out[int(np.argmin(np.abs(values - target)))] = target
    return out


def beta_values(spec: PriorSpec) -> np.ndarray:
    v = lognormal_quantile(percentile_points(spec.n_beta), spec.ln_mu_beta, spec.sd_beta)
    return v if spec.anchor is None else _snap(v, spec.anchor.beta)


def sigma_values(spec: PriorSpec) -> np.ndarray:
    v = lognormal_quantile(percentile_points(spec.n_sigma), spec.ln_mu_sigma, spec.sd_sigma)
    return v if spec.anchor is None else _snap(v, spec.anchor.sigma)


def corr_lattice(spec: PriorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stratified midpoints of the uniform prior on ``0 <= cor_tfs < cor_fs <= 1``.

    Under that prior ``cor_fs`` has CDF ``b**2`` and ``cor_tfs | cor_fs`` is
    uniform on ``[0, cor_fs)``; both are sampled at percentile midpoints, so
    each of the ``R * K`` points carries equal prior mass. Returns the
    ``cor_fs`` values (length R) and the ``cor_tfs / cor_fs`` fractions
    (length K).
    """
    fs = np.sqrt(percentile_points(spec.n_cor_fs))
    frac = percentile_points(spec.n_cor_tfs)
    if spec.anchor is not None and spec.anchor.cor_fs > 0:
        fs = _snap(fs, spec.anchor.cor_fs)
        frac = _snap(frac, spec.anchor.cor_tfs / spec.anchor.cor_fs)
    return fs, frac


def prior_samples(spec: PriorSpec = PriorSpec()) -> list[SimParams]:
    """Cartesian product of the prior grids, ordered (beta, sigma, cor_fs, cor_tfs)."""
    fs, frac = corr_lattice(spec)
    out = []
    for b, s, f, q in itertools.product(beta_values(spec), sigma_values(spec), fs, frac):
        out.append(SimParams(float(b), float(s), float(q * f), float(f)))
    return out


def grid_index(spec: PriorSpec, i: int) -> tuple[int, int, int, int]:
    """Grid coordinates of the ``i``-th element of :func:`prior_samples`."""
    return tuple(int(x) for x in np.unravel_index(i, spec.shape))


# --- probability backends ---------------------------------------------------

class SurrogateBackend:
    """Probabilities from a trained :class:`~modeshift.surrogate.MlpModel`."""

    def __init__(self, model):
        self.model = model

    def __call__(self, scaled: np.ndarray, cors: np.ndarray) -> np.ndarray:
        from .surrogate import predict_batch
        return predict_batch(self.model, scaled, cors)


class OracleBackend:
    """Monte Carlo choice frequencies.

    Every call restarts the same stream, so repeated evaluations at
    different parameters share random numbers and the resulting likelihood
    surface is smooth in the parameters.
    """

    def __init__(self, n_draws: int = 20_000, seed: int = 0):
        if n_draws < 1:
            raise InvalidInputError("n_draws must be >= 1")
        self.n_draws = n_draws
        self.seed = seed

    def __call__(self, scaled: np.ndarray, cors: np.ndarray) -> np.ndarray:
        scaled = np.atleast_2d(np.asarray(scaled, float))
        cors = np.broadcast_to(np.atleast_2d(np.asarray(cors, float)), (len(scaled), 2))
        return estimate_probs_mc_batch(scaled, cors, self.n_draws, rng_stream(self.seed, 1))


def scaled_log_costs(cells: CellArrays, beta: float, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise InvalidParameterError("likelihood evaluation needs sigma > 0")
    g = cells.gen_costs(beta)
    if np.any(cells.available & ~(g > 0)):
        raise InvalidInputError("generalized costs must be > 0 on available modes")
    with np.errstate(divide="ignore"):
        return np.log(g) / sigma


def _check_modes(trips: np.ndarray, allowed: Sequence[Mode], what: str):
    extra = [m for m in MODES if m not in allowed and np.any(np.asarray(trips)[..., m] > 0)]
    if extra:
        raise InvalidInputError(
            f"{what} has trips on {[m.label for m in extra]}; expected only "
            f"{[m.label for m in allowed]}")


def multinomial_loglik(trips: np.ndarray, probs: np.ndarray, smoothing: bool = False) -> np.ndarray:
    """``sum_m R_m ln P_m`` over the last axis; ``R = 0`` terms contribute 0.

    A positive count on a zero probability gives ``-inf`` unless
    ``smoothing`` floors probabilities at :data:`SMOOTHING_FLOOR`.
    """
    trips = np.asarray(trips, float)
    p = np.asarray(probs, float)
    if smoothing:
        p = np.maximum(p, SMOOTHING_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(trips > 0, trips * np.log(p), 0.0)
    return terms.sum(axis=-1)


def stage1_probs(cells: CellArrays, beta: float, sigma: float, backend: ProbBackend) -> np.ndarray:
    four = cells.restrict(FOUR_MODES)
    s = scaled_log_costs(four, beta, sigma)
    return backend(s, np.tile(STAGE1_CORS, (len(s), 1)))


def stage1_loglik(params: SimParams, demand4: CellArrays, backend: ProbBackend,
                  smoothing: bool = False) -> float:
    """Log-likelihood of four-mode ridership (fhv/sfhv unavailable)."""
    _check_modes(demand4.trips, FOUR_MODES, "four-mode demand")
    p = stage1_probs(demand4, params.beta, params.sigma, backend)
    return float(multinomial_loglik(demand4.trips, p, smoothing).sum())


def nest_conditional(probs: np.ndarray) -> np.ndarray:
    """Probabilities renormalized within the taxi nest; zero elsewhere."""
    p = np.asarray(probs, float)
    nest = list(TLC_MODES)
    tot = p[..., nest].sum(axis=-1, keepdims=True)
    out = np.zeros_like(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[..., nest] = np.where(tot > 0, p[..., nest] / tot, 0.0)
    return out


@dataclass(frozen=True)
class NestDemand:
    """Taxi-nest counts per O-D pair plus their per-wage expansion.

    ``rows`` has one entry per (pair, wage group) with positive share and
    carries the share-split trips; ``pair`` maps rows to pairs and ``trips``
    holds the observed per-pair counts.
    """

    rows: CellArrays
    pair: np.ndarray
    share: np.ndarray
    trips: np.ndarray

    @classmethod
    def from_rows(cls, rows: CellArrays) -> "NestDemand":
        """Each row is its own pair (already wage-specific data)."""
        n = len(rows)
        return cls(rows, np.arange(n), np.ones(n), rows.trips)

    @property
    def n_pairs(self) -> int:
        return len(self.trips)


def nest_demand(cells: Sequence[DemandCell], wage_dist: Mapping[str, Mapping[str, float]],
                attrs, wages: Mapping[str, float]) -> NestDemand:
    from .core import build_cell_arrays
    cells = list(cells)
    rows, pair, share = [], [], []
    for i, c in enumerate(cells):
        for r in expand_tlc([c], wage_dist):
            rows.append(r)
            pair.append(i)
            share.append(wage_dist[c.origin][r.wage_group])
    trips = np.array([c.trips for c in cells], float).reshape(len(cells), N_MODES)
    return NestDemand(build_cell_arrays(rows, attrs, wages), np.array(pair, int),
                      np.array(share, float), trips)


POOLINGS = ("mixture", "split")


def nest_loglik(nest: NestDemand, cond: np.ndarray, pooling: str = "mixture",
                smoothing: bool = False) -> np.ndarray:
    """Stage-2 log-likelihood from per-row nest conditionals ``cond[..., rows, 6]``.

    ``mixture`` scores each pair's counts against the share-weighted average
    of the wage-specific conditionals; ``split`` scores the share-split
    counts of every row against its own conditional.
    """
    if pooling == "split":
        return multinomial_loglik(nest.rows.trips, cond, smoothing).sum(axis=-1)
    if pooling != "mixture":
        raise InvalidInputError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    w = np.moveaxis(cond * nest.share[:, None], -2, 0)
    pi = np.zeros((nest.n_pairs,) + w.shape[1:])
    np.add.at(pi, nest.pair, w)
    pi = np.moveaxis(pi, 0, -2)
    return multinomial_loglik(nest.trips, pi, smoothing).sum(axis=-1)


def stage2_loglik(params: SimParams, demand_tlc, backend: ProbBackend,
                  smoothing: bool = False, pooling: str = "mixture") -> float:
    """Log-likelihood of the taxi/fhv/sfhv split conditional on the taxi nest.

    ``demand_tlc`` is a :class:`NestDemand`, or wage-specific
    :class:`CellArrays` rows scored individually. Every mode with
    attributes is offered to the model.
    """
    nest = demand_tlc if isinstance(demand_tlc, NestDemand) else NestDemand.from_rows(demand_tlc)
    _check_modes(nest.trips, TLC_MODES, "taxi-nest demand")
    s = scaled_log_costs(nest.rows, params.beta, params.sigma)
    cors = np.tile([params.cor_tfs, params.cor_fs], (len(s), 1))
    cond = nest_conditional(backend(s, cors))
    return float(nest_loglik(nest, cond, pooling, smoothing))


def expand_tlc(cells: Iterable[DemandCell], wage_dist: Mapping[str, Mapping[str, float]]
               ) -> list[DemandCell]:
    """Split wage-less taxi-nest cells across wage groups.

    Each cell's trips are divided in proportion to the origin zone's wage
    distribution; groups with zero share are dropped.
    """
    out = []
    for c in cells:
        shares = wage_dist.get(c.origin)
        if shares is None:
            raise InvalidInputError(f"no wage distribution for origin zone {c.origin!r}")
        for w, share in sorted(shares.items()):
            if share > 0:
                out.append(DemandCell(c.origin, c.destination, w,
                                      tuple(share * t for t in c.trips)))
    return out


# --- posterior ----------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSample:
    params: SimParams
    loglik_stage1: float
    loglik_stage2: float
    weight: float = 0.0
    index: tuple = ()

    @property
    def loglik(self) -> float:
        return self.loglik_stage1 + self.loglik_stage2


def posterior_weights(samples: Sequence[ParameterSample]) -> list[ParameterSample]:
    """Normalize ``exp(L1 + L2)`` over the sample set via log-sum-exp."""
    if not samples:
        raise InvalidInputError("no samples")
    ll = np.array([s.loglik for s in samples], float)
    if np.any(np.isnan(ll)) or np.any(np.isposinf(ll)):
        raise InvalidInputError("log-likelihoods must be finite or -inf")
    if np.all(np.isneginf(ll)):
        raise DegeneratePosteriorError("every sample has zero likelihood")
    w = np.exp(ll - logsumexp(ll))
    w /= math.fsum(w)
    return [replace(s, weight=float(x)) for s, x in zip(samples, w)]


def weighted_stats(values, weights) -> dict:
    """Weighted mean, population std and interpolated 2.5/97.5% quantiles."""
    v = np.asarray(values, float).ravel()
    w = np.asarray(weights, float).ravel()
    if v.size == 0:
        raise InvalidInputError("empty input")
    if v.shape != w.shape:
        raise InvalidInputError("values and weights must align")
    if np.any(w < 0) or not w.sum() > 0:
        raise InvalidInputError("weights must be nonnegative with positive sum")
    keep = w > 0
    v, w = v[keep], w[keep] / w[keep].sum()
    if np.all(v == v[0]):
        x = float(v[0])
        return {"mean": x, "std": 0.0, "ci95_low": x, "ci95_high": x}
    mean = float(np.dot(w, v))
    std = float(math.sqrt(max(np.dot(w, (v - mean) ** 2), 0.0)))
    order = np.argsort(v, kind="stable")
    vs, ws = v[order], w[order]
    mid = np.cumsum(ws) - 0.5 * ws
    lo, hi = np.interp([0.025, 0.975], mid, vs)
    return {"mean": mean, "std": std, "ci95_low": float(lo), "ci95_high": float(hi)}


def max_likelihood(samples: Sequence[ParameterSample]) -> SimParams:
    """Sample with the largest joint log-likelihood; ties go to the smallest params."""
    if not samples:
        raise InvalidInputError("no samples")
    best = None
    for s in sorted(samples, key=lambda s: s.params.as_tuple()):
        if best is None or s.loglik > best.loglik:
            best = s
    return best.params


# --- driver --------------------------------------------------------------------

@dataclass
class InferenceResult:
    spec: PriorSpec
    samples: list
    stage1: np.ndarray = field(repr=False)  # (n_beta, n_sigma)

    @property
    def best(self) -> SimParams:
        return max_likelihood(self.samples)

    def weight_near(self, truth_index: tuple, radius: int = 1) -> float:
        """Posterior mass within ``radius`` grid steps of ``truth_index`` in every coordinate."""
        t = np.asarray(truth_index)
        return float(sum(s.weight for s in self.samples
                         if np.all(np.abs(np.asarray(s.index) - t) <= radius)))


def infer(demand4: CellArrays, demand_tlc, backend: ProbBackend,
          spec: PriorSpec = PriorSpec(), smoothing: bool = False,
          pooling: str = "mixture") -> InferenceResult:
    """Evaluate both likelihood stages on the full prior grid and weight it.

    ``demand_tlc`` is a :class:`NestDemand` (or wage-specific rows, see
    :func:`stage2_loglik`).
    """
    nest = demand_tlc if isinstance(demand_tlc, NestDemand) else NestDemand.from_rows(demand_tlc)
    _check_modes(demand4.trips, FOUR_MODES, "four-mode demand")
    _check_modes(nest.trips, TLC_MODES, "taxi-nest demand")
    betas, sigmas = beta_values(spec), sigma_values(spec)
    fs, frac = corr_lattice(spec)
    pairs = np.array([(q * f, f) for f in fs for q in frac])
    n_pairs, n_rows = len(pairs), len(nest.rows)
    cors = np.repeat(pairs, n_rows, axis=0)
    l1 = np.empty((len(betas), len(sigmas)))
    samples = []
    for ib, b in enumerate(betas):
        for is_, s in enumerate(sigmas):
            p1 = stage1_probs(demand4, b, s, backend)
            l1[ib, is_] = multinomial_loglik(demand4.trips, p1, smoothing).sum()
            if n_rows:
                sc = np.tile(scaled_log_costs(nest.rows, b, s), (n_pairs, 1))
                cond = nest_conditional(backend(sc, cors)).reshape(n_pairs, n_rows, N_MODES)
                l2 = nest_loglik(nest, cond, pooling, smoothing)
            else:
                l2 = np.zeros(n_pairs)
            for k, (a, f) in enumerate(pairs):
                idx = (ib, is_) + divmod(k, len(frac))
                samples.append(ParameterSample(SimParams(float(b), float(s), float(a), float(f)),
                                               float(l1[ib, is_]), float(l2[k]), index=idx))
    return InferenceResult(spec, posterior_weights(samples), l1)


def expected_totals(samples: Sequence[ParameterSample], demand4: CellArrays,
                    backend: ProbBackend) -> np.ndarray:
    """Posterior-weighted expected four-mode trip totals per mode."""
    by_bs: dict = {}
    for s in samples:
        if s.weight > 0:
            key = (s.params.beta, s.params.sigma)
            by_bs[key] = by_bs.get(key, 0.0) + s.weight
    tot = np.zeros(N_MODES)
    n = demand4.trips.sum(axis=1)
    for (b, s), w in sorted(by_bs.items()):
        tot += w * (n[:, None] * stage1_probs(demand4, b, s, backend)).sum(axis=0)
    return tot


def write_posterior(samples: Sequence[ParameterSample], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(POSTERIOR_COLUMNS)
        for s in samples:
            p = s.params
            wr.writerow([repr(float(x)) for x in
                         (p.beta, p.sigma, p.cor_tfs, p.cor_fs,
                          s.loglik_stage1, s.loglik_stage2, s.weight)])


def read_posterior(path) -> list[ParameterSample]:
    from .errors import MissingFileError, SchemaError
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"posterior file not found: {path}")
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != POSTERIOR_COLUMNS:
            raise SchemaError(f"{path}: expected columns {','.join(POSTERIOR_COLUMNS)}")
        out = []
        for line, row in enumerate(rd, start=2):
            try:
                v = {k: float(row[k]) for k in POSTERIOR_COLUMNS}
                params = SimParams(v["beta"], v["sigma"], v["corTFS"], v["corFS"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line}: {exc}") from None
            out.append(ParameterSample(params, v["loglik1"], v["loglik2"], v["weight"]))
    if not out:
        raise SchemaError(f"{path}: no samples")
    return out
