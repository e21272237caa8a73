"""Individual-choice Monte Carlo engine.

Each traveller picks the mode minimising ``ln g_m + eps_m`` where ``eps`` is
multivariate normal with covariance ``sigma**2 * C``. ``C`` is the identity
except inside the taxi nest: taxi/fhv and taxi/sfhv share ``cor_tfs`` and
fhv/sfhv share ``cor_fs``.

Randomness always comes from :func:`rng_stream`, a Philox counter-based
generator keyed by ``(seed, *key)``, so any cell/parameter combination can be
reproduced independently of evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import MODES, N_MODES, Mode
from .errors import InvalidInputError, InvalidParameterError, NoAvailableModeError

_T, _F, _S = int(Mode.TAXI), int(Mode.FHV), int(Mode.SFHV)


def _block(a: float, b: float) -> np.ndarray:
    return np.array([[1.0, a, a], [a, 1.0, b], [a, b, 1.0]])


@dataclass(frozen=True, order=True)
class SimParams:
    beta: float
    sigma: float
    cor_tfs: float = 0.0
    cor_fs: float = 0.0

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise InvalidParameterError(f"beta must be > 0, got {self.beta}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        a, b = self.cor_tfs, self.cor_fs
        if not (0 <= a <= 1 and 0 <= b <= 1):
            raise InvalidParameterError(f"correlations must lie in [0, 1], got {a}, {b}")
        if not (b > a or (a == 0 and b == 0)):
            raise InvalidParameterError(f"need cor_fs > cor_tfs (or both zero), got {a}, {b}")
        # C is PSD for every cor_fs >= cor_tfs in [0, 1]; checked anyway.
        if np.linalg.eigvalsh(_block(a, b)).min() < -1e-12:
            raise InvalidParameterError(f"correlation matrix not PSD for {a}, {b}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.beta, self.sigma, self.cor_tfs, self.cor_fs)


REFERENCE_PARAMS = SimParams(beta=0.71, sigma=0.38, cor_tfs=0.31, cor_fs=0.58)


def correlation_matrix(params: SimParams) -> np.ndarray:
    c = np.eye(N_MODES)
    a, b = params.cor_tfs, params.cor_fs
    c[_T, _F] = c[_F, _T] = a
    c[_T, _S] = c[_S, _T] = a
    c[_F, _S] = c[_S, _F] = b
    return c


def nest_cholesky(cor_tfs, cor_fs):
    """Lower-triangular factor entries of the taxi/fhv/sfhv block.

    Written out explicitly (rather than ``np.linalg.cholesky``) so the
    singular ``cor_fs == 1`` edge stays well defined and it broadcasts over
    arrays of correlation pairs. Returns ``(l21, l22, l31, l32, l33)``.
    """
    a = np.asarray(cor_tfs, float)
    b = np.asarray(cor_fs, float)
    l22 = np.sqrt(np.maximum(1.0 - a * a, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        l32 = np.where(l22 > 0, (b - a * a) / np.where(l22 > 0, l22, 1.0), 0.0)
    l33 = np.sqrt(np.maximum(1.0 - a * a - l32 * l32, 0.0))
    return a, l22, a, l32, l33


def cholesky_factor(params: SimParams) -> np.ndarray:
    l21, l22, l31, l32, l33 = (float(x) for x in nest_cholesky(params.cor_tfs, params.cor_fs))
    lo = np.eye(N_MODES)
    lo[_F, _T], lo[_F, _F] = l21, l22
    lo[_S, _T], lo[_S, _F], lo[_S, _S] = l31, l32, l33
    return lo


def correlate(z: np.ndarray, cor_tfs, cor_fs) -> np.ndarray:
    """Apply the correlation factor to i.i.d. unit normals ``z[..., 6]``.

    ``cor_tfs``/``cor_fs`` may be scalars or arrays broadcasting against
    ``z[..., 0]``.
    """
    l21, l22, l31, l32, l33 = nest_cholesky(cor_tfs, cor_fs)
    out = z.copy()
    zt, zf, zs = z[..., _T], z[..., _F], z[..., _S]
    out[..., _F] = l21 * zt + l22 * zf
    out[..., _S] = l31 * zt + l32 * zf + l33 * zs
    return out


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def draw_epsilon(params: SimParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Preference noise with covariance ``sigma**2 * C``; shape ``(*size, 6)``."""
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (N_MODES,)
    if params.sigma == 0:
        return np.zeros(shape)
    z = rng.standard_normal(shape)
    return params.sigma * correlate(z, params.cor_tfs, params.cor_fs)


def choice_index(log_costs: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Vectorized argmin of ``log_costs + eps`` over the last axis.

    Unavailable modes carry ``+inf`` log cost. Ties go to the lowest mode
    index (``np.argmin`` returns the first minimum).
    """
    if np.any(np.isposinf(np.min(log_costs, axis=-1))):
        raise NoAvailableModeError("no available mode with finite cost")
    return np.argmin(log_costs + eps, axis=-1)


def _as_cost_vector(costs) -> np.ndarray:
    if isinstance(costs, dict):
        v = np.full(N_MODES, math.inf)
        for m, g in costs.items():
            v[Mode.parse(m)] = g
        return v
    v = np.asarray(costs, float)
    if v.shape[-1] != N_MODES:
        raise InvalidInputError(f"expected {N_MODES} mode costs, got shape {v.shape}")
    return v


def _log_costs(g: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(g)


def choose(gen_costs, eps, available=None) -> Mode:
    """Mode minimising ``ln g_m + eps_m`` over the available modes."""
    g = _as_cost_vector(gen_costs).copy()
    if available is not None:
        mask = np.zeros(N_MODES, bool)
        mask[[Mode.parse(m) for m in available]] = True
        g[~mask] = math.inf
    e = _as_cost_vector(eps) if isinstance(eps, dict) else np.asarray(eps, float)
    if np.any(~np.isfinite(e)):
        raise InvalidInputError("noise draws must be finite")
    if not np.any(np.isfinite(g)):
        raise NoAvailableModeError("no available mode with finite cost")
    return Mode(int(choice_index(_log_costs(g), e)))


def estimate_probs_mc(scaled_log_costs, cor_tfs: float, cor_fs: float,
                      n_draws: int, seed: int = 0) -> np.ndarray:
    """Empirical choice frequencies with unit-variance correlated noise.

    ``scaled_log_costs`` is ``ln(g_m) / sigma`` with ``+inf`` for
    unavailable modes. This is the reference oracle for the surrogate.
    """
    s = _as_cost_vector(scaled_log_costs)
    if n_draws < 1:
        raise InvalidInputError("n_draws must be >= 1")
    if not np.any(np.isfinite(s)):
        raise NoAvailableModeError("no available mode with finite cost")
    rng = rng_stream(seed)
    return estimate_probs_mc_batch(s[None, :], np.array([[cor_tfs, cor_fs]]), n_draws, rng)[0]


def estimate_probs_mc_batch(scaled: np.ndarray, cors: np.ndarray, n_draws: int,
                            rng: np.random.Generator, chunk_elems: int = 4_000_000) -> np.ndarray:
    """:func:`estimate_probs_mc` for a batch ``scaled[B, 6]``, ``cors[B, 2]``."""
    scaled = np.asarray(scaled, float)
    cors = np.asarray(cors, float)
    b = scaled.shape[0]
    out = np.empty((b, N_MODES))
    step = max(1, chunk_elems // (n_draws * N_MODES))
    for lo in range(0, b, step):
        hi = min(b, lo + step)
        z = rng.standard_normal((hi - lo, n_draws, N_MODES))
        z = correlate(z, cors[lo:hi, 0, None], cors[lo:hi, 1, None])
        idx = np.argmin(scaled[lo:hi, None, :] + z, axis=-1)
        flat = (np.arange(hi - lo)[:, None] * N_MODES + idx).ravel()
        counts = np.bincount(flat, minlength=(hi - lo) * N_MODES).reshape(hi - lo, N_MODES)
        out[lo:hi] = counts / n_draws
    return out


def simulate_pair(gen_costs_a, gen_costs_b, params: SimParams,
                  rng: np.random.Generator) -> tuple[Mode, Mode]:
    """One traveller under two scenarios with a shared noise draw."""
    eps = draw_epsilon(params, rng)
    return choose(gen_costs_a, eps), choose(gen_costs_b, eps)


def shift_counts(log_a: np.ndarray, log_b: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """6x6 counts of (choice under A, choice under B) for draws ``eps[R, 6]``."""
    ia = choice_index(log_a, eps)
    ib = choice_index(log_b, eps)
    return np.bincount(ia * N_MODES + ib, minlength=N_MODES * N_MODES).reshape(N_MODES, N_MODES)


def simulate_cell(total_trips: float, gen_costs_a, gen_costs_b, params: SimParams,
                  n_reps: int, rng: np.random.Generator) -> np.ndarray:
    """Expected shift matrix ``M[a, b]`` for one cell, scaled to ``total_trips``."""
    if n_reps < 1:
        raise InvalidInputError("n_reps must be >= 1")
    la = _log_costs(_as_cost_vector(gen_costs_a))
    lb = _log_costs(_as_cost_vector(gen_costs_b))
    for lc in (la, lb):
        if not np.any(np.isfinite(lc) | np.isneginf(lc)):
            raise NoAvailableModeError("no available mode with finite cost")
    eps = draw_epsilon(params, rng, n_reps)
    return shift_counts(la, lb, eps) * (float(total_trips) / n_reps)


def simulate_cells(totals: np.ndarray, gen_a: np.ndarray, gen_b: np.ndarray,
                   params: SimParams, n_reps: int, seed: int,
                   param_index: int = 0) -> np.ndarray:
    """Shift matrices for many cells, shape ``(n_cells, 6, 6)``.

    Cell ``i`` draws its noise from ``rng_stream(seed, i, param_index)``, so
    the result for a cell does not depend on which other cells are present
    or in what order they are processed.
    """
    if n_reps < 1:
        raise InvalidInputError("n_reps must be >= 1")
    n = len(totals)
    la, lb = _log_costs(np.asarray(gen_a, float)), _log_costs(np.asarray(gen_b, float))
    for lc in (la, lb):
        ok = np.any(np.isfinite(lc) | np.isneginf(lc), axis=1)
        if not np.all(ok):
            raise NoAvailableModeError(f"no available mode in cell {int(np.argmin(ok))}")
    if params.sigma == 0:
        eps = np.zeros((n, n_reps, N_MODES))
    else:
        z = np.stack([rng_stream(seed, i, param_index).standard_normal((n_reps, N_MODES))
                      for i in range(n)]) if n else np.zeros((0, n_reps, N_MODES))
        eps = params.sigma * correlate(z, params.cor_tfs, params.cor_fs)
    ia = np.argmin(la[:, None, :] + eps, axis=-1)
    ib = np.argmin(lb[:, None, :] + eps, axis=-1)
    flat = (np.arange(n)[:, None] * (N_MODES * N_MODES) + ia * N_MODES + ib).ravel()
    counts = np.bincount(flat, minlength=n * N_MODES * N_MODES).reshape(n, N_MODES, N_MODES)
    return counts * (np.asarray(totals, float) / n_reps)[:, None, None]


def choice_frequencies(gen_costs: np.ndarray, params: SimParams, n_reps: int,
                       seed: int, param_index: int = 0) -> np.ndarray:
    """Per-cell choice frequencies (rows sum to 1) under a single scenario."""
    m = simulate_cells(np.ones(len(gen_costs)), gen_costs, gen_costs, params, n_reps,
                       seed, param_index)
    return m.sum(axis=2)


__all__ = [
    "SimParams", "REFERENCE_PARAMS", "MODES", "correlation_matrix", "cholesky_factor",
    "correlate", "rng_stream", "draw_epsilon", "choose", "estimate_probs_mc",
    "estimate_probs_mc_batch", "simulate_pair", "simulate_cell", "simulate_cells",
    "choice_frequencies", "shift_counts",
]
