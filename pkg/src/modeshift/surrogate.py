"""Neural-network surrogate for the six-mode choice probabilities.

The network is a fixed 8 -> 8 -> 12 -> 8 -> 6 perceptron: ReLU hidden layers,
logistic outputs, trained on per-output binary cross-entropy against Monte
Carlo choice frequencies (soft labels).

Input encoding
--------------
The eight inputs are a deterministic transform of the six scaled log costs
``s_m = ln(g_m) / sigma`` and the two correlations:

* six per-mode values: the logit of a nested-logit approximation to the
  correlated-normal choice model (utility ``-k * s``, nest scales
  ``sqrt(1 - cor_tfs)`` and ``sqrt(1 - cor_fs)``), clipped to
  ``[-LOGIT_CLIP, LOGIT_CLIP]`` and shifted to be nonnegative;
* ``cor_tfs`` and ``cor_fs`` unchanged.

A raw cost encoding leaves the small network with a sharp fhv/sfhv boundary
as ``cor_fs -> 1``; with the approximation as input the network only learns a
smooth correction. Unavailable modes enter as logit ``-LOGIT_CLIP`` and are
masked to zero at prediction time.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closed_form import nested_logit
from .core import N_MODES
from .errors import (DivergenceError, InvalidInputError, MissingFileError, ModelFormatError,
                     NoAvailableModeError)
from .simulator import estimate_probs_mc_batch, rng_stream

ARCH = (8, 8, 12, 8, 6)
LOGIT_CLIP = 10.0
MAGIC = b"MSSURR01"
FORMAT_VERSION = 1
ENCODING = "nl-logit-v1"


def probit_logit_scale(n_available: np.ndarray) -> np.ndarray:
    # Logit scale matching normal noise; grows with the choice-set size.
    return 1.18 + 0.04 * (np.asarray(n_available, float) - 2.0)


def approx_probs(scaled: np.ndarray, cors: np.ndarray) -> np.ndarray:
    """Nested-logit approximation used as the network's input features."""
    scaled = np.atleast_2d(np.asarray(scaled, float))
    cors = np.atleast_2d(np.asarray(cors, float))
    avail = np.isfinite(scaled)
    if not np.all(avail.any(axis=1)):
        raise NoAvailableModeError("all modes unavailable")
    lo = np.min(np.where(avail, scaled, np.inf), axis=1, keepdims=True)
    k = probit_logit_scale(avail.sum(axis=1))[:, None]
    v = np.where(avail, -k * (np.where(avail, scaled, 0.0) - lo), -np.inf)
    taus = {"tau_taxi_fhv": np.sqrt(np.clip(1.0 - cors[:, 0], 1e-6, 1.0)),
            "tau_fhv": np.sqrt(np.clip(1.0 - cors[:, 1], 1e-6, 1.0))}
    return nested_logit(v, taus)


def encode(scaled, cors) -> np.ndarray:
    scaled = np.atleast_2d(np.asarray(scaled, float))
    cors = np.atleast_2d(np.asarray(cors, float))
    p = approx_probs(scaled, cors)
    with np.errstate(divide="ignore"):
        lg = np.log(p) - np.log1p(-np.minimum(p, 1.0 - 1e-15))
    x = np.clip(lg, -LOGIT_CLIP, LOGIT_CLIP) + LOGIT_CLIP
    return np.column_stack([x, cors])


@dataclass
class MlpModel:
    weights: list
    biases: list
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @classmethod
    def init(cls, dims=ARCH, seed: int = 0, warm_start: bool = False) -> "MlpModel":
        """He-initialised network, or a near-identity one when ``warm_start``.

        The warm start passes the encoded per-mode logits straight through
        the ReLU layers to the outputs (plus tiny noise to break symmetry),
        so an untrained model already reproduces the input approximation.
        """
        rng = rng_stream(seed, 7)
        ws, bs = [], []
        for i in range(len(dims) - 1):
            if warm_start:
                w = rng.normal(0.0, 1e-3, (dims[i], dims[i + 1]))
                k = min(dims[i], dims[i + 1], dims[0] if i < len(dims) - 2 else dims[-1])
                w[:k, :k] += np.eye(k)
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / dims[i]), (dims[i], dims[i + 1]))
            ws.append(w)
            bs.append(np.zeros(dims[i + 1]))
        if warm_start:
            bs[-1][:] = -LOGIT_CLIP
        return cls(ws, bs, {"seed": seed})

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        dict(self.meta))

    def forward(self, x: np.ndarray) -> list:
        """Activations of every layer; the last entry is the output logits."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[-1]

    def params(self) -> list:
        return self.weights + self.biases


def bce_loss_and_grads(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """Mean per-output binary cross-entropy and its parameter gradients.

    Gradients are returned in the order of :meth:`MlpModel.params`.
    """
    acts = model.forward(x)
    z = acts[-1]
    # softplus(z) - y*z, written stably
    loss = float(np.mean(np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - y * z))
    with np.errstate(over="ignore"):  # exp overflow gives the correct limit 0
        g = (1.0 / (1.0 + np.exp(-z)) - y) / z.size
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * (acts[i] > 0)
    return loss, gw + gb


@dataclass(frozen=True)
class SurrogateSample:
    scaled_log_costs: tuple
    cor_tfs: float
    cor_fs: float
    target_probs: tuple


@dataclass
class SurrogateDataset:
    scaled: np.ndarray   # (n, 6), +inf for unavailable
    cors: np.ndarray     # (n, 2)
    targets: np.ndarray  # (n, 6)

    def __len__(self):
        return len(self.scaled)

    def __getitem__(self, i) -> SurrogateSample:
        return SurrogateSample(tuple(self.scaled[i]), float(self.cors[i, 0]),
                               float(self.cors[i, 1]), tuple(self.targets[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class InputDistribution:
    """Sampling distribution of surrogate inputs.

    Scaled log costs are i.i.d. normal; a share of points carries the
    four-mode availability pattern (fhv and sfhv off) used by the first
    likelihood stage, and another share a random mask.
    """

    cost_mean: float = 0.0
    cost_spread: float = 1.0
    p_four_mode: float = 0.3
    p_random_mask: float = 0.3
    p_mode_off: float = 0.25


def sample_inputs(n: int, rng: np.random.Generator, dist: InputDistribution = InputDistribution()):
    s = rng.normal(dist.cost_mean, dist.cost_spread, (n, N_MODES))
    u = rng.uniform(size=n)
    mask = np.ones((n, N_MODES), bool)
    four = u < dist.p_four_mode
    mask[four, 4:] = False
    rnd = (u >= dist.p_four_mode) & (u < dist.p_four_mode + dist.p_random_mask)
    off = rng.uniform(size=(n, N_MODES)) < dist.p_mode_off
    mask[rnd] = ~off[rnd]
    mask[~mask.any(axis=1), 0] = True
    s[~mask] = np.inf
    a, b = rng.uniform(size=n), rng.uniform(size=n)
    cors = np.column_stack([np.minimum(a, b), np.maximum(a, b)])
    return s, cors


def gen_training_set(n: int, rng: np.random.Generator, oracle_draws: int,
                     dist: InputDistribution = InputDistribution()) -> SurrogateDataset:
    """Sample inputs and label them with Monte Carlo choice frequencies."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if oracle_draws < 1000:
        raise InvalidInputError("oracle_draws must be >= 1000")
    s, cors = sample_inputs(n, rng, dist)
    return SurrogateDataset(s, cors, estimate_probs_mc_batch(s, cors, oracle_draws, rng))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 5e-4
    batch_size: int = 256
    optimizer: str = "adam"   # or "momentum"
    momentum: float = 0.9
    beta2: float = 0.999
    cosine_decay: bool = True
    warm_start: bool = True
    seed: int = 0


# per-output cross-entropy this large means the logits have blown up
DIVERGED_LOSS = 1e3


def train(dataset: SurrogateDataset, config: TrainConfig = TrainConfig(),
          model: MlpModel | None = None) -> MlpModel:
    """Mini-batch training on binary cross-entropy; deterministic given seed."""
    if len(dataset) == 0:
        raise InvalidInputError("empty training set")
    if config.optimizer not in ("adam", "momentum"):
        raise InvalidInputError(f"unknown optimizer {config.optimizer!r}")
    x = encode(dataset.scaled, dataset.cors)
    y = dataset.targets
    model = (model.copy() if model is not None
             else MlpModel.init(ARCH, config.seed, config.warm_start))
    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    rng = rng_stream(config.seed, 11)
    n = len(x)
    step = 0
    history = []
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = bce_loss_and_grads(model, x[idx], y[idx])
            if not loss < DIVERGED_LOSS:
                raise DivergenceError(
                    f"loss {loss:.3g} at epoch {epoch}; try a smaller learning rate")
            total += loss * len(idx)
            step += 1
            for p, g, a, v in zip(params, grads, m1, m2):
                if config.optimizer == "momentum":
                    a *= config.momentum
                    a -= lr * g
                    p += a
                else:
                    a *= 0.9
                    a += 0.1 * g
                    v *= config.beta2
                    v += (1 - config.beta2) * g * g
                    p -= lr * (a / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - config.beta2 ** step)) + 1e-8)
        history.append(total / n)
    model.meta.update({
        "epochs": config.epochs,
        "final_loss": history[-1] if history else None,
        "seed": config.seed,
        "loss_history": history,
        "optimizer": config.optimizer,
        "learning_rate": config.learning_rate,
        "n_train": n,
    })
    return model


def predict_batch(model: MlpModel, scaled, cors) -> np.ndarray:
    """Renormalized network outputs; unavailable modes get exactly 0."""
    scaled = np.atleast_2d(np.asarray(scaled, float))
    cors = np.atleast_2d(np.asarray(cors, float))
    if cors.shape[0] == 1 and scaled.shape[0] > 1:
        cors = np.broadcast_to(cors, (scaled.shape[0], 2))
    avail = np.isfinite(scaled)
    if not np.all(avail.any(axis=1)):
        raise NoAvailableModeError("all modes unavailable")
    z = model.logits(encode(scaled, cors))
    p = np.where(avail, 1.0 / (1.0 + np.exp(-z)), 0.0)
    return p / p.sum(axis=1, keepdims=True)


def predict(model: MlpModel, scaled_log_costs, cor_tfs: float, cor_fs: float) -> np.ndarray:
    return predict_batch(model, np.asarray(scaled_log_costs, float)[None, :],
                         np.array([[cor_tfs, cor_fs]]))[0]


def validate(model, n_points: int, oracle_draws: int, rng: np.random.Generator,
             dist: InputDistribution = InputDistribution()) -> dict:
    """Absolute errors of ``model`` against fresh Monte Carlo labels.

    ``model`` may be an :class:`MlpModel` or any callable
    ``(scaled, cors) -> probs``.
    """
    data = gen_training_set(n_points, rng, oracle_draws, dist)
    if isinstance(model, MlpModel):
        p = predict_batch(model, data.scaled, data.cors)
    else:
        p = np.asarray(model(data.scaled, data.cors))
    err = np.abs(p - data.targets)
    return {"mean_abs_err": float(err.mean()), "max_abs_err": float(err.max()),
            "n_points": n_points, "oracle_draws": oracle_draws}


# --- persistence ------------------------------------------------------------

def model_to_bytes(model: MlpModel) -> bytes:
    dims = model.dims
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(dims) - 1))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = dict(model.meta, encoding=ENCODING, logit_clip=LOGIT_CLIP)
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def model_from_bytes(data: bytes, arch=ARCH) -> MlpModel:
    if data[:8] != MAGIC:
        raise ModelFormatError("not a surrogate model file (bad magic)")
    off = 8
    version, n_layers = struct.unpack_from("<II", data, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    if arch is not None and tuple(dims) != tuple(arch):
        raise ModelFormatError(f"architecture {dims} does not match expected {tuple(arch)}")
    ws, bs = [], []
    for i in range(n_layers):
        nw = dims[i] * dims[i + 1]
        ws.append(np.frombuffer(data, "<f8", nw, off).reshape(dims[i], dims[i + 1]).astype(float))
        off += 8 * nw
        bs.append(np.frombuffer(data, "<f8", dims[i + 1], off).astype(float))
        off += 8 * dims[i + 1]
    (n,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4: off + 4 + n].decode())
    if meta.get("encoding") != ENCODING:
        raise ModelFormatError(f"unknown input encoding {meta.get('encoding')!r}")
    return MlpModel(ws, bs, meta)


def save_model(model: MlpModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MlpModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"model file not found: {path}")
    return model_from_bytes(path.read_bytes())
