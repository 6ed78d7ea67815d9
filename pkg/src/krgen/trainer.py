"""SGD / SGLD training loops with full trajectory recording.

Update rule: ``W_t = W_{t-1} - eta * mean_i grad l(W_{t-1}, z_i) + xi_t`` with
``xi_t ~ N(0, sigma2 I)`` for SGLD and ``xi_t = 0`` for SGD.

Random streams: the master seed is expanded with ``numpy.random.SeedSequence``
into four children, used in this order:

    0. parameter initialization
    1. per-epoch shuffling
    2. SGLD noise
    3. auxiliary (virtual) noise for SGD, see :func:`attach_auxiliary`

so each component replays independently of the others.

Trajectory files
----------------
``save_trajectory`` writes ``<path>`` (binary) and ``<path>.json`` (config
sidecar). The binary file is the 8-byte magic ``KRGTRAJ1`` followed by
sections; every section is a little-endian uint64 element count ``n`` and
then ``n`` little-endian float64 values. An empty section stands for a
missing field. Section order:

    header       [version, d, n_records, n_epochs, batch_size, has_auxiliary]
    w0           initial parameters (d)
    per record, seven sections:
        meta         [t, batch_loss]
        batch        batch indices
        w_prev       W_{t-1} (d or empty)
        w            W_t (d or empty)
        grads        per-sample gradients, row-major (b*d or empty)
        noise        xi_t (d or empty)
        delta        auxiliary offset Delta_t (d or empty)
    w_final      W_T (d)
    train_loss   per-epoch full training loss
    test_loss    per-epoch test loss (may be empty)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError, DivergedTraining, FormatError, InvalidInput
from .nnet import LossSpec, MlpModel, forward, init_mlp, per_sample_gradients

STREAM_INIT, STREAM_SHUFFLE, STREAM_NOISE, STREAM_AUX = range(4)
TRAJ_MAGIC = b"KRGTRAJ1"
TRAJ_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "sgld"
    eta: float = 0.001
    sigma2: float = 1e-3
    epochs: int = 50
    batch_size: int = 10
    seed: int = 0
    record_every: int = 1
    loss: str = "mse"

    def validate(self, n: int | None = None):
        if self.algorithm not in ("sgd", "sgld"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.algorithm == "sgld" and not self.sigma2 > 0:
            raise ConfigError("sgld requires sigma2 > 0")
        if self.algorithm == "sgd" and self.sigma2 != 0:
            raise ConfigError("sgd requires sigma2 == 0 (virtual noise is configured separately)")
        if self.epochs < 0 or self.batch_size < 1 or self.record_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and record_every >= 1 required")
        if n is not None:
            if n < self.batch_size:
                raise ConfigError("dataset smaller than one batch")
            if n % self.batch_size:
                raise ConfigError(f"dataset size {n} is not divisible by batch size {self.batch_size}")
        return self


def seed_streams(seed) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


@dataclass
class StepRecord:
    t: int
    batch: np.ndarray
    loss: float
    w_prev: np.ndarray | None = None
    w: np.ndarray | None = None
    grads: np.ndarray | None = None
    noise: np.ndarray | None = None
    delta: np.ndarray | None = None


@dataclass
class Trajectory:
    config: TrainConfig
    w0: np.ndarray
    records: list = field(default_factory=list)
    w_final: np.ndarray | None = None
    train_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    test_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    layer_sizes: tuple = ()

    @property
    def n_steps(self) -> int:
        return len(self.records)


def sgld_step(params, grads, eta: float, sigma2: float, rng: np.random.Generator | None):
    """One update. Returns ``(new_params, noise)``; ``sigma2 = 0`` is plain SGD."""
    if sigma2 < 0:
        raise InvalidInput("sigma2 must be nonnegative")
    g = np.asarray(grads, dtype=np.float64)
    g = g.mean(axis=0) if g.ndim == 2 else g
    if not np.all(np.isfinite(g)):
        raise DivergedTraining("non-finite gradient")
    if sigma2 > 0:
        noise = rng.standard_normal(params.shape) * np.sqrt(sigma2)
    else:
        noise = np.zeros_like(params)
    return params - eta * g + noise, noise


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffle ``range(n)`` and cut it into rows of ``batch_size`` indices."""
    return rng.permutation(n).reshape(-1, batch_size)


def run_training(
    model: MlpModel,
    dataset: Dataset,
    config: TrainConfig,
    test_set: Dataset | None = None,
    initialize: bool = True,
    step_hook=None,
) -> Trajectory:
    """Train ``model`` on ``dataset`` and record every step.

    ``initialize`` draws W_0 from the init stream; otherwise ``model.params``
    is used as W_0. Parameters, gradients and noise are stored on steps where
    ``t % record_every == 0`` (t counts from 1) and on the last step of each
    epoch. ``step_hook(record, grads)`` is called on every step with the full
    per-sample gradients, whether stored or not.
    """
    n = len(dataset)
    config.validate(n)
    loss = LossSpec(config.loss)
    rng_init, rng_shuffle, rng_noise, _ = seed_streams(config.seed)
    w = init_mlp(model.layer_sizes, rng_init, model.bias).params if initialize else np.array(model.params, float)
    traj = Trajectory(config=config, w0=w.copy(), layer_sizes=model.layer_sizes)
    sigma2 = config.sigma2 if config.algorithm == "sgld" else 0.0
    train_losses, test_losses = [], []
    t = 0
    for _ in range(config.epochs):
        batches = epoch_batches(n, config.batch_size, rng_shuffle)
        for j, idx in enumerate(batches):
            t += 1
            # overflow is caught below as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                grads, losses = per_sample_gradients(
                    model, dataset.x[idx], dataset.y[idx], loss, flat=w, return_losses=True
                )
            try:
                w_new, noise = sgld_step(w, grads, config.eta, sigma2, rng_noise)
            except DivergedTraining as exc:
                raise DivergedTraining(f"{exc} at step {t}", step=t) from exc
            if not np.all(np.isfinite(w_new)):
                raise DivergedTraining(f"non-finite parameters at step {t}", step=t)
            rec = StepRecord(t=t, batch=idx, loss=float(losses.mean()))
            if t % config.record_every == 0 or j == len(batches) - 1:
                rec.w_prev, rec.w, rec.grads, rec.noise = w, w_new, grads, noise
            if step_hook is not None:
                step_hook(rec, grads)
            traj.records.append(rec)
            w = w_new
        train_losses.append(forward(model, dataset.x, dataset.y, loss, flat=w)[1])
        if test_set is not None:
            test_losses.append(forward(model, test_set.x, test_set.y, loss, flat=w)[1])
    traj.w_final = w
    traj.train_loss = np.array(train_losses)
    traj.test_loss = np.array(test_losses)
    return traj


def attach_auxiliary(trajectory: Trajectory, virtual_sigma2: float, seed=None) -> Trajectory:
    """Fill ``delta`` on every record: ``Delta_t = Delta_{t-1} + xi~_t``.

    The virtual noise is drawn from the auxiliary stream of ``seed`` (default:
    the trajectory's own seed), so repeated calls are idempotent.
    """
    if trajectory.config.algorithm != "sgd":
        raise InvalidInput("the auxiliary process is defined for sgd trajectories only")
    if virtual_sigma2 < 0:
        raise InvalidInput("virtual_sigma2 must be nonnegative")
    rng = seed_streams(trajectory.config.seed if seed is None else seed)[STREAM_AUX]
    d = trajectory.w0.size
    delta = np.zeros(d)
    scale = np.sqrt(virtual_sigma2)
    for rec in trajectory.records:
        delta = delta + rng.standard_normal(d) * scale
        rec.delta = delta
    return trajectory


def auxiliary_params(rec: StepRecord) -> np.ndarray:
    """The perturbed iterate W~_t = W_t + Delta_t."""
    return rec.w + rec.delta


# -- serialization -----------------------------------------------------------


def _pack(values) -> bytes:
    a = np.zeros(0) if values is None else np.ascontiguousarray(values, dtype="<f8").reshape(-1)
    return struct.pack("<Q", a.size) + a.tobytes()


def save_trajectory(traj: Trajectory, path):
    path = Path(path)
    d = traj.w0.size
    has_aux = int(bool(traj.records) and traj.records[0].delta is not None)
    header = [TRAJ_VERSION, d, len(traj.records), len(traj.train_loss), traj.config.batch_size, has_aux]
    parts = [TRAJ_MAGIC, _pack(header), _pack(traj.w0)]
    for r in traj.records:
        parts += [
            _pack([r.t, r.loss]),
            _pack(r.batch),
            _pack(r.w_prev),
            _pack(r.w),
            _pack(r.grads),
            _pack(r.noise),
            _pack(r.delta),
        ]
    parts += [_pack(traj.w_final), _pack(traj.train_loss), _pack(traj.test_loss)]
    path.write_bytes(b"".join(parts))
    sidecar = {"config": asdict(traj.config), "layer_sizes": list(traj.layer_sizes)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def section(self):
        if self.pos + 8 > len(self.raw):
            raise FormatError("truncated section length", self.pos)
        (n,) = struct.unpack_from("<Q", self.raw, self.pos)
        start = self.pos + 8
        end = start + 8 * n
        if end > len(self.raw):
            raise FormatError(f"truncated section of {n} values", self.pos)
        self.pos = end
        return np.frombuffer(self.raw, dtype="<f8", count=n, offset=start).astype(np.float64)


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise FormatError("bad trajectory magic", 0)
    side = json.loads(Path(str(path) + ".json").read_text())
    config = TrainConfig(**side["config"])
    rd = _Reader(raw)
    rd.pos = 8
    header = rd.section()
    if header.size != 6 or int(header[0]) != TRAJ_VERSION:
        raise FormatError("unsupported trajectory header", 8)
    d, n_rec = int(header[1]), int(header[2])

    def opt(a, shape=None):
        if a.size == 0:
            return None
        return a.reshape(shape) if shape else a

    traj = Trajectory(config=config, w0=rd.section(), layer_sizes=tuple(side["layer_sizes"]))
    for _ in range(n_rec):
        meta = rd.section()
        batch = rd.section().astype(np.int64)
        rec = StepRecord(t=int(meta[0]), batch=batch, loss=float(meta[1]))
        rec.w_prev = opt(rd.section())
        rec.w = opt(rd.section())
        rec.grads = opt(rd.section(), (batch.size, d))
        rec.noise = opt(rd.section())
        rec.delta = opt(rd.section())
        traj.records.append(rec)
    traj.w_final = rd.section()
    traj.train_loss = rd.section()
    traj.test_loss = rd.section()
    if rd.pos != len(raw):
        raise FormatError("trailing bytes after trajectory", rd.pos)
    return traj
