"""Gradient statistics and the information / generalization bound calculators.

Per-step terms, with ``c = eta^2 / sigma^2``:

    theta_c(V)  = 1/2 log det(c V + I)                 (covariance form)
    theta_v(V)  = d/2 log(c V / d + 1)                  (variance form)
    lemma2(V)   = c V / 2

For any partition of the coordinates,
``theta_c(V) <= sum_i theta_c(V_i) <= theta_v(tr V) <= theta_v(L)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNoise, InvalidInput, InvalidPartition
from .matrixcore import (
    SymMatrix,
    logdet_shifted,
    logdet_shifted_factor,
    principal_submatrix,
    sample_covariance,
)

FULL_COV_MAX_DIM = 1024

MODES = ("thm2_cov", "thm2_partitioned", "theta_v_var", "lemma2_var", "lemma1_L")


@dataclass
class GradientStats:
    """Statistics of the batch-mean gradient at one step.

    ``cov`` is the full covariance when the dimension allows it. ``factor`` is
    a matrix ``F`` with ``cov = FᵀF``; the block computations fall back to it
    once ``cov`` is dropped.
    """

    step: int
    mean_grad: np.ndarray
    cov: SymMatrix | None
    scalar_var: float
    max_sq_norm: float
    factor: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.mean_grad.size


def grad_stats(per_sample_grads, batch_size: int | None = None, prev_L: float = 0.0, step: int = 0) -> GradientStats:
    """Covariance of the batch-mean gradient estimated from per-sample gradients.

    ``batch_size`` defaults to the number of rows. ``max_sq_norm`` is the
    running maximum of squared per-sample gradient norms, seeded by ``prev_L``.
    """
    g = np.asarray(per_sample_grads, dtype=np.float64)
    b = g.shape[0] if batch_size is None else int(batch_size)
    d = g.shape[1] if g.ndim == 2 else 0
    cov = None
    if d <= FULL_COV_MAX_DIM:
        cov = sample_covariance(g, scale_by_batch=False)
        cov = SymMatrix(cov.data / b, trusted=True)
    elif g.ndim != 2 or g.shape[0] < 2:
        sample_covariance(g)  # raises InsufficientSamples
    gc = g - g.mean(axis=0)
    factor = gc / math.sqrt((g.shape[0] - 1) * b)
    scalar_var = cov.trace() if cov is not None else float(np.sum(factor * factor))
    max_sq = max(float(prev_L), float(np.max(np.sum(g * g, axis=1))))
    return GradientStats(step, g.mean(axis=0), cov, scalar_var, max_sq, factor)


class StepAccumulator:
    """Ordered reduction of aligned per-run statistics for one step.

    Sums full covariances when every run carries one, otherwise stacks the
    factors. Also tracks the across-run spread of per-run mean gradients so
    the variant with the between-run term can be produced.
    """

    def __init__(self):
        self.count = 0
        self.step = 0
        self.cov_sum = None
        self.factors = []
        self.max_sq = 0.0
        self.means = []

    def add(self, s: GradientStats):
        if self.count == 0:
            self.step = s.step
            self.full = s.cov is not None
        self.count += 1
        if self.full and s.cov is not None:
            self.cov_sum = s.cov.data.copy() if self.cov_sum is None else self.cov_sum + s.cov.data
        else:
            self.full = False
            self.cov_sum = None
            self.factors.append(s.factor)
        self.max_sq = max(self.max_sq, s.max_sq_norm)
        self.means.append(s.mean_grad)

    def result(self, include_between: bool = False) -> GradientStats:
        if self.count == 0:
            raise InvalidInput("nothing to average")
        r = self.count
        means = np.array(self.means)
        mean_grad = means.mean(axis=0)
        cov = factor = None
        if self.full:
            cov = self.cov_sum / r
        else:
            factor = np.vstack(self.factors) / math.sqrt(r)
        if include_between and r >= 2:
            if cov is not None:
                cov = cov + sample_covariance(means).data
            else:
                factor = np.vstack([factor, (means - mean_grad) / math.sqrt(r - 1)])
        if cov is not None:
            cov_m = SymMatrix(cov)
            scalar_var = cov_m.trace()
        else:
            cov_m = None
            scalar_var = float(np.sum(factor * factor))
        return GradientStats(self.step, mean_grad, cov_m, scalar_var, self.max_sq, factor)


def average_stats(stats: list[GradientStats], include_between: bool = False) -> GradientStats:
    """Average aligned per-run statistics of one step, in list order.

    With ``include_between`` the across-run covariance of the per-run mean
    gradients is added on top of the averaged within-batch covariance.
    """
    acc = StepAccumulator()
    for s in stats:
        acc.add(s)
    return acc.result(include_between)


def _scale(eta: float, sigma2: float) -> float:
    if not sigma2 > 0:
        raise DegenerateNoise("noise variance must be positive")
    return eta * eta / sigma2


def theta_c(cov, eta: float, sigma2: float) -> float:
    return logdet_shifted(cov, _scale(eta, sigma2))


def theta_v(scalar_var: float, eta: float, sigma2: float, d: int) -> float:
    if scalar_var < 0 or d < 1:
        raise InvalidInput("need scalar_var >= 0 and d >= 1")
    c = _scale(eta, sigma2)
    # np.log1p, as in logdet_shifted, so d = 1 agrees with theta_c bit for bit
    return 0.5 * d * float(np.log1p(c * scalar_var / d))


def lemma2_term(scalar_var: float, eta: float, sigma2: float) -> float:
    return 0.5 * _scale(eta, sigma2) * scalar_var


def check_partition(partition, d: int) -> list[np.ndarray]:
    blocks = [np.asarray(c, dtype=np.int64) for c in partition]
    if not blocks or any(b.size == 0 for b in blocks):
        raise InvalidPartition("partition blocks must be non-empty")
    allidx = np.concatenate(blocks)
    if allidx.size != d or not np.array_equal(np.sort(allidx), np.arange(d)):
        raise InvalidPartition("partition must cover [0, d) disjointly")
    return [np.sort(b) for b in blocks]


def theta_c_partitioned(cov, partition, eta: float, sigma2: float) -> float:
    cov = cov if isinstance(cov, SymMatrix) else SymMatrix(cov)
    blocks = check_partition(partition, cov.dim)
    return float(sum(theta_c(principal_submatrix(cov, b), eta, sigma2) for b in blocks))


def step_term(s: GradientStats, eta: float, sigma2: float, mode: str, partition=None) -> float:
    """Per-step bound term for one of :data:`MODES`."""
    if mode == "thm2_cov":
        if s.cov is None:
            if s.factor is None:
                raise InvalidInput("thm2_cov needs a covariance or its factor")
            return logdet_shifted_factor(s.factor, _scale(eta, sigma2))
        return theta_c(s.cov, eta, sigma2)
    if mode == "thm2_partitioned":
        if partition is None:
            raise InvalidInput("thm2_partitioned needs a partition")
        if s.cov is not None:
            return theta_c_partitioned(s.cov, partition, eta, sigma2)
        blocks = check_partition(partition, s.dim)
        c = _scale(eta, sigma2)
        return float(sum(logdet_shifted_factor(s.factor[:, b], c) for b in blocks))
    if mode == "theta_v_var":
        return theta_v(s.scalar_var, eta, sigma2, s.dim)
    if mode == "lemma2_var":
        return lemma2_term(s.scalar_var, eta, sigma2)
    if mode == "lemma1_L":
        return theta_v(s.max_sq_norm, eta, sigma2, s.dim)
    raise InvalidInput(f"unknown mode {mode!r}")


def sgld_info_bound(stats, eta: float, sigma2: float, mode: str, partition=None) -> float:
    if not stats:
        raise InvalidInput("need at least one step")
    return float(sum(step_term(s, eta, sigma2, mode, partition) for s in stats))


def sgd_hessian_term(steps: int, virtual_sigma2: float, hessian_trace: float) -> float:
    """``1/2 * T * sigma^2 * H`` for a constant virtual noise level."""
    return 0.5 * steps * virtual_sigma2 * hessian_trace


def sgd_info_bound(stats, eta: float, virtual_sigma2: float, hessian_trace_estimate: float, mode: str, partition=None):
    """Returns ``(info_term, hessian_term)`` for SGD's auxiliary process."""
    info = sgld_info_bound(stats, eta, virtual_sigma2, mode, partition)
    return info, sgd_hessian_term(len(stats), virtual_sigma2, hessian_trace_estimate)


def subgaussian_R(batch_losses) -> float:
    """Half the range of the observed batch losses."""
    a = np.asarray(batch_losses, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise InvalidInput("no batch losses")
    return 0.5 * float(a.max() - a.min())


def thm1_bounds(info: float, R: float, n: int) -> tuple[float, float]:
    """Mean and second-moment generalization bounds from an information value.

    Negative information estimates are clamped to zero first.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    i = max(float(info), 0.0)
    return math.sqrt(2.0 * R * R * i / n), 4.0 * R * R * (i + math.log(3.0)) / n


# -- report ------------------------------------------------------------------

REPORT_COLUMNS = (
    "epoch",
    "step",
    "true_gap",
    "R",
    "iws",
    "iwbw",
    "iwbw_term",
    "thm1_from_iws",
    "thm1_from_iwbw",
    "thm1_sq_from_iws",
    "thm1_sq_from_iwbw",
    "theta_c_sum",
    "theta_c_total_sum",
    "theta_c_partitioned_sum",
    "theta_v_sum",
    "theta_v_L_sum",
    "lemma2_sum",
    "sgd_hessian_term",
    "bound_theta_c",
    "bound_theta_c_partitioned",
    "bound_theta_v",
    "bound_theta_v_L",
    "bound_lemma2",
)
INT_COLUMNS = ("epoch", "step")
BOUND_COLUMNS = tuple(c for c in REPORT_COLUMNS if c.startswith(("bound_", "theta_", "lemma2", "thm1_", "sgd_")))


@dataclass
class BoundReport:
    """One row per recorded epoch; missing values are NaN."""

    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    # per-step bound terms of the run that produced the report; not serialized
    step_terms: dict = field(default_factory=dict, compare=False, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def add_row(self, **values):
        unknown = set(values) - set(REPORT_COLUMNS)
        if unknown:
            raise InvalidInput(f"unknown report columns {sorted(unknown)}")
        row = {c: values.get(c, math.nan) for c in REPORT_COLUMNS}
        for c in INT_COLUMNS:
            row[c] = int(row[c])
        self.rows.append(row)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([str(r[c]) if c in INT_COLUMNS else repr(float(r[c])) for c in REPORT_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta=None) -> "BoundReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise InvalidInput("unexpected CSV header")
        rep = cls(meta=dict(meta or {}))
        for line in reader:
            rep.add_row(**{c: (int(v) if c in INT_COLUMNS else float(v)) for c, v in zip(header, line)})
        return rep

    def to_json(self) -> str:
        def enc(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        doc = {
            "columns": list(REPORT_COLUMNS),
            "rows": [[enc(r[c]) for c in REPORT_COLUMNS] for r in self.rows],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        doc = json.loads(text)
        rep = cls(meta=doc.get("meta", {}))
        for vals in doc["rows"]:
            rep.add_row(**{c: (math.nan if v is None else v) for c, v in zip(doc["columns"], vals)})
        return rep
