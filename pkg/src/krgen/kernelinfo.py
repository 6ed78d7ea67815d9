"""Kernelized Rényi entropy, mutual information and their analytic oracles.

Entropies are von Neumann entropies of trace-one Gram matrices
``K_ij = kappa(x_i, x_j) / m``. Joint quantities use the elementwise
(Schur) product of aligned Gram matrices, rescaled to keep unit trace.

The kernel normalizer ``C`` is carried as ``log C`` because it spans many
orders of magnitude for high-dimensional inputs. Raw mode (no normalizer)
is what the experiment curves use; normalized mode is what the analytic
oracles compare against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import gammaln

from .errors import (
    DegenerateSamples,
    DomainError,
    InvalidInput,
    NotInvertible,
    QuadratureFailure,
)
from .matrixcore import SymMatrix, as_sym, vn_entropy

DEFAULT_QUANTILE = 0.15


@dataclass(frozen=True)
class KernelSpec:
    family: str  # "gaussian" or "box"
    width: float
    input_dim: int

    def __post_init__(self):
        if self.family not in ("gaussian", "box"):
            raise InvalidInput(f"unknown kernel family {self.family!r}")
        if not (self.width > 0 and math.isfinite(self.width)):
            raise InvalidInput("kernel width must be positive and finite")
        if self.input_dim < 1:
            raise InvalidInput("input_dim must be >= 1")

    @property
    def log_normalizer(self) -> float:
        """log C, where C makes the squared kernel integrate to one."""
        d = self.input_dim
        if self.family == "gaussian":
            return -0.5 * d * math.log(math.pi * self.width**2)
        # volume of the radius-c ball in d dimensions
        log_vol = 0.5 * d * math.log(math.pi) + d * math.log(self.width) - gammaln(0.5 * d + 1)
        return -float(log_vol)

    @property
    def normalizer(self) -> float:
        return math.exp(self.log_normalizer)

    def evaluate_sq_dists(self, sq: np.ndarray) -> np.ndarray:
        if self.family == "gaussian":
            return np.exp(-sq / (2.0 * self.width**2))
        return (sq < self.width**2).astype(np.float64)

    def __call__(self, x, y) -> float:
        diff = np.atleast_1d(np.asarray(x, float) - np.asarray(y, float))
        return float(self.evaluate_sq_dists(np.array(diff @ diff)))


def gaussian_kernel(width: float, input_dim: int) -> KernelSpec:
    return KernelSpec("gaussian", float(width), int(input_dim))


@dataclass(frozen=True)
class GramMatrix:
    base: SymMatrix
    kernels: tuple  # KernelSpecs whose product built this matrix

    @property
    def m(self) -> int:
        return self.base.dim

    @property
    def log_normalizer(self) -> float:
        return float(sum(k.log_normalizer for k in self.kernels))


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    m: int
    log_normalizer_applied: bool
    concentration_radius_at_95: float


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidInput("samples must be a 1-D or 2-D array")
    return x


def select_width(samples, quantile: float = DEFAULT_QUANTILE) -> float:
    """Kernel width from the band of largest pairwise distances.

    Returns the mean of all pairwise Euclidean distances at or above the
    ``1 - quantile`` quantile (at least one distance is always kept).
    """
    x = _as_samples(samples)
    if x.shape[0] < 2:
        raise InvalidInput("need at least two samples")
    return top_band_mean(pdist(x), quantile)


def top_band_mean(distances, quantile: float = DEFAULT_QUANTILE) -> float:
    """Mean of the largest ``ceil(quantile * N)`` entries of a distance list."""
    if not 0.0 < quantile < 1.0:
        raise DomainError("quantile must lie in (0, 1)")
    dist = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if dist.size == 0 or dist[-1] == 0.0:
        raise DegenerateSamples("all samples coincide")
    keep = max(1, int(math.ceil(quantile * dist.size - 1e-9)))
    return float(dist[-keep:].mean())


def gram(samples, kernel: KernelSpec) -> GramMatrix:
    x = _as_samples(samples)
    if x.shape[1] != kernel.input_dim:
        raise InvalidInput(f"sample dim {x.shape[1]} != kernel input_dim {kernel.input_dim}")
    m = x.shape[0]
    if m < 1:
        raise InvalidInput("need at least one sample")
    sq = squareform(pdist(x, "sqeuclidean")) if m > 1 else np.zeros((1, 1))
    k = kernel.evaluate_sq_dists(sq)
    np.fill_diagonal(k, 1.0)
    return GramMatrix(SymMatrix(k / m, trusted=True), (kernel,))


def hadamard_joint(*grams: GramMatrix) -> GramMatrix:
    """Gram matrix of the product kernel over paired samples."""
    if not grams:
        raise InvalidInput("need at least one Gram matrix")
    m = grams[0].m
    if any(g.m != m for g in grams):
        raise InvalidInput("Gram matrices have different sample counts")
    # a constant factor (all kernel values equal) is the Hadamard identity
    varying = [g for g in grams if not _is_uniform(g)] or [grams[0]]
    prod = reduce(lambda acc, g: acc * (g.base.data * m), varying[1:], varying[0].base.data.copy())
    kernels = tuple(k for g in grams for k in g.kernels)
    return GramMatrix(SymMatrix(prod, trusted=True), kernels)


def _is_uniform(g: GramMatrix) -> bool:
    d = g.base.data
    return bool(np.all(d == d.flat[0]))


def concentration_radius(m: int, delta: float, c_kappa: float) -> float:
    """Deviation bound ``9 C sqrt(2 log(2/delta)) / m^(1/3)``."""
    if m < 1:
        raise DomainError("m must be >= 1")
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    if not c_kappa > 0:
        raise DomainError("normalizer must be positive")
    return 9.0 * c_kappa * math.sqrt(2.0 * math.log(2.0 / delta)) / np.cbrt(m)


def gram_entropy(g: GramMatrix, apply_normalizer: bool = False) -> float:
    # uniform Gram matrix: spectrum is exactly {1, 0, ..., 0}
    raw = 0.0 if _is_uniform(g) else vn_entropy(g.base)
    if apply_normalizer:
        return math.exp(g.log_normalizer) * raw
    return raw


def entropy_estimate(samples, kernel: KernelSpec, apply_normalizer: bool = True) -> EntropyEstimate:
    x = _as_samples(samples)
    if x.shape[0] < 2:
        raise InvalidInput("need at least two samples")
    g = gram(x, kernel)
    c = kernel.normalizer if apply_normalizer else 1.0
    return EntropyEstimate(
        value=gram_entropy(g, apply_normalizer),
        m=g.m,
        log_normalizer_applied=apply_normalizer,
        concentration_radius_at_95=concentration_radius(g.m, 0.05, c),
    )


def _paired(*arrays):
    xs = [_as_samples(a) for a in arrays]
    m = xs[0].shape[0]
    if any(x.shape[0] != m for x in xs):
        raise InvalidInput("paired samples have different counts")
    if m < 2:
        raise InvalidInput("need at least two paired samples")
    return xs


def mi_from_grams(gx: GramMatrix, gy: GramMatrix, apply_normalizer: bool = False) -> float:
    hx = gram_entropy(gx, apply_normalizer)
    hy = gram_entropy(gy, apply_normalizer)
    hxy = gram_entropy(hadamard_joint(gx, gy), apply_normalizer)
    return hx + hy - hxy


def mi_estimate(x_samples, y_samples, kx: KernelSpec, ky: KernelSpec, apply_normalizer: bool = False) -> float:
    """``S(X) + S(Y) - S(X, Y)`` from paired samples."""
    x, y = _paired(x_samples, y_samples)
    return mi_from_grams(gram(x, kx), gram(y, ky), apply_normalizer)


def cond_mi_from_grams(gx: GramMatrix, gy: GramMatrix, gz: GramMatrix, apply_normalizer: bool = False) -> float:
    def h(*gs):
        return gram_entropy(hadamard_joint(*gs), apply_normalizer)

    return h(gx, gz) + h(gy, gz) - h(gz) - h(gx, gy, gz)


def cond_mi_estimate(x_samples, y_samples, z_samples, kernels: Sequence[KernelSpec], apply_normalizer: bool = False) -> float:
    """``I(X; Y | Z) = S(X,Z) + S(Y,Z) - S(Z) - S(X,Y,Z)``."""
    x, y, z = _paired(x_samples, y_samples, z_samples)
    kx, ky, kz = kernels
    return cond_mi_from_grams(gram(x, kx), gram(y, ky), gram(z, kz), apply_normalizer)


def auto_kernel(samples, quantile: float = DEFAULT_QUANTILE) -> tuple[np.ndarray, KernelSpec]:
    """Center samples on their mean and pick a Gaussian width for them.

    Degenerate (all-identical) samples get a unit width; their Gram matrix is
    all-ones regardless.
    """
    x = _as_samples(samples)
    x = x - x.mean(axis=0)
    try:
        width = select_width(x, quantile)
    except DegenerateSamples:
        width = 1.0
    return x, gaussian_kernel(width, x.shape[1])


def gaussian_closed_form(cov, sigma_kappa: float) -> float:
    """Kernelized entropy of ``N(0, cov)`` under a Gaussian kernel.

    ``d/2 log(2 pi e) + 1/2 log|cov| + sigma^2/4 tr(cov^-1)``.
    """
    if sigma_kappa < 0:
        raise DomainError("kernel width must be nonnegative")
    s = as_sym(cov)
    w = s.eigenvalues()
    if w[-1] <= 1e-14 * max(1.0, abs(w[0])):
        raise NotInvertible("covariance is singular")
    d = s.dim
    return float(
        0.5 * d * math.log(2 * math.pi * math.e)
        + 0.5 * np.sum(np.log(w))
        + 0.25 * sigma_kappa**2 * np.sum(1.0 / w)
    )


def _simpson_weights(n: int, h: float) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson's rule needs an odd number (>= 3) of points")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def quadrature_entropy_1d(
    pdf: Callable[[np.ndarray], np.ndarray],
    kernel: KernelSpec,
    support: tuple[float, float],
    points: int = 2001,
) -> float:
    """Kernelized entropy of a 1-D density by direct double integration.

    Evaluates ``-C ∬ p(x) log p(x') kappa(x, x')^2 dx dx'`` with composite
    Simpson weights on a square grid over ``support``.
    """
    if kernel.input_dim != 1:
        raise InvalidInput("quadrature oracle is one-dimensional")
    points = max(int(points), 2001)
    if points % 2 == 0:
        points += 1
    a, b = map(float, support)
    grid = np.linspace(a, b, points)
    w = _simpson_weights(points, (b - a) / (points - 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.asarray(pdf(grid), dtype=np.float64)
        logp = np.log(p)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(logp))):
        raise QuadratureFailure("density must be positive and finite on the support")
    k2 = kernel.evaluate_sq_dists((grid[:, None] - grid[None, :]) ** 2) ** 2
    inner = k2 @ (w * logp)
    total = np.dot(w * p, inner)
    val = -kernel.normalizer * total
    if not math.isfinite(val):
        raise QuadratureFailure("integral is not finite")
    return float(val)
