"""Dense symmetric linear algebra used by the estimators and bound calculators.

Everything here is a pure function of its inputs. Eigenvalues are always
reported in descending order, and logs are natural logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientSamples,
    InvalidMatrix,
    InvalidPartition,
    NotPSD,
    NotTraceNormalized,
)

# relative tolerance below which negative eigenvalues count as round-off
PSD_CLAMP_RTOL = 1e-6
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class SymMatrix:
    """Dense symmetric matrix with a lazily cached eigendecomposition.

    The upper triangle of ``entries`` is authoritative; the lower triangle is
    overwritten by its mirror so symmetry holds exactly.
    """

    __slots__ = ("data", "_eigvals", "_eig")

    def __init__(self, entries, *, trusted=False):
        a = np.array(entries, dtype=np.float64, copy=True)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise InvalidMatrix(f"expected a non-empty square matrix, got shape {a.shape}")
        if not trusted:
            iu = np.triu_indices(a.shape[0], 1)
            a[(iu[1], iu[0])] = a[iu]
        a.setflags(write=False)
        self.data = a
        self._eigvals = None
        self._eig = None

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.data))

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues in descending order (cached)."""
        if self._eigvals is None:
            _check_finite(self.data)
            if self._eig is not None:
                self._eigvals = self._eig.eigenvalues
            else:
                self._eigvals = np.linalg.eigvalsh(self.data)[::-1].copy()
        return self._eigvals

    def eigen(self) -> "EigenDecomp":
        if self._eig is None:
            self._eig = sym_eigen(self)
            self._eigvals = self._eig.eigenvalues
        return self._eig

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"SymMatrix(dim={self.dim})"


@dataclass(frozen=True)
class EigenDecomp:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def as_sym(a) -> SymMatrix:
    return a if isinstance(a, SymMatrix) else SymMatrix(a)


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix("matrix has non-finite entries")


def sym_eigen(s, method: str = "lapack") -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix.

    ``method="lapack"`` uses the LAPACK divide-and-conquer driver and is the
    default; ``method="jacobi"`` runs the cyclic Jacobi iteration in
    :func:`jacobi_eigen`, which is slower but fully self-contained.
    """
    s = as_sym(s)
    _check_finite(s.data)
    if method == "jacobi":
        w, q = jacobi_eigen(s.data)
    elif method == "lapack":
        w, q = np.linalg.eigh(s.data)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    return EigenDecomp(w[order], q[:, order])


def jacobi_eigen(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigenvalue iteration for a symmetric matrix.

    Sweeps over all (p, q) pairs in row order, annihilating each off-diagonal
    entry with a Givens rotation, until the off-diagonal Frobenius norm falls
    below ``tol * ||A||_F``.

    Returns:
        (eigenvalues, eigenvectors) in the order they sit on the diagonal.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v
    target = tol * scale
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-150 * max(abs(diff), 1.0):
                    # rotation angle underflows; the entry is already negligible
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = diff / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :]
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def clamped_eigenvalues(s) -> np.ndarray:
    """Eigenvalues with round-off negatives set to zero; raises on real negatives."""
    w = as_sym(s).eigenvalues()
    floor = -PSD_CLAMP_RTOL * max(1.0, float(w[0]))
    if w[-1] < floor:
        raise NotPSD(f"eigenvalue {w[-1]:.3e} below tolerance {floor:.3e}")
    return np.maximum(w, 0.0)


def vn_entropy(k) -> float:
    """Von Neumann entropy ``-sum(l * log l)`` of a trace-one PSD matrix."""
    k = as_sym(k)
    tr = k.trace()
    if not abs(tr - 1.0) <= 1e-6:
        raise NotTraceNormalized(f"trace is {tr!r}, expected 1")
    w = np.minimum(clamped_eigenvalues(k), 1.0)
    w = w[w > 0.0]
    return float(-np.sum(w * np.log(w)))


def logdet_shifted(a, c: float) -> float:
    """``0.5 * log det(c A + I)`` for PSD ``A`` and ``c >= 0``."""
    if c < 0:
        raise ValueError("shift scale must be nonnegative")
    w = clamped_eigenvalues(a)
    return float(0.5 * np.sum(np.log1p(c * w)))


def logdet_shifted_factor(x, c: float) -> float:
    """``0.5 * log det(c XᵀX + I)`` evaluated through the smaller Gram side.

    Uses ``det(I_d + c XᵀX) = det(I_r + c X Xᵀ)`` so a rank-r covariance over
    many coordinates never has to be formed.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidMatrix("factor must be a 2-D array")
    g = x @ x.T if x.shape[0] <= x.shape[1] else x.T @ x
    return logdet_shifted(SymMatrix(g), c)


def principal_submatrix(a, idx) -> SymMatrix:
    a = as_sym(a)
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.size == 0:
        raise InvalidPartition("index set must be a non-empty 1-D sequence")
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidPartition("indices must be integers")
    if idx[0] < 0 or idx[-1] >= a.dim or np.any(np.diff(idx) <= 0):
        raise InvalidPartition("indices must be strictly increasing and within range")
    return SymMatrix(a.data[np.ix_(idx, idx)], trusted=True)


def sample_covariance(vectors, scale_by_batch: bool = False) -> SymMatrix:
    """Unbiased sample covariance of row vectors.

    With ``scale_by_batch`` the result is further divided by the number of
    vectors, giving the covariance of their mean.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientSamples("need at least two vectors of equal dimension")
    b = x.shape[0]
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / (b - 1)
    if scale_by_batch:
        cov /= b
    return SymMatrix(cov)
