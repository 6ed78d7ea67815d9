import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krgen.errors import DegenerateSamples, DomainError, InvalidInput, NotInvertible, QuadratureFailure
from krgen.kernelinfo import (
    KernelSpec,
    auto_kernel,
    concentration_radius,
    cond_mi_estimate,
    entropy_estimate,
    gaussian_closed_form,
    gaussian_kernel,
    gram,
    gram_entropy,
    hadamard_joint,
    mi_estimate,
    mi_from_grams,
    quadrature_entropy_1d,
    select_width,
    top_band_mean,
)


def normal_pdf(sd=1.0):
    return lambda x: np.exp(-0.5 * (x / sd) ** 2) / (sd * np.sqrt(2 * np.pi))


def raw_mi(x, y):
    return mi_from_grams(gram(*auto_kernel(x)), gram(*auto_kernel(y)))


def test_kernel_normalization():
    k = gaussian_kernel(0.7, 3)
    assert k([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert k.log_normalizer == pytest.approx(-1.5 * math.log(math.pi * 0.49))
    box = KernelSpec("box", 2.0, 2)
    assert box.normalizer == pytest.approx(1 / (math.pi * 4))
    assert box([0, 0], [0, 1.9]) == 1.0 and box([0, 0], [0, 2.1]) == 0.0


def test_select_width_examples():
    assert select_width([[0.0], [3.0]], 0.5) == 3.0
    assert top_band_mean(np.arange(1.0, 11.0), 0.2) == 9.5
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 4))
    assert select_width(7.0 * x) == pytest.approx(7.0 * select_width(x), rel=1e-12)
    with pytest.raises(DegenerateSamples):
        select_width(np.ones((5, 2)))
    with pytest.raises(DomainError):
        select_width(x, 1.5)


def test_gram_examples():
    k = gaussian_kernel(1.0, 2)
    assert np.array_equal(gram([[1.0, 1.0], [1.0, 1.0]], k).base.data, np.full((2, 2), 0.5))
    g = gram([[0.0, 0.0], [math.sqrt(2), 0.0]], k)
    assert g.base.data[0, 1] == pytest.approx(0.183940, abs=1e-6)
    box = KernelSpec("box", 0.5, 1)
    assert np.array_equal(gram([[0.0], [1.0], [3.0]], box).base.data, np.eye(3) / 3)
    with pytest.raises(InvalidInput):
        gram(np.zeros((3, 3)), k)


def test_gram_trace_and_psd():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal((int(rng.integers(1, 60)), 3))
        g = gram(x, gaussian_kernel(rng.uniform(0.1, 3), 3))
        assert abs(g.base.trace() - 1.0) <= 1e-12
        assert np.linalg.eigvalsh(g.base.data).min() >= -1e-12


def test_hadamard_joint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 2))
    a = gram(x, gaussian_kernel(1.0, 2))
    ones = gram(np.zeros((40, 1)), gaussian_kernel(1.0, 1))
    assert np.array_equal(hadamard_joint(a, ones).base.data, a.base.data)
    ident = gram(np.arange(5.0)[:, None] * 100, gaussian_kernel(0.1, 1))
    assert np.allclose(hadamard_joint(ident, ident).base.data, np.eye(5) / 5)
    b = gram(x[:, :1] + rng.standard_normal((40, 1)), gaussian_kernel(0.8, 1))
    j = hadamard_joint(a, b)
    assert abs(j.base.trace() - 1) <= 1e-12
    assert np.linalg.eigvalsh(j.base.data).min() >= -1e-12
    with pytest.raises(InvalidInput):
        hadamard_joint(a, gram(x[:10], gaussian_kernel(1.0, 2)))


def test_entropy_examples():
    k = gaussian_kernel(0.5, 2)
    assert entropy_estimate([[1.0, 2.0], [1.0, 2.0]], k).value == 0.0
    far = np.arange(20.0)[:, None] * 1e3 * np.ones((1, 2))
    assert entropy_estimate(far, k, apply_normalizer=False).value == pytest.approx(math.log(20), abs=1e-9)
    x = np.random.default_rng(3).standard_normal((2000, 1))
    k1 = gaussian_kernel(0.5, 1)
    est = entropy_estimate(x, k1)
    assert abs(est.value - gaussian_closed_form(np.eye(1), 0.5)) <= est.concentration_radius_at_95


def test_raw_entropy_range():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = int(rng.integers(2, 80))
        x = rng.standard_normal((m, 3))
        v = entropy_estimate(x, gaussian_kernel(rng.uniform(0.05, 5), 3), apply_normalizer=False).value
        assert -1e-12 <= v <= math.log(m) + 1e-9


def test_concentration_radius():
    r = concentration_radius(1000, 0.05, 1.0)
    assert r == pytest.approx(0.9 * math.sqrt(2 * math.log(40.0)), rel=1e-15)
    # commonly quoted as 2.444591; the exact value is 2.4445827
    assert r == pytest.approx(2.444591, abs=1e-5)
    assert concentration_radius(8000, 0.05, 1.0) == pytest.approx(concentration_radius(1000, 0.05, 1.0) / 2)
    with pytest.raises(DomainError):
        concentration_radius(10, 2.0, 1.0)
    with pytest.raises(DomainError):
        concentration_radius(0, 0.05, 1.0)


def test_closed_form_examples():
    assert gaussian_closed_form(np.eye(2), 0.0) == pytest.approx(2.837877, abs=1e-6)
    assert gaussian_closed_form(np.array([[4.0]]), 1.0) == pytest.approx(2.174586, abs=1e-6)
    # the worked N(0,1), sigma=0.5 value: 0.5*log(2*pi*e) + 0.0625
    assert gaussian_closed_form(np.eye(1), 0.5) == pytest.approx(1.4814385, abs=1e-7)
    with pytest.raises(NotInvertible):
        gaussian_closed_form(np.zeros((2, 2)), 0.5)


@pytest.mark.parametrize("var,width", [(1.0, 0.5), (4.0, 1.0), (0.25, 0.3), (2.0, 0.1)])
def test_quadrature_matches_closed_form(var, width):
    sd = math.sqrt(var)
    q = quadrature_entropy_1d(normal_pdf(sd), gaussian_kernel(width, 1), (-8 * sd, 8 * sd))
    assert q == pytest.approx(gaussian_closed_form(np.array([[var]]), width), abs=1e-3)


def test_quadrature_uniform_and_scaling():
    k = gaussian_kernel(0.002, 1)
    u = quadrature_entropy_1d(lambda x: np.ones_like(x), k, (0.0, 1.0), points=4001)
    assert abs(u) < 1e-2
    s = 3.0
    a = quadrature_entropy_1d(normal_pdf(1.0), gaussian_kernel(0.05, 1), (-8, 8), points=4001)
    b = quadrature_entropy_1d(normal_pdf(s), gaussian_kernel(0.05, 1), (-8 * s, 8 * s), points=4001)
    assert b - a == pytest.approx(math.log(s), abs=1e-3)


def test_quadrature_failure():
    with pytest.raises(QuadratureFailure):
        quadrature_entropy_1d(lambda x: np.where(x > 0, np.nan, 1.0), gaussian_kernel(0.5, 1), (-1, 1))


def test_mi_constant_and_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 3))
    kx = gaussian_kernel(1.5, 3)
    assert mi_estimate(x, np.zeros((50, 1)), kx, gaussian_kernel(1.0, 1)) == 0.0
    y = x[:, :1] + rng.standard_normal((50, 1))
    ky = gaussian_kernel(1.0, 1)
    gx, gy = gram(x, kx), gram(y, ky)
    direct = gram_entropy(gx) + gram_entropy(gy) - gram_entropy(hadamard_joint(gx, gy))
    assert mi_estimate(x, y, kx, ky) == direct
    with pytest.raises(InvalidInput):
        mi_estimate(x, y[:10], kx, ky)


def test_mi_nonnegative_many():
    rng = np.random.default_rng(6)
    for _ in range(200):
        m = int(rng.integers(2, 60))
        x = rng.standard_normal((m, int(rng.integers(1, 5))))
        y = rng.standard_normal((m, int(rng.integers(1, 5)))) + rng.uniform(0, 2) * x[:, :1]
        kx = gaussian_kernel(rng.uniform(0.05, 4), x.shape[1])
        ky = gaussian_kernel(rng.uniform(0.05, 4), y.shape[1])
        assert mi_estimate(x, y, kx, ky) >= -1e-9


def test_mi_independent_envelope():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        v = raw_mi(rng.standard_normal((500, 1)), rng.standard_normal((500, 1)))
        assert 0.0 <= v <= 0.15


def test_mi_increases_with_correlation():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((500, 2))
    vals = []
    for rho in (0.0, 0.5, 0.9):
        x = z[:, :1]
        y = rho * z[:, :1] + math.sqrt(1 - rho * rho) * z[:, 1:]
        vals.append(raw_mi(x, y))
    assert vals[0] < vals[1] < vals[2]


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    x, y, z = rng.standard_normal((60, 2)), rng.standard_normal((60, 1)), rng.standard_normal((60, 3))
    y = y + x[:, :1]
    ks = [gaussian_kernel(1.0, 2), gaussian_kernel(0.7, 1), gaussian_kernel(1.3, 3)]
    p = rng.permutation(60)
    assert mi_estimate(x[p], y[p], ks[0], ks[1]) == pytest.approx(mi_estimate(x, y, ks[0], ks[1]), abs=1e-10)
    assert cond_mi_estimate(x[p], y[p], z[p], ks) == pytest.approx(cond_mi_estimate(x, y, z, ks), abs=1e-10)
    assert entropy_estimate(x[p], ks[0]).value == pytest.approx(entropy_estimate(x, ks[0]).value, abs=1e-10)


def test_data_processing_envelope():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((300, 1))
        y = x + 0.5 * rng.standard_normal((300, 1))
        z = y + 0.5 * rng.standard_normal((300, 1))
        assert raw_mi(x, y) >= raw_mi(x, z) - 0.05


def test_cond_mi_examples():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((80, 2))
    y = x[:, :1] + 0.3 * rng.standard_normal((80, 1))
    kx, ky, kz = gaussian_kernel(1.2, 2), gaussian_kernel(0.9, 1), gaussian_kernel(1.0, 1)
    const = np.zeros((80, 1))
    assert cond_mi_estimate(x, y, const, [kx, ky, kz]) == mi_estimate(x, y, kx, ky)
    assert cond_mi_estimate(x, const, y, [kx, kz, ky]) == 0.0
    with pytest.raises(InvalidInput):
        cond_mi_estimate(x, y, const[:5], [kx, ky, kz])


def test_markov_conditional_envelope():
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        x = rng.standard_normal((300, 1))
        y = x + 0.5 * rng.standard_normal((300, 1))
        z = y + 0.5 * rng.standard_normal((300, 1))
        (xs, kx), (ys, ky), (zs, kz) = auto_kernel(x), auto_kernel(y), auto_kernel(z)
        assert cond_mi_estimate(xs, zs, ys, [kx, kz, ky]) <= 0.05


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_mi_symmetric(m, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((m, 2)), rng.standard_normal((m, 1))
    kx, ky = gaussian_kernel(1.0, 2), gaussian_kernel(0.5, 1)
    assert mi_estimate(x, y, kx, ky) == pytest.approx(mi_estimate(y, x, ky, kx), abs=1e-12)
