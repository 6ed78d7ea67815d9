"""Quick oracle and property checks runnable from an installed package.

Each check returns ``(ok, detail)``. The full suites live in ``tests/``; these
are the cheap versions used by ``krgen selftest``.
"""

from __future__ import annotations

import numpy as np

from . import bounds as B
from .kernelinfo import (
    auto_kernel,
    concentration_radius,
    entropy_estimate,
    gaussian_closed_form,
    gaussian_kernel,
    gram,
    gram_entropy,
    hadamard_joint,
    mi_from_grams,
    quadrature_entropy_1d,
)
from .matrixcore import principal_submatrix, sym_eigen
from .nnet import (
    MSE,
    forward,
    hessian_trace_exact_fd,
    hessian_trace_hutchinson,
    init_mlp,
    per_sample_gradients,
)
from .trainer import STREAM_AUX, TrainConfig, attach_auxiliary, run_training, seed_streams
from .data import gen_synthetic


def _normal_pdf(x):
    return np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


def check_quadrature_vs_closed_form():
    worst = 0.0
    for var, width in ((1.0, 0.5), (4.0, 1.0), (0.25, 0.3)):
        sd = np.sqrt(var)
        k = gaussian_kernel(width, 1)
        q = quadrature_entropy_1d(lambda x: _normal_pdf(x / sd) / sd, k, (-8 * sd, 8 * sd))
        worst = max(worst, abs(q - gaussian_closed_form(np.array([[var]]), width)))
    return worst <= 1e-3, f"max deviation {worst:.2e}"


def check_entropy_concentration(trials: int = 10):
    k = gaussian_kernel(0.5, 1)
    truth = gaussian_closed_form(np.eye(1), 0.5)
    radius = concentration_radius(2000, 0.05, k.normalizer)
    hits = 0
    for s in range(trials):
        x = np.random.default_rng(s).standard_normal((2000, 1))
        hits += abs(entropy_estimate(x, k).value - truth) <= radius
    return hits >= int(np.ceil(0.95 * trials)), f"{hits}/{trials} within radius {radius:.3f}"


def check_theta_chain(trials: int = 100):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(trials):
        d = int(rng.integers(2, 12))
        a = rng.standard_normal((d, int(rng.integers(1, 2 * d))))
        v = a @ a.T
        c = 10.0 ** rng.uniform(-3, 2)
        cut = int(rng.integers(1, d))
        part = [np.arange(cut), np.arange(cut, d)]
        L = np.trace(v) * (1 + rng.uniform(0, 2))
        chain = [
            B.theta_c(v, np.sqrt(c), 1.0),
            B.theta_c_partitioned(v, part, np.sqrt(c), 1.0),
            B.theta_v(np.trace(v), np.sqrt(c), 1.0, d),
            B.theta_v(L, np.sqrt(c), 1.0, d),
        ]
        bad += any(chain[i] > chain[i + 1] + 1e-9 for i in range(3))
    return bad == 0, f"{bad} violations in {trials}"


def check_jacobi(trials: int = 5):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(2, 24))
        a = rng.standard_normal((d, d))
        a = a + a.T
        dec = sym_eigen(a, method="jacobi")
        q = dec.eigenvectors
        worst = max(worst, np.abs(dec.reconstruct() - a).max(), np.abs(q.T @ q - np.eye(d)).max())
    return worst <= 1e-8, f"max residual {worst:.2e}"


def check_mi_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((60, 3))
    y = x[:, :2] + 0.3 * rng.standard_normal((60, 2))
    gx, gy = gram(*auto_kernel(x)), gram(*auto_kernel(y))
    mi = mi_from_grams(gx, gy)
    direct = gram_entropy(gx) + gram_entropy(gy) - gram_entropy(hadamard_joint(gx, gy))
    const = mi_from_grams(gx, gram(*auto_kernel(np.zeros((60, 2)))))
    return mi == direct and mi >= -1e-9 and const == 0.0, f"mi={mi:.4f}, constant-Y mi={const}"


def check_gradients():
    rng = np.random.default_rng(3)
    model = init_mlp((4, 5, 2), rng)
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    g = per_sample_gradients(model, x, y, MSE).mean(axis=0)
    w = model.params
    fd = np.empty_like(w)
    for i in range(w.size):
        h = 1e-6 * (1 + abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        fd[i] = (forward(model, x, y, MSE, flat=w + e)[1] - forward(model, x, y, MSE, flat=w - e)[1]) / (2 * h)
    rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
    return rel <= 1e-5, f"relative error {rel:.2e}"


def check_hutchinson():
    rng = np.random.default_rng(4)
    model = init_mlp((5, 8, 1), rng)
    x, y = rng.standard_normal((40, 5)), rng.standard_normal((40, 1))
    exact = hessian_trace_exact_fd(model, (x, y), MSE)
    est = hessian_trace_hutchinson(model, (x, y), MSE, 512, 0)
    rel = abs(est - exact) / abs(exact)
    return rel <= 0.05, f"exact {exact:.4f}, estimate {est:.4f}"


def check_trainer_identities():
    train, _ = gen_synthetic(20, 5)
    cfg = TrainConfig(epochs=2, batch_size=5, seed=7)
    model = init_mlp((10, 4, 1), np.random.default_rng(0))
    traj = run_training(model, train, cfg)
    exact = all(
        np.array_equal(r.w, r.w_prev - cfg.eta * r.grads.mean(axis=0) + r.noise) for r in traj.records
    )
    sgd = run_training(model, train, TrainConfig(algorithm="sgd", sigma2=0.0, epochs=2, batch_size=5, seed=7))
    attach_auxiliary(sgd, 1e-3)
    rng = seed_streams(7)[STREAM_AUX]
    xi = rng.standard_normal((len(sgd.records), model.param_count)) * np.sqrt(1e-3)
    delta = np.zeros(model.param_count)
    ok_aux = True
    for r, step in zip(sgd.records, xi):
        delta = delta + step
        ok_aux &= np.array_equal(r.delta, delta)
    return exact and ok_aux, "update and auxiliary identities"


def check_partition_submatrix():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((6, 9))
    v = a @ a.T
    blocks = [principal_submatrix(v, np.arange(3)), principal_submatrix(v, np.arange(3, 6))]
    lhs = np.linalg.det(v)
    rhs = np.prod([np.linalg.det(np.asarray(b)) for b in blocks])
    return lhs <= rhs + 1e-9, f"det {lhs:.3e} <= {rhs:.3e}"


CHECKS = {
    "quadrature_vs_closed_form": check_quadrature_vs_closed_form,
    "entropy_concentration": check_entropy_concentration,
    "theta_chain": check_theta_chain,
    "block_determinant": check_partition_submatrix,
    "jacobi_eigen": check_jacobi,
    "mi_identity": check_mi_identity,
    "gradients": check_gradients,
    "hutchinson_trace": check_hutchinson,
    "trainer_identities": check_trainer_identities,
}


def run_all(names=None, stream=None) -> bool:
    import sys

    stream = stream or sys.stdout
    ok_all = True
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=stream)
    return ok_all
