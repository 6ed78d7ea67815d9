"""Multi-run experiments: sampling, information estimates, bound reports and plots.

Every run r of an experiment with master seed s gets its own
``SeedSequence(s).spawn(runs)[r]``, further split into
``[train, data, hessian]`` children. Results are gathered in run order, so
worker count never changes the output.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bounds as B
from .data import (
    Dataset,
    blob_centers,
    corrupt_labels,
    gen_classification,
    gen_synthetic,
    load_mnist_idx,
    synthetic_truth,
)
from .errors import ConfigError, DivergedTraining, InvalidInput
from .kernelinfo import auto_kernel, cond_mi_from_grams, gram, mi_from_grams
from .nnet import LossSpec, MlpModel, hessian_trace_hutchinson, layer_groups
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

WORKERS_ENV = "KRGEN_WORKERS"

# Per-task hyper-parameters; "classification" is a small random-label stand-in for mnist.
TASK_DEFAULTS = {
    "synthetic": dict(eta=0.001, n=100, epochs=50, batch_size=10, sigma2=1e-3, hidden=10, loss="mse"),
    "mnist": dict(eta=0.01, n=5000, epochs=100, batch_size=50, sigma2=1e-5, hidden=128, loss="softmax_cross_entropy"),
    "classification": dict(
        eta=0.05, n=100, epochs=40, batch_size=10, sigma2=1e-5, hidden=16, loss="softmax_cross_entropy"
    ),
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "synthetic"
    algorithm: str = "sgld"
    eta: float | None = None
    sigma2: float | None = None
    virtual_sigma2: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    n: int | None = None
    hidden: int | None = None
    loss: str | None = None
    seed: int = 0
    runs: int = 100
    rho: float = 0.0
    kernel_quantile: float = 0.15
    apply_normalizer: bool = False
    partition_mode: str = "per_layer"
    mi_epoch_stride: int = 1
    include_between: bool = True
    hessian_probes: int = 16
    hessian_points: int = 1000
    noise_var: float = 0.01
    input_dim: int = 10
    num_classes: int = 4
    class_spread: float = 1.0
    mnist_images: str | None = None
    mnist_labels: str | None = None
    output_dir: str = "out"

    @classmethod
    def for_task(cls, task: str = "synthetic", **overrides) -> "ExperimentConfig":
        if task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task {task!r}")
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(task=task, **{k: v for k, v in overrides.items() if v is not None})
        return cfg.resolved()

    def resolved(self) -> "ExperimentConfig":
        if self.task not in TASK_DEFAULTS:
            raise ConfigError(f"unknown task {self.task!r}")
        defaults = TASK_DEFAULTS[self.task]
        filled = {k: (getattr(self, k) if getattr(self, k) is not None else v) for k, v in defaults.items()}
        cfg = replace(self, **filled)
        if cfg.virtual_sigma2 is None:
            cfg = replace(cfg, virtual_sigma2=defaults["sigma2"])
        if cfg.algorithm == "sgd":
            cfg = replace(cfg, sigma2=0.0)
        cfg.validate()
        return cfg

    def validate(self):
        if self.algorithm not in ("sgd", "sgld"):
            raise ConfigError("algorithm must be sgd or sgld")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.partition_mode not in ("full", "per_layer", "per_param"):
            raise ConfigError("partition_mode must be full, per_layer or per_param")
        if self.mi_epoch_stride < 1:
            raise ConfigError("mi_epoch_stride must be >= 1")
        if not 0.0 < self.kernel_quantile < 1.0:
            raise ConfigError("kernel_quantile must lie in (0, 1)")
        if self.virtual_sigma2 is not None and self.algorithm == "sgd" and not self.virtual_sigma2 > 0:
            raise ConfigError("sgd needs virtual_sigma2 > 0")
        if self.rho > 0 and self.task == "synthetic":
            raise ConfigError("label noise needs a classification task")
        self.train_config(0).validate(self.n)

    def train_config(self, seed) -> TrainConfig:
        return TrainConfig(
            algorithm=self.algorithm,
            eta=self.eta,
            sigma2=self.sigma2 if self.algorithm == "sgld" else 0.0,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=int(seed),
            loss=self.loss,
        )

    @property
    def steps_per_epoch(self) -> int:
        return self.n // self.batch_size

    @property
    def info_sigma2(self) -> float:
        """Noise level entering the bound terms (virtual for sgd)."""
        return self.virtual_sigma2 if self.algorithm == "sgd" else self.sigma2

    def recorded_epochs(self) -> list[int]:
        return [e for e in range(1, self.epochs + 1) if e % self.mi_epoch_stride == 0]

    def layer_sizes(self) -> tuple:
        if self.task == "synthetic":
            return (self.input_dim, self.hidden, 1)
        if self.task == "mnist":
            return (784, self.hidden, 10)
        return (self.input_dim, self.hidden, self.num_classes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, **overrides) -> "ExperimentConfig":
        doc = json.loads(text)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        task = doc.pop("task", "synthetic")
        return cls.for_task(task, **doc)


@dataclass
class MiSamples:
    """Across-run aligned samples; row r of every array belongs to the same run."""

    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    w: list = field(default_factory=list)
    w_prev: list = field(default_factory=list)
    batch: list = field(default_factory=list)
    s: np.ndarray | None = None
    run_ids: list = field(default_factory=list)

    @property
    def effective_runs(self) -> int:
        return len(self.run_ids)


def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_seeds(master_seed, runs: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(runs)


def children(ss: np.random.SeedSequence, k: int) -> list[np.random.SeedSequence]:
    """First ``k`` children of ``ss``, like a fresh ``ss.spawn(k)`` but without mutating ``ss``."""
    return [
        np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (i,), pool_size=ss.pool_size)
        for i in range(k)
    ]


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class TaskData:
    """Per-experiment shared state used to draw each run's train/test sets."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        truth_seed = np.random.SeedSequence([config.seed, 0x7A5C])
        if config.task == "synthetic":
            self.true_w = synthetic_truth(truth_seed, config.input_dim)
        elif config.task == "classification":
            self.centers = blob_centers(truth_seed, config.num_classes, config.input_dim)
        else:
            if not (config.mnist_images and config.mnist_labels):
                raise ConfigError("mnist task needs mnist_images and mnist_labels paths")
            self.pool = load_mnist_idx(config.mnist_images, config.mnist_labels, None, 0)
            if 2 * config.n > len(self.pool):
                raise ConfigError("mnist file too small for disjoint train and test subsamples")

    def draw(self, ss: np.random.SeedSequence) -> tuple[Dataset, Dataset]:
        cfg = self.config
        data_ss, noise_ss = children(ss, 2)
        if cfg.task == "synthetic":
            return gen_synthetic(cfg.n, data_ss, self.true_w, cfg.noise_var, cfg.input_dim)
        if cfg.task == "classification":
            train, test = gen_classification(cfg.n, data_ss, self.centers, cfg.class_spread)
        else:
            idx = np.random.default_rng(data_ss).choice(len(self.pool), size=2 * cfg.n, replace=False)
            train, test = self.pool.subset(idx[: cfg.n]), self.pool.subset(idx[cfg.n :])
        if cfg.rho > 0:
            a, b = children(noise_ss, 2)
            train, test = corrupt_labels(train, cfg.rho, a), corrupt_labels(test, cfg.rho, b)
        return train, test


def _run_one(config: ExperimentConfig, task: TaskData, run_index: int, ss, with_stats: bool, keep_trajectory: bool):
    train_ss, data_ss, hess_ss = children(ss, 3)
    train, test = task.draw(data_ss)
    model = MlpModel(config.layer_sizes())
    try:
        traj = run_training(model, train, config.train_config(_seed_int(train_ss)), test)
    except DivergedTraining as exc:
        return {"run": run_index, "diverged": True, "step": exc.step}
    return run_result(config, run_index, train, test, traj, hess_ss, with_stats, keep_trajectory)


def run_result(config, run_index, train, test, traj, hess_ss, with_stats=True, keep_trajectory=False) -> dict:
    """Everything the aggregation step needs from one finished run."""
    spe = config.steps_per_epoch
    snapshots = {}
    for e in config.recorded_epochs():
        rec = traj.records[e * spe - 1]
        snapshots[e] = (rec.t, rec.w_prev, rec.w, train.flat_samples(rec.batch))
    grads = []
    if with_stats:
        grads = [rec.grads for rec in traj.records]
        if any(g is None for g in grads):
            raise InvalidInput("trajectory lacks per-step gradients (record_every must be 1)")
    hessian = {}
    if config.algorithm == "sgd" and with_stats:
        loss = LossSpec(config.loss)
        model = MlpModel(config.layer_sizes())
        m = min(len(test), config.hessian_points)
        for e, (_, _, w, _) in sorted(snapshots.items()):
            hessian[e] = hessian_trace_hutchinson(
                model.with_params(w), (test.x[:m], test.y[:m]), loss, config.hessian_probes, hess_ss
            )
    return {
        "run": run_index,
        "diverged": False,
        "grads": grads,
        "batch_losses": np.array([r.loss for r in traj.records]),
        "snapshots": snapshots,
        "s": train.flat_samples(),
        "train_loss": traj.train_loss,
        "test_loss": traj.test_loss,
        "hessian": hessian,
        "trajectory": traj if keep_trajectory else None,
    }


def results_from_trajectories(config: ExperimentConfig, trajectories: dict, with_stats: bool = True):
    """Rebuild run results from saved trajectories keyed by run index.

    Datasets are redrawn from the experiment seed, so the trajectories must
    come from an experiment with the same configuration.
    """
    config = config.resolved()
    task = TaskData(config)
    seeds = run_seeds(config.seed, config.runs)
    for r in sorted(trajectories):
        _, data_ss, hess_ss = children(seeds[r], 3)
        train, test = task.draw(data_ss)
        yield run_result(config, r, train, test, trajectories[r], hess_ss, with_stats)


def _iter_runs(config, task, with_stats, keep_trajectories, workers):
    seeds = run_seeds(config.seed, config.runs)
    jobs = ((config, task, r, seeds[r], with_stats, keep_trajectories) for r in range(config.runs))
    if workers <= 1:
        for job in jobs:
            yield _run_one(*job)
        return
    from joblib import Parallel, delayed

    yield from Parallel(n_jobs=workers, return_as="generator")(delayed(_run_one)(*job) for job in jobs)


def partition_for(config: ExperimentConfig, d: int):
    if config.partition_mode == "full":
        return [np.arange(d)]
    if config.partition_mode == "per_param":
        return [np.array([i]) for i in range(d)]
    return layer_groups(MlpModel(config.layer_sizes()))


def orchestrate(config: ExperimentConfig, with_stats: bool = True, keep_trajectories: bool = False, workers: int | None = None):
    """Run all trainings, estimate information curves and fill a bound report.

    Returns ``(MiSamples, trajectories, BoundReport)``; ``trajectories`` is
    empty unless ``keep_trajectories`` is set. With ``with_stats`` off only
    the information curves and true gap are computed.
    """
    config = config.resolved()
    workers = worker_count() if workers is None else workers
    task = TaskData(config)
    results = _iter_runs(config, task, with_stats, keep_trajectories, workers)
    return aggregate(config, results, with_stats)


def aggregate(config: ExperimentConfig, results, with_stats: bool = True):
    """Ordered reduction of run results into ``(MiSamples, trajectories, BoundReport)``."""
    epochs = config.recorded_epochs()
    spe = config.steps_per_epoch
    total_steps = config.epochs * spe
    d = MlpModel(config.layer_sizes()).param_count
    partition = partition_for(config, d)

    acc_within = [B.StepAccumulator() for _ in range(total_steps)] if with_stats else []
    mi = MiSamples(epochs=epochs, steps=[e * spe for e in epochs])
    snaps = {e: ([], [], []) for e in epochs}
    s_rows, gaps, batch_losses, hess, trajectories, diverged = [], [], [], [], [], []
    for res in results:
        if res["diverged"]:
            log.warning("run %d diverged at step %s; excluded", res["run"], res["step"])
            diverged.append(res["run"])
            continue
        mi.run_ids.append(res["run"])
        if with_stats:
            prev_L = 0.0
            for t, g in enumerate(res["grads"]):
                st = B.grad_stats(g, config.batch_size, prev_L, step=t + 1)
                prev_L = st.max_sq_norm
                acc_within[t].add(st)
        for e in epochs:
            _, w_prev, w, bflat = res["snapshots"][e]
            snaps[e][0].append(w)
            snaps[e][1].append(w_prev)
            snaps[e][2].append(bflat)
        s_rows.append(res["s"])
        gaps.append(res["test_loss"] - res["train_loss"])
        batch_losses.append(res["batch_losses"])
        hess.append(res["hessian"])
        if res["trajectory"] is not None:
            trajectories.append(res["trajectory"])

    runs_eff = mi.effective_runs
    meta = {
        "task": config.task,
        "algorithm": config.algorithm,
        "runs_requested": config.runs,
        "effective_runs": runs_eff,
        "diverged_runs": diverged,
        "n": config.n,
        "d": d,
        "steps_per_epoch": spe,
        "seed": config.seed,
    }
    report = B.BoundReport(meta=meta)
    if runs_eff < 2:
        log.warning("fewer than two usable runs; report left empty")
        return mi, trajectories, report

    mi.s = np.array(s_rows)
    for e in epochs:
        mi.w.append(np.array(snaps[e][0]))
        mi.w_prev.append(np.array(snaps[e][1]))
        mi.batch.append(np.array(snaps[e][2]))

    curves = information_curves(mi, config)
    gap_curve = np.mean(gaps, axis=0)
    losses = np.array(batch_losses)

    terms = None
    if with_stats:
        terms = step_bound_terms(acc_within, config, partition)
        report.step_terms = terms
        cum = {k: np.cumsum(v) for k, v in terms.items()}

    for i, e in enumerate(epochs):
        t_end = e * spe
        R = B.subgaussian_R(losses[:, :t_end])
        row = dict(
            epoch=e,
            step=t_end,
            true_gap=float(gap_curve[e - 1]),
            R=R,
            iws=curves["iws"][i],
            iwbw=curves["iwbw"][i],
            iwbw_term=curves["iwbw_term"][i],
        )
        row["thm1_from_iws"], row["thm1_sq_from_iws"] = B.thm1_bounds(row["iws"], R, config.n)
        row["thm1_from_iwbw"], row["thm1_sq_from_iwbw"] = B.thm1_bounds(row["iwbw"], R, config.n)
        if terms is not None:
            hterm = 0.0
            if config.algorithm == "sgd":
                h = float(np.mean([hr[e] for hr in hess]))
                hterm = B.sgd_hessian_term(t_end, config.virtual_sigma2, h)
            row["sgd_hessian_term"] = hterm
            for col, key in (
                ("theta_c_sum", "thm2_cov"),
                ("theta_c_total_sum", "thm2_cov_total"),
                ("theta_c_partitioned_sum", "thm2_partitioned"),
                ("theta_v_sum", "theta_v_var"),
                ("theta_v_L_sum", "lemma1_L"),
                ("lemma2_sum", "lemma2_var"),
            ):
                if key in cum:
                    row[col] = float(cum[key][t_end - 1])
            for col, src in (
                ("bound_theta_c", "theta_c_sum"),
                ("bound_theta_c_partitioned", "theta_c_partitioned_sum"),
                ("bound_theta_v", "theta_v_sum"),
                ("bound_theta_v_L", "theta_v_L_sum"),
                ("bound_lemma2", "lemma2_sum"),
            ):
                if src in row:
                    row[col] = B.thm1_bounds(row[src], R, config.n)[0] + hterm
        report.add_row(**row)
    return mi, trajectories, report


def step_bound_terms(accumulators, config: ExperimentConfig, partition) -> dict:
    """Per-step bound terms from the across-run averaged statistics."""
    eta, s2 = config.eta, config.info_sigma2
    out = {k: [] for k in ("thm2_cov", "thm2_partitioned", "theta_v_var", "lemma1_L", "lemma2_var")}
    if config.include_between:
        out["thm2_cov_total"] = []
    for acc in accumulators:
        st = acc.result(include_between=False)
        for mode in ("thm2_cov", "thm2_partitioned", "theta_v_var", "lemma1_L", "lemma2_var"):
            out[mode].append(B.step_term(st, eta, s2, mode, partition))
        if config.include_between:
            out["thm2_cov_total"].append(B.step_term(acc.result(include_between=True), eta, s2, "thm2_cov"))
    return {k: np.array(v) for k, v in out.items()}


def information_curves(mi: MiSamples, config: ExperimentConfig) -> dict:
    """IWS and the cumulative IWB|W curve at each recorded epoch.

    Each recorded conditional term is the estimate at the last step of its
    epoch, clamped at zero and counted once for every step it stands for.
    """
    q, norm = config.kernel_quantile, config.apply_normalizer
    g_s = gram(*auto_kernel(mi.s, q))
    steps_per_record = config.steps_per_epoch * config.mi_epoch_stride
    iws, terms, iwbw = [], [], []
    total = 0.0
    for w, w_prev, b in zip(mi.w, mi.w_prev, mi.batch):
        g_w = gram(*auto_kernel(w, q))
        iws.append(mi_from_grams(g_w, g_s, norm))
        term = cond_mi_from_grams(g_w, gram(*auto_kernel(b, q)), gram(*auto_kernel(w_prev, q)), norm)
        terms.append(term)
        total += max(term, 0.0) * steps_per_record
        iwbw.append(total)
    return {"iws": iws, "iwbw_term": terms, "iwbw": iwbw}


def iws_curve(config: ExperimentConfig, workers: int | None = None) -> np.ndarray:
    mi, _, report = orchestrate(config, with_stats=False, workers=workers)
    return report.column("iws")


def random_label_experiment(config: ExperimentConfig, rhos=(0.0, 0.2, 0.4), workers: int | None = None) -> dict:
    """One full experiment per label-noise level; returns ``{rho: BoundReport}``."""
    return {rho: orchestrate(replace(config, rho=rho), workers=workers)[2] for rho in rhos}


# -- output ------------------------------------------------------------------

FIGURE_COLUMNS = ("true_gap", "iws", "iwbw", "theta_c_sum", "theta_v_sum")
BOUND_FIGURE_COLUMNS = ("true_gap", "thm1_from_iws", "thm1_from_iwbw", "bound_theta_c", "bound_theta_v")
_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def svg_chart(report: B.BoundReport, columns, title: str, width: int = 640, height: int = 400) -> str:
    """Static log-scale line chart, one ``<polyline>`` per column.

    Nonpositive values are drawn at the chart floor.
    """
    left, right, top, bottom = 60, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs = [r["epoch"] for r in report.rows]
    series = {c: report.column(c) for c in columns}
    finite = np.concatenate([v[np.isfinite(v) & (v > 0)] for v in series.values()] + [np.zeros(0)])
    lo = math.floor(math.log10(finite.min())) if finite.size else -1
    hi = math.ceil(math.log10(finite.max())) if finite.size else 1
    if hi <= lo:
        hi = lo + 1
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    if x1 == x0:
        x1 = x0 + 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(v):
        lv = math.log10(v) if (math.isfinite(v) and v > 0) else lo
        lv = min(max(lv, lo), hi)
        return top + (hi - lv) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="18" font-size="13" font-family="sans-serif">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for k in range(lo, hi + 1):
        y = py(10.0**k)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end" font-family="sans-serif">1e{k}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" font-size="11" text-anchor="middle" font-family="sans-serif">epoch</text>')
    for i, (c, v) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(float(y)):.2f}" for x, y in zip(xs, v))
        out.append(f'<polyline data-column="{c}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 * (i + 1)
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}" font-size="10" font-family="sans-serif">{c}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: B.BoundReport, mi: MiSamples | None, output_dir) -> list[Path]:
    """Write ``bounds.csv``, ``bounds.json`` and two SVG charts."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "bounds.csv": report.to_csv(),
            "bounds.json": report.to_json(),
            "information.svg": svg_chart(report, FIGURE_COLUMNS, "information estimates and bound sums (nats)"),
            "bounds.svg": svg_chart(report, BOUND_FIGURE_COLUMNS, "generalization gap and bounds"),
        }
        written = []
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            written.append(p)
    except OSError as exc:
        raise IOError(f"cannot write report to {out}: {exc}") from exc
    return written


def load_report(output_dir) -> B.BoundReport:
    return B.BoundReport.from_json((Path(output_dir) / "bounds.json").read_text())


def require_rows(report: B.BoundReport):
    if not report.rows:
        raise InvalidInput("report has no rows")
