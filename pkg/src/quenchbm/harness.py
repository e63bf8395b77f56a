"""Experiment orchestration: seeded sweeps, a work pool, and delimited outputs.

Each experiment kind materializes every random draw up front from the master
seed, runs one task per instance (or per sweep point and instance) in a
thread pool, and writes four artifacts into the output directory:

  metrics.csv   one row per instance-level measurement
  plotdata.csv  mean and one standard error per sweep point and series
  config.json   the full configuration echo plus its content hash
  params/       parameter snapshots for every instance that produced rows

Failed instances are recorded (failures.csv) and the run continues. All files
are UTF-8 with LF newlines and deterministic row order, so a rerun with the
same configuration and seed reproduces them byte for byte.
"""

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .evaldata import BernoulliMixture, mixture_table
from .noise import DEFAULT_SHOTS, NoiseConfig
from .operators import (
    ModelFamily,
    ModelSpec,
    SystemLayout,
    build_hamiltonian,
    init_diagnostic_parameters,
    save_parameters,
)
from .qbm import (
    BACKEND_EXACT,
    BACKEND_QUENCH,
    BACKEND_QUENCH_NOISE,
    BACKENDS,
    DataSource,
    TrainConfig,
    train,
    trainable_observables,
)
from .rbm import RbmTrainConfig, save_rbm_parameters, train_rbm
from .spectral import SpacingSample, eig_hermitian, fit_berry_robnik
from .thermal import (
    draw_quench_times,
    gibbs_expectation,
    quench_sample,
    thermometer_context,
)

KIND_LEVEL_STATS = "level-stats"
KIND_QUENCH_SIZE = "quench-accuracy-vs-size"
KIND_QUENCH_TIME = "quench-accuracy-vs-time"
KIND_TRAIN_KL = "train-kl"
KIND_TRAIN_AIC = "train-aic"
KIND_KL_RATIO = "kl-ratio"
KIND_NOISE_SWEEP = "noise-sweep"
EXPERIMENT_KINDS = (KIND_LEVEL_STATS, KIND_QUENCH_SIZE, KIND_QUENCH_TIME,
                    KIND_TRAIN_KL, KIND_TRAIN_AIC, KIND_KL_RATIO,
                    KIND_NOISE_SWEEP)
TRAINING_KINDS = (KIND_TRAIN_KL, KIND_TRAIN_AIC, KIND_KL_RATIO, KIND_NOISE_SWEEP)

SERIES_RBM = "rbm"
SERIES_RATIO = "kl-ratio"
RATIO_FLOOR = 1e-9

# Desk-scale caps: full sweeps stay laptop-sized.
TRAIN_SIZE_CAP = 8
DIAG_SIZE_CAP = 9

METRICS_COLUMNS = ("series", "x", "instance", "seed", "metric", "value")
PLOT_COLUMNS = ("x", "y", "yerr", "series")
FAILURE_COLUMNS = ("series", "x", "instance", "seed", "error")

DEFAULT_SIZES = {
    KIND_LEVEL_STATS: (6,),
    KIND_QUENCH_SIZE: (3, 4, 5, 6),
    KIND_QUENCH_TIME: (6,),
    KIND_TRAIN_KL: (4, 6),
    KIND_TRAIN_AIC: (4, 6),
    KIND_KL_RATIO: (4, 6),
    KIND_NOISE_SWEEP: (6,),
}


def _float_tuple(values, name):
    out = tuple(float(v) for v in values)
    if not out:
        raise ValueError(f"{name} must not be empty")
    if any(v <= 0 for v in out):
        raise ValueError(f"{name} must be positive")
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one experiment sweep."""

    kind: str
    family: ModelFamily = ModelFamily.RESTRICTED_TI
    n_visible: tuple = None
    n_hidden: int = 1
    n_therm: int = 2
    instances: int = 5
    seed: int = 0
    backend: str = BACKEND_QUENCH
    noise: NoiseConfig | None = None
    gamma_bar: float = 1.0
    interaction_std: float = 1.0
    gamma_ratios: tuple = (0.1, 0.25, 0.5, 1.0, 2.0, 3.0)
    evolution_times: tuple = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    coherence_times: tuple = (5.0, 15.0, 45.0, 75.0, 135.0)
    n_times: int = 2
    epochs: int = 40
    epoch_size: int = 512
    batch_size: int = 16
    eval_samples: int = 1024
    threads: int = 1

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        object.__setattr__(self, "family", ModelFamily(self.family))
        sizes = self.n_visible
        if sizes is None:
            sizes = DEFAULT_SIZES[self.kind]
        sizes = tuple(int(v) for v in (sizes if np.iterable(sizes) else (sizes,)))
        if not sizes or any(v < 1 for v in sizes):
            raise ValueError("n_visible must list positive sizes")
        cap = TRAIN_SIZE_CAP if self.kind in TRAINING_KINDS else DIAG_SIZE_CAP
        if max(sizes) > cap:
            raise ValueError(f"n_visible capped at {cap} for {self.kind}")
        object.__setattr__(self, "n_visible", sizes)
        if self.n_hidden < 0 or self.n_therm < 1:
            raise ValueError("need non-negative hidden and at least one thermometer unit")
        for name in ("instances", "threads", "n_times", "epochs", "epoch_size",
                     "batch_size", "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.kind in TRAINING_KINDS and self.backend == BACKEND_EXACT:
            raise ValueError("training sweeps already include the exact arm; "
                             "backend selects the quench arm")
        object.__setattr__(self, "gamma_ratios",
                           _float_tuple(self.gamma_ratios, "gamma_ratios"))
        object.__setattr__(self, "evolution_times",
                           _float_tuple(self.evolution_times, "evolution_times"))
        object.__setattr__(self, "coherence_times",
                           _float_tuple(self.coherence_times, "coherence_times"))

    def layout(self, n_v: int) -> SystemLayout:
        return SystemLayout(n_v, self.n_hidden, self.n_therm)

    def model_spec(self, n_v: int) -> ModelSpec:
        return ModelSpec.standard(self.layout(n_v), self.family)

    def to_document(self) -> dict:
        doc = {
            "kind": self.kind,
            "family": self.family.value,
            "n_visible": list(self.n_visible),
            "n_hidden": self.n_hidden,
            "n_therm": self.n_therm,
            "instances": self.instances,
            "seed": self.seed,
            "backend": self.backend,
            "noise": None,
            "gamma_bar": self.gamma_bar,
            "interaction_std": self.interaction_std,
            "gamma_ratios": list(self.gamma_ratios),
            "evolution_times": list(self.evolution_times),
            "coherence_times": list(self.coherence_times),
            "n_times": self.n_times,
            "epochs": self.epochs,
            "epoch_size": self.epoch_size,
            "batch_size": self.batch_size,
            "eval_samples": self.eval_samples,
            "threads": self.threads,
        }
        if self.noise is not None:
            doc["noise"] = {"t1": self.noise.t1, "t_phi": self.noise.t_phi,
                            "nu": self.noise.nu,
                            "amplitude_damping": self.noise.amplitude_damping,
                            "dephasing": self.noise.dephasing,
                            "shot_noise": self.noise.shot_noise}
        return doc

    @staticmethod
    def from_document(doc: dict) -> "ExperimentConfig":
        noise = None
        if doc.get("noise") is not None:
            noise = NoiseConfig(**doc["noise"])
        kwargs = {k: doc[k] for k in doc if k != "noise"}
        return ExperimentConfig(noise=noise, **kwargs)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_document(), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- result rows ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    series: str
    x: float
    instance: int
    seed: int
    metric: str
    value: float


@dataclass(frozen=True)
class PlotRow:
    x: float
    y: float
    yerr: float
    series: str


@dataclass(frozen=True)
class FailureRow:
    series: str
    x: float
    instance: int
    seed: int
    error: str


@dataclass(frozen=True)
class RunRecord:
    """One finished experiment: provenance hash, raw rows, and aggregates."""

    config_hash: str
    rows: tuple
    aggregates: tuple
    failures: tuple = ()


def _row_key(row: MetricRow):
    return (row.series, row.metric, np.isnan(row.x), row.x, row.instance)


def aggregate_rows(rows) -> tuple:
    """Mean and one standard error over instances per (series, x, metric)."""
    groups: dict = {}
    for row in rows:
        key = (row.series, repr(float(row.x)), row.metric)
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        values = np.array([r.value for r in members], dtype=np.float64)
        se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
        out.append(PlotRow(float(members[0].x), float(values.mean()), se,
                           f"{members[0].series}:{members[0].metric}"))
    return tuple(out)


# --- delimited files (each writer has a matching parser) ------------------------


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([r.series, repr(float(r.x)), r.instance, r.seed,
                             r.metric, repr(float(r.value))])


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(row["series"], float(row["x"]), int(row["instance"]),
                          int(row["seed"]), row["metric"], float(row["value"]))
                for row in reader]


def write_plotdata_csv(path, plots) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for p in plots:
            writer.writerow([repr(float(p.x)), repr(float(p.y)),
                             repr(float(p.yerr)), p.series])


def read_plotdata_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [PlotRow(float(row["x"]), float(row["y"]), float(row["yerr"]),
                        row["series"])
                for row in reader]


def write_failures_csv(path, failures) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FAILURE_COLUMNS)
        for f in failures:
            writer.writerow([f.series, repr(float(f.x)), f.instance, f.seed,
                             f.error])


def read_failures_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [FailureRow(row["series"], float(row["x"]), int(row["instance"]),
                           int(row["seed"]), row["error"])
                for row in reader]


# --- seeded instance materialization --------------------------------------------


@dataclass(frozen=True)
class DiagnosticInstance:
    x: float
    index: int
    seed: int
    layout: SystemLayout
    spec: ModelSpec
    params: object
    times: tuple = ()


@dataclass(frozen=True)
class TrainingInstance:
    x: float
    index: int
    data_table: np.ndarray
    arm_seeds: tuple  # ((series name, x override or None, seed), ...)


def _seed_fingerprint(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def seed_instances(config: ExperimentConfig) -> list:
    """Materialize every random draw of the sweep from the master seed.

    Diagnostic kinds draw biases and weights from N(0,1) at the configured
    layout; level statistics re-center the transverse field so that each
    instance sits exactly at its requested field-to-coupling ratio. Training
    kinds draw the data mixture and one child seed per model arm.
    """
    out = []
    if config.kind == KIND_LEVEL_STATS:
        n_v = config.n_visible[0]
        layout, spec = config.layout(n_v), config.model_spec(n_v)
        for xi, ratio in enumerate(config.gamma_ratios):
            for i in range(config.instances):
                ss = np.random.SeedSequence([config.seed, xi, i])
                rng = np.random.default_rng(ss)
                params = init_diagnostic_parameters(
                    layout, spec, rng, gamma_bar=0.0,
                    interaction_std=config.interaction_std)
                shift = ratio * _rms(params.interaction_weights)
                params = replace(params, gamma=params.gamma + shift)
                out.append(DiagnosticInstance(float(ratio), i,
                                              _seed_fingerprint(ss), layout,
                                              spec, params))
    elif config.kind == KIND_QUENCH_SIZE:
        for xi, n_v in enumerate(config.n_visible):
            layout, spec = config.layout(n_v), config.model_spec(n_v)
            for i in range(config.instances):
                ss = np.random.SeedSequence([config.seed, xi, i])
                rng = np.random.default_rng(ss)
                params = init_diagnostic_parameters(
                    layout, spec, rng, gamma_bar=config.gamma_bar,
                    interaction_std=config.interaction_std)
                times = tuple(draw_quench_times(rng, config.n_times))
                out.append(DiagnosticInstance(float(n_v), i,
                                              _seed_fingerprint(ss), layout,
                                              spec, params, times))
    elif config.kind == KIND_QUENCH_TIME:
        n_v = config.n_visible[0]
        layout, spec = config.layout(n_v), config.model_spec(n_v)
        for i in range(config.instances):
            ss = np.random.SeedSequence([config.seed, 0, i])
            rng = np.random.default_rng(ss)
            params = init_diagnostic_parameters(
                layout, spec, rng, gamma_bar=config.gamma_bar,
                interaction_std=config.interaction_std)
            out.append(DiagnosticInstance(float("nan"), i,
                                          _seed_fingerprint(ss), layout, spec,
                                          params))
    elif config.kind in TRAINING_KINDS:
        sweep = ([config.n_visible[0]] if config.kind == KIND_NOISE_SWEEP
                 else config.n_visible)
        for xi, n_v in enumerate(sweep):
            for i in range(config.instances):
                ss = np.random.SeedSequence([config.seed, xi, i])
                extra = (len(config.coherence_times)
                         if config.kind == KIND_NOISE_SWEEP else 0)
                children = ss.spawn(4 + extra)
                mixture = BernoulliMixture.random(
                    n_v, np.random.default_rng(children[0]))
                if config.kind == KIND_NOISE_SWEEP:
                    # Reference arms carry no sweep coordinate (flat lines).
                    nan = float("nan")
                    arms = [(BACKEND_QUENCH, nan, _seed_fingerprint(children[1])),
                            (BACKEND_EXACT, nan, _seed_fingerprint(children[2])),
                            (SERIES_RBM, nan, _seed_fingerprint(children[3]))]
                    for ti, t_coh in enumerate(config.coherence_times):
                        arms.append((BACKEND_QUENCH_NOISE, float(t_coh),
                                     _seed_fingerprint(children[4 + ti])))
                else:
                    arms = [(config.backend, None, _seed_fingerprint(children[1])),
                            (BACKEND_EXACT, None, _seed_fingerprint(children[2])),
                            (SERIES_RBM, None, _seed_fingerprint(children[3]))]
                out.append(TrainingInstance(float(n_v), i,
                                            mixture_table(mixture),
                                            tuple(arms)))
    return out


# --- per-kind evaluation ---------------------------------------------------------


def _snapshot_name(series: str, x: float, instance: int) -> str:
    tag = "nan" if np.isnan(x) else f"{x:g}"
    return f"{series}_x{tag}_i{instance}.json"


UNFOLD_WINDOW = 25


def unfolded_spacings(values: np.ndarray, window: int = UNFOLD_WINDOW):
    """Level spacings in units of the running local mean spacing.

    A many-body spectrum's density of states varies across the band, and raw
    spacings mix those local scales badly enough to read as Poisson no matter
    how strong the level repulsion is. Dividing each spacing by its windowed
    mean removes the smooth variation; the window's edge spacings, where the
    average is one-sided, are dropped.
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    spacings = np.diff(values)
    if spacings.size <= 2 * window:
        raise ValueError("spectrum too small for the unfolding window")
    kernel = np.ones(2 * window + 1) / (2 * window + 1)
    local = np.convolve(spacings, kernel, mode="same")
    unfolded = spacings / np.maximum(local, 1e-300)
    return SpacingSample.from_raw(unfolded[window:-window])


def _run_level_stats(config, inst):
    h_total = build_hamiltonian(inst.layout, inst.spec, inst.params).total
    eigsys = eig_hermitian(h_total)
    fit = fit_berry_robnik(unfolded_spacings(eigsys.eigenvalues))
    series = config.family.value
    rows = [MetricRow(series, inst.x, inst.index, inst.seed, "rho", fit.rho),
            MetricRow(series, inst.x, inst.index, inst.seed, "ks_statistic",
                      fit.ks_statistic)]
    snap = (_snapshot_name(series, inst.x, inst.index),
            lambda path: save_parameters(path, inst.layout, inst.spec,
                                         inst.params, inst.seed))
    return rows, [snap]


def _quench_errors(config, inst, times):
    """Median normalized estimator error against Gibbs at the measured beta."""
    layout, spec, params = inst.layout, inst.spec, inst.params
    named, _ = trainable_observables(layout, spec)
    therm_obs, therm_eigs = thermometer_context(layout, spec, params)
    eigsys = eig_hermitian(build_hamiltonian(layout, spec, params).total)
    est = quench_sample(eigsys, named, layout, times,
                        therm_observable=therm_obs,
                        therm_eigenvalues=therm_eigs)
    if est.beta_therm is None:
        raise RuntimeError(f"thermometer inversion failed: {est.flags}")
    errors = [abs(est.observables[name]
                  - gibbs_expectation(named[name], eigsys, est.beta_therm)) / 2.0
              for name in named]
    metrics = {"median_error": float(np.median(errors)),
               "beta_therm": est.beta_therm,
               "energy_rel_variance": est.energy_rel_variance}
    if est.beta_full is not None and est.beta_full != 0.0:
        metrics["beta_mismatch"] = (abs(est.beta_therm - est.beta_full)
                                    / abs(est.beta_full))
    return metrics


def _run_quench_size(config, inst):
    series = config.family.value
    metrics = _quench_errors(config, inst, inst.times)
    rows = [MetricRow(series, inst.x, inst.index, inst.seed, name, value)
            for name, value in metrics.items()]
    snap = (_snapshot_name(series, inst.x, inst.index),
            lambda path: save_parameters(path, inst.layout, inst.spec,
                                         inst.params, inst.seed))
    return rows, [snap]


def _run_quench_time(config, inst):
    series = config.family.value
    rows = []
    for t in config.evolution_times:
        metrics = _quench_errors(config, inst, (t,))
        rows.extend(MetricRow(series, float(t), inst.index, inst.seed, name,
                              value)
                    for name, value in metrics.items())
    snap = (_snapshot_name(series, float("nan"), inst.index),
            lambda path: save_parameters(path, inst.layout, inst.spec,
                                         inst.params, inst.seed))
    return rows, [snap]


def _train_arm(config, inst, series, x_override, seed):
    """One training run of a sweep instance; returns its summary rows."""
    n_v = int(inst.x)
    x = inst.x if x_override is None else x_override
    data = DataSource.from_table(inst.data_table)
    if series == SERIES_RBM:
        run = train_rbm(RbmTrainConfig(n_visible=n_v, n_hidden=config.n_hidden,
                                       batch_size=config.batch_size,
                                       epochs=config.epochs,
                                       epoch_size=config.epoch_size, seed=seed,
                                       eval_samples=config.eval_samples), data)
        snap_save = lambda path: save_rbm_parameters(path, run.best_params, seed)
    else:
        noise = config.noise
        if series == BACKEND_QUENCH_NOISE and x_override is not None:
            nu = config.noise.nu if config.noise is not None else DEFAULT_SHOTS
            noise = NoiseConfig(t1=x_override, t_phi=x_override, nu=nu,
                                amplitude_damping=True, dephasing=True,
                                shot_noise=True)
        cfg = TrainConfig(n_visible=n_v, n_hidden=config.n_hidden,
                          n_therm=config.n_therm, family=config.family,
                          backend=series, batch_size=config.batch_size,
                          epochs=config.epochs, epoch_size=config.epoch_size,
                          n_times=config.n_times, seed=seed,
                          gamma_bar=config.gamma_bar, noise=noise,
                          eval_samples=config.eval_samples)
        run = train(cfg, data)
        snap_save = lambda path: save_parameters(path, run.layout, run.spec,
                                                 run.best_params, seed)
    summary = {"min_kl": run.min_kl,
               "min_aic": min(row.aic for row in run.metrics),
               "final_kl": run.final_kl,
               "final_aic": run.final_aic,
               "best_epoch": float(run.best_epoch)}
    rows = [MetricRow(series, x, inst.index, seed, name, value)
            for name, value in summary.items()]
    return rows, [(_snapshot_name(series, x, inst.index), snap_save)]


# --- the ratio figure op ----------------------------------------------------------


def kl_ratio(quench_rows, exact_rows, rbm_rows):
    """Per-instance (quench - exact) / (rbm - exact) of the minimum KL.

    Rows are matched by sweep point and instance;  a near-zero denominator
    marks that instance's ratio undefined instead of producing a blow-up.
    Returns (ratio rows, flagged failures).
    """
    def index(rows):
        return {(r.x, r.instance): r for r in rows if r.metric == "min_kl"}

    quench, exact, rbm = index(quench_rows), index(exact_rows), index(rbm_rows)
    if not (set(quench) == set(exact) == set(rbm)):
        raise ValueError("records must cover matched instances")
    ratios, flagged = [], []
    for key in sorted(quench):
        denom = rbm[key].value - exact[key].value
        if abs(denom) < RATIO_FLOOR:
            flagged.append(FailureRow(SERIES_RATIO, key[0], key[1],
                                      quench[key].seed,
                                      "ratio undefined: |rbm - exact| < 1e-9"))
            continue
        value = (quench[key].value - exact[key].value) / denom
        ratios.append(MetricRow(SERIES_RATIO, key[0], key[1], quench[key].seed,
                                "kl_ratio", value))
    return ratios, flagged


# --- execution ---------------------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    series: str
    x: float
    instance: int
    seed: int
    fn: object


def _build_tasks(config: ExperimentConfig, instances) -> list:
    tasks = []
    for inst in instances:
        if config.kind == KIND_LEVEL_STATS:
            tasks.append(_Task(config.family.value, inst.x, inst.index,
                               inst.seed,
                               lambda i=inst: _run_level_stats(config, i)))
        elif config.kind == KIND_QUENCH_SIZE:
            tasks.append(_Task(config.family.value, inst.x, inst.index,
                               inst.seed,
                               lambda i=inst: _run_quench_size(config, i)))
        elif config.kind == KIND_QUENCH_TIME:
            tasks.append(_Task(config.family.value, inst.x, inst.index,
                               inst.seed,
                               lambda i=inst: _run_quench_time(config, i)))
        else:
            for series, x_override, seed in inst.arm_seeds:
                x = inst.x if x_override is None else x_override
                tasks.append(_Task(series, x, inst.index, seed,
                                   lambda i=inst, s=series, xo=x_override,
                                   sd=seed: _train_arm(config, i, s, xo, sd)))
    return tasks


def run_experiment(config: ExperimentConfig, out_dir=None,
                   threads: int | None = None) -> RunRecord:
    """Execute the configured sweep and persist its artifacts.

    Tasks run in a thread pool sized by the configuration (overridable), but
    results are collected in task order, so scheduling never changes output.
    A failing instance becomes a failure row; the sweep keeps going.
    """
    instances = seed_instances(config)
    tasks = _build_tasks(config, instances)
    workers = threads if threads is not None else config.threads

    outcomes = []
    if workers == 1:
        for task in tasks:
            try:
                outcomes.append((task, task.fn(), None))
            except Exception as exc:
                outcomes.append((task, None, repr(exc)))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(task.fn) for task in tasks]
            for task, fut in zip(tasks, futures):
                try:
                    outcomes.append((task, fut.result(), None))
                except Exception as exc:
                    outcomes.append((task, None, repr(exc)))

    rows, failures, snapshots = [], [], []
    for task, result, error in outcomes:
        if error is not None:
            failures.append(FailureRow(task.series, task.x, task.instance,
                                       task.seed, error))
            continue
        task_rows, task_snaps = result
        rows.extend(task_rows)
        snapshots.extend(task_snaps)

    if config.kind == KIND_KL_RATIO:
        by_series = {}
        for r in rows:
            if r.metric == "min_kl":
                by_series.setdefault(r.series, []).append(r)
        arm_names = (config.backend, BACKEND_EXACT, SERIES_RBM)
        arms = [by_series.get(name, []) for name in arm_names]
        covered = [set((r.x, r.instance) for r in arm) for arm in arms]
        complete = covered[0] & covered[1] & covered[2]
        arms = [[r for r in arm if (r.x, r.instance) in complete]
                for arm in arms]
        ratio_rows, flagged = kl_ratio(*arms)
        rows.extend(ratio_rows)
        failures.extend(flagged)

    rows.sort(key=_row_key)
    aggregates = aggregate_rows(rows)
    record = RunRecord(config_hash(config), tuple(rows), aggregates,
                       tuple(failures))

    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "config.json", "w", encoding="utf-8") as fh:
            json.dump({"config": config.to_document(),
                       "config_hash": record.config_hash}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
        write_metrics_csv(out_path / "metrics.csv", record.rows)
        write_plotdata_csv(out_path / "plotdata.csv", record.aggregates)
        if record.failures:
            write_failures_csv(out_path / "failures.csv", record.failures)
        params_dir = out_path / "params"
        params_dir.mkdir(exist_ok=True)
        for name, save in snapshots:
            save(params_dir / name)
    return record
