"""Classical restricted Boltzmann machine baseline.

Same spin convention as the quantum model: units take values in {-1, +1} and
the distribution weights a configuration by exp(E) with
E = sum b_v v + sum b_h h + sum w_vh v h, which is the quantum model's Gibbs
weight at its fixed operating temperature with the temperature absorbed into
the parameters. Training is persistent contrastive divergence fed into the
same Adam implementation the quantum trainer uses, and runs persist the same
directory layout so the two are directly comparable.
"""

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .evaldata import (
    all_spin_configurations,
    aic,
    kl_divergence_flagged,
    multinomial_resample,
    rbm_trainable_count,
    validate_table,
)
from .operators import BIAS_CLIP, HIDDEN_BIAS_STD, WEIGHT_STD
from .qbm import (
    METRIC_COLUMNS,
    AdamState,
    DataSource,
    EpochMetrics,
    adam_step,
    _adam_document,
    _adam_from_document,
    _metrics_from_documents,
    _write_metrics_csv,
)

logger = logging.getLogger(__name__)

RBM_LEARNING_RATE = 1.25e-3
ENUMERATION_CAP = 20  # total units; exact tables enumerate 2^n_v configurations


@dataclass(frozen=True)
class RbmParameters:
    """Bipartite classical model: visible and hidden biases plus an
    n_v x n_h coupling matrix."""

    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "visible_bias",
                           np.asarray(self.visible_bias, dtype=np.float64))
        object.__setattr__(self, "hidden_bias",
                           np.asarray(self.hidden_bias, dtype=np.float64))
        object.__setattr__(self, "weights",
                           np.asarray(self.weights, dtype=np.float64))
        if self.visible_bias.ndim != 1 or self.hidden_bias.ndim != 1:
            raise ValueError("biases must be vectors")
        if self.weights.shape != (self.n_v, self.n_h):
            raise ValueError(f"weights must have shape ({self.n_v}, {self.n_h}), "
                             f"got {self.weights.shape}")
        for arr in (self.visible_bias, self.hidden_bias, self.weights):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")

    @property
    def n_v(self) -> int:
        return self.visible_bias.shape[0]

    @property
    def n_h(self) -> int:
        return self.hidden_bias.shape[0]

    def trainable_vector(self) -> np.ndarray:
        return np.concatenate([self.visible_bias, self.hidden_bias,
                               self.weights.ravel()])

    def with_trainable(self, vector: np.ndarray) -> "RbmParameters":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.n_v + self.n_h + self.n_v * self.n_h,):
            raise ValueError("trainable vector has the wrong length")
        return RbmParameters(vector[: self.n_v],
                             vector[self.n_v: self.n_v + self.n_h],
                             vector[self.n_v + self.n_h:].reshape(self.n_v, self.n_h))


def init_rbm_parameters(n_v: int, n_h: int, data_moments: np.ndarray,
                        rng: np.random.Generator) -> RbmParameters:
    """Warm-start the visible biases at the data log-odds and draw small
    random hidden biases and weights, matching the quantum initializer's
    scales and draw order (hidden biases, then weights)."""
    data_moments = np.asarray(data_moments, dtype=np.float64)
    if data_moments.shape != (n_v,):
        raise ValueError(f"need one data moment per visible unit, got {data_moments.shape}")
    p = np.clip((data_moments + 1.0) / 2.0, BIAS_CLIP, 1.0 - BIAS_CLIP)
    visible = np.log(p / (1.0 - p))
    hidden = rng.normal(0.0, HIDDEN_BIAS_STD, size=n_h)
    weights = rng.normal(0.0, WEIGHT_STD, size=(n_v, n_h))
    return RbmParameters(visible, hidden, weights)


# --- conditionals and sampling -------------------------------------------------


def hidden_field(params: RbmParameters, visible: np.ndarray) -> np.ndarray:
    return params.hidden_bias + np.asarray(visible, dtype=np.float64) @ params.weights


def visible_field(params: RbmParameters, hidden: np.ndarray) -> np.ndarray:
    return params.visible_bias + np.asarray(hidden, dtype=np.float64) @ params.weights.T


def plus_probability(field: np.ndarray) -> np.ndarray:
    """P(unit = +1) given its local field, for weight exp(field * unit)."""
    return expit(2.0 * field)


def hidden_means(params: RbmParameters, visible: np.ndarray) -> np.ndarray:
    return np.tanh(hidden_field(params, visible))


def sample_units(field: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.where(rng.uniform(size=field.shape) < plus_probability(field), 1.0, -1.0)


def gibbs_step(params: RbmParameters, visible: np.ndarray,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One sweep: sample every hidden unit given the visibles, then every
    visible unit given that hidden sample."""
    hidden = sample_units(hidden_field(params, visible), rng)
    new_visible = sample_units(visible_field(params, hidden), rng)
    return hidden, new_visible


def rbm_distribution_exact(params: RbmParameters) -> np.ndarray:
    """Exact visible-configuration table with the hidden units summed out
    analytically (each contributes log 2cosh of its field)."""
    if params.n_v + params.n_h > ENUMERATION_CAP:
        raise ValueError(f"register too large for exact enumeration "
                         f"({params.n_v}+{params.n_h} units, cap {ENUMERATION_CAP})")
    configs = all_spin_configurations(params.n_v)
    field = hidden_field(params, configs)
    log_w = configs @ params.visible_bias + np.logaddexp(field, -field).sum(axis=1)
    table = np.exp(log_w - logsumexp(log_w))
    return validate_table(table / table.sum())


# --- persistent contrastive divergence -----------------------------------------


@dataclass(frozen=True)
class PcdState:
    """Persistent negative-phase chains, one visible configuration per
    mini-batch slot."""

    chains: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chains", np.asarray(self.chains, dtype=np.float64))
        if self.chains.ndim != 2 or not np.all(np.abs(self.chains) == 1.0):
            raise ValueError("chains must be a (count, n_v) spin array")

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @staticmethod
    def fresh(n_chains: int, n_v: int, rng: np.random.Generator) -> "PcdState":
        return PcdState(rng.choice([-1.0, 1.0], size=(n_chains, n_v)))


def rbm_statistics(params: RbmParameters, visible: np.ndarray) -> np.ndarray:
    """Batch-mean sufficient statistics in trainable-vector order, with the
    hidden units replaced by their exact conditional means."""
    visible = np.atleast_2d(np.asarray(visible, dtype=np.float64))
    h = hidden_means(params, visible)
    vh = visible[:, :, None] * h[:, None, :]
    return np.concatenate([visible.mean(axis=0), h.mean(axis=0),
                           vh.mean(axis=0).ravel()])


def pcd_gradient(params: RbmParameters, batch: np.ndarray, state: PcdState,
                 rng: np.random.Generator) -> tuple[np.ndarray, PcdState]:
    """Stochastic ascent direction on the data log-likelihood, negated for the
    minimizer: model statistics from one Gibbs sweep of the persistent chains
    minus data statistics from the batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape != state.chains.shape:
        raise ValueError(f"batch shape {batch.shape} must match the chain "
                         f"array {state.chains.shape}")
    positive = rbm_statistics(params, batch)
    _, advanced = gibbs_step(params, state.chains, rng)
    negative = rbm_statistics(params, advanced)
    return negative - positive, PcdState(advanced)


def pcd_update(params: RbmParameters, batch: np.ndarray, state: PcdState,
               adam: AdamState, rng: np.random.Generator
               ) -> tuple[RbmParameters, PcdState, AdamState]:
    grad, state = pcd_gradient(params, batch, state, rng)
    vector, adam = adam_step(adam, params.trainable_vector(), grad)
    return params.with_trainable(vector), state, adam


# --- training loop --------------------------------------------------------------


@dataclass(frozen=True)
class RbmTrainConfig:
    n_visible: int
    n_hidden: int = 1
    alpha: float | None = None
    batch_size: int = 16
    epochs: int = 40
    epoch_size: int = 512
    seed: int | None = 0
    eval_samples: int = 1024

    def __post_init__(self):
        if self.n_visible < 1 or self.n_hidden < 0:
            raise ValueError("need at least one visible unit")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.epoch_size % self.batch_size != 0:
            raise ValueError("epoch size must be a whole number of batches")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("learning rate must be positive")
        if self.eval_samples < 1:
            raise ValueError("eval sample budget must be positive")

    @property
    def learning_rate(self) -> float:
        return RBM_LEARNING_RATE if self.alpha is None else self.alpha

    def to_document(self) -> dict:
        return {
            "family": "rbm",
            "n_visible": self.n_visible,
            "n_hidden": self.n_hidden,
            "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "epoch_size": self.epoch_size,
            "seed": self.seed,
            "eval_samples": self.eval_samples,
        }

    @staticmethod
    def from_document(doc: dict) -> "RbmTrainConfig":
        keys = ("n_visible", "n_hidden", "alpha", "batch_size", "epochs",
                "epoch_size", "seed", "eval_samples")
        return RbmTrainConfig(**{k: doc[k] for k in keys if k in doc})


def rbm_parameters_to_document(params: RbmParameters, seed=None) -> dict:
    return {
        "family": "rbm",
        "n_visible": params.n_v,
        "n_hidden": params.n_h,
        "visible_bias": [float(x) for x in params.visible_bias],
        "hidden_bias": [float(x) for x in params.hidden_bias],
        "weights": [[float(x) for x in row] for row in params.weights],
        "seed": seed,
    }


def rbm_parameters_from_document(doc: dict) -> tuple[RbmParameters, int | None]:
    params = RbmParameters(np.array(doc["visible_bias"], dtype=np.float64),
                           np.array(doc["hidden_bias"], dtype=np.float64),
                           np.array(doc["weights"], dtype=np.float64).reshape(
                               doc["n_visible"], doc["n_hidden"]))
    return params, doc.get("seed")


def save_rbm_parameters(path, params: RbmParameters, seed=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rbm_parameters_to_document(params, seed), fh, indent=2,
                  sort_keys=True)
        fh.write("\n")


def load_rbm_parameters(path) -> tuple[RbmParameters, int | None]:
    with open(path, encoding="utf-8") as fh:
        return rbm_parameters_from_document(json.load(fh))


@dataclass(frozen=True)
class RbmTrainRun:
    config: RbmTrainConfig
    init_params: RbmParameters
    final_params: RbmParameters
    best_params: RbmParameters
    best_epoch: int
    best_kl: float
    metrics: tuple[EpochMetrics, ...]
    final_kl: float
    final_aic: float
    final_kl_floored: bool
    flags: tuple[str, ...]
    out_dir: Path | None = None

    @property
    def min_kl(self) -> float:
        return min(row.kl for row in self.metrics)

    def kl_trace(self) -> np.ndarray:
        return np.array([row.kl for row in self.metrics])


def _rbm_epoch_metrics(params, data, entropy, count, epoch, wall):
    table = rbm_distribution_exact(params)
    kl, floored = kl_divergence_flagged(data.table, table)
    ce = kl + entropy
    # classical model: the bound column coincides with the exact loss, and
    # there is no thermometer reading to report
    return EpochMetrics(epoch, ce, ce, kl, aic(ce, count), float("nan"), wall), floored


def train_rbm(config: RbmTrainConfig, data: DataSource,
              rng: np.random.Generator | None = None, out_dir=None,
              resume: bool = False) -> RbmTrainRun:
    """Persistent-contrastive-divergence training with the shared optimizer.

    Randomness derives from config.seed through per-epoch generators exactly
    as in the quantum trainer, so repeated runs reproduce the metric trace bit
    for bit and resumed runs continue where the checkpoint left off. The run
    directory layout matches the quantum trainer's.
    """
    if config.seed is None:
        seed = int((rng or np.random.default_rng()).integers(2 ** 31 - 1))
        config = replace(config, seed=seed)
    if data.n_v != config.n_visible:
        raise ValueError("data table does not match the configured visible register")
    count = rbm_trainable_count(config.n_visible, config.n_hidden)
    entropy = data.entropy()
    n_batches = config.epoch_size // config.batch_size

    out_path = Path(out_dir) if out_dir is not None else None

    def note(msg: str) -> None:
        logger.info(msg)
        if out_path is not None:
            with open(out_path / "run.log", "a", encoding="utf-8") as fh:
                fh.write(msg + "\n")

    checkpoint = out_path / "checkpoint.json" if out_path is not None else None
    resuming = resume and checkpoint is not None and checkpoint.exists()
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        if not resuming:
            (out_path / "run.log").write_text("", encoding="utf-8")
            with open(out_path / "config.json", "w", encoding="utf-8") as fh:
                json.dump(config.to_document(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    run_flags: set[str] = set()
    rows: list[EpochMetrics] = []

    if resuming:
        with open(checkpoint, encoding="utf-8") as fh:
            saved = json.load(fh)
        start_epoch = saved["epoch"] + 1
        params, _ = rbm_parameters_from_document(saved["params"])
        best_params, _ = rbm_parameters_from_document(saved["best_params"])
        init_params, _ = rbm_parameters_from_document(saved["init_params"])
        adam = _adam_from_document(saved["adam"])
        state = PcdState(np.array(saved["chains"], dtype=np.float64))
        best_epoch, best_kl = saved["best_epoch"], saved["best_kl"]
        rows = _metrics_from_documents(saved["rows"])
        run_flags = set(saved["flags"])
        note(f"resumed from checkpoint at epoch {saved['epoch']}")
    else:
        start_epoch = 1
        rng_init = np.random.default_rng([config.seed, 0])
        params = init_rbm_parameters(config.n_visible, config.n_hidden,
                                     data.visible_moments(), rng_init)
        init_params = params
        adam = AdamState.fresh(len(params.trainable_vector()), config.learning_rate)
        state = PcdState.fresh(config.batch_size, config.n_visible, rng_init)
        best_epoch, best_kl, best_params = 0, float("inf"), params

    def snapshot(epoch, params_now, wall):
        nonlocal best_epoch, best_kl, best_params
        row, floored = _rbm_epoch_metrics(params_now, data, entropy, count, epoch, wall)
        if floored:
            run_flags.add("kl_floor")
        rows.append(row)
        if row.kl < best_kl:
            best_epoch, best_kl, best_params = epoch, row.kl, params_now
        if out_path is not None:
            save_rbm_parameters(out_path / f"params_epoch_{epoch}.json", params_now,
                                config.seed)
            _write_metrics_csv(out_path / "metrics.csv", rows)
        return row

    def write_checkpoint(epoch):
        if checkpoint is None:
            return
        doc = {
            "epoch": epoch,
            "params": rbm_parameters_to_document(params, config.seed),
            "best_params": rbm_parameters_to_document(best_params, config.seed),
            "init_params": rbm_parameters_to_document(init_params, config.seed),
            "adam": _adam_document(adam),
            "chains": [[float(x) for x in row] for row in state.chains],
            "best_epoch": best_epoch,
            "best_kl": best_kl,
            "rows": [{c: getattr(r, c) for c in METRIC_COLUMNS} for r in rows],
            "flags": sorted(run_flags),
        }
        tmp = checkpoint.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        tmp.replace(checkpoint)

    if start_epoch == 1:
        snapshot(0, params, 0.0)
        write_checkpoint(0)

    for epoch in range(start_epoch, config.epochs + 1):
        t_start = time.perf_counter()
        rng_epoch = np.random.default_rng([config.seed, epoch])
        try:
            for _ in range(n_batches):
                batch = data.sample(rng_epoch, config.batch_size)
                params, state, adam = pcd_update(params, batch, state, adam, rng_epoch)
            wall = time.perf_counter() - t_start
            snapshot(epoch, params, wall)
            write_checkpoint(epoch)
        except Exception as exc:
            note(f"epoch {epoch} aborted: {exc!r}; last checkpoint is epoch {epoch - 1}")
            raise

    rng_eval = np.random.default_rng([config.seed, config.epochs + 1])
    table = rbm_distribution_exact(best_params)
    sampled = multinomial_resample(table, config.eval_samples, rng_eval)
    final_kl, final_floored = kl_divergence_flagged(data.table, sampled)
    final_aic = aic(final_kl + entropy, count)
    if final_floored:
        run_flags.add("final_kl_floor")

    run = RbmTrainRun(config, init_params, params, best_params, best_epoch,
                      best_kl, tuple(rows), final_kl, final_aic, final_floored,
                      tuple(sorted(run_flags)), out_path)
    if out_path is not None:
        save_rbm_parameters(out_path / "params_best.json", best_params, config.seed)
        save_rbm_parameters(out_path / "params_final.json", params, config.seed)
        with open(out_path / "final_metrics.json", "w", encoding="utf-8") as fh:
            json.dump({"best_epoch": best_epoch, "best_kl": best_kl,
                       "final_kl": final_kl, "final_aic": final_aic,
                       "final_kl_floored": final_floored,
                       "eval_samples": config.eval_samples,
                       "flags": sorted(run_flags)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        note(f"finished: best kl {best_kl:.6g} at epoch {best_epoch}, "
             f"sampled kl {final_kl:.6g}")
    return run
