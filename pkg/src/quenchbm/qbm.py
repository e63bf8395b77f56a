"""Loss functions, gradients and the training loop for the quantum Boltzmann
machine.

Training minimizes an upper bound on the negative log-likelihood whose
gradient splits into a clamped (positive) phase, computable exactly on the
small hidden register, and a model (negative) phase supplied by a pluggable
backend: exact Gibbs averages on the model block, or time-averaged quench
measurements on the full system with the thermometer providing the inverse
temperature. Because the quench temperature drifts with the parameters, the
gradient carries a finite-difference correction term proportional to the
estimated sensitivity of beta to each parameter."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .evaldata import (
    all_spin_configurations,
    aic,
    gibbs_visible_table,
    kl_divergence_flagged,
    mixture_table,
    multinomial_resample,
    qbm_trainable_count,
    quench_visible_table,
    validate_table,
)
from .noise import NoiseConfig
from .operators import (
    DenseOperator,
    ModelFamily,
    ModelSpec,
    OperatorSum,
    QbmParameters,
    SystemLayout,
    block_matrix,
    build_clamped_hamiltonian,
    build_hamiltonian,
    hamiltonian_terms,
    init_parameters,
    parameters_from_document,
    parameters_to_document,
    save_parameters,
    x_word,
    z_word,
    zword_diagonal,
)
from .spectral import eig_hermitian
from .thermal import (
    draw_quench_times,
    gibbs_expectation,
    gibbs_probabilities,
    quench_sample,
    thermometer_context,
)

logger = logging.getLogger(__name__)

BACKEND_EXACT = "exact-gibbs"
BACKEND_QUENCH = "quench"
BACKEND_QUENCH_NOISE = "quench+noise"
BACKENDS = (BACKEND_EXACT, BACKEND_QUENCH, BACKEND_QUENCH_NOISE)

# optimal learning rates per model and sampling backend, found by grid search
LEARNING_RATES = {
    (BACKEND_EXACT, ModelFamily.SEMI_RESTRICTED_TI): 4e-3,
    (BACKEND_EXACT, ModelFamily.RESTRICTED_TI): 2.25e-3,
    (BACKEND_EXACT, ModelFamily.RESTRICTED_XX): 3e-3,
    (BACKEND_QUENCH, ModelFamily.SEMI_RESTRICTED_TI): 2e-3,
    (BACKEND_QUENCH, ModelFamily.RESTRICTED_TI): 2.25e-3,
    (BACKEND_QUENCH, ModelFamily.RESTRICTED_XX): 5e-4,
}

ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.9
ADAM_EPSILON = 1e-8

DTHETA_FLOOR = 1e-12
DEFAULT_FIXED_BETA = -1.0

METRIC_COLUMNS = ("epoch", "loss_upper", "loss_exact", "kl", "aic",
                  "beta_therm", "wall_time_s")


def default_learning_rate(backend: str, family: ModelFamily | str) -> float:
    """Grid-searched step size for one model/backend pairing; the noisy quench
    backend shares the quench rates."""
    key = BACKEND_QUENCH if backend == BACKEND_QUENCH_NOISE else backend
    if key not in (BACKEND_EXACT, BACKEND_QUENCH):
        raise ValueError(f"unknown backend {backend!r}")
    return LEARNING_RATES[(key, ModelFamily(family))]


# --- loss functions ----------------------------------------------------------


class LossValue(NamedTuple):
    value: float
    diverged: bool


def _qbm_pieces(layout: SystemLayout, spec: ModelSpec, params: QbmParameters):
    """Model-only layout/couplings/parameters with thermometer sites dropped."""
    return layout.qbm_only(), ModelSpec(spec.family, spec.qbm_edges), params.qbm_only(layout)


def loss_exact(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
               beta: float, p_data: np.ndarray) -> LossValue:
    """Exact negative log-likelihood of the visible data under the thermal
    model distribution. A model probability of zero on the data support makes
    the loss infinite; such values are returned flagged rather than raised."""
    p_data = validate_table(np.asarray(p_data, dtype=np.float64))
    table = gibbs_visible_table(layout, spec, params, beta)
    support = p_data > 0.0
    if np.any(table[support] <= 0.0):
        return LossValue(float("inf"), True)
    return LossValue(float(-(p_data[support] @ np.log(table[support]))), False)


def loss_upper(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
               beta: float, p_data: np.ndarray) -> float:
    """Trace-ratio upper bound on the exact loss, from clamped thermal traces."""
    p_data = validate_table(np.asarray(p_data, dtype=np.float64))
    if p_data.size != 2 ** layout.n_v:
        raise ValueError("data table does not match the visible register")
    q_layout, q_spec, q_params = _qbm_pieces(layout, spec, params)
    log_z = logsumexp(-beta * np.linalg.eigvalsh(block_matrix(layout, spec, params, "qbm")))
    configs = all_spin_configurations(layout.n_v)
    total = 0.0
    for idx in np.flatnonzero(p_data > 0.0):
        reduced, offset = build_clamped_hamiltonian(q_layout, q_spec, q_params, configs[idx])
        log_num = -beta * offset + logsumexp(-beta * np.linalg.eigvalsh(reduced.mat))
        total -= p_data[idx] * (log_num - log_z)
    return float(total)


# --- gradient assembly -------------------------------------------------------


def clamped_moments(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                    z_v: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Thermal means of every trainable observable with the visible spins
    frozen at z_v, plus the clamped mean energy (offset included).

    Visible factors reduce to scalars; hidden factors are averaged in the
    Gibbs state of the clamped reduced operator. The x-x half of a tied XX
    coupling has no matrix elements inside the clamped subspace.
    """
    z_v = np.asarray(z_v, dtype=np.float64)
    q_layout, q_spec, q_params = _qbm_pieces(layout, spec, params)
    reduced, offset = build_clamped_hamiltonian(q_layout, q_spec, q_params, z_v)
    vals, vecs = np.linalg.eigh(reduced.mat)
    probs = gibbs_probabilities(vals, beta)
    weights = (vecs ** 2) @ probs  # basis occupancies of the clamped Gibbs state
    m = q_layout.n_h
    hidden = {h: float(weights @ zword_diagonal([h - layout.n_v], m))
              for h in layout.hidden_sites}
    out = np.empty(layout.n_qbm + len(spec.qbm_edges))
    for i in range(layout.n_qbm):
        out[i] = z_v[i] if i < layout.n_v else hidden[i]
    for e, (a, b) in enumerate(spec.qbm_edges):
        if b < layout.n_v:
            out[layout.n_qbm + e] = z_v[a] * z_v[b]
        else:
            out[layout.n_qbm + e] = z_v[a] * hidden[b]
    return out, float(probs @ vals) + offset


def batch_positive_phase(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                         batch: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Clamped moments and clamped energy averaged over a batch of visible rows."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != layout.n_v:
        raise ValueError(f"batch must be (rows, {layout.n_v})")
    configs, counts = np.unique(batch, axis=0, return_counts=True)
    acc = np.zeros(layout.n_qbm + len(spec.qbm_edges))
    energy = 0.0
    for row, count in zip(configs, counts):
        mom, en = clamped_moments(layout, spec, params, row, beta)
        acc += count * mom
        energy += count * en
    return acc / batch.shape[0], energy / batch.shape[0]


def model_moments_exact(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                        beta: float) -> tuple[np.ndarray, float]:
    """Gibbs means of every trainable observable on the model block, plus the
    model mean energy."""
    mat = block_matrix(layout, spec, params, "qbm")
    eigsys = eig_hermitian(DenseOperator(mat, layout.n_qbm, hermitian=True))
    probs = gibbs_probabilities(eigsys.eigenvalues, beta)
    weights = (eigsys.eigenvectors ** 2) @ probs
    n = layout.n_qbm
    out = np.empty(n + len(spec.qbm_edges))
    for i in range(n):
        out[i] = weights @ zword_diagonal([i], n)
    for e, (a, b) in enumerate(spec.qbm_edges):
        val = float(weights @ zword_diagonal([a, b], n))
        if spec.uses_xx:
            val += gibbs_expectation(x_word([a, b], n), eigsys, beta)
        out[n + e] = val
    return out, float(probs @ eigsys.eigenvalues)


def trainable_observables(layout: SystemLayout, spec: ModelSpec):
    """Named Pauli words for each trainable parameter on the full register.

    Returns (name -> word mapping, per-parameter name groups). A tied XX
    coupling contributes two words that are estimated separately and summed.
    """
    n = layout.n
    named, groups = {}, []
    for i in range(layout.n_qbm):
        name = f"z{i}"
        named[name] = z_word([i], n)
        groups.append((name,))
    for a, b in spec.qbm_edges:
        zz = f"zz{a}-{b}"
        named[zz] = z_word([a, b], n)
        if spec.uses_xx:
            xx = f"xx{a}-{b}"
            named[xx] = x_word([a, b], n)
            groups.append((zz, xx))
        else:
            groups.append((zz,))
    return named, groups


def estimate_dbeta_dtheta(history) -> np.ndarray:
    """Componentwise slope of beta against each trainable parameter, from the
    last two recorded (beta, theta) pairs. A single record (or a parameter
    delta below the guard floor) yields zero."""
    if not history:
        raise ValueError("history must contain at least one (beta, theta) record")
    beta_now, theta_now = history[-1]
    theta_now = np.asarray(theta_now, dtype=np.float64)
    if len(history) < 2:
        return np.zeros_like(theta_now)
    beta_prev, theta_prev = history[-2]
    dtheta = theta_now - np.asarray(theta_prev, dtype=np.float64)
    out = np.zeros_like(dtheta)
    live = np.abs(dtheta) >= DTHETA_FLOOR
    out[live] = (float(beta_now) - float(beta_prev)) / dtheta[live]
    return out


@dataclass(frozen=True)
class GradientEstimate:
    """Derivative of the upper-bound loss for each trainable parameter.

    The three signed contributions (clamped phase, model phase, beta-drift
    correction) sum to the total derivative.
    """

    derivative: np.ndarray
    beta: float
    positive: np.ndarray
    negative: np.ndarray
    beta_correction: np.ndarray
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        for part in (self.derivative, self.positive, self.negative, self.beta_correction):
            if not np.all(np.isfinite(part)):
                raise ValueError("gradient entries must be finite")
        if self.positive.shape != self.derivative.shape or \
                self.negative.shape != self.derivative.shape or \
                self.beta_correction.shape != self.derivative.shape:
            raise ValueError("gradient breakdown shapes disagree")
        resid = self.positive + self.negative + self.beta_correction - self.derivative
        if np.max(np.abs(resid), initial=0.0) > 1e-12:
            raise ValueError("gradient breakdown does not sum to the total")


def gradient(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
             batch: np.ndarray, *, backend: str, beta: float | None = None,
             times=None, noise: NoiseConfig | None = None,
             rng: np.random.Generator | None = None, history=None,
             therm_context=None) -> GradientEstimate:
    """Assemble the upper-bound loss gradient for one mini-batch.

    The exact backend requires a fixed beta and carries no beta-drift
    correction. The quench backends measure their own beta through the
    thermometer (a non-positive reading is flagged, not fatal) and, when a
    step history is supplied, add the drift correction built from
    estimate_dbeta_dtheta.
    """
    spec.validate(layout)
    params.validate(layout, spec)
    k = layout.n_qbm + len(spec.qbm_edges)
    flags: list[str] = []

    if backend == BACKEND_EXACT:
        if beta is None:
            raise ValueError("the exact backend needs a fixed beta")
        neg_moments, model_energy = model_moments_exact(layout, spec, params, beta)
        dbeta = np.zeros(k)
    elif backend in (BACKEND_QUENCH, BACKEND_QUENCH_NOISE):
        if beta is not None:
            raise ValueError("quench backends measure beta from the thermometer")
        if times is None:
            raise ValueError("quench backends need evolution times")
        if layout.n_t < 1:
            raise ValueError("quench backends need at least one thermometer site")
        noise_config = noise
        if backend == BACKEND_QUENCH_NOISE and noise_config is None:
            noise_config = NoiseConfig(amplitude_damping=True, dephasing=True, shot_noise=True)
        named, groups = trainable_observables(layout, spec)
        named["h_qbm"] = OperatorSum("h_qbm", layout.n,
                                     tuple(hamiltonian_terms(layout, spec, params, "qbm")))
        therm_obs, therm_eigs = therm_context or thermometer_context(layout, spec, params)
        eigsys = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        est = quench_sample(eigsys, named, layout, times, noise_config=noise_config,
                            therm_observable=therm_obs, therm_eigenvalues=therm_eigs, rng=rng)
        flags.extend(est.flags)
        if est.variance_flagged:
            flags.append("energy_variance")
        if est.beta_therm is None:
            raise RuntimeError(f"thermometer inversion failed: {est.flags}")
        beta = est.beta_therm
        if beta <= 0.0:
            flags.append("beta_nonpositive")
        neg_moments = np.array([sum(est.observables[nm] for nm in grp) for grp in groups])
        model_energy = est.observables["h_qbm"]
        if history:
            dbeta = estimate_dbeta_dtheta(
                list(history) + [(beta, params.trainable_vector(layout))])
        else:
            dbeta = np.zeros(k)
    else:
        raise ValueError(f"unknown backend {backend!r}")

    pos_moments, clamped_energy = batch_positive_phase(layout, spec, params, batch, beta)
    positive = beta * pos_moments
    negative = -beta * neg_moments
    correction = dbeta * (clamped_energy - model_energy)
    return GradientEstimate(positive + negative + correction, float(beta),
                            positive, negative, correction, tuple(flags))


# --- Adam --------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam accumulators for one parameter vector."""

    alpha: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ValueError("moment accumulators must share a shape")
        if self.step < 0:
            raise ValueError("step count must be non-negative")
        if self.alpha <= 0:
            raise ValueError("learning rate must be positive")

    @staticmethod
    def fresh(n_params: int, alpha: float) -> "AdamState":
        return AdamState(alpha, np.zeros(n_params), np.zeros(n_params))


def adam_step(state: AdamState, params_vec: np.ndarray,
              grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One Adam update; a non-finite gradient rejects the step."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError("gradient shape does not match the optimizer state")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient: optimization step rejected")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad ** 2
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    updated = params_vec - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, replace(state, m=m, v=v, step=step)


# --- training configuration and data -----------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Complete description of one training run."""

    n_visible: int
    n_hidden: int = 1
    n_therm: int = 2
    family: ModelFamily = ModelFamily.RESTRICTED_TI
    backend: str = BACKEND_EXACT
    alpha: float | None = None
    batch_size: int = 16
    epochs: int = 40
    epoch_size: int = 512
    n_times: int = 2
    seed: int = 0
    gamma_bar: float = 1.0
    fixed_beta: float = DEFAULT_FIXED_BETA
    noise: NoiseConfig | None = None
    eval_samples: int = 1024
    # Feed between-step temperature differences into the correction term of
    # each batch gradient. Off by default: at this protocol's scales the
    # difference-quotient estimate is dominated by thermometer measurement
    # noise (the measured between-batch beta spread is roughly two hundred
    # times the true per-step drift) and the amplified noise stalls training.
    use_beta_correction: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", ModelFamily(self.family))
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        for name in ("n_visible", "batch_size", "epochs", "epoch_size", "n_times",
                     "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_hidden < 0 or self.n_therm < 0:
            raise ValueError("register sizes must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epoch_size % self.batch_size != 0:
            raise ValueError("epoch_size must be a whole number of batches")
        if self.backend != BACKEND_EXACT and self.n_therm < 1:
            raise ValueError("quench backends need a thermometer block")
        if self.backend == BACKEND_EXACT and self.fixed_beta == 0.0:
            raise ValueError("fixed_beta must be nonzero for the exact backend")

    @property
    def learning_rate(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return default_learning_rate(self.backend, self.family)

    @property
    def is_quench(self) -> bool:
        return self.backend in (BACKEND_QUENCH, BACKEND_QUENCH_NOISE)

    def layout(self) -> SystemLayout:
        return SystemLayout(self.n_visible, self.n_hidden, self.n_therm)

    def model_spec(self) -> ModelSpec:
        return ModelSpec.standard(self.layout(), self.family)

    def effective_noise(self) -> NoiseConfig | None:
        # The plain quench backend still emulates finite measurement budgets
        # (shot noise on every observable estimate); only the decoherence
        # channels are reserved for the quench+noise backend.
        if not self.is_quench:
            return None
        if self.noise is not None:
            return self.noise
        if self.backend == BACKEND_QUENCH_NOISE:
            return NoiseConfig(amplitude_damping=True, dephasing=True, shot_noise=True)
        return NoiseConfig(shot_noise=True)

    def to_document(self) -> dict:
        doc = {
            "n_visible": self.n_visible,
            "n_hidden": self.n_hidden,
            "n_therm": self.n_therm,
            "family": self.family.value,
            "backend": self.backend,
            "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "epoch_size": self.epoch_size,
            "n_times": self.n_times,
            "seed": self.seed,
            "gamma_bar": self.gamma_bar,
            "fixed_beta": self.fixed_beta,
            "noise": None,
            "eval_samples": self.eval_samples,
            "use_beta_correction": self.use_beta_correction,
        }
        noise = self.effective_noise()
        if noise is not None:
            doc["noise"] = {"t1": noise.t1, "t_phi": noise.t_phi, "nu": noise.nu,
                            "amplitude_damping": noise.amplitude_damping,
                            "dephasing": noise.dephasing,
                            "shot_noise": noise.shot_noise}
        return doc

    @staticmethod
    def from_document(doc: dict) -> "TrainConfig":
        noise = None
        if doc.get("noise") is not None:
            noise = NoiseConfig(**doc["noise"])
        keys = ("n_visible", "n_hidden", "n_therm", "family", "backend", "alpha",
                "batch_size", "epochs", "epoch_size", "n_times", "seed",
                "gamma_bar", "fixed_beta", "eval_samples", "use_beta_correction")
        kwargs = {k: doc[k] for k in keys if k in doc}
        return TrainConfig(noise=noise, **kwargs)


@dataclass(frozen=True)
class DataSource:
    """Exact visible-unit distribution together with a matched sampler."""

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", validate_table(np.asarray(self.table, dtype=np.float64)))

    @property
    def n_v(self) -> int:
        return int(np.log2(self.table.size))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.choice(self.table.size, size=count, p=self.table)
        return all_spin_configurations(self.n_v)[idx]

    def visible_moments(self) -> np.ndarray:
        return all_spin_configurations(self.n_v).T @ self.table

    def entropy(self) -> float:
        p = self.table[self.table > 0.0]
        return float(-(p @ np.log(p)))

    @staticmethod
    def from_table(table) -> "DataSource":
        return DataSource(np.asarray(table, dtype=np.float64))

    @staticmethod
    def from_mixture(mixture) -> "DataSource":
        return DataSource(mixture_table(mixture))


# --- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss_upper: float
    loss_exact: float
    kl: float
    aic: float
    beta_therm: float
    wall_time_s: float

    def to_row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c)))
                                    for c in METRIC_COLUMNS[1:]]


@dataclass(frozen=True)
class TrainRun:
    """Everything a finished training run produced."""

    config: TrainConfig
    layout: SystemLayout
    spec: ModelSpec
    init_params: QbmParameters
    final_params: QbmParameters
    best_params: QbmParameters
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


def _write_metrics_csv(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.to_row())


def _model_table(config: TrainConfig, layout, spec, params, rng, eigsys=None):
    """Visible-unit table the active backend would hand an evaluator."""
    if not config.is_quench:
        return gibbs_visible_table(layout, spec, params, config.fixed_beta)
    if eigsys is None:
        eigsys = eig_hermitian(build_hamiltonian(layout, spec, params).total)
    times = draw_quench_times(rng, config.n_times)
    return quench_visible_table(eigsys, layout, times,
                                noise_config=config.effective_noise(), rng=rng)


def _snapshot_beta(config: TrainConfig, layout, spec, params, rng, therm_ctx):
    """Thermometer reading at the current parameters, for epochs that ran no
    batches of their own."""
    eigsys = eig_hermitian(build_hamiltonian(layout, spec, params).total)
    times = draw_quench_times(rng, config.n_times)
    est = quench_sample(eigsys, {}, layout, times, noise_config=config.effective_noise(),
                        therm_observable=therm_ctx[0], therm_eigenvalues=therm_ctx[1],
                        rng=rng)
    if est.beta_therm is None:
        raise RuntimeError(f"thermometer inversion failed: {est.flags}")
    return est.beta_therm, eigsys


def _epoch_metrics(config, layout, spec, params, data, entropy, count, epoch,
                   beta_epoch, rng, wall, eigsys=None):
    table = _model_table(config, layout, spec, params, rng, eigsys)
    kl, floored = kl_divergence_flagged(data.table, table)
    ce = kl + entropy
    lu = loss_upper(layout, spec, params, beta_epoch, data.table)
    return EpochMetrics(epoch, lu, ce, kl, aic(ce, count), beta_epoch, wall), floored


def _adam_document(state: AdamState) -> dict:
    return {"alpha": state.alpha, "m": [float(x) for x in state.m],
            "v": [float(x) for x in state.v], "step": state.step,
            "beta1": state.beta1, "beta2": state.beta2, "epsilon": state.epsilon}


def _adam_from_document(doc: dict) -> AdamState:
    return AdamState(doc["alpha"], np.array(doc["m"], dtype=np.float64),
                     np.array(doc["v"], dtype=np.float64), doc["step"],
                     doc["beta1"], doc["beta2"], doc["epsilon"])


def _metrics_from_documents(rows) -> list[EpochMetrics]:
    return [EpochMetrics(**{k: (int(v) if k == "epoch" else float(v))
                            for k, v in row.items()}) for row in rows]


def train(config: TrainConfig, data: DataSource,
          rng: np.random.Generator | None = None, out_dir=None,
          resume: bool = False) -> TrainRun:
    """Run the full mini-batch training loop.

    Every random draw derives from config.seed through per-epoch generators,
    so a repeated run reproduces the metric trace bit for bit and a resumed
    run continues exactly where the checkpoint left off. The optional rng is
    consulted only to draw a seed when config.seed is None. Thermometer and
    interaction parameters are never touched by the optimizer.

    When out_dir is given, the run persists its configuration, per-epoch
    parameter snapshots and metrics, the best-KL parameters, a resumable
    checkpoint, and final sampled evaluation metrics.
    """
    if config.seed is None:
        seed = int((rng or np.random.default_rng()).integers(2 ** 31 - 1))
        config = replace(config, seed=seed)
    if data.n_v != config.n_visible:
        raise ValueError("data table does not match the configured visible register")
    layout = config.layout()
    spec = config.model_spec()
    count = qbm_trainable_count(layout, spec)
    entropy = data.entropy()
    n_batches = config.epoch_size // config.batch_size

    out_path = Path(out_dir) if out_dir is not None else None
    log_lines: list[str] = []

    def note(msg: str) -> None:
        logger.info(msg)
        log_lines.append(msg)
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
    history: list[tuple[float, np.ndarray]] = []

    if resuming:
        with open(checkpoint, encoding="utf-8") as fh:
            saved = json.load(fh)
        start_epoch = saved["epoch"] + 1
        _, _, params, _ = parameters_from_document(saved["params"])
        _, _, best_params, _ = parameters_from_document(saved["best_params"])
        adam = _adam_from_document(saved["adam"])
        best_epoch, best_kl = saved["best_epoch"], saved["best_kl"]
        rows = _metrics_from_documents(saved["rows"])
        run_flags = set(saved["flags"])
        history = [(b, np.array(t, dtype=np.float64)) for b, t in saved["history"]]
        _, _, init_params, _ = parameters_from_document(saved["init_params"])
        note(f"resumed from checkpoint at epoch {saved['epoch']}")
    else:
        start_epoch = 1
        rng_init = np.random.default_rng([config.seed, 0])
        params = init_parameters(layout, spec, data.visible_moments(), rng_init,
                                 gamma_bar=config.gamma_bar)
        init_params = params
        adam = AdamState.fresh(len(params.trainable_vector(layout)), config.learning_rate)
        best_epoch, best_kl, best_params = 0, float("inf"), params

    therm_ctx = thermometer_context(layout, spec, params) if config.is_quench else None

    def snapshot(epoch, params_now, beta_epoch, rng_now, wall, eigsys=None):
        nonlocal best_epoch, best_kl, best_params
        row, floored = _epoch_metrics(config, layout, spec, params_now, data, entropy,
                                      count, epoch, beta_epoch, rng_now, wall, eigsys)
        if floored:
            run_flags.add("kl_floor")
        rows.append(row)
        if row.kl < best_kl:
            best_epoch, best_kl, best_params = epoch, row.kl, params_now
        if out_path is not None:
            save_parameters(out_path / f"params_epoch_{epoch}.json", layout, spec,
                            params_now, config.seed)
            _write_metrics_csv(out_path / "metrics.csv", rows)
        return row

    def write_checkpoint(epoch):
        if checkpoint is None:
            return
        doc = {
            "epoch": epoch,
            "params": parameters_to_document(layout, spec, params, config.seed),
            "best_params": parameters_to_document(layout, spec, best_params, config.seed),
            "init_params": parameters_to_document(layout, spec, init_params, config.seed),
            "adam": _adam_document(adam),
            "best_epoch": best_epoch,
            "best_kl": best_kl,
            "rows": [{c: getattr(r, c) for c in METRIC_COLUMNS} for r in rows],
            "flags": sorted(run_flags),
            "history": [[b, [float(x) for x in t]] for b, t in history],
        }
        tmp = checkpoint.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        tmp.replace(checkpoint)

    if start_epoch == 1:
        rng_init = np.random.default_rng([config.seed, 0, 1])
        if config.is_quench:
            beta0, eigsys0 = _snapshot_beta(config, layout, spec, params, rng_init, therm_ctx)
        else:
            beta0, eigsys0 = config.fixed_beta, None
        snapshot(0, params, beta0, rng_init, 0.0, eigsys0)
        write_checkpoint(0)

    for epoch in range(start_epoch, config.epochs + 1):
        t_start = time.perf_counter()
        rng_epoch = np.random.default_rng([config.seed, epoch])
        epoch_betas = []
        try:
            for _ in range(n_batches):
                batch = data.sample(rng_epoch, config.batch_size)
                if config.is_quench:
                    times = draw_quench_times(rng_epoch, config.n_times)
                    est = gradient(layout, spec, params, batch, backend=config.backend,
                                   times=times, noise=config.effective_noise(),
                                   rng=rng_epoch,
                                   history=history if config.use_beta_correction else None,
                                   therm_context=therm_ctx)
                    if config.use_beta_correction:
                        history.append((est.beta, params.trainable_vector(layout)))
                        del history[:-2]
                else:
                    est = gradient(layout, spec, params, batch, backend=config.backend,
                                   beta=config.fixed_beta)
                run_flags.update(est.flags)
                epoch_betas.append(est.beta)
                theta, adam = adam_step(adam, params.trainable_vector(layout),
                                        est.derivative)
                params = params.with_trainable(layout, theta)
            beta_epoch = float(np.mean(epoch_betas))
            wall = time.perf_counter() - t_start
            snapshot(epoch, params, beta_epoch, rng_epoch, wall)
            write_checkpoint(epoch)
        except Exception as exc:
            note(f"epoch {epoch} aborted: {exc!r}; last checkpoint is epoch {epoch - 1}")
            raise

    # sampled evaluation of the best parameters, on a dedicated stream
    rng_eval = np.random.default_rng([config.seed, config.epochs + 1])
    table = _model_table(config, layout, spec, best_params, rng_eval)
    sampled = multinomial_resample(table, config.eval_samples, rng_eval)
    final_kl, final_floored = kl_divergence_flagged(data.table, sampled)
    final_aic = aic(final_kl + entropy, count)
    if final_floored:
        run_flags.add("final_kl_floor")

    run = TrainRun(config, layout, spec, init_params, params, best_params,
                   best_epoch, best_kl, tuple(rows), final_kl, final_aic,
                   final_floored, tuple(sorted(run_flags)), out_path)
    if out_path is not None:
        save_parameters(out_path / "params_best.json", layout, spec, best_params,
                        config.seed)
        save_parameters(out_path / "params_final.json", layout, spec, params,
                        config.seed)
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
