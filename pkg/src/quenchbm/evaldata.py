"""Bernoulli-mixture training data, exact and sampled visible-unit model
distributions, KL divergence, and the information criterion used for model
comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .noise import NoiseConfig, noisy_quench_state, plus_state
from .operators import ModelSpec, QbmParameters, SystemLayout, block_matrix
from .spectral import EigenSystem, evolve
from .thermal import gibbs_probabilities

TABLE_ATOL = 1e-9
KL_FLOOR = 1e-12


def index_to_spins(index: int, n_v: int) -> np.ndarray:
    """Computational-basis index to spin assignment (+1 for bit 0)."""
    bits = (index >> np.arange(n_v - 1, -1, -1)) & 1
    return 1.0 - 2.0 * bits


def spins_to_index(z_v: np.ndarray) -> int:
    bits = ((1.0 - np.asarray(z_v)) / 2.0).astype(int)
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def all_spin_configurations(n_v: int) -> np.ndarray:
    """(2^n_v, n_v) array of spin assignments in basis-index order."""
    idx = np.arange(2 ** n_v)
    bits = (idx[:, None] >> np.arange(n_v - 1, -1, -1)[None, :]) & 1
    return 1.0 - 2.0 * bits


@dataclass(frozen=True)
class BernoulliMixture:
    """Uniform mixture of bit-flip distributions around spin-valued centers."""

    fidelities: np.ndarray  # per-mode probability of keeping a center bit
    centers: np.ndarray     # (m, n_v) entries in {-1, +1}

    def __post_init__(self):
        object.__setattr__(self, "fidelities", np.asarray(self.fidelities, dtype=np.float64))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))
        if self.fidelities.ndim != 1 or self.fidelities.size < 1:
            raise ValueError("need at least one mode")
        if np.any((self.fidelities <= 0) | (self.fidelities >= 1)):
            raise ValueError("mode fidelities must lie strictly inside (0, 1)")
        if self.centers.shape != (self.m, self.n_v) or not np.all(np.abs(self.centers) == 1):
            raise ValueError("centers must be spin-valued with one row per mode")

    @property
    def m(self) -> int:
        return self.fidelities.shape[0]

    @property
    def n_v(self) -> int:
        return self.centers.shape[1]

    @staticmethod
    def random(n_v: int, rng: np.random.Generator, m: int = 8,
               fidelity: float = 0.9) -> "BernoulliMixture":
        """The standard benchmark target: m modes of equal fidelity with
        uniformly random centers."""
        centers = rng.choice([-1.0, 1.0], size=(m, n_v))
        return BernoulliMixture(np.full(m, fidelity), centers)


def mixture_probability(mix: BernoulliMixture, z_v: np.ndarray) -> float:
    z_v = np.asarray(z_v, dtype=np.float64)
    if z_v.shape != (mix.n_v,) or not np.all(np.abs(z_v) == 1):
        raise ValueError("z_v must be a spin assignment over the visible units")
    dist = np.sum(mix.centers != z_v[None, :], axis=1)  # Hamming distance per mode
    per_mode = mix.fidelities ** (mix.n_v - dist) * (1.0 - mix.fidelities) ** dist
    return float(np.mean(per_mode))


def mixture_table(mix: BernoulliMixture) -> np.ndarray:
    configs = all_spin_configurations(mix.n_v)
    dist = np.sum(configs[:, None, :] != mix.centers[None, :, :], axis=2)
    per_mode = mix.fidelities[None, :] ** (mix.n_v - dist) * (1.0 - mix.fidelities[None, :]) ** dist
    table = per_mode.mean(axis=1)
    return table / table.sum()


def sample_mixture(mix: BernoulliMixture, count: int, rng: np.random.Generator) -> np.ndarray:
    """(count, n_v) spin samples: uniform mode choice, then independent flips."""
    if count < 1:
        raise ValueError("need at least one sample")
    modes = rng.integers(0, mix.m, size=count)
    keep = rng.uniform(size=(count, mix.n_v)) < mix.fidelities[modes, None]
    return np.where(keep, mix.centers[modes], -mix.centers[modes])


def empirical_table(samples: np.ndarray, n_v: int) -> np.ndarray:
    idx = ((1 - samples.astype(int)) // 2)
    weights = 2 ** np.arange(n_v - 1, -1, -1)
    counts = np.bincount(idx @ weights, minlength=2 ** n_v)
    return counts / counts.sum()


def validate_table(table: np.ndarray, atol: float = TABLE_ATOL) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < -atol):
        raise ValueError("probability table has negative entries")
    if abs(table.sum() - 1.0) > atol:
        raise ValueError(f"probability table sums to {table.sum()}, not 1")
    return table


def gibbs_visible_table(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                        beta: float) -> np.ndarray:
    """Exact visible-unit marginal of the model-block thermal state."""
    if layout.n_v > 12:
        raise ValueError("exact visible tables are capped at 12 visible units")
    h = block_matrix(layout, spec, params, "qbm")
    vals, vecs = np.linalg.eigh(h)
    probs = gibbs_probabilities(vals, beta)
    # Born weights of each eigenvector, traced over the hidden register
    weights = (vecs ** 2) @ probs
    table = weights.reshape(2 ** layout.n_v, 2 ** layout.n_h).sum(axis=1)
    return table / table.sum()


def visible_born_table(state, layout: SystemLayout) -> np.ndarray:
    """Visible computational-basis outcome probabilities of a full-register
    state (pure vector or density matrix)."""
    if state.ndim == 1:
        probs = np.abs(state) ** 2
    else:
        probs = np.clip(np.real(np.diag(state)), 0.0, None)
    rest = 2 ** (layout.n - layout.n_v)
    table = probs.reshape(2 ** layout.n_v, rest).sum(axis=1)
    return table / table.sum()


def quench_visible_table(eigsys_total: EigenSystem, layout: SystemLayout, times,
                         noise_config: NoiseConfig | None = None,
                         rng: np.random.Generator | None = None,
                         sample_budget: int | None = None) -> np.ndarray:
    """Visible-unit distribution read out of the quenched state, averaged
    uniformly over the time set; optionally resampled multinomially to emulate
    a finite measurement budget."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    use_density = noise_config is not None and noise_config.any_channel
    if use_density and rng is None:
        raise ValueError("noise channels require an explicit random generator")
    table = np.zeros(2 ** layout.n_v)
    for t in times:
        if use_density:
            state = noisy_quench_state(eigsys_total, float(t), noise_config, rng).rho
        else:
            state = evolve(plus_state(layout.n), eigsys_total, float(t))
        table += visible_born_table(state, layout)
    table /= times.size
    if sample_budget is not None:
        table = multinomial_resample(table, sample_budget, rng)
    return table


def multinomial_resample(table: np.ndarray, budget: int,
                         rng: np.random.Generator) -> np.ndarray:
    if budget < 1:
        raise ValueError("sample budget must be at least 1")
    if rng is None:
        raise ValueError("resampling requires an explicit random generator")
    table = validate_table(table)
    counts = rng.multinomial(budget, table / table.sum())
    return counts / budget


def model_distribution(backend: str, **kwargs) -> np.ndarray:
    """Dispatch to the exact thermal, quench-readout, or classical-baseline
    visible distribution."""
    if backend == "exact":
        return gibbs_visible_table(kwargs["layout"], kwargs["spec"], kwargs["params"],
                                   kwargs["beta"])
    if backend == "quench":
        return quench_visible_table(kwargs["eigsys_total"], kwargs["layout"], kwargs["times"],
                                    kwargs.get("noise_config"), kwargs.get("rng"),
                                    kwargs.get("sample_budget"))
    if backend == "rbm":
        from .rbm import rbm_distribution_exact

        return rbm_distribution_exact(kwargs["model"])
    raise ValueError(f"unknown backend {backend!r}")


def kl_divergence_flagged(p_data: np.ndarray, p_model: np.ndarray) -> tuple[float, bool]:
    """KL(data || model) in nats, with the model table floored at 1e-12.

    Returns (value, floored) where floored reports whether any cell with data
    support needed the floor.
    """
    p = validate_table(p_data)
    q = validate_table(p_model)
    if p.shape != q.shape:
        raise ValueError("tables must share a support")
    support = p > 0
    floored = bool(np.any(q[support] < KL_FLOOR))
    q_safe = np.maximum(q, KL_FLOOR)
    val = float(np.sum(p[support] * (np.log(p[support]) - np.log(q_safe[support]))))
    return val, floored


def kl_divergence(p_data: np.ndarray, p_model: np.ndarray) -> float:
    return kl_divergence_flagged(p_data, p_model)[0]


def aic(loss_exact_value: float, trainable_count: int) -> float:
    """2 (parameter count + negative log-likelihood)."""
    if not np.isfinite(loss_exact_value):
        raise ValueError("loss must be finite")
    return 2.0 * (trainable_count + loss_exact_value)


def qbm_trainable_count(layout: SystemLayout, spec: ModelSpec) -> int:
    """Model-block biases plus model weights (tied XX edges count once)."""
    return layout.n_qbm + len(spec.qbm_edges)


def rbm_trainable_count(n_v: int, n_h: int) -> int:
    return n_v + n_h + n_v * n_h


@dataclass(frozen=True)
class MetricReport:
    kl: float
    aic: float
    trainable_count: int
    sample_count: int | None = None
    kl_floored: bool = False

    def to_document(self) -> dict:
        return {
            "kl": float(self.kl),
            "aic": float(self.aic),
            "trainable_count": int(self.trainable_count),
            "sample_count": None if self.sample_count is None else int(self.sample_count),
            "kl_floored": bool(self.kl_floored),
        }


def save_metric_report(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_document(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_probability_table(path, table: np.ndarray, n_v: int) -> None:
    table = validate_table(table)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bitstring", "probability"])
        for k, p in enumerate(table):
            writer.writerow([format(k, f"0{n_v}b"), f"{p:.12g}"])
