"""Exact Gibbs and microcanonical ensembles, inverse-temperature inversion,
the quench sampler with finite-time averaging, and thermalization diagnostics
for the all-plus initial state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .noise import (
    QUENCH_TIME_HI,
    QUENCH_TIME_LO,
    DensityState,
    NoiseConfig,
    noisy_quench_state,
    plus_state,
    shot_noise,
)
from .operators import (
    DenseOperator,
    ModelSpec,
    OperatorSum,
    PauliWord,
    QbmParameters,
    SystemLayout,
)
from .spectral import EigenSystem, eig_hermitian, evolve

BETA_ENERGY_RTOL = 1e-9
VARIANCE_FLAG_THRESHOLD = 0.5
_MAX_BRACKET_GROWTH = 200
_MAX_BISECTIONS = 500


def _diag_matrix_elements(obs, eigsys: EigenSystem) -> np.ndarray:
    """<E_k|O|E_k> for every eigenvector column."""
    v = eigsys.eigenvectors
    if isinstance(obs, DenseOperator):
        obs = obs.mat
    if isinstance(obs, np.ndarray):
        return np.real(np.sum(v.conj() * (obs @ v), axis=0))
    if isinstance(obs, PauliWord):
        ov = v if obs.diag is None else obs.diag[:, None] * v
        if obs.mask:
            ov = ov[np.arange(v.shape[0]) ^ obs.mask, :]
        return np.real(np.sum(v.conj() * ov, axis=0))
    if isinstance(obs, OperatorSum):
        out = np.zeros(v.shape[1])
        for c, w in obs.terms:
            out += c * _diag_matrix_elements(w, eigsys)
        return out
    raise TypeError(f"unsupported observable type {type(obs).__name__}")


def gibbs_probabilities(eigenvalues: np.ndarray, beta: float) -> np.ndarray:
    """Boltzmann weights e^{-beta E_k}/Z, computed with max-shift stabilization."""
    x = -beta * eigenvalues
    w = np.exp(x - np.max(x))
    return w / np.sum(w)


@dataclass(frozen=True)
class GibbsEnsemble:
    """Canonical ensemble over an eigensystem at fixed inverse temperature."""

    eigsys: EigenSystem
    beta: float
    log_partition: float

    @staticmethod
    def build(eigsys: EigenSystem, beta: float) -> "GibbsEnsemble":
        if not np.isfinite(beta):
            raise ValueError("beta must be finite")
        return GibbsEnsemble(eigsys, float(beta), float(logsumexp(-beta * eigsys.eigenvalues)))

    def probabilities(self) -> np.ndarray:
        return gibbs_probabilities(self.eigsys.eigenvalues, self.beta)

    def expectation(self, obs) -> float:
        return float(self.probabilities() @ _diag_matrix_elements(obs, self.eigsys))

    def energy(self) -> float:
        return float(self.probabilities() @ self.eigsys.eigenvalues)


def gibbs_expectation(obs, eigsys: EigenSystem, beta: float) -> float:
    """tr(O e^{-beta H}) / tr(e^{-beta H}) over the given spectrum."""
    if isinstance(obs, (DenseOperator, np.ndarray)):
        dim = obs.dim if isinstance(obs, DenseOperator) else obs.shape[0]
        if dim != eigsys.dim:
            raise ValueError("observable dimension does not match the spectrum")
    return float(gibbs_probabilities(eigsys.eigenvalues, beta) @ _diag_matrix_elements(obs, eigsys))


def gibbs_mean_energy(eigenvalues: np.ndarray, beta: float) -> float:
    return float(gibbs_probabilities(eigenvalues, beta) @ eigenvalues)


def microcanonical_expectation(obs, eigsys: EigenSystem, energy: float,
                               window: float | None = None) -> float:
    """Average of <E_k|O|E_k> over eigenstates within window/2 of the target
    energy. Window defaults to spectral_range/sqrt(n_qubits)."""
    if window is None:
        n = int(np.log2(eigsys.dim))
        window = eigsys.spectral_range / np.sqrt(max(n, 1))
    mask = np.abs(eigsys.eigenvalues - energy) <= window / 2.0
    if not np.any(mask):
        raise ValueError(f"no eigenstates within {window / 2.0} of energy {energy}")
    return float(np.mean(_diag_matrix_elements(obs, eigsys)[mask]))


def invert_beta(eigsys: EigenSystem | np.ndarray, e_target: float) -> float:
    """Inverse temperature at which the Gibbs mean energy equals e_target.

    The map beta -> <H>_beta is strictly decreasing, so a geometrically grown
    bracket around [-1, 1] followed by bisection converges unconditionally.
    Energies above the infinite-temperature mean give negative beta.
    """
    vals = eigsys.eigenvalues if isinstance(eigsys, EigenSystem) else np.asarray(eigsys)
    e_min, e_max = float(vals[0]), float(vals[-1])
    if not e_min < e_target < e_max:
        raise ValueError(f"target energy {e_target} outside the open spectral interval "
                         f"({e_min}, {e_max})")
    tol = BETA_ENERGY_RTOL * (e_max - e_min)

    lo, hi = -1.0, 1.0
    for _ in range(_MAX_BRACKET_GROWTH):
        if gibbs_mean_energy(vals, lo) >= e_target:
            break
        lo *= 2.0
    else:
        raise RuntimeError("bracket growth failed on the high-energy side")
    for _ in range(_MAX_BRACKET_GROWTH):
        if gibbs_mean_energy(vals, hi) <= e_target:
            break
        hi *= 2.0
    else:
        raise RuntimeError("bracket growth failed on the low-energy side")

    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if gibbs_mean_energy(vals, mid) > e_target:
            lo = mid
        else:
            hi = mid
        # keep halving past the energy tolerance: where the energy curve is
        # flat, beta itself still needs to be pinned down
        if hi - lo < 1e-12 * max(1.0, abs(mid)):
            break
    mid = 0.5 * (lo + hi)
    resid = abs(gibbs_mean_energy(vals, mid) - e_target)
    if resid >= tol:
        raise RuntimeError(f"beta bisection stalled at {mid} with energy residual {resid:.3e}")
    return mid


def draw_quench_times(rng: np.random.Generator, count: int) -> np.ndarray:
    """Evolution times drawn uniformly from the interval that fixes the
    package's time/energy units."""
    if count < 1:
        raise ValueError("need at least one time")
    return rng.uniform(QUENCH_TIME_LO, QUENCH_TIME_HI, size=count)


def initial_energy_stats(eigsys: EigenSystem) -> tuple[float, float]:
    """(<H>, <H^2>) of the all-plus state, via its eigenbasis coefficients."""
    n = int(np.log2(eigsys.dim))
    coeffs = eigsys.eigenvectors.conj().T @ plus_state(n)
    w = np.abs(coeffs) ** 2
    return float(w @ eigsys.eigenvalues), float(w @ eigsys.eigenvalues ** 2)


def dephased_average(obs, eigsys: EigenSystem, state: np.ndarray | None = None) -> float:
    """Exact infinite-time average sum_k |c_k|^2 <E_k|O|E_k>."""
    if state is None:
        state = plus_state(int(np.log2(eigsys.dim)))
    coeffs = eigsys.eigenvectors.conj().T @ state
    return float((np.abs(coeffs) ** 2) @ _diag_matrix_elements(obs, eigsys))


def energy_variance_diagnostic(h, state: np.ndarray) -> tuple[float, bool]:
    """Relative energy variance (<H^2> - <H>^2)/<H>^2 of a normalized state.

    A small value certifies that the state behaves like a narrow energy shell;
    values above 0.5 are flagged, and a vanishing mean energy is reported as
    infinite relative variance.
    """
    if abs(np.linalg.norm(state) - 1.0) > 1e-10:
        raise ValueError("state must be normalized")
    if isinstance(h, EigenSystem):
        coeffs = h.eigenvectors.conj().T @ state
        w = np.abs(coeffs) ** 2
        mean = float(w @ h.eigenvalues)
        second = float(w @ h.eigenvalues ** 2)
    else:
        mat = h.mat if isinstance(h, DenseOperator) else h
        hpsi = mat @ state
        mean = float(np.real(np.vdot(state, hpsi)))
        second = float(np.real(np.vdot(hpsi, hpsi)))
    var = second - mean ** 2
    if abs(mean) < 1e-12 * np.sqrt(max(second, 0.0)):
        return float("inf"), True
    rel = var / mean ** 2
    return rel, rel > VARIANCE_FLAG_THRESHOLD


def plus_state_relative_variance(layout: SystemLayout, spec: ModelSpec,
                                 params: QbmParameters) -> float:
    """Closed-form relative energy variance of the all-plus state.

    Only the diagonal couplings fluctuate (the transverse part has the state
    as an eigenvector), so the variance is the sum of squared biases and
    squared diagonal-coupling weights, divided by the squared mean energy.
    """
    var = float(np.sum(params.bias ** 2) + np.sum(params.qbm_weights ** 2)
                + np.sum(params.therm_weights ** 2) + np.sum(params.interaction_weights ** 2))
    mean = float(np.sum(params.gamma))
    if spec.uses_xx:
        mean += float(np.sum(params.qbm_weights) + np.sum(params.therm_weights))
    if mean == 0.0:
        return float("inf")
    return var / mean ** 2


@dataclass(frozen=True)
class QuenchEstimate:
    """Time-averaged quench measurements with thermometer-based temperature."""

    times: tuple[float, ...]
    observables: dict[str, float]
    beta_therm: float | None
    beta_full: float | None
    energy_rel_variance: float
    variance_flagged: bool
    max_fluctuation: float
    flags: tuple[str, ...] = field(default=())

    def to_document(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "observables": {k: float(v) for k, v in self.observables.items()},
            "beta_therm": None if self.beta_therm is None else float(self.beta_therm),
            "beta_full": None if self.beta_full is None else float(self.beta_full),
            "energy_rel_variance": float(self.energy_rel_variance),
        }


def _measure(obs, psi, rho, noise_config, rng, clip):
    """One observable at one time, through the active noise pipeline."""
    if rho is not None:
        mean = obs.expectation_density(rho)
        second = None
        if noise_config is not None and noise_config.shot_noise:
            second = obs.second_moment_density(rho)
    else:
        mean = obs.expectation_pure(psi)
        second = None
        if noise_config is not None and noise_config.shot_noise:
            second = obs.second_moment_pure(psi)
    if second is not None:
        mean = shot_noise(mean, second, noise_config.nu, rng)
        if clip:
            mean = float(np.clip(mean, -1.0, 1.0))
    return mean


def _clipped_invert(eigenvalues: np.ndarray, target: float, flags: list[str], label: str) -> float:
    """invert_beta with the target clipped into the open spectral interval."""
    e_min, e_max = float(np.min(eigenvalues)), float(np.max(eigenvalues))
    margin = BETA_ENERGY_RTOL * (e_max - e_min)
    clipped = float(np.clip(target, e_min + margin, e_max - margin))
    if clipped != target:
        flags.append(f"{label}_energy_clipped")
    return invert_beta(np.sort(np.asarray(eigenvalues, dtype=np.float64)), clipped)


def quench_sample(eigsys_total: EigenSystem, observables: dict, layout: SystemLayout,
                  times, noise_config: NoiseConfig | None = None, *,
                  therm_observable: OperatorSum | None = None,
                  therm_eigenvalues: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> QuenchEstimate:
    """Quench the all-plus state and average observables over the given times.

    Each requested observable is measured at every time (through the noise
    channels and shot-noise emulation when configured) and averaged uniformly.
    When the thermometer-block observable and its standalone spectrum are
    supplied, the measured thermometer energy is inverted to an effective
    inverse temperature; the full-spectrum inversion of the conserved initial
    energy is reported alongside it.
    """
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if times.size < 1:
        raise ValueError("need at least one evolution time")
    if np.any(times <= 0):
        raise ValueError("evolution times must be positive")
    if noise_config is not None and noise_config.any_noise and rng is None:
        raise ValueError("noise requires an explicit random generator")

    n = int(np.log2(eigsys_total.dim))
    flags: list[str] = []
    names = list(observables)
    per_time = np.zeros((times.size, len(names)))
    therm_series = np.zeros(times.size) if therm_observable is not None else None

    use_density = noise_config is not None and noise_config.any_channel
    for ti, t in enumerate(times):
        if use_density:
            rho = noisy_quench_state(eigsys_total, float(t), noise_config, rng).rho
            psi = None
        else:
            psi = evolve(plus_state(n), eigsys_total, float(t))
            rho = None
        for oi, name in enumerate(names):
            obs = observables[name]
            clip = isinstance(obs, PauliWord)
            per_time[ti, oi] = _measure(obs, psi, rho, noise_config, rng, clip)
        if therm_series is not None:
            therm_series[ti] = _measure(therm_observable, psi, rho, noise_config, rng, False)

    averaged = per_time.mean(axis=0)
    max_fluct = float(np.max(np.abs(per_time - averaged))) if names else 0.0

    e_init, e2_init = initial_energy_stats(eigsys_total)
    var = e2_init - e_init ** 2
    if e_init == 0.0:
        rel_var, var_flag = float("inf"), True
    else:
        rel_var = var / e_init ** 2
        var_flag = rel_var > VARIANCE_FLAG_THRESHOLD

    beta_therm = None
    if therm_series is not None:
        if therm_eigenvalues is None:
            raise ValueError("thermometer spectrum required to invert the thermometer energy")
        try:
            beta_therm = _clipped_invert(therm_eigenvalues, float(therm_series.mean()),
                                         flags, "therm")
        except (ValueError, RuntimeError) as exc:  # degenerate thermometer spectrum
            flags.append(f"beta_therm_failed: {exc}")

    try:
        beta_full = _clipped_invert(eigsys_total.eigenvalues, e_init, flags, "full")
    except (ValueError, RuntimeError) as exc:
        beta_full = None
        flags.append(f"beta_full_failed: {exc}")

    return QuenchEstimate(
        times=tuple(float(t) for t in times),
        observables=dict(zip(names, (float(v) for v in averaged))),
        beta_therm=beta_therm,
        beta_full=beta_full,
        energy_rel_variance=rel_var,
        variance_flagged=var_flag,
        max_fluctuation=max_fluct,
        flags=tuple(flags),
    )


def thermometer_context(layout: SystemLayout, spec: ModelSpec, params: QbmParameters):
    """(thermometer observable on the full register, standalone thermometer
    eigenvalues) for quench_sample."""
    from .operators import block_matrix, hamiltonian_terms

    terms = hamiltonian_terms(layout, spec, params, "thermometer")
    obs = OperatorSum("H_therm", layout.n, tuple(terms))
    block = block_matrix(layout, spec, params, "thermometer")
    vals = np.linalg.eigvalsh(block)
    return obs, vals
