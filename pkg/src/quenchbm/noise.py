"""Single-qubit amplitude-damping and dephasing channels for quenched states,
plus Gaussian shot-noise emulation of finite-sample observable estimates.

Channels act on density matrices. The simulator stays in the cheap pure-state
representation until a channel is enabled; `noisy_quench_state` performs the
switch. Channel durations are drawn uniformly from the quench-time interval,
one independent draw per (qubit, channel) application.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import EigenSystem, evolve

TRACE_ATOL = 1e-10
HERM_ATOL = 1e-10
EIG_FLOOR = -1e-8

# quench-time interval; the lower endpoint also defines the time/energy units
QUENCH_TIME_LO = np.sqrt(2.0 / np.pi)
QUENCH_TIME_HI = 10.0 * np.sqrt(2.0 / np.pi)

DEFAULT_SHOTS = 1000


@dataclass(frozen=True)
class NoiseConfig:
    """Channel strengths and which noise sources are active.

    t1 and t_phi are in the same time units as the quench evolution; nu is
    the shot count per observable estimate.
    """

    t1: float = 75.0
    t_phi: float = 75.0
    nu: int = DEFAULT_SHOTS
    amplitude_damping: bool = False
    dephasing: bool = False
    shot_noise: bool = False

    def __post_init__(self):
        if self.t1 <= 0 or self.t_phi <= 0:
            raise ValueError("relaxation and dephasing times must be positive")
        if self.nu < 1:
            raise ValueError("shot count must be at least 1")

    @property
    def any_channel(self) -> bool:
        return self.amplitude_damping or self.dephasing

    @property
    def any_noise(self) -> bool:
        return self.any_channel or self.shot_noise


@dataclass(frozen=True)
class DensityState:
    """Validated density matrix on n_qubits sites."""

    rho: np.ndarray
    n_qubits: int

    def __post_init__(self):
        dim = 2 ** self.n_qubits
        if self.rho.shape != (dim, dim):
            raise ValueError(f"density matrix shape {self.rho.shape} does not match {self.n_qubits} qubits")
        tr = np.trace(self.rho)
        if abs(tr - 1.0) > TRACE_ATOL:
            raise ValueError(f"trace {tr} is not 1")
        if np.max(np.abs(self.rho - self.rho.conj().T)) > HERM_ATOL:
            raise ValueError("density matrix is not Hermitian")
        min_eig = float(np.linalg.eigvalsh(self.rho)[0])
        if min_eig <= EIG_FLOOR:
            raise ValueError(f"density matrix has negative eigenvalue {min_eig:.3e}")
        self.rho.flags.writeable = False

    @staticmethod
    def from_pure(psi: np.ndarray, n_qubits: int) -> "DensityState":
        return DensityState(np.outer(psi, psi.conj()), n_qubits)


def _apply_single_site_kraus(rho: np.ndarray, kraus, site: int, n: int) -> np.ndarray:
    """sum_k (I (x) E_k (x) I) rho (...)^dag via axis reshaping."""
    left = 2 ** site
    right = 2 ** (n - site - 1)
    r = rho.reshape(left, 2, right, left, 2, right)
    out = np.zeros_like(r)
    for e in kraus:
        # contract E on the row site axis and E^dag on the column site axis
        t = np.einsum("ab,LbRmcr->LaRmcr", e, r)
        out += np.einsum("LaRmcr,dc->LaRmdr", t, e.conj())
    return out.reshape(rho.shape)


def amplitude_damping_kraus(t: float, t1: float) -> list[np.ndarray]:
    decay = np.exp(-t / t1)
    e1 = np.diag([1.0, np.sqrt(decay)])  # sqrt(e^{-t/T1}) = e^{-t/2T1}
    e2 = np.array([[0.0, np.sqrt(1.0 - decay)], [0.0, 0.0]])
    return [e1, e2]


def dephasing_kraus(t: float, t_phi: float) -> list[np.ndarray]:
    e1 = np.diag([1.0, np.exp(-t / t_phi)])
    e2 = np.diag([0.0, np.sqrt(1.0 - np.exp(-2.0 * t / t_phi))])
    return [e1, e2]


def apply_amplitude_damping(state: DensityState, t: float, t1: float, site: int) -> DensityState:
    """Relax one site toward |0> with characteristic time t1."""
    if t < 0:
        raise ValueError("channel duration must be nonnegative")
    rho = _apply_single_site_kraus(state.rho, amplitude_damping_kraus(t, t1), site, state.n_qubits)
    return DensityState(rho, state.n_qubits)


def apply_dephasing(state: DensityState, t: float, t_phi: float, site: int) -> DensityState:
    """Decay one site's coherences with characteristic time t_phi; populations
    in the computational basis are untouched."""
    if t < 0:
        raise ValueError("channel duration must be nonnegative")
    rho = _apply_single_site_kraus(state.rho, dephasing_kraus(t, t_phi), site, state.n_qubits)
    return DensityState(rho, state.n_qubits)


def plus_state(n: int) -> np.ndarray:
    return np.full(2 ** n, 2.0 ** (-n / 2.0))


def noisy_quench_state(eigsys: EigenSystem, t_evolve: float, config: NoiseConfig,
                       rng: np.random.Generator) -> DensityState:
    """Evolve the all-plus product state for t_evolve, then hit every qubit
    with each enabled channel for an independent random duration drawn from
    the quench-time interval."""
    n = int(np.log2(eigsys.dim))
    psi = evolve(plus_state(n), eigsys, t_evolve)
    state = DensityState.from_pure(psi, n)
    if config.amplitude_damping:
        for site in range(n):
            tau = rng.uniform(QUENCH_TIME_LO, QUENCH_TIME_HI)
            state = apply_amplitude_damping(state, tau, config.t1, site)
    if config.dephasing:
        for site in range(n):
            tau = rng.uniform(QUENCH_TIME_LO, QUENCH_TIME_HI)
            state = apply_dephasing(state, tau, config.t_phi, site)
    return state


def shot_noise(exact_mean: float, exact_second_moment: float, nu: int,
               rng: np.random.Generator) -> float:
    """Gaussian emulation of a nu-shot estimate of an observable."""
    if nu < 1:
        raise ValueError("shot count must be at least 1")
    variance = exact_second_moment - exact_mean ** 2
    if variance < 0:
        variance = 0.0  # numeric noise below exact zero
    return float(exact_mean + rng.normal(0.0, np.sqrt(variance / nu)))
