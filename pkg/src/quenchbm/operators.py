"""Spin operators and Hamiltonian assembly for visible/hidden/thermometer registers.

Builds dense Pauli operators, the transverse-field Ising and XX coupling
Hamiltonians on a partitioned qubit register, clamped (visible-configuration
restricted) Hamiltonians, and the standard parameter initialization.

Conventions fixed here and relied on everywhere else:

* Site ``s`` occupies Kronecker slot ``s`` counted from the left, so the
  computational-basis index ``k`` carries site ``s`` in bit ``n - 1 - s``.
  Visible sites come first, then hidden, then thermometer.
* Spin values are ``+1`` for basis state ``|0>`` and ``-1`` for ``|1>``
  (the sigma-z eigenvalues).
* All Hamiltonians are real symmetric; matrices are kept in float64 unless
  a caller introduces complex amplitudes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources

import jsonschema
import numpy as np

MAX_QUBITS = 14

HERMITICITY_ATOL = 1e-12

_PAULI = {
    "i": np.eye(2),
    "x": np.array([[0.0, 1.0], [1.0, 0.0]]),
    "y": np.array([[0.0, -1.0j], [1.0j, 0.0]]),
    "z": np.diag([1.0, -1.0]),
}


class ModelFamily(str, Enum):
    """Connectivity/coupling families for the model and thermometer blocks."""

    SEMI_RESTRICTED_TI = "semi-restricted-ti"
    RESTRICTED_TI = "restricted-ti"
    RESTRICTED_XX = "restricted-xx"


@dataclass(frozen=True)
class SystemLayout:
    """Partition of the qubit register into visible, hidden and thermometer sites."""

    n_v: int
    n_h: int
    n_t: int = 0

    def __post_init__(self):
        if self.n_v < 1:
            raise ValueError("need at least one visible site")
        if self.n_h < 0 or self.n_t < 0:
            raise ValueError("site counts must be nonnegative")
        if self.n > MAX_QUBITS:
            raise ValueError(f"register of {self.n} sites exceeds the cap of {MAX_QUBITS}")

    @property
    def n(self) -> int:
        return self.n_v + self.n_h + self.n_t

    @property
    def n_qbm(self) -> int:
        return self.n_v + self.n_h

    @property
    def visible_sites(self) -> range:
        return range(self.n_v)

    @property
    def hidden_sites(self) -> range:
        return range(self.n_v, self.n_v + self.n_h)

    @property
    def therm_sites(self) -> range:
        return range(self.n_v + self.n_h, self.n)

    @property
    def qbm_sites(self) -> range:
        return range(self.n_v + self.n_h)

    def role(self, site: int) -> str:
        if site in self.visible_sites:
            return "visible"
        if site in self.hidden_sites:
            return "hidden"
        if site in self.therm_sites:
            return "thermometer"
        raise ValueError(f"site {site} outside register of {self.n} sites")

    def qbm_only(self) -> "SystemLayout":
        return SystemLayout(self.n_v, self.n_h, 0)


def _normalize_edges(edges) -> tuple[tuple[int, int], ...]:
    out = []
    for a, b in edges:
        if a == b:
            raise ValueError(f"self-coupling ({a},{b}) is not an edge")
        out.append((min(a, b), max(a, b)))
    if len(set(out)) != len(out):
        raise ValueError("duplicate edges")
    return tuple(out)


@dataclass(frozen=True)
class ModelSpec:
    """Coupling family plus the explicit edge lists for each block.

    ``qbm_edges`` live on visible/hidden sites, ``therm_edges`` on thermometer
    sites, and ``interaction_edges`` join one visible site to one thermometer
    site. Hidden-hidden edges are never allowed; visible-visible edges only in
    the semi-restricted family.
    """

    family: ModelFamily
    qbm_edges: tuple[tuple[int, int], ...]
    therm_edges: tuple[tuple[int, int], ...] = ()
    interaction_edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "family", ModelFamily(self.family))
        object.__setattr__(self, "qbm_edges", _normalize_edges(self.qbm_edges))
        object.__setattr__(self, "therm_edges", _normalize_edges(self.therm_edges))
        object.__setattr__(self, "interaction_edges", _normalize_edges(self.interaction_edges))

    def validate(self, layout: SystemLayout) -> None:
        vis, hid, thm = set(layout.visible_sites), set(layout.hidden_sites), set(layout.therm_sites)
        for a, b in self.qbm_edges:
            if not {a, b} <= vis | hid:
                raise ValueError(f"model edge ({a},{b}) leaves the visible/hidden block")
            if {a, b} <= hid:
                raise ValueError(f"hidden-hidden edge ({a},{b}) is never allowed")
            if {a, b} <= vis and self.family is not ModelFamily.SEMI_RESTRICTED_TI:
                raise ValueError(f"visible-visible edge ({a},{b}) needs the semi-restricted family")
        for a, b in self.therm_edges:
            if not {a, b} <= thm:
                raise ValueError(f"thermometer edge ({a},{b}) leaves the thermometer block")
        for a, b in self.interaction_edges:
            if not (a in vis and b in thm):
                raise ValueError(f"interaction edge ({a},{b}) must join a visible site to a thermometer site")

    @property
    def uses_xx(self) -> bool:
        return self.family is ModelFamily.RESTRICTED_XX

    @staticmethod
    def standard(layout: SystemLayout, family: ModelFamily | str,
                 coupled_visible: int | None = None,
                 coupled_therm: int | None = None) -> "ModelSpec":
        """Default connectivity: complete visible-hidden bipartite couplings
        (plus all visible pairs for the semi-restricted family), the same
        pattern inside the thermometer block, and an interaction joining the
        first ``min(2, n_v)`` visible sites to the first ``min(2, n_t)``
        thermometer sites."""
        family = ModelFamily(family)
        qbm_edges = [(v, h) for v in layout.visible_sites for h in layout.hidden_sites]
        if family is ModelFamily.SEMI_RESTRICTED_TI:
            vis = list(layout.visible_sites)
            qbm_edges += [(vis[i], vis[j]) for i in range(len(vis)) for j in range(i + 1, len(vis))]
        therm = list(layout.therm_sites)
        split = (len(therm) + 1) // 2
        t_vis, t_hid = therm[:split], therm[split:]
        therm_edges = [(a, b) for a in t_vis for b in t_hid]
        if family is ModelFamily.SEMI_RESTRICTED_TI:
            therm_edges += [(t_vis[i], t_vis[j]) for i in range(len(t_vis)) for j in range(i + 1, len(t_vis))]
        if coupled_visible is None:
            coupled_visible = min(2, layout.n_v)
        if coupled_therm is None:
            coupled_therm = min(2, layout.n_t)
        inter = [(v, a) for v in list(layout.visible_sites)[:coupled_visible]
                 for a in therm[:coupled_therm]]
        spec = ModelSpec(family, tuple(qbm_edges), tuple(therm_edges), tuple(inter))
        spec.validate(layout)
        return spec


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("parameters must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class QbmParameters:
    """All couplings of the combined system.

    ``gamma`` and ``bias`` cover every site in register order. Weight arrays
    are aligned with the corresponding edge tuples of a ModelSpec. Only the
    model-block biases (visible and hidden) and ``qbm_weights`` are trainable;
    gamma, the thermometer block and the interaction weights stay frozen.
    """

    gamma: np.ndarray
    bias: np.ndarray
    qbm_weights: np.ndarray
    therm_weights: np.ndarray
    interaction_weights: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "bias", "qbm_weights", "therm_weights", "interaction_weights"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))

    def validate(self, layout: SystemLayout, spec: ModelSpec) -> None:
        if self.gamma.shape != (layout.n,) or self.bias.shape != (layout.n,):
            raise ValueError("gamma/bias must have one entry per site")
        if self.qbm_weights.shape != (len(spec.qbm_edges),):
            raise ValueError("qbm_weights misaligned with spec.qbm_edges")
        if self.therm_weights.shape != (len(spec.therm_edges),):
            raise ValueError("therm_weights misaligned with spec.therm_edges")
        if self.interaction_weights.shape != (len(spec.interaction_edges),):
            raise ValueError("interaction_weights misaligned with spec.interaction_edges")

    def trainable_vector(self, layout: SystemLayout) -> np.ndarray:
        return np.concatenate([self.bias[: layout.n_qbm], self.qbm_weights])

    def with_trainable(self, layout: SystemLayout, vector: np.ndarray) -> "QbmParameters":
        n_bias = layout.n_qbm
        if vector.shape != (n_bias + len(self.qbm_weights),):
            raise ValueError("trainable vector has the wrong length")
        bias = self.bias.copy()
        bias[:n_bias] = vector[:n_bias]
        return QbmParameters(self.gamma, bias, vector[n_bias:],
                             self.therm_weights, self.interaction_weights)

    def qbm_only(self, layout: SystemLayout) -> "QbmParameters":
        k = layout.n_qbm
        return QbmParameters(self.gamma[:k], self.bias[:k], self.qbm_weights,
                             np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class DenseOperator:
    """Dense operator on ``n_qubits`` sites with an optional hermiticity guarantee."""

    mat: np.ndarray
    n_qubits: int
    hermitian: bool = False

    def __post_init__(self):
        dim = 2 ** self.n_qubits
        if self.mat.shape != (dim, dim):
            raise ValueError(f"matrix shape {self.mat.shape} does not match {self.n_qubits} qubits")
        if self.hermitian:
            dev = np.max(np.abs(self.mat - self.mat.conj().T))
            if dev >= HERMITICITY_ATOL:
                raise ValueError(f"operator marked hermitian deviates by {dev:.3e}")
        self.mat.flags.writeable = False

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits


def kron_chain(factors) -> np.ndarray:
    out = np.array([[1.0]])
    for f in factors:
        out = np.kron(out, f)
    return out


def one_site_matrix(op: np.ndarray, site: int, n: int) -> np.ndarray:
    factors = [_PAULI["i"]] * n
    factors[site] = op
    return kron_chain(factors)


def two_site_matrix(op_a: np.ndarray, site_a: int, op_b: np.ndarray, site_b: int, n: int) -> np.ndarray:
    factors = [_PAULI["i"]] * n
    factors[site_a] = op_a
    factors[site_b] = op_b
    return kron_chain(factors)


def build_pauli(site: int, axis: str, n: int) -> DenseOperator:
    """Single-site Pauli operator I^site (x) sigma_axis (x) I^(n-site-1)."""
    if not 0 <= site < n:
        raise ValueError(f"site {site} out of range for {n} qubits")
    if n > MAX_QUBITS:
        raise ValueError(f"{n} qubits exceeds the cap of {MAX_QUBITS}")
    if axis not in ("x", "y", "z"):
        raise ValueError(f"unknown axis {axis!r}")
    return DenseOperator(one_site_matrix(_PAULI[axis], site, n), n, hermitian=True)


def site_bits(n: int) -> np.ndarray:
    """(n, 2^n) array: bit of each site for every basis index."""
    idx = np.arange(2 ** n)
    return np.array([(idx >> (n - 1 - s)) & 1 for s in range(n)])


def zword_diagonal(sites, n: int) -> np.ndarray:
    """Diagonal of a product of sigma-z over ``sites`` in the computational basis."""
    idx = np.arange(2 ** n)
    out = np.ones(2 ** n)
    for s in sites:
        out = out * (1.0 - 2.0 * ((idx >> (n - 1 - s)) & 1))
    return out


def flip_mask(sites, n: int) -> int:
    """Basis-index XOR mask implementing sigma-x on ``sites``."""
    m = 0
    for s in sites:
        m |= 1 << (n - 1 - s)
    return m


@dataclass(frozen=True)
class PauliWord:
    """A product of sigma-z and/or sigma-x factors, in index form.

    ``diag`` is the diagonal for the z part (all-ones if absent) and ``mask``
    the XOR index mask for the x part (0 if absent). Covers every observable
    this package measures: z words, x words and the xx+zz pairs come from sums
    of these. Any Pauli word squares to the identity.
    """

    name: str
    n_qubits: int
    diag: np.ndarray | None = None
    mask: int = 0

    def matrix(self) -> np.ndarray:
        dim = 2 ** self.n_qubits
        d = self.diag if self.diag is not None else np.ones(dim)
        rows = np.arange(dim) ^ self.mask
        m = np.zeros((dim, dim))
        m[rows, np.arange(dim)] = d
        return m

    def apply(self, psi: np.ndarray) -> np.ndarray:
        out = psi if self.diag is None else self.diag * psi
        if self.mask:
            out = out[np.arange(out.shape[0]) ^ self.mask]
        return out

    def expectation_pure(self, psi: np.ndarray) -> float:
        return float(np.real(np.vdot(psi, self.apply(psi))))

    def expectation_density(self, rho: np.ndarray) -> float:
        idx = np.arange(rho.shape[0])
        d = self.diag if self.diag is not None else 1.0
        # tr(rho W) with W[s^mask, s] = d[s]
        return float(np.real(np.sum(rho[idx, idx ^ self.mask] * d)))

    # every Pauli word squares to the identity
    def second_moment_pure(self, psi: np.ndarray) -> float:
        return 1.0

    def second_moment_density(self, rho: np.ndarray) -> float:
        return 1.0


def z_word(sites, n: int, name: str | None = None) -> PauliWord:
    label = name or "".join(f"Z{s}" for s in sites)
    return PauliWord(label, n, diag=zword_diagonal(sites, n))


def x_word(sites, n: int, name: str | None = None) -> PauliWord:
    label = name or "".join(f"X{s}" for s in sites)
    return PauliWord(label, n, mask=flip_mask(sites, n))


@dataclass(frozen=True)
class OperatorSum:
    """Weighted sum of Pauli words; used for Hamiltonian blocks as observables."""

    name: str
    n_qubits: int
    terms: tuple[tuple[float, PauliWord], ...]

    def matrix(self) -> np.ndarray:
        dim = 2 ** self.n_qubits
        out = np.zeros((dim, dim))
        for c, w in self.terms:
            out += c * w.matrix()
        return out

    def apply(self, psi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(psi)
        for c, w in self.terms:
            out = out + c * w.apply(psi)
        return out

    def expectation_pure(self, psi: np.ndarray) -> float:
        return float(sum(c * w.expectation_pure(psi) for c, w in self.terms))

    def second_moment_pure(self, psi: np.ndarray) -> float:
        v = self.apply(psi)
        return float(np.real(np.vdot(v, v)))

    def expectation_density(self, rho: np.ndarray) -> float:
        return float(sum(c * w.expectation_density(rho) for c, w in self.terms))

    def second_moment_density(self, rho: np.ndarray) -> float:
        # tr(rho S^2) = tr((S rho) S); S rho by cheap row operations per word.
        idx = np.arange(rho.shape[0])
        srho = np.zeros_like(rho, dtype=np.result_type(rho.dtype, np.float64))
        for c, w in self.terms:
            part = rho if w.diag is None else w.diag[:, None] * rho
            if w.mask:
                part = part[idx ^ w.mask, :]
            srho = srho + c * part
        out = 0.0
        for c, w in self.terms:
            d = w.diag if w.diag is not None else 1.0
            out += c * float(np.real(np.sum(srho[idx, idx ^ w.mask] * d)))
        return out


def hamiltonian_terms(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                      block: str = "total") -> list[tuple[float, PauliWord]]:
    """(coefficient, word) list for one of the blocks: qbm, thermometer,
    interaction, or total."""
    spec.validate(layout)
    params.validate(layout, spec)
    n = layout.n
    terms: list[tuple[float, PauliWord]] = []
    if block in ("qbm", "total"):
        for s in layout.qbm_sites:
            terms.append((float(params.gamma[s]), x_word([s], n)))
            terms.append((float(params.bias[s]), z_word([s], n)))
        for e, (a, b) in enumerate(spec.qbm_edges):
            w = float(params.qbm_weights[e])
            terms.append((w, z_word([a, b], n)))
            if spec.uses_xx:
                terms.append((w, x_word([a, b], n)))
    if block in ("thermometer", "total"):
        for s in layout.therm_sites:
            terms.append((float(params.gamma[s]), x_word([s], n)))
            terms.append((float(params.bias[s]), z_word([s], n)))
        for e, (a, b) in enumerate(spec.therm_edges):
            w = float(params.therm_weights[e])
            terms.append((w, z_word([a, b], n)))
            if spec.uses_xx:
                terms.append((w, x_word([a, b], n)))
    if block in ("interaction", "total"):
        for e, (a, b) in enumerate(spec.interaction_edges):
            terms.append((float(params.interaction_weights[e]), z_word([a, b], n)))
    if block not in ("qbm", "thermometer", "interaction", "total"):
        raise ValueError(f"unknown block {block!r}")
    return terms


def _dense_from_terms(terms, n: int) -> np.ndarray:
    dim = 2 ** n
    out = np.zeros((dim, dim))
    for c, w in terms:
        if w.diag is not None and w.mask == 0:
            out[np.arange(dim), np.arange(dim)] += c * w.diag
        else:
            out += c * w.matrix()
    return out


@dataclass(frozen=True)
class HamiltonianBlocks:
    """Total Hamiltonian together with its three constituent blocks, all on
    the full register."""

    total: DenseOperator
    qbm: DenseOperator
    thermometer: DenseOperator
    interaction: DenseOperator


def build_hamiltonian(layout: SystemLayout, spec: ModelSpec, params: QbmParameters) -> HamiltonianBlocks:
    """Assemble the model, thermometer and interaction blocks and their sum."""
    n = layout.n
    mats = {}
    for block in ("qbm", "thermometer", "interaction"):
        mats[block] = _dense_from_terms(hamiltonian_terms(layout, spec, params, block), n)
    total = mats["qbm"] + mats["thermometer"] + mats["interaction"]
    return HamiltonianBlocks(
        total=DenseOperator(total, n, hermitian=True),
        qbm=DenseOperator(mats["qbm"], n, hermitian=True),
        thermometer=DenseOperator(mats["thermometer"], n, hermitian=True),
        interaction=DenseOperator(mats["interaction"], n, hermitian=True),
    )


def _subregister_params(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                        block: str):
    """Remap one block onto its own compact register."""
    if block == "qbm":
        sites = list(layout.qbm_sites)
        edges, weights = spec.qbm_edges, params.qbm_weights
        sub_layout = SystemLayout(layout.n_v, layout.n_h, 0)
    elif block == "thermometer":
        sites = list(layout.therm_sites)
        edges, weights = spec.therm_edges, params.therm_weights
        # thermometer sites are relabeled as visible within their own register
        sub_layout = SystemLayout(max(layout.n_t, 1), 0, 0)
    else:
        raise ValueError(f"no compact register for block {block!r}")
    pos = {s: i for i, s in enumerate(sites)}
    sub_edges = tuple((pos[a], pos[b]) for a, b in edges)
    sub_params = QbmParameters(params.gamma[sites], params.bias[sites], weights,
                               np.zeros(0), np.zeros(0))
    return sub_layout, sub_edges, sub_params


def block_matrix(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                 block: str) -> np.ndarray:
    """Dense matrix of the qbm or thermometer block on its own compact register."""
    _, sub_edges, sub = _subregister_params(layout, spec, params, block)
    n = len(sub.gamma)
    terms: list[tuple[float, PauliWord]] = []
    for s in range(n):
        terms.append((float(sub.gamma[s]), x_word([s], n)))
        terms.append((float(sub.bias[s]), z_word([s], n)))
    for e, (a, b) in enumerate(sub_edges):
        w = float(sub.qbm_weights[e])
        terms.append((w, z_word([a, b], n)))
        if spec.uses_xx:
            terms.append((w, x_word([a, b], n)))
    return _dense_from_terms(terms, n)


def build_clamped_hamiltonian(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                              z_v: np.ndarray) -> tuple[DenseOperator, float]:
    """Restrict the total Hamiltonian to a fixed visible spin assignment.

    Fixing the visible spins selects the subspace where every visible sigma-z
    equals the scalar ``z_v[s]``; visible sigma-x factors connect distinct
    visible assignments and therefore drop out entirely. What remains is an
    operator on the hidden+thermometer register plus a scalar offset carrying
    the purely-visible energy, so that thermal traces over the clamped system
    factor as exp(-beta * offset) times traces of the reduced operator.

    Returns (reduced operator, offset).
    """
    z_v = np.asarray(z_v, dtype=np.float64)
    if z_v.shape != (layout.n_v,):
        raise ValueError(f"z_v must have {layout.n_v} entries")
    if not np.all(np.abs(z_v) == 1.0):
        raise ValueError("z_v entries must be +1 or -1")
    spec.validate(layout)
    params.validate(layout, spec)

    rest = [s for s in range(layout.n) if s >= layout.n_v]
    pos = {s: i for i, s in enumerate(rest)}
    m = len(rest)
    dim = 2 ** m
    reduced = np.zeros((dim, dim))
    offset = 0.0

    def add(terms_):
        nonlocal offset
        for c, kind, sites in terms_:
            clamped = [s for s in sites if s < layout.n_v]
            free = [s for s in sites if s >= layout.n_v]
            if kind == "x" and clamped:
                continue  # no matrix elements inside the clamped subspace
            scalar = c * float(np.prod([z_v[s] for s in clamped])) if kind == "z" else c
            if kind == "z" and not free:
                offset += scalar
                continue
            sub = [pos[s] for s in free]
            word = z_word(sub, m) if kind == "z" else x_word(sub, m)
            if word.diag is not None and word.mask == 0:
                reduced[np.arange(dim), np.arange(dim)] += scalar * word.diag
            else:
                reduced[np.arange(dim) ^ word.mask, np.arange(dim)] += scalar * (
                    word.diag if word.diag is not None else np.ones(dim))

    raw: list[tuple[float, str, list[int]]] = []
    for s in range(layout.n):
        raw.append((float(params.gamma[s]), "x", [s]))
        raw.append((float(params.bias[s]), "z", [s]))
    for e, (a, b) in enumerate(spec.qbm_edges):
        w = float(params.qbm_weights[e])
        raw.append((w, "z", [a, b]))
        if spec.uses_xx:
            raw.append((w, "x", [a, b]))
    for e, (a, b) in enumerate(spec.therm_edges):
        w = float(params.therm_weights[e])
        raw.append((w, "z", [a, b]))
        if spec.uses_xx:
            raw.append((w, "x", [a, b]))
    for e, (a, b) in enumerate(spec.interaction_edges):
        raw.append((float(params.interaction_weights[e]), "z", [a, b]))
    add(raw)

    return DenseOperator(reduced, m, hermitian=True), offset


BIAS_CLIP = 1e-3
HIDDEN_BIAS_STD = np.sqrt(2.5e-5)
WEIGHT_STD = np.sqrt(1e-4)
GAMMA_STD = np.sqrt(2.5e-5)


def init_parameters(layout: SystemLayout, spec: ModelSpec, data_moments: np.ndarray,
                    rng: np.random.Generator, gamma_bar: float = 1.0) -> QbmParameters:
    """Standard training initialization.

    Visible biases are set to the log-odds of each visible unit being +1 in
    the data (probability clipped to [1e-3, 1-1e-3]); hidden and thermometer
    biases are drawn from N(0, 2.5e-5); model and thermometer weights from
    N(0, 1e-4); every gamma from N(gamma_bar, 2.5e-5); interaction weights
    from N(0, 1). Draw order is fixed (gamma, hidden biases, model weights,
    thermometer biases, thermometer weights, interaction weights) so a seeded
    generator reproduces parameters exactly.
    """
    data_moments = np.asarray(data_moments, dtype=np.float64)
    if data_moments.shape != (layout.n_v,):
        raise ValueError(f"need one data moment per visible unit, got {data_moments.shape}")
    p = np.clip((data_moments + 1.0) / 2.0, BIAS_CLIP, 1.0 - BIAS_CLIP)

    gamma = rng.normal(gamma_bar, GAMMA_STD, size=layout.n)
    bias = np.zeros(layout.n)
    bias[: layout.n_v] = np.log(p / (1.0 - p))
    bias[layout.n_v: layout.n_qbm] = rng.normal(0.0, HIDDEN_BIAS_STD, size=layout.n_h)
    qbm_w = rng.normal(0.0, WEIGHT_STD, size=len(spec.qbm_edges))
    bias[layout.n_qbm:] = rng.normal(0.0, HIDDEN_BIAS_STD, size=layout.n_t)
    therm_w = rng.normal(0.0, WEIGHT_STD, size=len(spec.therm_edges))
    inter_w = rng.normal(0.0, 1.0, size=len(spec.interaction_edges))

    params = QbmParameters(gamma, bias, qbm_w, therm_w, inter_w)
    params.validate(layout, spec)
    return params


def init_diagnostic_parameters(layout: SystemLayout, spec: ModelSpec,
                               rng: np.random.Generator, gamma_bar: float = 1.0,
                               interaction_std: float = 1.0) -> QbmParameters:
    """Chaos-diagnostic initialization: model biases and weights from N(0,1)
    (approximating typical trained magnitudes), with gamma, thermometer and
    interaction draws identical in distribution to the training init. Draw
    order fixed for seeded reproducibility."""
    gamma = rng.normal(gamma_bar, GAMMA_STD, size=layout.n)
    bias = np.zeros(layout.n)
    bias[: layout.n_qbm] = rng.normal(0.0, 1.0, size=layout.n_qbm)
    qbm_w = rng.normal(0.0, 1.0, size=len(spec.qbm_edges))
    bias[layout.n_qbm:] = rng.normal(0.0, HIDDEN_BIAS_STD, size=layout.n_t)
    therm_w = rng.normal(0.0, WEIGHT_STD, size=len(spec.therm_edges))
    inter_w = rng.normal(0.0, interaction_std, size=len(spec.interaction_edges))
    params = QbmParameters(gamma, bias, qbm_w, therm_w, inter_w)
    params.validate(layout, spec)
    return params


# --- serialization -----------------------------------------------------------

_SCHEMA = None


def _schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = resources.files("quenchbm.schema").joinpath("qbm_params.schema.json").read_text()
        _SCHEMA = json.loads(text)
    return _SCHEMA


def _edge_map(edges, weights) -> dict[str, float]:
    return {f"{a}-{b}": float(w) for (a, b), w in zip(edges, weights)}


def _edge_list(mapping) -> tuple[tuple[tuple[int, int], ...], np.ndarray]:
    pairs = []
    vals = []
    for key in sorted(mapping, key=lambda k: tuple(int(x) for x in k.split("-"))):
        a, b = key.split("-")
        pairs.append((int(a), int(b)))
        vals.append(float(mapping[key]))
    return tuple(pairs), np.array(vals)


def parameters_to_document(layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                           seed: int | None = None) -> dict:
    params.validate(layout, spec)
    doc = {
        "layout": {"n_visible": layout.n_v, "n_hidden": layout.n_h, "n_thermometer": layout.n_t},
        "family": spec.family.value,
        "edges": {
            "qbm": [list(e) for e in spec.qbm_edges],
            "thermometer": [list(e) for e in spec.therm_edges],
            "interaction": [list(e) for e in spec.interaction_edges],
        },
        "gamma": [float(g) for g in params.gamma],
        "bias": [float(b) for b in params.bias],
        "weights": {**_edge_map(spec.qbm_edges, params.qbm_weights),
                    **_edge_map(spec.therm_edges, params.therm_weights)},
        "interaction": _edge_map(spec.interaction_edges, params.interaction_weights),
        "seed": seed,
    }
    jsonschema.validate(doc, _schema())
    return doc


def parameters_from_document(doc: dict) -> tuple[SystemLayout, ModelSpec, QbmParameters, int | None]:
    jsonschema.validate(doc, _schema())
    lay = doc["layout"]
    layout = SystemLayout(lay["n_visible"], lay["n_hidden"], lay["n_thermometer"])
    qbm_edges = tuple(tuple(e) for e in doc["edges"]["qbm"])
    therm_edges = tuple(tuple(e) for e in doc["edges"]["thermometer"])
    inter_edges = tuple(tuple(e) for e in doc["edges"]["interaction"])
    spec = ModelSpec(ModelFamily(doc["family"]), qbm_edges, therm_edges, inter_edges)
    spec.validate(layout)
    weights = doc["weights"]
    qbm_w = np.array([weights[f"{a}-{b}"] for a, b in spec.qbm_edges])
    therm_w = np.array([weights[f"{a}-{b}"] for a, b in spec.therm_edges])
    inter_w = np.array([doc["interaction"][f"{a}-{b}"] for a, b in spec.interaction_edges])
    params = QbmParameters(np.array(doc["gamma"]), np.array(doc["bias"]), qbm_w, therm_w, inter_w)
    params.validate(layout, spec)
    return layout, spec, params, doc.get("seed")


def save_parameters(path, layout: SystemLayout, spec: ModelSpec, params: QbmParameters,
                    seed: int | None = None) -> None:
    doc = parameters_to_document(layout, spec, params, seed)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_parameters(path) -> tuple[SystemLayout, ModelSpec, QbmParameters, int | None]:
    with open(path, encoding="utf-8") as fh:
        return parameters_from_document(json.load(fh))
