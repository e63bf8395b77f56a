import numpy as np
import pytest

from quenchbm.noise import QUENCH_TIME_HI, QUENCH_TIME_LO, NoiseConfig, plus_state
from quenchbm.operators import (
    ModelFamily,
    ModelSpec,
    OperatorSum,
    QbmParameters,
    SystemLayout,
    build_hamiltonian,
    build_pauli,
    hamiltonian_terms,
    init_diagnostic_parameters,
    init_parameters,
    x_word,
    z_word,
)
from quenchbm.spectral import eig_hermitian
from quenchbm.thermal import (
    GibbsEnsemble,
    dephased_average,
    draw_quench_times,
    energy_variance_diagnostic,
    gibbs_expectation,
    initial_energy_stats,
    invert_beta,
    microcanonical_expectation,
    plus_state_relative_variance,
    quench_sample,
    thermometer_context,
)
from tests.test_operators import random_model


def appendix_instance(rng, n_v=6, n_h=1, n_t=2, family=ModelFamily.RESTRICTED_TI):
    layout = SystemLayout(n_v, n_h, n_t)
    spec = ModelSpec.standard(layout, family)
    moments = rng.uniform(-0.6, 0.6, n_v)
    params = init_parameters(layout, spec, moments, rng)
    return layout, spec, params


class TestGibbsExpectation:
    def test_infinite_temperature_is_normalized_trace(self):
        rng = np.random.default_rng(0)
        layout, spec, params = random_model(rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        for w in (z_word([0], layout.n), x_word([1], layout.n), z_word([0, 2], layout.n)):
            assert gibbs_expectation(w, es, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_single_qubit_closed_form(self):
        es = eig_hermitian(build_pauli(0, "z", 1))
        for beta in (-2.0, -0.5, 0.3, 1.0, 4.0):
            got = gibbs_expectation(build_pauli(0, "z", 1), es, beta)
            assert got == pytest.approx(-np.tanh(beta), abs=1e-12)

    def test_decoupled_qubits_factorize(self):
        # H = b0 Z0 + b1 Z1, no coupling: <Z0 Z1> = <Z0><Z1>
        h = 0.7 * build_pauli(0, "z", 2).mat + np.pi / 7 * build_pauli(1, "z", 2).mat
        es = eig_hermitian(
            __import__("quenchbm.operators", fromlist=["DenseOperator"]).DenseOperator(h, 2, hermitian=True))
        beta = 0.9
        z0 = gibbs_expectation(z_word([0], 2), es, beta)
        z1 = gibbs_expectation(z_word([1], 2), es, beta)
        z01 = gibbs_expectation(z_word([0, 1], 2), es, beta)
        assert z01 == pytest.approx(z0 * z1, abs=1e-12)

    def test_strictly_decreasing_in_beta(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            layout, spec, params = random_model(rng)
            es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
            h_obs = OperatorSum("H", layout.n, tuple(hamiltonian_terms(layout, spec, params)))
            energies = [gibbs_expectation(h_obs, es, b) for b in (-2.0, -0.5, 0.0, 0.5, 2.0)]
            assert all(a > b for a, b in zip(energies, energies[1:]))

    def test_ensemble_probabilities_normalized(self):
        rng = np.random.default_rng(2)
        layout, spec, params = random_model(rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        for beta in (-3.0, 0.0, 0.7, 10.0):
            ens = GibbsEnsemble.build(es, beta)
            assert abs(ens.probabilities().sum() - 1.0) < 1e-12


class TestMicrocanonical:
    def test_full_window_identity(self):
        rng = np.random.default_rng(3)
        layout, spec, params = random_model(rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        ident = OperatorSum("I", layout.n, ((1.0, z_word([], layout.n)),))
        mid = 0.5 * (es.eigenvalues[0] + es.eigenvalues[-1])
        got = microcanonical_expectation(ident, es, mid, window=4 * es.spectral_range)
        assert got == pytest.approx(1.0, abs=1e-12)

    def test_single_state_window(self):
        es = eig_hermitian(build_pauli(0, "z", 1))
        got = microcanonical_expectation(build_pauli(0, "z", 1), es, -1.0, window=0.1)
        assert got == pytest.approx(-1.0, abs=1e-12)

    def test_empty_window_rejected(self):
        es = eig_hermitian(build_pauli(0, "z", 1))
        with pytest.raises(ValueError):
            microcanonical_expectation(build_pauli(0, "z", 1), es, 0.0, window=0.5)

    def test_agrees_with_canonical_at_matched_energy(self):
        # standard nonintegrable testbed: mixed-field Ising chain at 8 sites
        n = 8
        layout = SystemLayout(n, 0, 0)
        spec = ModelSpec(ModelFamily.SEMI_RESTRICTED_TI,
                         tuple((i, i + 1) for i in range(n - 1)))
        params = QbmParameters(np.full(n, 0.9045), np.full(n, 0.8090),
                               np.ones(n - 1), [], [])
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        e_init, _ = initial_energy_stats(es)
        beta = invert_beta(es, e_init)
        errs = []
        words = [z_word([s], n) for s in (2, 3, 4)] + [x_word([3], n), z_word([3, 4], n)]
        for w in words:
            micro = microcanonical_expectation(w, es, e_init, window=3.0)
            canon = gibbs_expectation(w, es, beta)
            errs.append(abs(micro - canon))
        assert max(errs) < 0.08
        assert np.median(errs) < 0.05


class TestInvertBeta:
    def test_infinite_temperature_energy(self):
        rng = np.random.default_rng(5)
        layout, spec, params = random_model(rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        beta = invert_beta(es, float(np.mean(es.eigenvalues)))
        assert beta == pytest.approx(0.0, abs=1e-9)

    def test_single_qubit_closed_form(self):
        es = eig_hermitian(build_pauli(0, "z", 1))
        assert invert_beta(es, -np.tanh(1.0)) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("beta0", [0.1, 1.0, 5.0, -0.7, -3.0])
    def test_round_trip(self, beta0):
        rng = np.random.default_rng(6)
        dim = 2 ** 6
        a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        from quenchbm.operators import DenseOperator
        es = eig_hermitian(DenseOperator((a + a.conj().T) / 2, 6, hermitian=True))
        ens = GibbsEnsemble.build(es, beta0)
        assert invert_beta(es, ens.energy()) == pytest.approx(beta0, abs=1e-8)

    def test_rejects_out_of_range_energy(self):
        es = eig_hermitian(build_pauli(0, "z", 1))
        with pytest.raises(ValueError):
            invert_beta(es, 1.5)
        with pytest.raises(ValueError):
            invert_beta(es, -1.0)


class TestEnergyVarianceDiagnostic:
    def test_transverse_only_is_eigenstate(self):
        layout = SystemLayout(3, 0, 0)
        spec = ModelSpec(ModelFamily.RESTRICTED_TI, ())
        params = QbmParameters(np.ones(3), np.zeros(3), [], [], [])
        h = build_hamiltonian(layout, spec, params).total
        rel, flagged = energy_variance_diagnostic(h, plus_state(3))
        assert rel == pytest.approx(0.0, abs=1e-12)
        assert not flagged

    def test_zero_mean_energy_flagged(self):
        h = build_pauli(0, "z", 1)
        rel, flagged = energy_variance_diagnostic(h, plus_state(1))
        assert rel == float("inf")
        assert flagged

    def test_dual_path_agreement_nine_sites(self):
        rng = np.random.default_rng(7)
        layout, spec, params = appendix_instance(rng, n_v=6, n_h=1, n_t=2)
        assert layout.n == 9
        h = build_hamiltonian(layout, spec, params).total
        matrix_rel, _ = energy_variance_diagnostic(h, plus_state(9))
        formula_rel = plus_state_relative_variance(layout, spec, params)
        assert matrix_rel == pytest.approx(formula_rel, abs=1e-10)

    def test_dual_path_agreement_xx_family(self):
        rng = np.random.default_rng(8)
        layout, spec, params = appendix_instance(rng, n_v=4, n_h=1, n_t=2,
                                                 family=ModelFamily.RESTRICTED_XX)
        h = build_hamiltonian(layout, spec, params).total
        matrix_rel, _ = energy_variance_diagnostic(h, plus_state(layout.n))
        formula_rel = plus_state_relative_variance(layout, spec, params)
        assert matrix_rel == pytest.approx(formula_rel, abs=1e-10)

    def test_eigensystem_path_matches_matrix_path(self):
        rng = np.random.default_rng(9)
        layout, spec, params = random_model(rng)
        h = build_hamiltonian(layout, spec, params).total
        es = eig_hermitian(h)
        a, _ = energy_variance_diagnostic(h, plus_state(layout.n))
        b, _ = energy_variance_diagnostic(es, plus_state(layout.n))
        assert a == pytest.approx(b, abs=1e-10)


class TestQuenchSample:
    def test_classical_limit_returns_initial_state_values(self):
        rng = np.random.default_rng(10)
        layout = SystemLayout(3, 1, 2)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = init_parameters(layout, spec, np.zeros(3), rng, gamma_bar=0.0)
        params = QbmParameters(np.zeros(layout.n), params.bias, params.qbm_weights,
                               params.therm_weights, params.interaction_weights)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        obs = {"z0": z_word([0], layout.n), "z0z3": z_word([0, 3], layout.n)}
        est = quench_sample(es, obs, layout, draw_quench_times(rng, 4))
        for v in est.observables.values():
            assert v == pytest.approx(0.0, abs=1e-13)

    def test_time_draws_inside_interval(self):
        rng = np.random.default_rng(11)
        t = draw_quench_times(rng, 1000)
        assert np.all(t >= QUENCH_TIME_LO) and np.all(t <= QUENCH_TIME_HI)
        assert QUENCH_TIME_HI == pytest.approx(10 * QUENCH_TIME_LO)

    def test_pauli_words_bounded(self):
        rng = np.random.default_rng(12)
        layout, spec, params = appendix_instance(rng, n_v=3, n_h=1, n_t=2)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        obs = {f"z{s}": z_word([s], layout.n) for s in range(layout.n)}
        cfg = NoiseConfig(shot_noise=True, nu=3)
        est = quench_sample(es, obs, layout, draw_quench_times(rng, 5), cfg, rng=rng)
        for v in est.observables.values():
            assert -1.0 <= v <= 1.0

    def test_finite_average_converges_to_dephased(self):
        rng = np.random.default_rng(13)
        layout, spec, params = appendix_instance(rng, n_v=4, n_h=1, n_t=2)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        w = z_word([0], layout.n)
        times = draw_quench_times(rng, 16) * 40.0  # long times decorrelate samples
        singles = [quench_sample(es, {"z0": w}, layout, [t]).observables["z0"] for t in times]
        mean = float(np.mean(singles))
        exact = dephased_average(w, es)
        assert abs(mean - exact) < np.std(singles)

    def test_beta_estimates_present_and_finite(self):
        rng = np.random.default_rng(14)
        layout, spec, params = appendix_instance(rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        t_obs, t_vals = thermometer_context(layout, spec, params)
        est = quench_sample(es, {"z0": z_word([0], layout.n)}, layout,
                            draw_quench_times(rng, 2),
                            therm_observable=t_obs, therm_eigenvalues=t_vals)
        assert est.beta_therm is not None and np.isfinite(est.beta_therm)
        assert est.beta_full is not None and np.isfinite(est.beta_full)
        # the all-plus state sits above the infinite-temperature energy
        assert est.beta_full < 0

    def test_thermometer_tracks_full_system_temperature(self):
        # equilibrated thermometer energy inverts to roughly the full-system
        # beta once the model block is a genuinely chaotic bath; the two-site
        # thermometer carries O(w_int^2) dressing, so agreement is coarse
        rels = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            layout = SystemLayout(8, 1, 2)
            spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
            params = init_diagnostic_parameters(layout, spec, rng)
            es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
            t_obs, t_vals = thermometer_context(layout, spec, params)
            e_therm = dephased_average(t_obs, es)
            margin = 1e-9 * (t_vals[-1] - t_vals[0])
            e_clipped = float(np.clip(e_therm, t_vals[0] + margin, t_vals[-1] - margin))
            beta_therm = invert_beta(np.sort(t_vals), e_clipped)
            e_init, _ = initial_energy_stats(es)
            beta_full = invert_beta(es, e_init)
            assert 0.5 < beta_therm / beta_full < 2.0
            rels.append(abs(beta_therm - beta_full) / abs(beta_full))
        assert np.median(rels) < 0.20

    def test_quench_matches_gibbs_at_initial_energy(self):
        # long-time averages against the canonical ensemble at the conserved energy
        rng = np.random.default_rng(16)
        errs = []
        for _ in range(3):
            layout, spec, params = appendix_instance(rng)
            es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
            e_init, _ = initial_energy_stats(es)
            beta = invert_beta(es, e_init)
            for s in range(layout.n_v):
                w = z_word([s], layout.n)
                errs.append(abs(dephased_average(w, es) - gibbs_expectation(w, es, beta)) / 2.0)
        assert np.median(errs) < 0.1

    def test_noise_requires_rng(self):
        rng = np.random.default_rng(17)
        layout, spec, params = appendix_instance(rng, n_v=3, n_h=1, n_t=2)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        with pytest.raises(ValueError):
            quench_sample(es, {}, layout, [1.0], NoiseConfig(shot_noise=True))

    def test_document_fields(self):
        rng = np.random.default_rng(18)
        layout, spec, params = appendix_instance(rng, n_v=3, n_h=1, n_t=2)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        t_obs, t_vals = thermometer_context(layout, spec, params)
        est = quench_sample(es, {"z0": z_word([0], layout.n)}, layout, [1.0, 2.0],
                            therm_observable=t_obs, therm_eigenvalues=t_vals)
        doc = est.to_document()
        assert set(doc) == {"times", "observables", "beta_therm", "beta_full",
                            "energy_rel_variance"}
        assert doc["times"] == [1.0, 2.0]
        assert set(doc["observables"]) == {"z0"}

    def test_noisy_estimates_reproducible(self):
        rng_a = np.random.default_rng(19)
        layout, spec, params = appendix_instance(rng_a, n_v=3, n_h=1, n_t=2)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        cfg = NoiseConfig(amplitude_damping=True, dephasing=True, shot_noise=True)
        obs = {"z0": z_word([0], layout.n)}
        a = quench_sample(es, obs, layout, [1.5], cfg, rng=np.random.default_rng(77))
        b = quench_sample(es, obs, layout, [1.5], cfg, rng=np.random.default_rng(77))
        assert a.observables == b.observables
