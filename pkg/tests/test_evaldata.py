import numpy as np
import pytest

from quenchbm.evaldata import (
    BernoulliMixture,
    MetricReport,
    aic,
    all_spin_configurations,
    empirical_table,
    export_probability_table,
    gibbs_visible_table,
    index_to_spins,
    kl_divergence,
    kl_divergence_flagged,
    mixture_probability,
    mixture_table,
    model_distribution,
    multinomial_resample,
    qbm_trainable_count,
    quench_visible_table,
    rbm_trainable_count,
    sample_mixture,
    spins_to_index,
    validate_table,
)
from quenchbm.operators import (
    ModelFamily,
    ModelSpec,
    QbmParameters,
    SystemLayout,
    build_hamiltonian,
    init_parameters,
)
from quenchbm.spectral import eig_hermitian
from quenchbm.thermal import draw_quench_times


class TestIndexing:
    def test_round_trip(self):
        for k in range(16):
            assert spins_to_index(index_to_spins(k, 4)) == k

    def test_site_zero_is_most_significant(self):
        assert np.array_equal(index_to_spins(0b1000, 4), [-1, 1, 1, 1])

    def test_all_configurations_order(self):
        configs = all_spin_configurations(3)
        assert configs.shape == (8, 3)
        assert np.array_equal(configs[0], [1, 1, 1])
        assert np.array_equal(configs[-1], [-1, -1, -1])


class TestMixture:
    def test_delta_mode(self):
        # fidelity ~ 1 concentrates on the center
        mix = BernoulliMixture([1 - 1e-12], [[1, -1, 1]])
        assert mixture_probability(mix, np.array([1, -1, 1])) == pytest.approx(1.0, abs=1e-9)
        assert mixture_probability(mix, np.array([1, 1, 1])) == pytest.approx(0.0, abs=1e-9)

    def test_half_fidelity_is_uniform(self):
        mix = BernoulliMixture([0.5], [[1, 1, -1, -1]])
        table = mixture_table(mix)
        assert np.allclose(table, 1 / 16, atol=1e-12)

    def test_standard_benchmark_table_normalized(self):
        rng = np.random.default_rng(0)
        mix = BernoulliMixture.random(4, rng)
        assert mix.m == 8
        assert np.all(mix.fidelities == 0.9)
        assert abs(mixture_table(mix).sum() - 1.0) < 1e-12

    def test_table_matches_pointwise_probability(self):
        rng = np.random.default_rng(1)
        mix = BernoulliMixture.random(5, rng, m=3, fidelity=0.8)
        table = mixture_table(mix)
        for k in (0, 7, 19, 31):
            assert table[k] == pytest.approx(
                mixture_probability(mix, index_to_spins(k, 5)), abs=1e-12)

    def test_permutation_covariance(self):
        rng = np.random.default_rng(2)
        mix = BernoulliMixture.random(4, rng, m=4)
        perm = np.array([2, 0, 3, 1])
        permuted = BernoulliMixture(mix.fidelities, mix.centers[:, perm])
        z = np.array([1, -1, -1, 1])
        assert mixture_probability(mix, z) == pytest.approx(
            mixture_probability(permuted, z[perm]), abs=1e-15)

    def test_rejects_bad_fidelity(self):
        with pytest.raises(ValueError):
            BernoulliMixture([1.0], [[1, 1]])


class TestSampling:
    def test_perfect_fidelity_returns_centers(self):
        mix = BernoulliMixture([1 - 1e-15], [[1, -1, 1, -1]])
        rng = np.random.default_rng(3)
        samples = sample_mixture(mix, 100, rng)
        assert np.all(samples == np.array([1, -1, 1, -1]))

    def test_empirical_frequencies_match_table(self):
        rng = np.random.default_rng(4)
        mix = BernoulliMixture.random(4, rng)
        n = 1_000_000
        samples = sample_mixture(mix, n, rng)
        emp = empirical_table(samples, 4)
        table = mixture_table(mix)
        sigma = np.sqrt(table * (1 - table) / n)
        assert np.all(np.abs(emp - table) < 3 * sigma + 1e-9)

    def test_spin_values_only(self):
        rng = np.random.default_rng(5)
        mix = BernoulliMixture.random(3, rng, m=2, fidelity=0.7)
        samples = sample_mixture(mix, 512, rng)
        assert set(np.unique(samples)) <= {-1.0, 1.0}


class TestGibbsVisibleTable:
    def test_zero_couplings_uniform(self):
        layout = SystemLayout(3, 1, 0)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = QbmParameters(np.ones(4), np.zeros(4), np.zeros(3), [], [])
        for beta in (-1.0, 0.5, 2.0):
            table = gibbs_visible_table(layout, spec, params, beta)
            assert np.allclose(table, 1 / 8, atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(6)
        layout = SystemLayout(4, 2, 0)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_XX)
        params = init_parameters(layout, spec, rng.uniform(-0.5, 0.5, 4), rng)
        table = gibbs_visible_table(layout, spec, params, -1.0)
        assert abs(table.sum() - 1.0) < 1e-12
        assert np.all(table >= 0)

    def test_classical_limit_matches_boltzmann(self):
        # Gamma=0, no hidden: thermal table is the classical Boltzmann table
        layout = SystemLayout(3, 0, 0)
        spec = ModelSpec(ModelFamily.SEMI_RESTRICTED_TI, ((0, 1), (1, 2)))
        rng = np.random.default_rng(7)
        b = rng.normal(size=3)
        w = rng.normal(size=2)
        params = QbmParameters(np.zeros(3), b, w, [], [])
        beta = -0.8
        table = gibbs_visible_table(layout, spec, params, beta)
        configs = all_spin_configurations(3)
        energy = configs @ b + w[0] * configs[:, 0] * configs[:, 1] + w[1] * configs[:, 1] * configs[:, 2]
        want = np.exp(-beta * energy)
        want /= want.sum()
        assert np.allclose(table, want, atol=1e-12)

    def test_scaling_invariance(self):
        # (beta, H) and (c beta, H/c) give the same Gibbs state
        rng = np.random.default_rng(8)
        layout = SystemLayout(3, 1, 0)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = init_parameters(layout, spec, np.zeros(3), rng)
        c = 2.7
        scaled = QbmParameters(params.gamma / c, params.bias / c, params.qbm_weights / c,
                               [], [])
        a = gibbs_visible_table(layout, spec, params, -1.0)
        b = gibbs_visible_table(layout, spec, scaled, -c)
        assert np.allclose(a, b, atol=1e-12)

    def test_visible_cap(self):
        layout = SystemLayout(13, 0, 0)
        spec = ModelSpec(ModelFamily.RESTRICTED_TI, ())
        params = QbmParameters(np.zeros(13), np.zeros(13), [], [], [])
        with pytest.raises(ValueError):
            gibbs_visible_table(layout, spec, params, 1.0)


class TestQuenchVisibleTable:
    def test_normalized_and_reproducible(self):
        rng = np.random.default_rng(9)
        layout = SystemLayout(3, 1, 2)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = init_parameters(layout, spec, np.zeros(3), rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        times = draw_quench_times(rng, 2)
        a = quench_visible_table(es, layout, times)
        b = quench_visible_table(es, layout, times)
        assert np.array_equal(a, b)
        assert abs(a.sum() - 1.0) < 1e-12

    def test_multinomial_budget(self):
        rng = np.random.default_rng(10)
        layout = SystemLayout(3, 1, 2)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = init_parameters(layout, spec, np.zeros(3), rng)
        es = eig_hermitian(build_hamiltonian(layout, spec, params).total)
        table = quench_visible_table(es, layout, [1.0, 2.0], rng=rng, sample_budget=1024)
        assert abs(table.sum() - 1.0) < 1e-12
        # quantized to multiples of 1/1024
        assert np.allclose(table * 1024, np.round(table * 1024), atol=1e-9)

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            multinomial_resample(np.array([0.5, 0.5]), 0, np.random.default_rng(0))


class TestModelDistributionDispatch:
    def test_exact_backend(self):
        rng = np.random.default_rng(11)
        layout = SystemLayout(3, 1, 0)
        spec = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        params = init_parameters(layout, spec, np.zeros(3), rng)
        a = model_distribution("exact", layout=layout, spec=spec, params=params, beta=-1.0)
        b = gibbs_visible_table(layout, spec, params, -1.0)
        assert np.array_equal(a, b)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            model_distribution("magic")


class TestKl:
    def test_identical_tables_zero(self):
        rng = np.random.default_rng(12)
        t = rng.uniform(0.1, 1.0, 16)
        t /= t.sum()
        assert kl_divergence(t, t) == pytest.approx(0.0, abs=1e-14)

    def test_delta_vs_uniform_closed_form(self):
        p = np.zeros(8)
        p[3] = 1.0
        q = np.full(8, 1 / 8)
        assert kl_divergence(p, q) == pytest.approx(np.log(8), abs=1e-12)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(13)
        p = rng.uniform(0.1, 1.0, 16)
        p /= p.sum()
        q = rng.uniform(0.1, 1.0, 16)
        q /= q.sum()
        perm = rng.permutation(16)
        assert kl_divergence(p[perm], q[perm]) == pytest.approx(kl_divergence(p, q), abs=1e-12)

    def test_nonnegative_on_random_tables(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            p = rng.uniform(0, 1, 8)
            p /= p.sum()
            q = rng.uniform(0.01, 1, 8)
            q /= q.sum()
            assert kl_divergence(p, q) >= 0

    def test_flooring_flagged(self):
        p = np.array([0.5, 0.5])
        q = np.array([1.0, 0.0])
        val, floored = kl_divergence_flagged(p, q)
        assert floored
        assert val > 0
        _, clean = kl_divergence_flagged(p, np.array([0.5, 0.5]))
        assert not clean

    def test_zero_data_cells_ignored(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.5, 0.5])
        assert kl_divergence(p, q) == pytest.approx(np.log(2), abs=1e-12)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            kl_divergence(np.array([0.5, 0.6]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            validate_table(np.array([0.5, -0.5, 1.0]))


class TestAic:
    def test_trivial_values(self):
        assert aic(0.0, 0) == 0.0
        assert aic(5.0, 10) == 30.0

    def test_rbm_count(self):
        assert rbm_trainable_count(6, 1) == 6 + 1 + 6

    def test_qbm_counts_per_family(self):
        layout = SystemLayout(4, 1, 2)
        rti = ModelSpec.standard(layout, ModelFamily.RESTRICTED_TI)
        assert qbm_trainable_count(layout, rti) == 5 + 4
        semi = ModelSpec.standard(layout, ModelFamily.SEMI_RESTRICTED_TI)
        assert qbm_trainable_count(layout, semi) == 5 + 4 + 6
        xx = ModelSpec.standard(layout, ModelFamily.RESTRICTED_XX)
        assert qbm_trainable_count(layout, xx) == 5 + 4  # tied edges count once

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            aic(float("inf"), 3)


class TestExports:
    def test_probability_csv(self, tmp_path):
        table = np.array([0.5, 0.25, 0.125, 0.125])
        path = tmp_path / "table.csv"
        export_probability_table(path, table, 2)
        lines = path.read_text().splitlines()
        assert lines[0] == "bitstring,probability"
        assert lines[1] == "00,0.5"
        assert lines[-1] == "11,0.125"

    def test_metric_report_document(self):
        rep = MetricReport(kl=0.2, aic=30.4, trainable_count=15, sample_count=1024)
        doc = rep.to_document()
        assert doc == {"kl": 0.2, "aic": 30.4, "trainable_count": 15,
                       "sample_count": 1024, "kl_floored": False}
