import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, special, stats

from dirtrel.models import (
    Kernel, cantilever_problem, corroded_beam_problem, exact_failure_probability, field_realize,
    gaussian_posterior, kl_expand, linear_lsf, linear_pf, linear_problem,
)
from dirtrel.models import cantilever as cant
from dirtrel.models.cantilever import (
    FlexibilityDomainError, cantilever_deflection, interpolation_matrix, sensor_locations,
)
from dirtrel.models.corroded_beam import (
    DATA, HYPER_LOWER, HYPER_UPPER, BeamDomainError, InnerSample, _Hyperprior, augmented_lsf,
    beam_log_likelihood, conditional_failure_probability, corroded_beam_stress, lognormal_params,
)
from dirtrel.models.kl import trapezoid_weights


class TestLinear:
    def test_origin(self):
        assert linear_lsf(np.zeros(3), 3.5) == 3.5

    def test_on_surface(self):
        assert linear_lsf(np.ones(4), 2.0) == 0.0

    def test_exact_pf(self):
        assert linear_pf(3.5) == pytest.approx(2.326e-4, rel=2e-4)
        assert linear_problem(7, 3.5).params["exact_pf"] == linear_pf(3.5)

    @given(st.integers(1, 50), st.floats(-3, 8))
    def test_box_contains_design_point(self, d, alpha):
        prob = linear_problem(d, alpha)
        design = alpha / np.sqrt(d) * np.ones(d)
        assert np.all(prob.lower < design) and np.all(design < prob.upper)
        assert linear_lsf(design, alpha) == pytest.approx(0.0, abs=1e-12)

    def test_dimension(self):
        with pytest.raises(ValueError):
            linear_problem(0, 1.0)


class TestBeamStress:
    def test_section_modulus(self):
        # unit moment gives 1 / W
        s = corroded_beam_stress(0.2, 0.03, 4.0, 1.0, rho_st=0.0)
        assert 1.0 / s == pytest.approx(0.2 * 0.03**2 / 6, rel=1e-14)
        assert 1.0 / s == pytest.approx(3e-5, rel=1e-12)

    def test_reference_state(self):
        moment = 3500 * 5 / 4 + 78_500 * 0.2 * 0.03 * 5**2 / 8
        assert moment == pytest.approx(5846.875, rel=1e-14)
        s = corroded_beam_stress(0.2, 0.03, 3500.0, 5.0)
        assert s == pytest.approx(moment / 3e-5, rel=1e-12)
        assert s == pytest.approx(1.949e8, rel=1e-3)
        assert s < 500e6

    def test_unloaded(self):
        assert corroded_beam_stress(0.2, 0.03, 0.0, 5.0, rho_st=0.0) == 0.0

    @pytest.mark.parametrize("arg", [0, 1, 3])
    def test_bad_geometry(self, arg):
        vals = [0.2, 0.03, 3500.0, 5.0]
        vals[arg] = 0.0
        with pytest.raises(BeamDomainError):
            corroded_beam_stress(*vals)

    @pytest.mark.parametrize("k", [0, 1])
    def test_monotone(self, k):
        x = np.array([0.2, 0.03])
        eps = 1e-6 * x[k]
        up, dn = x.copy(), x.copy()
        up[k] += eps
        dn[k] -= eps
        deriv = (corroded_beam_stress(*up, 3500.0, 5.0) - corroded_beam_stress(*dn, 3500.0, 5.0))
        assert deriv < 0


class TestBeamProblem:
    def test_data(self):
        assert DATA == ((0.18, 0.026), (0.14, 0.019))

    def test_likelihood_peak(self):
        data = [DATA[0]]
        peak = np.array([[0.18, 0.026, 1e-3, 1e-4]])
        g = np.random.default_rng(0)
        others = np.column_stack([g.uniform(0.1, 0.3, 500), g.uniform(0.015, 0.045, 500),
                                  g.uniform(1e-3, 0.045, 500), g.uniform(1e-4, 0.00675, 500)])
        assert beam_log_likelihood(peak, data)[0] > beam_log_likelihood(others, data).max()

    def test_likelihood_oracle(self):
        x = np.array([0.19, 0.028, 0.03, 0.0045])
        cov = np.array([[x[2]**2, 0.4 * x[2] * x[3]], [0.4 * x[2] * x[3], x[3]**2]])
        expect = sum(stats.multivariate_normal(x[:2], cov).logpdf(d) for d in DATA)
        assert beam_log_likelihood(x, DATA)[0] == pytest.approx(expect, rel=1e-12)

    def test_likelihood_domain(self):
        with pytest.raises(BeamDomainError):
            beam_log_likelihood(np.array([0.2, 0.03, -0.01, 0.004]), DATA)

    def test_prior_normalised(self):
        prior = _Hyperprior()
        g = np.random.default_rng(1)
        x = g.uniform(HYPER_LOWER, HYPER_UPPER, size=(200_000, 4))
        vals = np.exp(prior.logpdf(x)) * np.prod(HYPER_UPPER - HYPER_LOWER)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - 1) <= 3 * se

    def test_prior_moments(self):
        mu, s = lognormal_params(0.03, 4.5e-3)
        dist = stats.lognorm(s=s, scale=np.exp(mu))
        assert dist.mean() == pytest.approx(0.03, rel=1e-12)
        assert dist.std() == pytest.approx(4.5e-3, rel=1e-12)

    def test_wrap_round_trip(self):
        prior = _Hyperprior()
        x = prior.sample(np.random.default_rng(2), 1000)
        np.testing.assert_allclose(prior.from_standard(prior.to_standard(x)), x, rtol=1e-10)
        assert np.all((x >= HYPER_LOWER) & (x <= HYPER_UPPER))

    def test_conditional_pf_matches_augmented(self):
        inner = InnerSample(5000, seed=3)
        z = np.random.default_rng(3).standard_normal((5000, 4))
        x = np.array([0.16, 0.022, 0.03, 0.0045])
        direct = np.mean(augmented_lsf(np.tile(x, (5000, 1)), z) <= 0)
        assert conditional_failure_probability(x, inner)[0] == direct

    def test_conditional_pf_independent_mc(self):
        x = np.array([0.18, 0.026, 0.03, 0.0045])
        p = conditional_failure_probability(x, InnerSample(10_000, seed=0))[0]
        z = np.random.default_rng(99).standard_normal((200_000, 4))
        q = np.mean(augmented_lsf(np.tile(x, (z.shape[0], 1)), z) <= 0)
        se = np.sqrt(p * (1 - p) / 10_000 + q * (1 - q) / 200_000)
        assert abs(p - q) <= 3 * se

    def test_problem(self):
        prob = corroded_beam_problem(DATA)
        assert prob.dim == 4 and prob.has_data
        assert prob.evals_per_point == 10_000
        x = prob.sample_prior(np.random.default_rng(4), 20)
        assert np.all(prob.loglik(x) <= prob.log_likelihood_bound + 1e-9)
        before = prob.counter.snapshot()[0]
        prob.failure(x)
        assert prob.counter.snapshot()[0] - before == 20 * 10_000


class TestKL:
    def test_trace(self):
        kl = kl_expand(Kernel(1.0, 2.0), 2.0, 201, 201)
        assert np.all(np.diff(kl.eigenvalues) <= 1e-14)
        assert kl.eigenvalues.sum() == pytest.approx(2.0, rel=0.01)

    def test_full_reconstruction(self):
        kern = Kernel(1.5, 0.7)
        kl = kl_expand(kern, 2.0, 61, 61)
        K = kl.basis() @ kl.basis().T
        np.testing.assert_allclose(K, kern(kl.mesh, kl.mesh), atol=1e-6)

    def test_constant_kernel(self):
        kl = kl_expand(Kernel(2.0, kind="constant"), 3.0, 41, 3)
        assert kl.eigenvalues[0] == pytest.approx(4.0 * 3.0, rel=1e-12)
        np.testing.assert_allclose(kl.eigenvalues[1:], 0.0, atol=1e-10)
        np.testing.assert_allclose(kl.eigenfunctions[:, 0], 1 / np.sqrt(3.0), rtol=1e-10)

    @settings(max_examples=20)
    @given(st.floats(0.1, 5.0), st.integers(1, 30), st.integers(31, 120))
    def test_spectrum_properties(self, lc, M, n):
        kl = kl_expand(Kernel(1.0, lc), 2.0, n, M)
        lam = kl.eigenvalues
        assert np.all(lam >= 0) and np.all(np.diff(lam) <= 1e-14)
        assert lam.sum() <= 2.0 + 1e-10
        gram = kl.eigenfunctions.T @ (kl.weights[:, None] * kl.eigenfunctions)
        np.testing.assert_allclose(gram, np.eye(M), atol=1e-8)

    def test_weights(self):
        mesh = np.array([0.0, 0.5, 2.0])
        np.testing.assert_allclose(trapezoid_weights(mesh), [0.25, 1.0, 0.75])

    def test_mean_realisation(self):
        kl = kl_expand(Kernel(1.0, 1.0), 2.0, 51, 5, mean=3.0)
        np.testing.assert_array_equal(field_realize(kl, np.zeros(5)), 3.0)

    def test_plus_minus(self):
        kl = kl_expand(Kernel(1.0, 1.0), 2.0, 51, 5, mean=3.0)
        xi = np.random.default_rng(0).standard_normal(5)
        avg = 0.5 * (field_realize(kl, xi) + field_realize(kl, -xi))
        np.testing.assert_allclose(avg, kl.mean, rtol=1e-15)

    def test_mc_variance(self):
        kl = kl_expand(Kernel(1.0, 0.5), 2.0, 51, 8)
        xi = np.random.default_rng(1).standard_normal((10_000, 8))
        var = field_realize(kl, xi).var(axis=0, ddof=1)
        np.testing.assert_allclose(var, np.sum(kl.basis() ** 2, axis=1), rtol=0.05)

    def test_wrong_length(self):
        kl = kl_expand(Kernel(1.0, 1.0), 2.0, 11, 3)
        with pytest.raises(ValueError):
            field_realize(kl, np.zeros(4))

    def test_invalid_modes(self):
        with pytest.raises(ValueError):
            kl_expand(Kernel(1.0, 1.0), 2.0, 11, 12)


class TestCantilever:
    def tip(self, n, flex=1e-4):
        return cantilever_deflection(np.full(n, flex), 20.0, 2.0)[-1]

    def test_tip_deflection(self):
        exact = 20.0 * 2.0**3 * 1e-4 / 3
        assert exact == pytest.approx(5.333e-3, rel=1e-4)
        assert self.tip(401) == pytest.approx(exact, rel=1e-3)

    def test_second_order(self):
        exact = 20.0 * 2.0**3 * 1e-4 / 3
        errs = [abs(self.tip(n) - exact) for n in (26, 51, 101, 201)]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        np.testing.assert_allclose(ratios, 4.0, rtol=0.1)

    def test_rigid_limit(self):
        assert abs(self.tip(201, flex=1e-15)) < 1e-13

    def test_linear_in_load(self):
        flex = 1e-4 * (1 + 0.3 * np.sin(np.linspace(0, 3, 101)))
        np.testing.assert_allclose(cantilever_deflection(flex, 40.0),
                                   2 * cantilever_deflection(flex, 20.0), rtol=1e-14)

    def test_nonpositive(self):
        with pytest.raises(FlexibilityDomainError):
            cantilever_deflection(np.array([1e-4, 0.0, 1e-4]))

    def test_sensors(self):
        np.testing.assert_allclose(sensor_locations(4), [0.5, 1.0, 1.5, 2.0])
        with pytest.raises(ValueError):
            interpolation_matrix(np.linspace(0, 2, 11), np.array([2.5]))

    def test_constants(self):
        assert (cant.MEAN_FLEX, cant.STD_FLEX, cant.TRUE_CORR_LENGTH) == (1e-4, 3.5e-5, 2.0)
        assert (cant.LENGTH, cant.LOAD, cant.NOISE_STD, cant.NOISE_CORR_LENGTH) == (2.0, 20.0, 1e-3, 1.0)
        prob = cantilever_problem(M=5)
        assert prob.params["delta_max"] == pytest.approx(2.0 / 55)

    def test_affine_matches_solver(self):
        prob = cantilever_problem(M=6, m_obs=10)
        xi = np.random.default_rng(0).standard_normal((5, 6))
        flex = field_realize(prob.kl, xi)
        w = cantilever_deflection(flex, mesh=prob.kl.mesh)
        np.testing.assert_allclose(prob.lsf(xi), prob.params["delta_max"] - w[:, -1], rtol=1e-12)
        H = interpolation_matrix(prob.kl.mesh, sensor_locations(10))
        expect = [stats.multivariate_normal(H @ wi, prob.affine["noise_cov"]).logpdf(prob.data)
                  for wi in w]
        np.testing.assert_allclose(prob.log_likelihood(xi), expect, rtol=1e-10)

    def test_noiseless_identifiable(self):
        xi_true = np.array([0.5, -1.0, 0.3, 0.8, -0.2])
        prob = cantilever_problem(M=5, m_obs=10, xi_true=xi_true, add_noise=False)
        best = prob.log_likelihood(xi_true)[0]
        pert = xi_true + 0.05 * np.random.default_rng(1).standard_normal((200, 5))
        assert np.all(prob.log_likelihood(pert) < best)

    def test_posterior_oracle(self):
        prob = cantilever_problem(M=8, m_obs=10)
        mean, cov = gaussian_posterior(prob)
        G, S = prob.affine["obs_mat"], prob.affine["noise_cov"]
        # gain form of the Gaussian conditioning
        Sy = G @ G.T + S
        gain = linalg.solve(Sy, G, assume_a="pos").T
        np.testing.assert_allclose(mean, gain @ (prob.data - prob.affine["obs0"]), rtol=1e-6,
                                   atol=1e-9)
        np.testing.assert_allclose(cov, np.eye(8) - gain @ G, atol=1e-9)

    def test_exact_pf_oracle(self):
        prob = cantilever_problem(M=5, m_obs=10)
        _, logp = exact_failure_probability(prob, posterior=False)
        tips = prob.affine["tip0"] + prob.affine["tip_vec"] @ np.random.default_rng(2).standard_normal((5, 20_000))
        z = (prob.params["delta_max"] - tips.mean()) / tips.std(ddof=1)
        assert logp == pytest.approx(special.log_ndtr(-z), rel=0.05)

    def test_wrap_identity(self):
        prob = cantilever_problem(M=3)
        x = np.random.default_rng(3).standard_normal((10, 3))
        np.testing.assert_allclose(prob.from_standard(prob.to_standard(x)), x, rtol=1e-10)
