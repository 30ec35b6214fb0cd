import numpy as np
import pytest
from scipy.stats import ks_2samp

from cgsur import fem, field, genmodel, predict
from cgsur.errors import DegenerateValidation, NonPositiveVariance
from cgsur.field import BoundaryCoeffs, GrfSampler, GrfSpec
from cgsur.genmodel import GenerativeModel
from cgsur.inference import TrainConfig, UnlabeledData, VariationalState, init_state, train

BC_A = BoundaryCoeffs(0.0, 0.0, 1.0, 1.0)


def plain_state(d_f=4, d_c=2, seed=0, hidden=(6,)):
    model = GenerativeModel(d_f, d_c, decoder_hidden=hidden, seed=seed)
    return VariationalState(model, TrainConfig(seed=seed))


class TestInferZ:
    def test_decoder_ignoring_z_recovers_prior(self):
        state = plain_state()
        model = state.model
        model.params.decoder.params[:] = 0.0
        bias = model.params.decoder.params[-2 * model.dim_x :]
        bias[model.dim_x :] = np.log(0.5)
        x = np.random.default_rng(0).normal(0.0, 0.5, model.dim_x)
        q = predict.infer_z(x, state, mode="optimize", steps=800, lr=0.05)
        assert np.max(np.abs(q.mean)) < 0.05
        assert np.max(np.abs(q.var - 1.0)) < 0.1

    def test_deterministic_given_seed(self):
        state = plain_state(seed=1)
        x = np.random.default_rng(1).normal(0.4, 0.8, state.model.dim_x)
        a = predict.infer_z(x, state, steps=50, seed=3)
        b = predict.infer_z(x, state, steps=50, seed=3)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.var, b.var)

    def test_amortized_requires_encoder(self):
        state = plain_state(seed=2)
        with pytest.raises(ValueError):
            predict.infer_z(np.zeros(state.model.dim_x), state, mode="amortized")

    def test_amortized_and_optimized_agree_after_training(self):
        rng = np.random.default_rng(3)
        model = GenerativeModel(4, 2, decoder_hidden=(16,), seed=3)
        sampler = GrfSampler(GrfSpec(grid_size=4, length_scale=0.3))
        xs = np.array([sampler.sample(rng).lambda_vec for _ in range(16)])
        cfg = TrainConfig(
            iterations=600,
            amortized=True,
            encoder_hidden=(16,),
            seed=0,
            plateau_window=10**9,
            unlabeled_batch=16,
        )
        state, _ = train(model, cfg, unlabeled=UnlabeledData(xs))
        x = xs[0]

        def elbo_of(q):
            total = 0.0
            n = 64
            draws = q.mean + np.sqrt(q.var) * rng.standard_normal((n, model.dim_z))
            for z in draws:
                total += model.logp_x_given_z(x, z)
            from cgsur.gaussians import kl_diag_standard

            return total / n - kl_diag_standard(q.mean, q.var)

        q_am = predict.infer_z(x, state, mode="amortized")
        q_opt = predict.infer_z(x, state, mode="optimize", steps=600)
        e_am, e_opt = elbo_of(q_am), elbo_of(q_opt)
        # per-input optimization can only improve on the shared encoder
        assert e_opt >= e_am - 0.75
        assert abs(e_opt - e_am) < 0.25 * max(abs(e_opt), 1.0)


class TestPredictivePosterior:
    def test_zero_variance_deterministic(self):
        from cgsur.inference import DiagGaussian

        state = plain_state(seed=4)
        model = state.model
        model.params.log_S_X[:] = np.log(genmodel.VAR_MIN)
        model.params.log_S_y[:] = np.log(genmodel.VAR_MIN)
        x = np.random.default_rng(4).normal(0.4, 0.8, model.dim_x)
        qz = DiagGaussian(mean=np.zeros(model.dim_z), var=np.full(model.dim_z, 1e-16))
        ps = predict.predictive_posterior(
            x, BC_A, state, k=4, rng=np.random.default_rng(0), qz=qz
        )
        mean_X, _ = model.coarse_map(np.zeros(model.dim_z))
        Y = model.cgm_forward(mean_X, BC_A)
        mean_y, _ = model.output_map(Y)
        assert np.max(np.abs(ps.samples - mean_y)) < 1e-3

    def test_moments_are_sample_statistics(self):
        state = plain_state(seed=5)
        x = np.random.default_rng(5).normal(0.4, 0.8, state.model.dim_x)
        ps = predict.predictive_posterior(
            x, BC_A, state, k=32, rng=np.random.default_rng(1), mode="optimize"
        )
        assert np.allclose(ps.mean, ps.samples.mean(axis=0))
        assert np.allclose(ps.var, ps.samples.var(axis=0))
        assert np.all(ps.var > 0)

    def test_rng_stream_trace(self):
        state = plain_state(seed=6)
        from cgsur.inference import DiagGaussian

        model = state.model
        qz = DiagGaussian(mean=np.zeros(model.dim_z), var=np.ones(model.dim_z))
        x = np.zeros(model.dim_x)
        rng_a = np.random.default_rng(7)
        both = predict.predictive_posterior(x, BC_A, state, k=2, rng=rng_a, qz=qz)
        rng_b = np.random.default_rng(7)
        first = predict.predictive_posterior(x, BC_A, state, k=1, rng=rng_b, qz=qz)
        second = predict.predictive_posterior(x, BC_A, state, k=1, rng=rng_b, qz=qz)
        assert np.array_equal(both.samples[0], first.samples[0])
        assert np.array_equal(both.samples[1], second.samples[0])

    def test_no_fine_solves(self):
        state = plain_state(d_f=8, d_c=2, seed=7)
        x = np.random.default_rng(8).normal(0.4, 0.8, state.model.dim_x)
        fem.reset_solve_counts()
        predict.predictive_posterior(
            x, BC_A, state, k=8, rng=np.random.default_rng(2), mode="optimize"
        )
        assert fem.solve_count(8) == 0
        assert fem.solve_count(2) == 8


class TestMetrics:
    def test_r2_perfect(self):
        y = np.random.default_rng(0).standard_normal((5, 3))
        assert predict.r2_score(y, y) == pytest.approx(1.0)

    def test_r2_mean_predictor(self):
        y = np.random.default_rng(1).standard_normal((6, 2))
        mu = np.tile(y.mean(axis=0), (6, 1))
        assert predict.r2_score(y, mu) == pytest.approx(0.0, abs=1e-12)

    def test_r2_hand_example(self):
        y = np.array([[0.0], [2.0]])
        mu = np.array([[0.0], [1.0]])
        assert predict.r2_score(y, mu) == pytest.approx(0.5)

    def test_r2_degenerate(self):
        with pytest.raises(DegenerateValidation):
            predict.r2_score(np.ones((3, 2)), np.ones((3, 2)))
        with pytest.raises(DegenerateValidation):
            predict.r2_score(np.ones((1, 2)), np.ones((1, 2)))

    def test_r2_ordering_invariance(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal((8, 4))
        mu = y + 0.1 * rng.standard_normal((8, 4))
        perm = rng.permutation(8)
        assert predict.r2_score(y, mu) == pytest.approx(
            predict.r2_score(y[perm], mu[perm])
        )

    def test_r2_affine_invariance(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal((8, 4))
        mu = y + 0.3 * rng.standard_normal((8, 4))
        a, b = 2.5, -0.7
        assert predict.r2_score(a * y + b, a * mu + b) == pytest.approx(
            predict.r2_score(y, mu)
        )

    def test_logscore_unit_variance(self):
        rng = np.random.default_rng(4)
        y = rng.standard_normal((5, 3))
        var = np.ones((5, 3))
        ls = predict.logscore(y, y, var)
        assert ls == pytest.approx(-1.5 * np.log(2 * np.pi))

    def test_logscore_concentration(self):
        y = np.zeros((4, 2))
        mu = np.zeros((4, 2))
        ls_wide = predict.logscore(y, mu, np.full((4, 2), 1.0))
        ls_tight = predict.logscore(y, mu, np.full((4, 2), 0.01))
        assert ls_tight > ls_wide

    def test_logscore_hand_computation(self):
        y = np.array([[1.0, 2.0]])
        mu = np.array([[0.5, 2.5]])
        var = np.array([[0.25, 4.0]])
        expected = -0.5 * (
            0.25 / 0.25 + 0.25 / 4.0 + np.log(0.25) + np.log(4.0) + 2 * np.log(2 * np.pi)
        )
        assert predict.logscore(y, mu, var) == pytest.approx(expected)

    def test_logscore_rejects_bad_variance(self):
        with pytest.raises(NonPositiveVariance):
            predict.logscore(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))

    def test_ks_statistic_against_scipy(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal(300)
        b = rng.standard_normal(400) + 0.3
        assert predict.ks_statistic(a, b) == pytest.approx(
            ks_2samp(a, b).statistic, abs=1e-12
        )
        assert predict.ks_statistic(a, a) == 0.0


class TestCenterNode:
    def test_even_grid(self):
        idx = predict.center_node_index(4)
        mesh = fem.build_mesh(4)
        assert np.allclose(mesh.nodes[idx], [0.5, 0.5])

    def test_odd_grid_rejected(self):
        with pytest.raises(ValueError):
            predict.center_node_index(5)


class TestPropagateUq:
    def test_outputs_and_ks_range(self):
        state = plain_state(d_f=4, d_c=2, seed=8)
        sampler = GrfSampler(GrfSpec(grid_size=4, length_scale=0.3))
        rng = np.random.default_rng(9)
        out = predict.propagate_uq(
            sampler, BC_A, state, n=64, rng=rng, mode="optimize", with_reference=True
        )
        assert out["surrogate"].shape == (64,)
        assert out["reference"].shape == (64,)
        assert 0.0 <= out["ks"] <= 1.0
        assert out["hist_surrogate"].shape == (64,)
        assert out["bin_edges"].shape == (65,)
        assert out["kde_surrogate"].shape == out["kde_grid"].shape

    def test_identical_generators_coincide(self):
        # when the two sample sets come from the same distribution the KS
        # distance is small; identical sets give exactly zero
        rng = np.random.default_rng(10)
        a = rng.standard_normal(500)
        assert predict.ks_statistic(a, a.copy()) == 0.0
