"""Flow density model tests: identity anchor, masking, quadrature, fitting."""

import math

import numpy as np
import pytest

from dlw import flow
from dlw import numerics as nm
from dlw.flow import DiagonalGaussian, FitConfig, FlowError


def small_cfg(kind="affine", layers=2, seed=0, **kw):
    base = dict(
        layers=layers,
        nn1_hidden_layers=1,
        nn1_hidden_units=12,
        nn2_hidden_units=4,
        transformer=kind,
        seed=seed,
    )
    base.update(kw)
    return FitConfig(**base)


def gauss_fit_cfg(seed=0):
    # d=1 fits used by the Gaussian oracles; constants learn fast at lr 1e-2
    return FitConfig(
        layers=2,
        nn1_hidden_layers=1,
        nn1_hidden_units=8,
        transformer="affine",
        batch_size=256,
        lr=1e-2,
        max_epochs=150,
        patience=30,
        seed=seed,
    )


class TestIdentityInitialization:
    @pytest.mark.parametrize("kind", ["affine", "neural"])
    def test_log_prob_equals_standard_normal(self, kind):
        rng = np.random.default_rng(0)
        model = flow.build_flow(8, small_cfg(kind, layers=5, seed=3))
        X = rng.standard_normal((100, 8))
        ref = DiagonalGaussian.standard(8).log_prob(X)
        assert np.max(np.abs(model.log_prob(X) - ref)) < 1e-12

    def test_inverse_pass_is_identity(self):
        rng = np.random.default_rng(1)
        model = flow.build_flow(5, small_cfg(layers=4, seed=1))
        x = rng.standard_normal(5)
        z0, logdet = flow.inverse_pass(model, x)
        assert np.array_equal(z0, x)
        assert logdet == 0.0

    def test_log_prob_at_origin_d2(self):
        model = flow.build_flow(2, small_cfg(seed=2))
        assert model.log_prob(np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)


class TestSingleAffineLayer:
    def test_hand_evaluated_shift_and_scale(self):
        # d=1 conditioner has no inputs: the output bias is exactly (m, s)
        model = flow.build_flow(1, small_cfg(layers=1, seed=0))
        m_val, s_val = 0.7, 0.4
        model.params.view("L0.b1")[...] = [m_val, s_val]
        x = np.array([1.9])
        z0, logdet = flow.inverse_pass(model, x)
        assert z0[0] == pytest.approx((1.9 - m_val) * math.exp(-s_val), abs=1e-14)
        assert logdet == pytest.approx(-s_val, abs=1e-14)


class TestAutoregressiveMasking:
    @pytest.mark.parametrize("kind", ["affine", "neural"])
    def test_outputs_do_not_depend_on_later_inputs(self, kind):
        rng = np.random.default_rng(4)
        d = 5
        model = flow.build_flow(d, small_cfg(kind, layers=1, seed=4))
        model.params.values += rng.uniform(-0.5, 0.5, model.params.size)
        layer = model.layers[0]
        u = rng.standard_normal(d)

        def conditioner_out(vec):
            var = nm.constant(vec[None, :])
            return flow._conditioner_forward(layer.conditioner, model.params, var, None).value[0]

        base_out = conditioner_out(u)
        blocks = layer.conditioner.out_blocks
        for j in range(d):
            bumped = u.copy()
            bumped[j] += 1.7
            out = conditioner_out(bumped)
            for block in range(blocks):
                for i in range(d):
                    col = block * d + i
                    if i <= j:
                        assert out[col] == base_out[col], (block, i, j)


class TestNormalization:
    @pytest.mark.parametrize("kind", ["affine", "neural"])
    def test_random_model_integrates_to_one_d2(self, kind):
        rng = np.random.default_rng(6)
        model = flow.build_flow(2, small_cfg(kind, layers=3, seed=6))
        model.params.values += rng.normal(0.0, 0.15, model.params.size)
        integral = flow.grid_quadrature(model, -8.0, 8.0, 200, 2)
        assert 0.98 <= integral <= 1.02

    def test_trained_model_integrates_to_one_d1(self, gaussian_flows):
        model_t, _ = gaussian_flows
        integral = flow.grid_quadrature(model_t, -6.0, 8.0, 400, 1)
        assert 0.98 <= integral <= 1.02


@pytest.fixture(scope="module")
def gaussian_flows():
    """Flows fitted on N(1,1) and N(-1,1) samples (raw 1-d covariates)."""
    rng = np.random.default_rng(123)
    x_t = rng.normal(1.0, 1.0, 4000)[:, None]
    x_c = rng.normal(-1.0, 1.0, 4000)[:, None]
    return flow.fit(x_t, gauss_fit_cfg(seed=5)), flow.fit(x_c, gauss_fit_cfg(seed=6))


class TestFitting:
    def test_epoch_zero_nll_matches_gaussian_entropy(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((4000, 1))
        cfg = gauss_fit_cfg(seed=8)
        cfg = FitConfig(**{**cfg.__dict__, "max_epochs": 1, "patience": 1})
        model = flow.fit(X, cfg)
        expected = 0.5 * math.log(2 * math.pi) + 0.5
        assert model.train_log[0][0] == pytest.approx(expected, abs=0.05)

    def test_known_gaussian_density_value(self):
        rng = np.random.default_rng(9)
        X = rng.normal(3.0, 1.0, 5000)[:, None]
        model = flow.fit(X, gauss_fit_cfg(seed=9))
        assert abs(model.log_prob(np.array([3.0])) - math.log(1.0 / math.sqrt(2 * math.pi))) < 0.1

    def test_fit_is_deterministic(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((300, 1))
        cfg = FitConfig(**{**gauss_fit_cfg(seed=3).__dict__, "max_epochs": 5, "patience": 10})
        m1, m2 = flow.fit(X, cfg), flow.fit(X, cfg)
        assert m1.train_log == m2.train_log
        assert np.array_equal(m1.params.values, m2.params.values)

    def test_too_few_rows_rejected(self):
        with pytest.raises(FlowError, match="at least"):
            flow.fit(np.zeros((15, 2)), small_cfg())

    def test_non_finite_data_rejected(self):
        X = np.ones((50, 1))
        X[3] = np.nan
        with pytest.raises(FlowError, match="non-finite"):
            flow.fit(X, small_cfg())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_learning_rate_reports_epoch(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((200, 2))
        # absurd learning rate overflows the shift parameters within an epoch
        cfg = FitConfig(
            **{**small_cfg(seed=11).__dict__, "lr": 1e160, "max_epochs": 5, "patience": 50}
        )
        with pytest.raises(flow.FlowTrainingError, match="epoch"):
            flow.fit(X, cfg)


class TestDensityRatio:
    def test_same_model_gives_unit_ratio(self):
        model = flow.build_flow(3, small_cfg(seed=12))
        x = np.array([0.3, -1.2, 0.8])
        assert flow.density_ratio(model, model, x) == 1.0

    def test_two_identity_models_give_unit_ratio(self):
        m1 = flow.build_flow(2, small_cfg(seed=1))
        m2 = flow.build_flow(2, small_cfg(seed=2, layers=3))
        assert flow.density_ratio(m1, m2, np.array([0.4, 2.0])) == pytest.approx(1.0, abs=1e-12)

    def test_fitted_gaussians_match_analytic_ratio(self, gaussian_flows):
        model_t, model_c = gaussian_flows
        # p_t/p_c for N(1,1) vs N(-1,1) is exp(2x): 1 at x=0, e^2 at x=1
        at0 = flow.density_ratio(model_t, model_c, np.array([0.0]))
        assert 0.8 <= at0 <= 1.25
        at1 = flow.density_ratio(model_t, model_c, np.array([1.0]))
        assert abs(at1 - math.e**2) <= 0.3 * math.e**2

    def test_ratio_reciprocity(self):
        rng = np.random.default_rng(13)
        ma = flow.build_flow(2, small_cfg(seed=13))
        mb = flow.build_flow(2, small_cfg(seed=14, layers=3))
        ma.params.values += rng.normal(0, 0.2, ma.params.size)
        mb.params.values += rng.normal(0, 0.2, mb.params.size)
        for _ in range(5):
            x = rng.standard_normal(2)
            fwd = flow.density_ratio(ma, mb, x)
            rev = flow.density_ratio(mb, ma, x)
            assert abs(fwd * rev - 1.0) < 1e-10


class TestGradients:
    @pytest.mark.parametrize("kind", ["affine", "neural"])
    def test_log_prob_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(14)
        model = flow.build_flow(3, small_cfg(kind, seed=14))
        model.params.values += rng.uniform(-0.3, 0.3, model.params.size)
        batch = rng.uniform(-2.0, 2.0, (10, 3))
        tape = nm.Tape()
        loss = nm.neg(nm.mean(flow._log_prob_rows(model, batch, tape)))
        grads = nm.backward(tape, loss, model.params)
        step = 1e-5
        store = model.params
        for i in range(store.size):
            orig = store.values[i]
            store.values[i] = orig + step
            hi = -float(np.mean(model.log_prob(batch)))
            store.values[i] = orig - step
            lo = -float(np.mean(model.log_prob(batch)))
            store.values[i] = orig
            fd = (hi - lo) / (2 * step)
            assert abs(grads[i] - fd) <= 1e-4 * max(abs(fd), abs(grads[i]), 1e-8)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["affine", "neural"])
    def test_round_trip_reproduces_log_prob_bit_for_bit(self, tmp_path, kind):
        rng = np.random.default_rng(15)
        model = flow.build_flow(3, small_cfg(kind, layers=3, seed=15))
        model.params.values += rng.normal(0, 0.3, model.params.size)
        model.train_log = [(1.5, 1.6), (1.4, 1.55)]
        path = str(tmp_path / "model.npz")
        flow.save_model(model, path)
        loaded = flow.load_model(path)
        X = rng.standard_normal((50, 3))
        assert np.array_equal(model.log_prob(X), loaded.log_prob(X))
        assert loaded.train_log == model.train_log

    def test_wrong_vector_length_rejected(self):
        model = flow.build_flow(3, small_cfg(seed=16))
        with pytest.raises(FlowError):
            model.log_prob(np.zeros(4))
