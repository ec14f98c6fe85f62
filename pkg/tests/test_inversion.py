import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bathyinv.fields import BoundaryConditions, ChannelGeometry, ObservationMask, ObservationSet, equispaced_mask
from bathyinv.forward import observe
from bathyinv.inversion import (
    InversionOptions,
    LineSearchOptions,
    bathymetry_uncertainty,
    gauss_newton_step,
    gauss_newton_target,
    information_form_step,
    invert,
    jacobian_fd,
    line_search,
    load_result,
    map_objective,
    objective_gradient,
    posterior_covariance,
    posterior_covariance_data_form,
    save_result,
)
from bathyinv.rom import AffineRom, TrainHyper
from bathyinv.sve import SveArchitecture, train_sve

BC = BoundaryConditions(200.0, 4.5)
GEOM = ChannelGeometry(3, 4)


def affine_model(k=3, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return AffineRom(GEOM, rng.normal(0, scale, (3 * GEOM.n_nodes, k)), rng.normal(size=3 * GEOM.n_nodes))


def u_mask(n):
    """First ``n`` nodes, u component only."""
    rows, cols = np.divmod(np.arange(n), GEOM.n_along)
    return ObservationMask(np.column_stack([rows, cols]), includes_v=False)


def gaussian_map(a, c, y, r2, sigma=None):
    k = a.shape[1]
    sinv = np.eye(k) if sigma is None else np.linalg.inv(sigma)
    return np.linalg.solve(sinv + a.T @ (a / r2[:, None]), a.T @ ((y - c) / r2))


class Stub1d:
    """Scalar model ``yhat(z) = z^3 + z`` observed once; for line-search enumeration."""

    latent_dim = 1
    geometry = GEOM

    def predict_obs(self, z, bc, mask):
        return np.array([z[0] ** 3 + z[0]])


class Smooth:
    """``yhat(z) = [sin z0, exp(z1), z0 z1]`` for FD convergence checks."""

    latent_dim = 2
    geometry = GEOM

    def predict_obs(self, z, bc, mask):
        return np.array([np.sin(z[0]), np.exp(z[1]), z[0] * z[1]])

    def exact(self, z):
        return np.array([[np.cos(z[0]), 0.0], [0.0, np.exp(z[1])], [z[1], z[0]]])


@pytest.fixture(scope="module")
def sve(small_dataset):
    return train_sve(small_dataset, SveArchitecture(4, (32,), (32,), kl_weight=1e-2), TrainHyper(epochs=15, batch_size=16, seed=1))


class TestObjective:
    def test_zero_at_exact_fit(self):
        model = affine_model()
        mask = u_mask(6)
        obs = ObservationSet(mask, model.predict_obs(np.zeros(3), BC, mask), 0.1, BC)
        assert map_objective(np.zeros(3), obs, model) == 0.0

    def test_prior_only_when_noise_huge(self):
        model = affine_model()
        obs = ObservationSet(u_mask(6), np.ones(6), 1e12, BC)
        z = np.array([0.5, -1.0, 2.0])
        assert map_objective(z, obs, model) == pytest.approx(z @ z, rel=1e-9)

    def test_hand_evaluation(self):
        model = affine_model(k=2, seed=3)
        mask = u_mask(3)
        y = np.array([0.3, -0.2, 1.1])
        std = np.array([0.1, 0.2, 0.5])
        obs = ObservationSet(mask, y, std, BC)
        z = np.array([0.7, -0.4])
        total = 0.0
        for i in range(3):
            pred = model.matrix[i, 0] * z[0] + model.matrix[i, 1] * z[1] + model.offset[i]
            total += (y[i] - pred) ** 2 / std[i] ** 2
        total += z[0] ** 2 + z[1] ** 2
        assert map_objective(z, obs, model) == pytest.approx(total, rel=1e-13)

    def test_sigma_prior(self):
        model = affine_model(k=2)
        obs = ObservationSet(u_mask(2), np.zeros(2), 1e12, BC)
        sigma = np.diag([4.0, 0.25])
        assert map_objective(np.array([2.0, 1.0]), obs, model, sigma) == pytest.approx(1.0 + 4.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            map_objective(np.zeros(4), ObservationSet(u_mask(2), np.zeros(2), 1.0, BC), affine_model())

    def test_gradient_vs_fd(self):
        model = affine_model(k=3, seed=5)
        obs = ObservationSet(u_mask(8), np.random.default_rng(1).normal(size=8), 0.3, BC)
        z = np.array([0.2, -0.1, 0.4])
        g = objective_gradient(z, obs, model, model.obs_jacobian(z, BC, obs.mask))
        fd = [(map_objective(z + 1e-6 * e, obs, model) - map_objective(z - 1e-6 * e, obs, model)) / 2e-6 for e in np.eye(3)]
        np.testing.assert_allclose(g, fd, rtol=1e-6)


class TestGaussNewton:
    def test_one_step_exact_on_linear(self):
        model = affine_model(k=3, seed=2)
        mask = u_mask(7)
        rng = np.random.default_rng(0)
        obs = ObservationSet(mask, rng.normal(size=7), rng.uniform(0.1, 0.5, 7), BC)
        z = rng.normal(size=3)
        jac = model.obs_jacobian(z, BC, mask)
        zn = gauss_newton_step(z, obs, model, jac, 1.0)
        ref = gaussian_map(jac, model.offset[mask.output_rows(GEOM)], obs.values, obs.noise_var)
        np.testing.assert_allclose(zn, ref, atol=1e-8)

    def test_alpha_zero(self):
        model = affine_model()
        obs = ObservationSet(u_mask(4), np.ones(4), 0.2, BC)
        z = np.array([0.1, 0.2, 0.3])
        np.testing.assert_array_equal(gauss_newton_step(z, obs, model, model.obs_jacobian(z, BC, obs.mask), 0.0), z)

    def test_forms_agree_5x3(self):
        rng = np.random.default_rng(7)
        jac = rng.normal(size=(5, 3))
        obs = ObservationSet(u_mask(5), rng.normal(size=5), rng.uniform(0.1, 1, 5), BC)
        z, yhat = rng.normal(size=3), rng.normal(size=5)
        a = gauss_newton_target(z, obs, jac, form="data", yhat=yhat)
        b = gauss_newton_target(z, obs, jac, form="information", yhat=yhat)
        np.testing.assert_allclose(a, b, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 10), st.integers(1, 12), st.integers(0, 2**31))
    def test_form_equivalence_property(self, k, n_nodes, seed):
        rng = np.random.default_rng(seed)
        model = AffineRom(GEOM, rng.normal(size=(3 * GEOM.n_nodes, k)), rng.normal(size=3 * GEOM.n_nodes))
        mask = ObservationMask(np.column_stack(np.divmod(np.arange(n_nodes), GEOM.n_along)))  # n <= 24
        obs = ObservationSet(mask, rng.normal(size=mask.n_obs), rng.uniform(0.2, 1.0, mask.n_obs), BC)
        z = rng.normal(size=k)
        a = rng.normal(size=(k, k))
        sigma = a @ a.T + np.eye(k)
        jac = model.obs_jacobian(z, BC, mask)
        alpha = rng.uniform(0, 1)
        d = gauss_newton_step(z, obs, model, jac, alpha, sigma, "data")
        i = gauss_newton_step(z, obs, model, jac, alpha, sigma, "information")
        n = information_form_step(z, obs, model, jac, alpha, sigma)
        scale = 1 + np.abs(d).max()
        assert np.abs(d - i).max() <= 1e-8 * scale
        assert np.abs(d - n).max() <= 1e-8 * scale

    def test_factorisation_failure(self):
        jac = np.full((2, 1), np.nan)
        obs = ObservationSet(u_mask(2), np.zeros(2), 1.0, BC)
        with pytest.raises((np.linalg.LinAlgError, ValueError)):
            gauss_newton_target(np.zeros(1), obs, jac, np.array([[-1.0]]), form="data", yhat=np.zeros(2))


class TestJacobianFd:
    def test_affine_exact_any_delta(self):
        model = affine_model(k=4, seed=9)
        mask = u_mask(6)
        obs = ObservationSet(mask, np.zeros(6), 1.0, BC)
        for d in (1e-6, 1e-2, 1.0):
            np.testing.assert_allclose(jacobian_fd(model, np.ones(4), obs, d), model.obs_jacobian(0, BC, mask), atol=1e-8)

    def test_k_plus_one_evaluations(self):
        calls = []

        class Counting(Smooth):
            def predict_obs(self, z, bc, mask):
                calls.append(1)
                return super().predict_obs(z, bc, mask)

        jacobian_fd(Counting(), np.zeros(2), ObservationSet(u_mask(3), np.zeros(3), 1.0, BC))
        assert len(calls) == 3

    def test_first_order_convergence(self):
        model, z = Smooth(), np.array([0.7, 0.3])
        obs = ObservationSet(u_mask(3), np.zeros(3), 1.0, BC)
        e1 = np.abs(jacobian_fd(model, z, obs, 1e-2) - model.exact(z)).max()
        e2 = np.abs(jacobian_fd(model, z, obs, 5e-3) - model.exact(z)).max()
        assert 1.8 < e1 / e2 < 2.2

    def test_trained_sve_vs_ad(self, sve, small_dataset):
        rec = small_dataset.records[2]
        mask = equispaced_mask(sve.geometry, 40)
        obs = ObservationSet(mask, np.zeros(mask.n_obs), 0.05, rec.bc)
        z = np.linspace(-1, 1, 4)
        ad = sve.obs_jacobian(z, rec.bc, mask)
        assert np.abs(jacobian_fd(sve, z, obs, 1e-4) - ad).max() / np.abs(ad).max() < 1e-2

    def test_non_finite(self):
        class Bad(Smooth):
            def predict_obs(self, z, bc, mask):
                return np.full(3, np.inf) if z[0] > 0 else np.zeros(3)

        with pytest.raises(FloatingPointError):
            jacobian_fd(Bad(), np.zeros(2), ObservationSet(u_mask(3), np.zeros(3), 1.0, BC))

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            jacobian_fd(Smooth(), np.zeros(2), ObservationSet(u_mask(3), np.zeros(3), 1.0, BC), 0.0)


class TestLineSearch:
    def test_linear_accepts_unit_step(self):
        model = affine_model(seed=4)
        mask = u_mask(8)
        obs = ObservationSet(mask, np.random.default_rng(3).normal(size=8), 0.2, BC)
        z = np.zeros(3)
        jac = model.obs_jacobian(z, BC, mask)
        target = gauss_newton_target(z, obs, jac, model=model)
        res = line_search(z, target, obs, model, grad=objective_gradient(z, obs, model, jac))
        assert res.alpha == 1.0 and not res.stalled and len(res.trials) == 1

    def test_stall_at_minimum(self):
        model = affine_model(seed=4)
        mask = u_mask(8)
        obs = ObservationSet(mask, np.random.default_rng(3).normal(size=8), 0.2, BC)
        jac = model.obs_jacobian(0, BC, mask)
        zmap = gauss_newton_target(np.zeros(3), obs, jac, model=model)
        target = gauss_newton_target(zmap, obs, jac, model=model)
        opts = InversionOptions(line_search=LineSearchOptions(max_backtracks=5))
        res = line_search(zmap, target, obs, model, opts, grad=objective_gradient(zmap, obs, model, jac))
        assert res.stalled
        assert res.alpha == 0.5**5

    def test_cubic_enumeration(self):
        # f(z) = (1 - z^3 - z)^2 + z^2 from z = 0 towards 2; f(0) = 1, grad = -2, pred = 4
        # alpha=1: z=2, f=85; alpha=.5: z=1, f=2; alpha=.25: z=.5, f=0.390625 < 1 - 1e-4*.25*4
        model = Stub1d()
        obs = ObservationSet(u_mask(1), np.array([1.0]), 1.0, BC)
        res = line_search(np.zeros(1), np.array([2.0]), obs, model, grad=np.array([-2.0]))
        assert [a for a, _ in res.trials] == [1.0, 0.5, 0.25]
        assert [f for _, f in res.trials] == pytest.approx([85.0, 2.0, 0.390625])
        assert res.alpha == 0.25 and not res.stalled


class TestCovariance:
    def test_no_data(self):
        sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_allclose(posterior_covariance(np.zeros((4, 2)), sigma, 1.0), sigma, atol=1e-14)

    @pytest.mark.parametrize("j,r", [(1.0, 1.0), (3.0, 0.5), (0.2, 2.0)])
    def test_scalar(self, j, r):
        q = posterior_covariance(np.array([[j]]), None, r**2)
        assert q[0, 0] == pytest.approx(r**2 / (r**2 + j**2), rel=1e-14)

    def test_forms_agree(self):
        rng = np.random.default_rng(0)
        jac = rng.normal(size=(4, 3))
        a = rng.normal(size=(3, 3))
        sigma = a @ a.T + 0.5 * np.eye(3)
        rv = rng.uniform(0.1, 1.0, 4)
        np.testing.assert_allclose(posterior_covariance(jac, sigma, rv), posterior_covariance_data_form(jac, sigma, rv), atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**31))
    def test_psd_and_below_prior(self, k, n, seed):
        rng = np.random.default_rng(seed)
        jac = rng.normal(size=(n, k)) * rng.uniform(0.01, 10)
        a = rng.normal(size=(k, k))
        sigma = a @ a.T + 0.1 * np.eye(k)
        q = posterior_covariance(jac, sigma, rng.uniform(0.01, 1.0, n))
        np.testing.assert_array_equal(q, q.T)
        assert np.linalg.eigvalsh(q).min() >= -1e-8
        assert np.linalg.eigvalsh(sigma - q).min() >= -1e-8 * max(1.0, np.abs(sigma).max())

    def test_singular(self):
        with pytest.raises(np.linalg.LinAlgError):
            posterior_covariance(np.zeros((2, 2)), np.diag([1.0, -1.0]), 1.0)


class TestUncertainty:
    def test_zero_covariance(self):
        np.testing.assert_array_equal(bathymetry_uncertainty(affine_model(), np.zeros(3), np.zeros((3, 3)), BC), 0.0)

    def test_affine_identity_covariance(self):
        model = affine_model(k=3, seed=1)
        std = bathymetry_uncertainty(model, np.zeros(3), np.eye(3), BC, n_samples=10_000, seed=2)
        rows = np.linalg.norm(model.matrix[2 * GEOM.n_nodes :], axis=1).reshape(GEOM.shape)
        np.testing.assert_allclose(std, rows, rtol=0.05)

    def test_deterministic_per_seed(self):
        model = affine_model()
        a = bathymetry_uncertainty(model, np.ones(3), 0.1 * np.eye(3), BC, 50, seed=4)
        b = bathymetry_uncertainty(model, np.ones(3), 0.1 * np.eye(3), BC, 50, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_semidefinite_needs_jitter(self):
        model = affine_model()
        q = np.diag([1.0, 1.0, 0.0])
        assert np.all(np.isfinite(bathymetry_uncertainty(model, np.zeros(3), q, BC, 20)))

    def test_indefinite_fails(self):
        with pytest.raises(np.linalg.LinAlgError):
            bathymetry_uncertainty(affine_model(), np.zeros(3), np.diag([1.0, -1.0, 1.0]), BC)

    def test_larger_noise_larger_std(self, sve, small_dataset):
        rec = small_dataset.records[0]
        mask = equispaced_mask(sve.geometry, 30)
        stds = []
        for r in (0.02, 0.5):
            est = invert(observe(rec.flow, mask, r, 3, rec.bc), sve, uq_samples=300, uq_seed=1)
            stds.append(est.bathymetry_std)
        assert stds[1].mean() >= stds[0].mean()


class TestInvert:
    def test_affine_one_step(self):
        model = affine_model(k=3, seed=6)
        mask = u_mask(10)
        rng = np.random.default_rng(1)
        obs = ObservationSet(mask, rng.normal(size=10), 0.3, BC)
        est = invert(obs, model, uq_samples=0)
        ref = gaussian_map(model.matrix[mask.output_rows(GEOM)], model.offset[mask.output_rows(GEOM)], obs.values, obs.noise_var)
        np.testing.assert_allclose(est.z_map, ref, atol=1e-8)
        assert est.iterations_used == 1 and est.converged

    def test_inverse_crime(self, sve, small_dataset):
        rec = small_dataset.records[7]
        mask = ObservationMask.full(sve.geometry)
        for seed in range(3):
            z_true = np.random.default_rng(seed).normal(0, 0.7, 4)
            obs = ObservationSet(mask, sve.predict_obs(z_true, rec.bc, mask), 1e-3, rec.bc)
            est = invert(obs, sve, uq_samples=0)
            assert np.linalg.norm(est.z_map - z_true) / np.linalg.norm(z_true) <= 0.05

    def test_no_information_gives_prior_mean(self, sve, small_dataset):
        rec = small_dataset.records[1]
        obs = observe(rec.flow, equispaced_mask(sve.geometry, 20), 1e6, 0, rec.bc)
        est = invert(obs, sve, uq_samples=0)
        assert np.abs(est.z_map).max() < 1e-6
        np.testing.assert_allclose(est.q_post, np.eye(4), atol=1e-6)

    @pytest.mark.parametrize("mode", ["analytic", "finite-difference"])
    def test_trace_and_fields(self, sve, small_dataset, mode):
        rec = small_dataset.records[4]
        obs = observe(rec.flow, equispaced_mask(sve.geometry, 40), 0.05, 1, rec.bc)
        est = invert(obs, sve, InversionOptions(jacobian_mode=mode), uq_samples=50)
        assert np.all(np.diff(est.objective_trace) <= 0)
        assert len(est.objective_trace) == est.iterations_used + 1 <= 11
        np.testing.assert_allclose(est.bathymetry_map.flat(), sve.decode_bathymetry(est.z_map, rec.bc))
        q = est.q_post
        np.testing.assert_array_equal(q, q.T)
        assert np.linalg.eigvalsh(q).min() >= -1e-8
        assert est.bathymetry_std.shape == sve.geometry.shape and np.all(est.bathymetry_std > 0)

    def test_modes_agree(self, sve, small_dataset):
        rec = small_dataset.records[4]
        obs = observe(rec.flow, equispaced_mask(sve.geometry, 40), 0.05, 1, rec.bc)
        a = invert(obs, sve, InversionOptions(jacobian_mode="analytic"), uq_samples=0)
        b = invert(obs, sve, InversionOptions(jacobian_mode="finite-difference"), uq_samples=0)
        assert np.abs(a.z_map - b.z_map).max() < 1e-2 * max(1.0, np.abs(a.z_map).max())

    def test_step_forms_agree(self, sve, small_dataset):
        rec = small_dataset.records[4]
        obs = observe(rec.flow, equispaced_mask(sve.geometry, 40), 0.05, 1, rec.bc)
        a = invert(obs, sve, InversionOptions(step_form="data"), uq_samples=0)
        b = invert(obs, sve, InversionOptions(step_form="information"), uq_samples=0)
        np.testing.assert_allclose(a.z_map, b.z_map, atol=1e-6)

    def test_max_iterations(self, sve, small_dataset):
        rec = small_dataset.records[4]
        obs = observe(rec.flow, ObservationMask.full(sve.geometry), 0.05, 1, rec.bc)
        est = invert(obs, sve, InversionOptions(max_iterations=1), uq_samples=0)
        assert est.iterations_used <= 1

    def test_masking_consistency(self, sve, small_dataset):
        rec = small_dataset.records[3]
        full = ObservationMask.full(sve.geometry)
        sub = equispaced_mask(sve.geometry, 30)
        obs_full = observe(rec.flow, full, 0.05, 9, rec.bc)
        obs_sub = observe(rec.flow, sub, 0.05, 9, rec.bc)
        # delete rows of the full set post hoc
        pos = {tuple(p): i for i, p in enumerate(full.indices.tolist())}
        keep = np.array([pos[tuple(p)] for p in sub.indices.tolist()])
        m = sve.geometry.n_nodes
        values = obs_full.values[np.concatenate([keep, keep + m])]
        np.testing.assert_array_equal(values, obs_sub.values)
        a = invert(ObservationSet(sub, values, 0.05, rec.bc), sve, uq_samples=0)
        b = invert(obs_sub, sve, uq_samples=0)
        np.testing.assert_array_equal(a.z_map, b.z_map)

    def test_deterministic(self, sve, small_dataset):
        rec = small_dataset.records[0]
        obs = observe(rec.flow, equispaced_mask(sve.geometry, 25), 0.05, 2, rec.bc)
        a, b = invert(obs, sve, uq_samples=20), invert(obs, sve, uq_samples=20)
        np.testing.assert_array_equal(a.z_map, b.z_map)
        np.testing.assert_array_equal(a.bathymetry_std, b.bathymetry_std)

    def test_save_load(self, sve, small_dataset, tmp_path):
        rec = small_dataset.records[0]
        est = invert(observe(rec.flow, equispaced_mask(sve.geometry, 25), 0.05, 2, rec.bc), sve, uq_samples=20)
        save_result(est, tmp_path / "r.vgr", {"note": "x"})
        back, meta = load_result(tmp_path / "r.vgr")
        assert meta["note"] == "x"
        for name in ("z_map", "q_post", "bathymetry_std", "objective_trace", "grad_norm_trace"):
            np.testing.assert_array_equal(getattr(back, name), getattr(est, name))
        assert (back.converged, back.iterations_used, back.stalled) == (est.converged, est.iterations_used, est.stalled)


class TestOptions:
    @pytest.mark.parametrize(
        "kw",
        [{"max_iterations": 0}, {"fd_delta": 0.0}, {"jacobian_mode": "magic"}, {"step_form": "x"}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            InversionOptions(**kw)

    @pytest.mark.parametrize("shrink", [0.0, 1.0, 1.5])
    def test_invalid_shrink(self, shrink):
        with pytest.raises(ValueError):
            LineSearchOptions(shrink=shrink)
