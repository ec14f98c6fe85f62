import numpy as np
import pytest

from bathyinv.fields import BathymetryField, BoundaryConditions, ChannelGeometry, ObservationMask
from bathyinv.inversion import jacobian_fd
from bathyinv.fields import ObservationSet
from bathyinv.rom import TrainHyper, TrainingDiverged, load_model, save_model
from bathyinv.sve import (
    Batch,
    BcStats,
    FieldStats,
    LatentGaussian,
    SveArchitecture,
    SveModel,
    bathymetry_jacobian_ad,
    decode,
    encode,
    init_sve,
    kl_term,
    make_batch,
    reparameterize,
    sve_loss,
    train_sve,
    velocity_jacobian_ad,
)

SMALL_ARCH = SveArchitecture(latent_dim=4, encoder_widths=(32,), decoder_widths=(32,), kl_weight=1e-2)
FAST = TrainHyper(epochs=15, batch_size=16, step_size=1e-3, seed=1)


@pytest.fixture(scope="module")
def trained(small_dataset):
    return train_sve(small_dataset, SMALL_ARCH, FAST)


def tiny_model(seed=0, beta=0.1):
    """An SVE on a 3x3 grid with fewer than 500 parameters."""
    g = ChannelGeometry(3, 3)
    rng = np.random.default_rng(seed)
    stats = {n: FieldStats(rng.normal(size=9), float(rng.uniform(0.5, 2))) for n in ("bed", "u", "v")}
    arch = SveArchitecture(latent_dim=2, encoder_widths=(8,), decoder_widths=(8,), kl_weight=beta)
    model = SveModel(g, arch, stats, BcStats(np.array([200.0, 4.5]), np.array([50.0, 0.3])))
    model.encoder.params[:] = rng.normal(0, 0.4, model.encoder.n_params)
    model.decoder.params[:] = rng.normal(0, 0.4, model.decoder.n_params)
    return model


def tiny_batch(model, n=5, seed=1):
    rng = np.random.default_rng(seed)
    m = model.geometry.n_nodes
    bc = rng.normal(size=(n, 2))
    return Batch(np.hstack([rng.normal(size=(n, m)), bc]), bc, rng.normal(size=(n, 3 * m)))


class TestEncodeDecode:
    def test_zero_weights_give_biases(self, small_dataset):
        model = init_sve(small_dataset, SMALL_ARCH)
        model.encoder.params[:] = 0.0
        model.encoder.biases[-1][:] = np.arange(8.0)
        g = encode(model, small_dataset.records[0].bathymetry, small_dataset.records[0].bc)
        np.testing.assert_array_equal(g.mu, [0, 1, 2, 3])
        np.testing.assert_array_equal(g.log_var, [4, 5, 6, 7])

    def test_deterministic(self, trained, small_dataset):
        r = small_dataset.records[3]
        a, b = encode(trained, r.bathymetry, r.bc), encode(trained, r.bathymetry, r.bc)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.log_var, b.log_var)

    def test_geometry_mismatch(self, trained):
        with pytest.raises(ValueError):
            encode(trained, BathymetryField(ChannelGeometry(5, 5), np.zeros((5, 5))), BoundaryConditions(100, 4))

    def test_decode_central_field(self, trained, small_geometry):
        u, v, s = decode(trained, np.zeros(4), BoundaryConditions(200.0, 4.5))
        for a in (u, v, s):
            assert a.shape == small_geometry.shape and np.all(np.isfinite(a))

    def test_decode_dimension_mismatch(self, trained):
        with pytest.raises(ValueError):
            decode(trained, np.zeros(5), BoundaryConditions(200.0, 4.5))

    def test_affine_decoder(self, small_dataset):
        arch = SveArchitecture(latent_dim=3, encoder_widths=(8,), decoder_widths=(), kl_weight=0.0)
        model = init_sve(small_dataset, arch, seed=2)
        bc = small_dataset.records[0].bc
        z = np.array([0.3, -1.0, 2.0])
        x = np.concatenate([z, model.bc_stats.normalize(bc.as_array())])
        w, b = model.decoder.weights[0], model.decoder.biases[0]
        heads = model.heads(z, bc)
        m = small_dataset.geometry.n_nodes
        normalized = x @ w + b
        np.testing.assert_allclose(heads["s"] - model.stats["bed"].mean / model.stats["bed"].std, normalized[2 * m :], atol=1e-12)
        # Jacobians are the (scaled) weight rows exactly
        jg = bathymetry_jacobian_ad(model, z, bc)
        np.testing.assert_allclose(jg, model.stats["bed"].std * w[:3, 2 * m :].T, rtol=1e-14)

    def test_autoencoding_skill(self, trained, small_dataset):
        errs = []
        for r in small_dataset.records:
            z = trained.latent_of(r.bathymetry.flat(), r.bc)
            errs.append(np.sqrt(np.mean((trained.decode_bathymetry(z, r.bc) - r.bathymetry.flat()) ** 2)))
        assert np.mean(errs) < 1.2

    def test_normalisation_round_trip(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3, 2, size=(10, 6))
        st = FieldStats.fit(x)
        np.testing.assert_allclose(st.denormalize(st.normalize(x)), x, atol=1e-12)

    def test_save_load(self, trained, tmp_path):
        p = tmp_path / "m.vgm"
        save_model(trained, p)
        back = load_model(p)
        bc = BoundaryConditions(180.0, 4.2)
        z = np.linspace(-1, 1, 4)
        np.testing.assert_array_equal(back.decode_flat(z, bc), trained.decode_flat(z, bc))
        np.testing.assert_array_equal(back.curve, trained.curve)
        assert back.arch == trained.arch and back.metadata == trained.metadata


class TestReparameterize:
    def test_degenerate_variance(self):
        g = LatentGaussian(np.array([1.0, -2.0]), np.array([-50.0, -50.0]))
        np.testing.assert_allclose(reparameterize(g, 0), g.mu, atol=1e-10)

    def test_seeded(self):
        g = LatentGaussian(np.zeros(3), np.zeros(3))
        np.testing.assert_array_equal(reparameterize(g, 4), reparameterize(g, 4))

    def test_monte_carlo_moments(self):
        g = LatentGaussian(np.array([0.5, -1.0, 2.0]), np.log(np.array([0.3, 1.0, 2.5]) ** 2))
        z = np.stack([reparameterize(g, [5, i]) for i in range(10_000)])
        sd = np.exp(0.5 * g.log_var)
        assert np.all(np.abs(z.mean(0) - g.mu) <= 0.03 * np.maximum(np.abs(g.mu), sd))
        np.testing.assert_allclose(z.std(0), sd, rtol=0.03)


class TestLoss:
    def test_kl_formula(self):
        rng = np.random.default_rng(0)
        mu, lv = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        direct = np.mean([sum(0.5 * (np.exp(lv[b, j]) + mu[b, j] ** 2 - 1 - lv[b, j]) for j in range(3)) for b in range(4)])
        assert kl_term(mu, lv) == pytest.approx(direct, rel=1e-14)
        assert kl_term(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0

    def test_perfect_reconstruction_is_zero(self):
        model = tiny_model()
        model.encoder.params[:] = 0.0
        model.decoder.params[:] = 0.0
        batch = tiny_batch(model)
        target = np.tile(np.random.default_rng(3).normal(size=27), (5, 1))
        model.decoder.biases[-1][:] = target[0]
        out = sve_loss(model, Batch(batch.enc_in, batch.bc_feat, target))
        assert out == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_terms_sum(self):
        model = tiny_model()
        total, u, v, s, kl = sve_loss(model, tiny_batch(model))
        assert total == pytest.approx(u + v + s + model.arch.kl_weight * kl, rel=1e-14)

    @pytest.mark.parametrize("beta", [0.0, 0.1, 1.0])
    def test_gradient_matches_central_differences(self, beta):
        model = tiny_model(beta=beta)
        assert model.encoder.n_params + model.decoder.n_params <= 500
        batch = tiny_batch(model)
        xi = np.random.default_rng(2).normal(size=(len(batch), model.latent_dim))
        _, g_enc, g_dec = sve_loss(model, batch, xi, grad=True)
        analytic = np.concatenate([g_enc, g_dec])
        theta = np.concatenate([model.encoder.params, model.decoder.params])
        n_enc = model.encoder.n_params
        h = 1e-5
        fd = np.empty_like(theta)
        for i in range(theta.size):
            for sign, slot in ((1, 0), (-1, 1)):
                t = theta.copy()
                t[i] += sign * h
                model.encoder.params[:] = t[:n_enc]
                model.decoder.params[:] = t[n_enc:]
                val = sve_loss(model, batch, xi)[0]
                if slot == 0:
                    plus = val
                else:
                    fd[i] = (plus - val) / (2 * h)
        model.encoder.params[:] = theta[:n_enc]
        model.decoder.params[:] = theta[n_enc:]
        scale = np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
        assert np.max(np.abs(analytic - fd) / scale) < 1e-4


class TestTraining:
    def test_zero_epochs_returns_init(self, small_dataset):
        hyper = TrainHyper(epochs=0, batch_size=16)
        model = train_sve(small_dataset, SMALL_ARCH, hyper)
        from bathyinv.rom import split_indices

        tr, _ = split_indices(len(small_dataset), hyper)
        ref = init_sve(small_dataset.subset(tr), SMALL_ARCH, hyper.seed)
        np.testing.assert_array_equal(model.encoder.params, ref.encoder.params)
        np.testing.assert_array_equal(model.decoder.params, ref.decoder.params)

    def test_deterministic(self, small_dataset, trained):
        again = train_sve(small_dataset, SMALL_ARCH, FAST)
        np.testing.assert_array_equal(again.encoder.params, trained.encoder.params)
        np.testing.assert_array_equal(again.decoder.params, trained.decoder.params)

    def test_best_snapshot_and_curve(self, trained):
        c = trained.curve
        assert c.shape == (FAST.epochs, 7)
        assert float(trained.metadata["best_val_loss"]) == pytest.approx(c[:, 2].min())

    def test_validation_split_is_ten_percent(self, trained, small_dataset):
        val = trained.metadata["validation_indices"].split(",")
        assert len(val) == round(0.1 * len(small_dataset))

    def test_too_few_records(self, small_dataset):
        with pytest.raises(ValueError):
            train_sve(small_dataset.subset(range(20)), SMALL_ARCH, TrainHyper(epochs=1, batch_size=16))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_reported(self, small_dataset):
        with pytest.raises(TrainingDiverged) as e:
            train_sve(small_dataset, SMALL_ARCH, TrainHyper(epochs=5, batch_size=16, step_size=1e200))
        assert e.value.epoch >= 1

    def test_kl_pressure(self, small_dataset):
        hyper = TrainHyper(epochs=15, batch_size=16, seed=3)
        norms = {}
        for beta in (0.0, 0.5):
            from dataclasses import replace

            m = train_sve(small_dataset, replace(SMALL_ARCH, kl_weight=beta), hyper)
            mu, _ = m.encode_many(small_dataset.stack("bed"), small_dataset.stack("bc"))
            norms[beta] = np.linalg.norm(mu.mean(axis=0))
        assert norms[0.5] < norms[0.0]


class TestJacobians:
    @pytest.mark.parametrize("seed", range(5))
    def test_velocity_jacobian_vs_fd(self, trained, small_dataset, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=4)
        rec = small_dataset.records[seed]
        mask = ObservationMask(np.column_stack(np.divmod(rng.choice(225, 30, replace=False), 25)))
        obs = ObservationSet(mask, np.zeros(mask.n_obs), 0.05, rec.bc)
        ad = velocity_jacobian_ad(trained, z, rec.bc, mask)
        fd = jacobian_fd(trained, z, obs, 1e-4)
        assert np.max(np.abs(ad - fd)) / np.max(np.abs(ad)) < 1e-2

    def test_bathymetry_jacobian_vs_fd(self, trained, small_dataset):
        z = np.array([0.2, -0.4, 1.0, 0.0])
        bc = small_dataset.records[0].bc
        ad = bathymetry_jacobian_ad(trained, z, bc)
        fd = np.column_stack([(trained.decode_bathymetry(z + 1e-4 * e, bc) - trained.decode_bathymetry(z, bc)) / 1e-4 for e in np.eye(4)])
        assert np.max(np.abs(ad - fd)) / np.max(np.abs(ad)) < 1e-2

    def test_zeroed_s_head(self, trained, small_dataset):
        model = load_model_copy(trained)
        m = model.geometry.n_nodes
        model.decoder.weights[-1][:, 2 * m :] = 0.0
        np.testing.assert_array_equal(bathymetry_jacobian_ad(model, np.zeros(4), small_dataset.records[0].bc), 0.0)

    def test_rows_follow_mask_order(self, trained, small_dataset):
        bc = small_dataset.records[0].bc
        a = ObservationMask([[1, 2], [4, 7]])
        b = ObservationMask([[4, 7], [1, 2]])
        ja, jb = velocity_jacobian_ad(trained, np.ones(4), bc, a), velocity_jacobian_ad(trained, np.ones(4), bc, b)
        np.testing.assert_array_equal(ja[[1, 0, 3, 2]], jb)


def load_model_copy(model):
    return SveModel.from_arrays(model.to_arrays(), model.geometry, dict(model.metadata))
