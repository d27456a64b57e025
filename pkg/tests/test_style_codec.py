import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from nerfstyle.errors import SetupError, ShapeError
from nerfstyle.style_codec import (
    VGG_WEIGHTS_ENV,
    FeatureExtractor,
    StyleVAE,
    _VAEModule,
    channel_mean_std,
    encode_style,
    extract_features,
    feature_stats,
    kl_divergence,
    preprocess_style,
    pretrain_style_vae,
    style_statistics,
    vae_loss,
)
from nerfstyle.toy import make_style_image


@pytest.fixture(scope="module")
def vgg():
    return FeatureExtractor("random", seed=0)


@pytest.fixture(scope="module")
def small_vae(vgg):
    images = [make_style_image(i, size=64) for i in range(6)]
    return pretrain_style_vae(images, vgg, epochs=60, seed=0, crops_per_image=3, size=64)


class TestExtractor:
    def test_tap_channels_and_sizes(self, vgg):
        feats = vgg(torch.rand(2, 3, 64, 48))
        assert [f.shape[1] for f in feats] == [64, 128, 256, 512]
        assert [tuple(f.shape[-2:]) for f in feats] == [(64, 48), (32, 24), (16, 12), (8, 6)]

    def test_nonnegative_and_deterministic(self, vgg):
        img = torch.rand(1, 3, 40, 40, generator=torch.Generator().manual_seed(3))
        a, b = vgg(img), vgg(img.clone())
        for fa, fb in zip(a, b):
            assert (fa >= 0).all()
            assert torch.equal(fa, fb)

    def test_missing_weights_is_setup_error(self, monkeypatch, tmp_path):
        monkeypatch.delenv(VGG_WEIGHTS_ENV, raising=False)
        with pytest.raises(SetupError, match="download"):
            FeatureExtractor()
        with pytest.raises(SetupError):
            FeatureExtractor(str(tmp_path / "nope.pth"))

    def test_loads_torchvision_layout(self, tmp_path, monkeypatch):
        src = FeatureExtractor("random", seed=5)
        path = tmp_path / "vgg19.pth"
        torch.save({k: v for k, v in src.state_dict().items() if k.startswith("features.")}, path)
        monkeypatch.setenv(VGG_WEIGHTS_ENV, str(path))
        loaded = FeatureExtractor()
        assert loaded.pretrained
        img = torch.rand(1, 3, 32, 32)
        assert all(torch.equal(a, b) for a, b in zip(src(img), loaded(img)))

    def test_rejects_foreign_state_dict(self, tmp_path):
        path = tmp_path / "other.pth"
        torch.save({"features.0.weight": torch.zeros(1)}, path)
        with pytest.raises(SetupError, match="VGG-19"):
            FeatureExtractor(str(path))

    def test_shape_errors(self, vgg):
        with pytest.raises(ShapeError):
            vgg(torch.rand(1, 3, 16, 64))
        with pytest.raises(ShapeError):
            vgg(torch.rand(3, 32, 32))

    def test_frozen_through_training(self, vgg):
        before = {k: v.clone() for k, v in vgg.state_dict().items()}
        x = torch.rand(1, 3, 32, 32, requires_grad=True)
        opt = torch.optim.Adam([x] + list(vgg.parameters()), lr=0.1)
        vgg.train()
        loss = sum(f.mean() for f in vgg(x))
        loss.backward()
        opt.step()
        assert not vgg.training
        assert x.grad is not None and all(p.grad is None for p in vgg.parameters())
        assert all(torch.equal(before[k], v) for k, v in vgg.state_dict().items())

    def test_hwc_input(self, vgg):
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        a = extract_features(vgg, img)
        b = vgg(torch.as_tensor(img).permute(2, 0, 1)[None])
        assert all(torch.equal(x, y) for x, y in zip(a, b))


class TestFeatureStats:
    def test_constant_map(self):
        m, s = channel_mean_std(torch.full((1, 3, 5, 4), 2.5))
        assert torch.equal(m, torch.full((1, 3), 2.5)) and torch.equal(s, torch.zeros(1, 3))

    def test_two_point_map(self):
        f = torch.tensor([0.0, 2.0, 0.0, 2.0]).view(1, 1, 2, 2).repeat(1, 4, 1, 1)
        m, s = channel_mean_std(f)
        assert torch.equal(m, torch.ones(1, 4)) and torch.equal(s, torch.ones(1, 4))

    def test_single_pixel_std_is_zero(self):
        m, s = channel_mean_std(torch.rand(2, 5, 1, 1))
        assert (s == 0).all()

    def test_constant_channel_gradient_is_finite(self):
        f = torch.ones(1, 2, 3, 3, requires_grad=True)
        _, s = channel_mean_std(f)
        s.sum().backward()
        assert torch.isfinite(f.grad).all()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        maps = [rng.random((1, c, h, w)) * rng.uniform(0.1, 10) for c, h, w in [(3, 5, 4), (2, 1, 7), (4, 3, 3)]]
        stats = feature_stats([torch.as_tensor(f) for f in maps])
        for f, m, s in zip(maps, stats.means, stats.stds):
            for c in range(f.shape[1]):
                vals = [f[0, c, i, j] for i in range(f.shape[2]) for j in range(f.shape[3])]
                mu = sum(vals) / len(vals)
                sd = (sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5
                assert abs(m[0, c].item() - mu) <= 1e-6
                assert abs(s[0, c].item() - sd) <= 1e-6

    def test_vector_layout(self, vgg):
        stats = feature_stats(vgg(torch.rand(1, 3, 32, 32)))
        v = stats.vector()
        assert v.shape == (1, 2 * (64 + 128 + 256 + 512)) == (1, 1920)
        assert torch.equal(v[0, :64], stats.means[0][0]) and torch.equal(v[0, 64:128], stats.stds[0][0])
        assert (torch.cat(stats.stds, -1) >= 0).all()


class TestPreprocess:
    def test_center_crop_shape_and_range(self):
        img = np.random.default_rng(0).random((90, 150, 3))
        out = preprocess_style(img, 64)
        assert out.shape == (64, 64, 3) and out.min() >= 0 and out.max() <= 1

    def test_identity_at_target_size(self):
        img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(preprocess_style(img, 64), img)

    def test_random_crop_seeded(self):
        img = np.random.default_rng(0).random((80, 120, 3))
        a = preprocess_style(img, 64, np.random.default_rng(4))
        b = preprocess_style(img, 64, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)


class TestKL:
    def test_standard_normal_is_zero(self):
        assert kl_divergence(torch.zeros(1, 8), torch.zeros(1, 8)).item() == 0.0

    def test_unit_mean(self):
        assert kl_divergence(torch.ones(1, 1), torch.zeros(1, 1)).item() == pytest.approx(0.5, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative_and_closed_form(self, seed):
        g = torch.Generator().manual_seed(seed)
        mean = torch.randn(4, 6, generator=g, dtype=torch.float64) * 3
        logvar = torch.randn(4, 6, generator=g, dtype=torch.float64) * 2
        kl = kl_divergence(mean, logvar)
        assert (kl >= 0).all()
        var = logvar.exp()
        ref = 0.5 * (mean**2 + var - 1 - torch.log(var)).sum(-1)
        np.testing.assert_allclose(kl.numpy(), ref.numpy(), rtol=1e-12)

    def test_beta_zero_is_reconstruction(self):
        torch.manual_seed(0)
        module = _VAEModule(10, 3, 16)
        x = torch.rand(5, 10)
        total, recon, kl = vae_loss(module, x, 0.0, torch.Generator().manual_seed(1))
        assert kl.item() > 0 and total.item() == recon.item()


class TestStyleVAE:
    def test_sklearn_api(self):
        vae = StyleVAE(latent_dim=4, hidden=8, epochs=3)
        assert vae.get_params()["latent_dim"] == 4
        assert clone(vae).get_params() == vae.get_params()
        X = np.random.default_rng(0).random((12, 10))
        Z = vae.fit(X).transform(X)
        assert Z.shape == (12, 4) and len(vae.loss_curve_) == 3
        np.testing.assert_array_equal(vae.fit_transform(X), Z)

    def test_training_reduces_loss(self):
        rng = np.random.default_rng(1)
        X = rng.random((32, 3)) @ rng.random((3, 20))  # rank 3: compressible into 4 latents
        vae = StyleVAE(latent_dim=4, hidden=32, epochs=80, batch_size=8).fit(X)
        assert vae.loss_curve_[-1] < 0.5 * vae.loss_curve_[0]

    def test_unfitted_and_shape_errors(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            StyleVAE().transform(np.zeros((1, 4)))
        vae = StyleVAE(latent_dim=2, hidden=4, epochs=1).fit(np.random.rand(4, 6))
        with pytest.raises(ShapeError):
            vae.transform(np.zeros((1, 5)))

    def test_array_round_trip(self):
        X = np.random.default_rng(2).random((10, 7))
        vae = StyleVAE(latent_dim=3, hidden=8, epochs=5).fit(X)
        back = StyleVAE.from_arrays({k: v.numpy() for k, v in vae.arrays().items()}, vae.get_params())
        np.testing.assert_array_equal(back.transform(X), vae.transform(X))

    def test_sample_seeded(self):
        X = np.random.default_rng(2).random((3, 7))
        vae = StyleVAE(latent_dim=3, hidden=8, epochs=5).fit(X)
        np.testing.assert_array_equal(vae.sample(X, 1), vae.sample(X, 1))
        assert not np.array_equal(vae.sample(X, 1), vae.sample(X, 2))


class TestEncodeStyle:
    def test_deterministic_and_dimension(self, vgg, small_vae):
        img = make_style_image(0, size=80)
        a = encode_style(img, vgg, small_vae, size=64)
        b = encode_style(img, vgg, small_vae, size=64)
        assert a.z.shape == (64,)
        np.testing.assert_array_equal(a.z, b.z)
        assert np.isfinite(a.z).all()

    def test_distinct_styles_distinct_latents(self, vgg, small_vae):
        zs = [encode_style(make_style_image(i, size=64), vgg, small_vae, size=64).z for i in range(6)]
        for i in range(6):
            for j in range(i + 1, 6):
                assert np.linalg.norm(zs[i] - zs[j]) > 0

    def test_sampled_latent(self, vgg, small_vae):
        img = make_style_image(1, size=64)
        a = encode_style(img, vgg, small_vae, size=64, sample_seed=3)
        b = encode_style(img, vgg, small_vae, size=64, sample_seed=3)
        np.testing.assert_array_equal(a.z, b.z)
        assert not np.array_equal(a.z, a.mean.astype(np.float32))

    def test_statistics_batch(self, vgg):
        imgs = [make_style_image(i, size=32) for i in range(3)]
        S = style_statistics(vgg, imgs)
        assert S.shape == (3, 1920)
        np.testing.assert_allclose(S[1], style_statistics(vgg, imgs[1:2])[0], rtol=1e-5, atol=1e-6)
