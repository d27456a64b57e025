import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_SPEC, tiny_field
from nerfstyle import checkpoint as ckpt
from nerfstyle.errors import CheckpointMismatchError, ConfigError, DependencyError, InvariantViolationError
from nerfstyle.field import FieldSpec
from nerfstyle.hyper import HyperNetwork
from nerfstyle.rays import RayBatch
from nerfstyle.renderer import SampleStrategy, render
from nerfstyle.style_codec import FeatureExtractor, StyleVAE, feature_stats, style_statistics
from nerfstyle.toy import make_style_image
from nerfstyle.trainer import (
    MetricsLog,
    PatchSample,
    PatchSpec,
    RayPool,
    TrainConfig,
    check_geometry,
    content_loss,
    freeze_geometry,
    grid_positions,
    load_stage1,
    load_stage2,
    read_metrics,
    reconstruction_loss,
    sample_patch,
    stage1_step,
    stage2_losses,
    style_loss,
    stylization_losses,
    train_geometry,
    train_style,
)


def mini_config(**overrides):
    base = dict(
        field=TINY_SPEC,
        stage1_iterations=10,
        stage2_iterations=6,
        batch_rays=64,
        patch=PatchSpec(1 / 3, 1 / 2, 8, 8),
        n_fg=8,
        n_bg=2,
        latent_dim=4,
        hyper_hidden=(8,),
        style_size=32,
        log_every=3,
        checkpoint_every=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def mini_vgg():
    return FeatureExtractor("random", seed=0, widths=(4, 4, 4, 4), min_side=8)


@pytest.fixture(scope="module")
def styles():
    return [make_style_image(i, size=32) for i in range(3)]


@pytest.fixture(scope="module")
def mini_vae(mini_vgg, styles):
    return StyleVAE(latent_dim=4, hidden=8, epochs=5).fit(style_statistics(mini_vgg, styles))


def _round_half_up(x):
    return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))


class TestReconstructionLoss:
    def test_unit_residual(self):
        assert reconstruction_loss(torch.zeros(1, 3), torch.tensor([[1.0, 0, 0]])).item() == 1.0

    def test_mean_of_norms(self):
        pred = torch.zeros(2, 3)
        target = torch.tensor([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
        assert reconstruction_loss(pred, target).item() == pytest.approx(3.0)

    def test_optimum_leaves_parameters(self):
        field = tiny_field()
        rays = RayBatch(torch.tensor([[0.0, 0, -3]] * 4, dtype=torch.float64),
                        torch.nn.functional.normalize(torch.tensor([[0.0, 0, 1], [0.1, 0, 1], [0, 0.1, 1], [0.1, 0.1, 1]], dtype=torch.float64), dim=-1))
        strategy = SampleStrategy(8, 2)
        with torch.no_grad():
            target = render(field, rays, strategy).color.clone()

        class Pool:
            def __len__(self):
                return 4

            def batch(self, idx):
                return rays[idx], target[idx]

        before = {k: v.clone() for k, v in field.state_dict().items()}
        opt = torch.optim.Adam(field.parameters(), lr=1e-3)
        loss = stage1_step(field, opt, Pool(), 4, np.random.default_rng(0), strategy)
        assert loss == 0.0
        assert all(torch.equal(before[k], v) for k, v in field.state_dict().items())

    def test_ray_pool(self, small_scene):
        pool = RayPool(small_scene, [0, 2])
        assert len(pool) == 2 * 40 * 40
        rays, colors = pool.batch(torch.tensor([0, 1600]))
        np.testing.assert_allclose(colors[1].numpy(), small_scene.images[2][0, 0], atol=1e-6)
        assert pool.image_ids[1600].item() == 2


class TestPatchSampler:
    def test_default_window_bounds(self):
        spec = PatchSpec()
        rng = np.random.default_rng(0)
        hs, ws = set(), set()
        for _ in range(3000):
            p = sample_patch((300, 400), spec, rng)
            hs.add(p.height)
            ws.add(p.width)
        assert min(hs) >= 150 and max(hs) <= 300
        assert min(ws) >= 134 and max(ws) <= 400
        assert min(hs) < 160 and max(hs) > 290 and min(ws) < 145 and max(ws) > 390

    def test_exact_window_is_every_pixel(self):
        spec = PatchSpec(1.0, 1.0, 9, 7)
        p = sample_patch((7, 9), spec, np.random.default_rng(1))
        assert (p.top, p.left, p.height, p.width) == (0, 0, 7, 9)
        np.testing.assert_array_equal(p.rows, np.arange(7))
        np.testing.assert_array_equal(p.cols, np.arange(9))

    def test_grid_larger_than_ratio_window(self):
        # ratio asks for 10 rows but the grid needs 20: the window grows to the grid
        p = sample_patch((20, 30), PatchSpec(0.5, 0.5, 5, 20), np.random.default_rng(0))
        assert p.height == 20
        assert len(set(p.rows.tolist())) == 20

    def test_image_smaller_than_grid(self):
        with pytest.raises(ConfigError):
            sample_patch((60, 100), PatchSpec(), np.random.default_rng(0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 500), st.integers(1, 60))
    def test_grid_positions_match_rounding_formula(self, length, n):
        n = min(n, length)
        got = grid_positions(3, length, n)
        want = [_round_half_up(Decimal(3) + (Decimal(i) + Decimal("0.5")) * length / n - Decimal("0.5")) for i in range(n)]
        assert got.tolist() == want

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(4, 120), st.integers(4, 120), st.integers(1, 4), st.integers(1, 4))
    def test_invariants(self, seed, H, W, gh_div, gw_div):
        spec = PatchSpec(1 / 3, 1 / 2, max(1, W // (gw_div + 1)), max(1, H // (gh_div + 1)))
        p = sample_patch((H, W), spec, np.random.default_rng(seed))
        assert p.height >= math.ceil(H / 2) and p.width >= math.ceil(W / 3)
        assert 0 <= p.top and p.top + p.height <= H and 0 <= p.left and p.left + p.width <= W
        assert len(p.rows) == spec.grid_h and len(p.cols) == spec.grid_w
        assert (np.diff(p.rows) > 0).all() and (np.diff(p.cols) > 0).all()
        assert p.rows[0] >= p.top and p.rows[-1] < p.top + p.height
        assert p.cols[0] >= p.left and p.cols[-1] < p.left + p.width
        idx = p.pixel_indices()
        assert idx.shape == (spec.grid_h * spec.grid_w, 2)
        np.testing.assert_array_equal(idx.reshape(spec.grid_h, spec.grid_w, 2)[:, 0, 0], p.rows)

    def test_gather(self):
        img = np.arange(5 * 6 * 3).reshape(5, 6, 3)
        p = PatchSample(0, 0, 0, 5, 6, np.array([1, 3]), np.array([0, 2, 5]))
        g = p.gather(img)
        assert g.shape == (2, 3, 3)
        np.testing.assert_array_equal(g[1, 2], img[3, 5])

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            PatchSpec(0.0, 0.5)
        with pytest.raises(ConfigError):
            PatchSpec(0.5, 0.5, 0, 3)


class TestStylizationLosses:
    def test_content_identical_and_symmetric(self, mini_vgg):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(1, 3, 16, 16, generator=g), torch.rand(1, 3, 16, 16, generator=g)
        assert content_loss(mini_vgg, a, a).item() == 0.0
        assert content_loss(mini_vgg, a, b).item() == content_loss(mini_vgg, b, a).item() > 0

    def test_content_loop_oracle(self, mini_vgg):
        g = torch.Generator().manual_seed(1)
        a, b = torch.rand(1, 3, 16, 16, generator=g), torch.rand(1, 3, 16, 16, generator=g)
        fa, fb = mini_vgg(a)[-1].double().numpy().ravel(), mini_vgg(b)[-1].double().numpy().ravel()
        ref = math.sqrt(sum((x - y) ** 2 for x, y in zip(fa, fb)))
        assert content_loss(mini_vgg, a, b).item() == pytest.approx(ref, abs=1e-5)

    def test_style_identical_is_zero(self, mini_vgg):
        s = torch.rand(1, 3, 32, 32)
        assert style_loss(mini_vgg, s, s).item() == 0.0

    def test_style_constant_greys(self, mini_vgg):
        s, p = torch.full((1, 3, 32, 32), 0.3), torch.full((1, 3, 16, 16), 0.7)
        fs, fp = feature_stats(mini_vgg(s)), feature_stats(mini_vgg(p))
        # zero-padded borders make deeper maps non-constant; only relu1_1 interior is flat
        expected = sum(torch.linalg.vector_norm(a - b) for a, b in zip(fs.means, fp.means))
        expected = expected + sum(torch.linalg.vector_norm(a - b) for a, b in zip(fs.stds, fp.stds))
        assert style_loss(mini_vgg, s, p).item() == pytest.approx(expected.item(), rel=1e-6)

    def test_style_constant_greys_without_borders(self):
        # 1x1 convolutions see no padding, so constant images give zero std at every tap
        vgg = FeatureExtractor("random", seed=2, widths=(3, 3, 3, 3), pool=False, min_side=1)
        for m in vgg.features:
            if isinstance(m, torch.nn.Conv2d):
                m.padding = (0, 0)
                m.weight.data = m.weight.data[..., 1:2, 1:2].contiguous()
        s, p = torch.full((1, 3, 6, 6), 0.3), torch.full((1, 3, 4, 4), 0.7)
        fs, fp = feature_stats(vgg(s)), feature_stats(vgg(p))
        assert all((x.abs() < 1e-6).all() for x in fs.stds + fp.stds)
        expected = sum(torch.linalg.vector_norm(a - b).item() for a, b in zip(fs.means, fp.means))
        assert expected > 0
        assert style_loss(vgg, s, p).item() == pytest.approx(expected, abs=1e-5)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_style_nonnegative(self, seed):
        vgg = FeatureExtractor("random", seed=0, widths=(4, 4, 4, 4), min_side=8)
        g = torch.Generator().manual_seed(seed)
        assert style_loss(vgg, torch.rand(1, 3, 16, 16, generator=g), torch.rand(1, 3, 8, 8, generator=g)).item() >= 0

    def test_combined_matches_parts(self, mini_vgg):
        g = torch.Generator().manual_seed(4)
        gt, r, s = (torch.rand(1, 3, 16, 16, generator=g) for _ in range(3))
        c, st_, total = stylization_losses(mini_vgg, gt, r, feature_stats(mini_vgg(s)), 15.0)
        assert c.item() == pytest.approx(content_loss(mini_vgg, gt, r).item(), rel=1e-6)
        assert st_.item() == pytest.approx(style_loss(mini_vgg, s, r).item(), rel=1e-6)
        assert total.item() == pytest.approx(c.item() + 15 * st_.item(), rel=1e-6)


class TestStage2:
    def _setup(self, small_scene, mini_vgg, seed=0):
        field = tiny_field(seed, torch.float32)
        psi = HyperNetwork.for_field(field, latent_dim=4, hidden=(8,))
        patch = sample_patch((40, 40), PatchSpec(1 / 3, 1 / 2, 8, 8), np.random.default_rng(seed), 1)
        stats = feature_stats(mini_vgg(torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(seed))))
        return field, psi, patch, stats

    def test_lambda_zero_is_content(self, small_scene, mini_vgg):
        field, psi, patch, stats = self._setup(small_scene, mini_vgg)
        c, s, total = stage2_losses(field, psi, mini_vgg, small_scene, patch, torch.zeros(4), stats, 0.0, SampleStrategy(8, 2))
        assert total.item() == c.item() and s.item() > 0

    def test_lambda_affine(self, small_scene, mini_vgg):
        field, psi, patch, stats = self._setup(small_scene, mini_vgg)
        vals = {}
        for lam in (0.0, 1.0, 15.0):
            vals[lam] = [v.item() for v in stage2_losses(field, psi, mini_vgg, small_scene, patch, torch.ones(4), stats, lam, SampleStrategy(8, 2))]
        c, s = vals[0.0][0], vals[1.0][2] - vals[0.0][2]
        assert vals[15.0][2] == pytest.approx(c + 15 * s, abs=1e-6 * max(1.0, vals[15.0][2]))

    def test_freeze_invariant(self):
        field = tiny_field()
        snap = freeze_geometry(field)
        assert not any(p.requires_grad for p in field.parameters())
        check_geometry(field, snap)
        with torch.no_grad():
            for n, p in field.named_parameters():
                if ".app." in n:
                    p.add_(1.0)
        check_geometry(field, snap)  # appearance changes are allowed
        with torch.no_grad():
            next(p for n, p in field.named_parameters() if ".app." not in n).view(-1)[0] += 1e-7
        with pytest.raises(InvariantViolationError):
            check_geometry(field, snap)


class TestConfig:
    def test_round_trip(self):
        c = TrainConfig.desk(seed=3, lambda_style=2.5)
        d = c.to_dict()
        assert TrainConfig.from_dict(d) == c
        assert TrainConfig.from_dict(d).to_dict() == d

    def test_defaults(self):
        c = TrainConfig()
        assert (c.stage1_iterations, c.batch_rays, c.stage1_lr) == (250_000, 5427, 5e-4)
        assert (c.stage2_iterations, c.stage2_lr, c.lambda_style) == (100_000, 1e-3, 15.0)
        assert (c.patch.width_ratio, c.patch.height_ratio, c.patch.grid_w, c.patch.grid_h) == (1 / 3, 1 / 2, 81, 67)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"stage1_iters": 3})

    @pytest.mark.parametrize("bad", [dict(stage1_iterations=0), dict(stage1_lr=-1.0), dict(lambda_style=-0.1), dict(batch_rays=10)])
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


class TestDrivers:
    def test_log_rows_and_checkpoint(self, small_scene, tmp_path):
        cfg = mini_config()
        field, path = train_geometry(small_scene, cfg, tmp_path)
        rows = read_metrics(tmp_path / "metrics_stage1.jsonl")
        assert len(rows) == math.ceil(10 / 3)
        assert [r["iteration"] for r in rows] == [0, 3, 6, 9]
        assert set(rows[0]) >= {"iteration", "loss", "lr", "wall_time"}
        loaded, meta, _ = load_stage1(path)
        assert meta["iteration"] == 10
        assert all(torch.equal(a, b) for a, b in zip(loaded.state_dict().values(), field.state_dict().values()))

    def test_resume_matches_uninterrupted(self, small_scene, tmp_path):
        cfg = mini_config()
        a, _ = train_geometry(small_scene, cfg, tmp_path / "a")
        train_geometry(small_scene, cfg, tmp_path / "b", iterations=5)
        b, _ = train_geometry(small_scene, cfg, tmp_path / "b")
        assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
        assert read_metrics(tmp_path / "b" / "metrics_stage1.jsonl")[-1]["iteration"] == 9

    def test_architecture_mismatch_refuses_resume(self, small_scene, tmp_path):
        train_geometry(small_scene, mini_config(stage1_iterations=2), tmp_path)
        other = mini_config(stage1_iterations=4, field=FieldSpec(pos_freqs=2, dir_freqs=1, base_width=6, base_depth=2, skips=(), app_hidden=4))
        with pytest.raises(CheckpointMismatchError):
            train_geometry(small_scene, other, tmp_path)
        train_geometry(small_scene, other, tmp_path, resume=False)

    def test_loss_decreases(self, small_scene):
        torch.manual_seed(0)
        cfg = TrainConfig.desk(field=TINY_SPEC, batch_rays=256, n_fg=16, n_bg=2, stage1_lr=5e-3, jitter=False,
                              patch=PatchSpec(1 / 3, 1 / 2, 8, 8))
        from nerfstyle.field import RadianceField

        field = RadianceField(cfg.field)
        opt = torch.optim.Adam(field.parameters(), lr=cfg.stage1_lr)
        pool = RayPool(small_scene)
        losses = [stage1_step(field, opt, pool, 256, np.random.default_rng(0), cfg.strategy()) for _ in range(100)]
        assert losses[-1] < 0.7 * losses[0]

    def test_stage2_requires_stage1(self, small_scene, tmp_path, mini_vgg, mini_vae, styles):
        with pytest.raises(DependencyError):
            train_style(small_scene, tmp_path / "stage1.npz", styles, mini_vgg, mini_vae, mini_config(), tmp_path)

    def test_stage2_run(self, small_scene, tmp_path, mini_vgg, mini_vae, styles):
        cfg = mini_config()
        _, s1 = train_geometry(small_scene, cfg, tmp_path)
        field, psi, s2 = train_style(small_scene, s1, styles, mini_vgg, mini_vae, cfg, tmp_path)
        stage1_field, _, _ = load_stage1(s1)
        for (n, p), q in zip(field.named_parameters(), stage1_field.parameters()):
            if ".app." not in n:
                assert torch.equal(p, q)
        f2, psi2, vae2, meta = load_stage2(s2)
        assert meta["iteration"] == 6 and meta["extractor"]["pretrained"] is False
        z = torch.ones(4)
        assert torch.equal(psi2(z), psi(z))
        rows = read_metrics(tmp_path / "metrics_stage2.jsonl")
        assert len(rows) == 2 and {"content", "style", "loss"} <= set(rows[0])

    def test_stage2_rejects_other_geometry(self, small_scene, tmp_path, mini_vgg, mini_vae, styles):
        cfg = mini_config()
        _, s1 = train_geometry(small_scene, cfg, tmp_path)
        train_style(small_scene, s1, styles, mini_vgg, mini_vae, cfg, tmp_path, iterations=2)
        train_geometry(small_scene, cfg.__class__(**{**cfg.__dict__, "seed": 5}), tmp_path, resume=False)
        with pytest.raises(CheckpointMismatchError):
            train_style(small_scene, s1, styles, mini_vgg, mini_vae, cfg, tmp_path)


class TestMetricsLog:
    def test_truncates_on_resume(self, tmp_path):
        log = MetricsLog(tmp_path / "m.jsonl")
        for i in range(0, 10, 2):
            log.append({"iteration": i})
        resumed = MetricsLog(tmp_path / "m.jsonl", resume_from=5)
        assert [r["iteration"] for r in resumed.rows()] == [0, 2, 4]
        fresh = MetricsLog(tmp_path / "m.jsonl")
        assert fresh.rows() == []
