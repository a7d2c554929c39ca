import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.autograd import gradcheck

from weathergan.generator import (
    GeneratorConfig,
    WeatherGenerator,
    compose,
    reduce_segmentation,
    relevant_cues_for_pair,
    translation_map,
)
from weathergan.losses import seg_loss


def brute_force_t(att, seg, cues):
    """Per-pixel python loop over channels, in ascending cue order."""
    _, h, w = att.shape
    out = np.zeros((1, h, w))
    for i in range(h):
        for j in range(w):
            s = None
            for c in sorted(cues):
                s = seg[c, i, j] if s is None else s + seg[c, i, j]
            out[0, i, j] = att[0, i, j] * min(max(s, 0.0), 1.0)
    return out


def random_seg(rng, n_s, h, w):
    logits = rng.normal(size=(n_s, h, w))
    e = np.exp(logits)
    return e / e.sum(0)


class TestTranslationMap:
    def test_ones(self):
        att = torch.ones(1, 1, 3, 3)
        seg = torch.zeros(1, 7, 3, 3)
        seg[:, 2] = 1
        assert torch.equal(translation_map(att, seg, (1, 2)), torch.ones(1, 1, 3, 3))

    def test_zero_attention(self, rng):
        seg = torch.from_numpy(random_seg(rng, 7, 4, 4))[None]
        assert torch.equal(translation_map(torch.zeros(1, 1, 4, 4), seg, (1, 2)), torch.zeros(1, 1, 4, 4))

    def test_scalar_example(self):
        att = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        seg = torch.tensor([0.4, 0.35, 0.25], dtype=torch.float64).view(1, 3, 1, 1)
        assert translation_map(att, seg, (1, 2)).item() == pytest.approx(0.30, abs=1e-12)

    def test_empty_or_background_cues_rejected(self):
        att, seg = torch.ones(1, 1, 2, 2), torch.full((1, 3, 2, 2), 1 / 3)
        with pytest.raises(ValueError, match="empty"):
            translation_map(att, seg, ())
        with pytest.raises(ValueError, match="background"):
            translation_map(att, seg, (0, 1))

    def test_brute_force_random_instances(self, rng):
        for _ in range(100):
            n_s = int(rng.integers(2, 8))
            cues = tuple(sorted(rng.choice(np.arange(1, n_s), size=rng.integers(1, n_s), replace=False).tolist()))
            att = rng.uniform(0, 1, (1, 4, 4))
            seg = random_seg(rng, n_s, 4, 4)
            t = translation_map(torch.from_numpy(att), torch.from_numpy(seg), cues).numpy()
            assert np.array_equal(t, brute_force_t(att, seg, cues))

    def test_pair_defaults(self):
        assert relevant_cues_for_pair("sunny", "cloudy") == (1, 2)


class TestCompose:
    def test_scalar_example(self):
        g = compose(torch.tensor(0.2), torch.tensor(-0.4), torch.tensor(0.5), 1.0)
        assert g.item() == pytest.approx(-0.1, abs=1e-7)

    def test_alpha_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            compose(torch.zeros(1), torch.zeros(1), torch.zeros(1), 1.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1))
    def test_convexity(self, seed, alpha):
        r = np.random.default_rng(seed)
        x = torch.from_numpy(r.uniform(-1, 1, (3, 5, 5)))
        gi = torch.from_numpy(r.uniform(-1, 1, (3, 5, 5)))
        t = torch.from_numpy(r.uniform(0, 1, (1, 5, 5)))
        g = compose(x, gi, t, alpha)
        assert torch.all(g >= torch.minimum(x, gi) - 1e-12)
        assert torch.all(g <= torch.maximum(x, gi) + 1e-12)

    def test_monotone_in_alpha(self, rng):
        x = torch.from_numpy(rng.uniform(-1, 1, (3, 6, 6)))
        gi = torch.from_numpy(rng.uniform(-1, 1, (3, 6, 6)))
        t = torch.from_numpy(rng.uniform(0, 1, (1, 6, 6)))
        full = compose(x, gi, t, 1.0)
        dist = [(compose(x, gi, t, a) - x).abs() for a in np.linspace(0, 1, 11)]
        for a, b in zip(dist, dist[1:]):
            assert torch.all(b >= a - 1e-12)
        # every intermediate point lies on the segment from x to the alpha=1 composite
        mid = compose(x, gi, t, 0.3)
        np.testing.assert_allclose(mid, x + 0.3 * (full - x), atol=1e-12)


class TestGenerator:
    def test_shapes_at_paper_size(self):
        cfg = GeneratorConfig(base_channels=4, n_residual_blocks=1, n_s=7, relevant_cues=(1, 2))
        gen = WeatherGenerator(cfg).eval()
        with torch.no_grad():
            out = gen(torch.rand(1, 3, 300, 300) * 2 - 1)
        assert out.g_init.shape == (1, 3, 300, 300)
        assert out.att.shape == (1, 1, 300, 300)
        assert out.seg.shape == (1, 7, 300, 300)
        assert out.t.shape == out.att.shape and out.g.shape == out.g_init.shape

    def test_output_ranges(self, tiny_gen_config):
        gen = WeatherGenerator(tiny_gen_config)
        with torch.no_grad():
            out = gen(torch.randn(2, 3, 17, 23) * 3)
        assert out.g_init.min() >= -1 and out.g_init.max() <= 1
        assert out.att.min() >= 0 and out.att.max() <= 1
        assert out.t.min() >= 0 and out.t.max() <= 1
        torch.testing.assert_close(out.seg.sum(1), torch.ones(2, 17, 23), atol=1e-5, rtol=0)

    def test_branch_methods_match_forward(self, tiny_gen_config):
        gen = WeatherGenerator(tiny_gen_config)
        x = torch.rand(1, 3, 16, 16) * 2 - 1
        out = gen(x)
        torch.testing.assert_close(gen.init_translation(x), out.g_init)
        torch.testing.assert_close(gen.attention_map(x), out.att)
        torch.testing.assert_close(gen.segment_cues(x), out.seg)

    def test_separate_encoders(self):
        cfg = GeneratorConfig(base_channels=4, n_residual_blocks=1, n_s=4, relevant_cues=(1,), shared_encoder=False)
        gen = WeatherGenerator(cfg)
        assert len(gen.encoders) == 3
        assert gen(torch.zeros(1, 3, 8, 8)).g.shape == (1, 3, 8, 8)

    def test_shape_validation(self, tiny_gen_config):
        gen = WeatherGenerator(tiny_gen_config)
        with pytest.raises(ValueError):
            gen(torch.zeros(1, 1, 16, 16))
        sized = WeatherGenerator(GeneratorConfig(base_channels=4, n_residual_blocks=1, n_s=4, image_size=(16, 16)))
        with pytest.raises(ValueError, match="spatial size"):
            sized(torch.zeros(1, 3, 8, 8))
        with pytest.raises(ValueError, match="alpha"):
            gen(torch.zeros(1, 3, 16, 16), alpha=-0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GeneratorConfig(n_down=0)
        with pytest.raises(ValueError):
            GeneratorConfig(relevant_cues=())
        with pytest.raises(ValueError):
            GeneratorConfig(relevant_cues=(0, 1))

    def test_composition_identities(self, tiny_gen_config):
        gen = WeatherGenerator(tiny_gen_config)
        x = torch.rand(2, 3, 16, 16) * 2 - 1
        with torch.no_grad():
            out = gen(x)
            assert torch.equal(compose(x, out.g_init, torch.ones_like(out.t), 1.0), out.g_init)
            assert torch.equal(compose(x, out.g_init, torch.zeros_like(out.t), 1.0), x)
            assert torch.equal(gen(x, alpha=0.0).g, x)

    def test_every_init_parameter_matters(self, tiny_gen_config):
        """Finite-difference probe: nudging any parameter of the init branch moves g_init."""
        gen = WeatherGenerator(tiny_gen_config).double()
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1
        params = list(gen.encoders[0].named_parameters()) + list(gen.init_head.named_parameters())
        assert params
        gen_rng = torch.Generator().manual_seed(0)
        for name, p in params:
            direction = torch.randn(p.shape, generator=gen_rng, dtype=p.dtype)
            with torch.no_grad():
                p.add_(1e-4 * direction)
                up = gen.init_translation(x)
                p.sub_(2e-4 * direction)
                down = gen.init_translation(x)
                p.add_(1e-4 * direction)
            assert (up - down).abs().max() > 0, name

    def test_gradient_wrt_input_matches_finite_differences(self, tiny_gen_config):
        gen = WeatherGenerator(tiny_gen_config).double()
        x = (torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_()
        assert gradcheck(lambda v: gen(v).g, (x,), eps=1e-6, atol=1e-7, rtol=1e-3)

    def test_attention_maps_input_dependent_after_step(self, toy_corpus):
        from weathergan.toy import toy_config
        from weathergan.training import WeatherGANTrainer

        _, _, index = toy_corpus
        cfg = toy_config(image_size=(32, 32), total_iterations=2, decay_start=1, batch_size=2)
        trainer = WeatherGANTrainer(cfg, index.cue_names)
        trainer.train_step(trainer.sample_batch(index))
        xs = torch.stack([
            trainer.sample_batch(index).x_images[0],
            torch.rand(3, 32, 32) * 2 - 1,
        ])
        with torch.no_grad():
            att = trainer.G.eval()(xs).att
        assert not torch.allclose(att[0], att[1])

    def test_segmentation_learns_sky(self, toy_corpus):
        """Supervised steps on images whose upper half is always sky."""
        from weathergan.dataset import load_example

        _, _, index = toy_corpus
        torch.manual_seed(0)
        cfg = GeneratorConfig(base_channels=8, n_residual_blocks=1, n_s=index.n_s, relevant_cues=(1,))
        gen = WeatherGenerator(cfg)
        data = [load_example(r, (32, 32), index.n_s) for r in index.records]
        images = torch.stack([d[0] for d in data])
        targets = torch.stack([d[1] for d in data])
        opt = torch.optim.Adam(gen.parameters(), 2e-3)
        for step in range(60):
            k = torch.randint(0, len(images), (8,))
            opt.zero_grad()
            seg_loss(gen.segment_cues(images[k]), targets[k]).backward()
            opt.step()
        with torch.no_grad():
            pred = gen.segment_cues(images).argmax(1)
        assert (pred[:, :16] == 1).float().mean() >= 0.9


class TestAblationCompositions:
    @pytest.mark.parametrize("mode", ["full", "attention_only", "segmentation_only", "init_only"])
    def test_modes(self, mode):
        cfg = GeneratorConfig(base_channels=4, n_residual_blocks=1, n_s=4, relevant_cues=(1, 3), composition=mode)
        gen = WeatherGenerator(cfg)
        with torch.no_grad():
            out = gen(torch.rand(1, 3, 8, 8) * 2 - 1)
        expected = {
            "full": out.att * reduce_segmentation(out.seg, (1, 3)),
            "attention_only": out.att,
            "segmentation_only": reduce_segmentation(out.seg, (1, 3)),
            "init_only": torch.ones_like(out.att),
        }[mode]
        assert torch.equal(out.t, expected)
        if mode == "init_only":
            assert torch.equal(out.g, out.g_init)
