import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from weathergan.metrics import (
    EvalConfig,
    FlattenExtractor,
    InceptionExtractor,
    MetricReport,
    PooledPixelExtractor,
    evaluate_pair,
    extract_features,
    fid,
    kid,
    matrix_sqrt_psd,
    mmd2_unbiased,
)


def mmd2_double_loop(a, b):
    """Unbiased MMD^2 with k(u, v) = (u.v / d + 1)^3, written out term by term.

    Equal-sized sets are paired, so the cross sum skips i == j.
    """
    d = a.shape[1]

    def k(u, v):
        return (sum(ui * vi for ui, vi in zip(u, v)) / d + 1.0) ** 3

    m, n = len(a), len(b)
    s_aa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j)
    s_bb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j)
    if m == n:
        s_ab = sum(k(a[i], b[j]) for i in range(m) for j in range(n) if i != j)
        return s_aa / (m * (m - 1)) + s_bb / (n * (n - 1)) - 2.0 * s_ab / (m * (m - 1))
    s_ab = sum(k(a[i], b[j]) for i in range(m) for j in range(n))
    return s_aa / (m * (m - 1)) + s_bb / (n * (n - 1)) - 2.0 * s_ab / (m * n)


def random_psd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_reconstruction(self, rng):
        for d in (2, 5, 20):
            m = random_psd(rng, d)
            s = matrix_sqrt_psd(m)
            assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) <= 1e-6

    def test_sqrt_of_square(self, rng):
        m = random_psd(rng, 6)
        s = matrix_sqrt_psd(m @ m)
        assert np.linalg.norm(s - m) / np.linalg.norm(m) <= 1e-6

    def test_rank_deficient(self, rng):
        a = rng.normal(size=(5, 2))
        m = a @ a.T
        s = matrix_sqrt_psd(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) <= 1e-6

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestFID:
    def test_identical_sets(self, rng):
        a = rng.normal(size=(50, 8))
        assert abs(fid(a, a)) <= 1e-6

    def test_point_masses(self):
        real = np.zeros((10, 1))
        fake = np.full((10, 1), 3.0)
        assert fid(real, fake) == pytest.approx(9.0, abs=1e-12)

    def test_unit_gaussians(self, rng):
        a = rng.normal(0, 1, 10000)
        b = rng.normal(1, 1, 10000)
        assert fid(a, b) == pytest.approx(1.0, abs=0.1)

    def test_closed_form_multivariate(self, rng):
        # exact population statistics in, exact distance out
        from weathergan.metrics import frechet_distance

        s1, s2 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
        expected = 1.0 + (1 - 3) ** 2 + (2 - 1) ** 2
        assert frechet_distance(np.zeros(2), s1, np.array([1.0, 0.0]), s2) == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.normal(size=(80, 6)), rng.normal(0.5, 2.0, size=(90, 6))
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-6)

    def test_rotation_invariant(self, rng):
        a, b = rng.normal(size=(100, 5)), rng.normal(0.3, 1.5, size=(120, 5))
        q = random_orthogonal(rng, 5)
        assert fid(a @ q, b @ q) == pytest.approx(fid(a, b), abs=1e-5)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension"):
            fid(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)))
        with pytest.raises(ValueError):
            fid(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        assert fid(r.normal(size=(10, 4)), r.normal(size=(12, 4))) >= 0


class TestKID:
    def test_identical_full_set(self, rng):
        a = rng.normal(size=(30, 4))
        mean, std = kid(a, a, subset_size=30, n_subsets=1)
        assert abs(mean) <= 1e-6 and std == 0

    def test_double_loop_oracle(self, rng):
        for m, n in ((3, 3), (5, 7), (10, 10)):
            a, b = rng.normal(size=(m, 2)), rng.normal(0.5, 1.0, size=(n, 2))
            assert mmd2_unbiased(a, b) == pytest.approx(mmd2_double_loop(a, b), rel=1e-12, abs=1e-13)

    def test_subset_path_matches_oracle(self, rng):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        mean, _ = kid(a, b, subset_size=3, n_subsets=1)
        assert mean == pytest.approx(mmd2_double_loop(a, b), rel=1e-12, abs=1e-13)

    def test_unbiased_on_same_distribution(self, rng):
        est = np.array([mmd2_unbiased(rng.normal(size=(50, 4)), rng.normal(size=(50, 4))) for _ in range(200)])
        assert abs(est.mean()) <= 3 * est.std(ddof=1) / np.sqrt(len(est))

    def test_separated_clouds(self, rng):
        a, b = rng.normal(size=(100, 4)), rng.normal(3.0, 1.0, size=(100, 4))
        mean, std = kid(a, b, subset_size=50, n_subsets=20, seed=1)
        assert mean > 10 * std

    def test_deterministic(self, rng):
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
        assert kid(a, b, 20, 10, seed=5) == kid(a, b, 20, 10, seed=5)

    def test_subset_too_large(self, rng):
        with pytest.raises(ValueError, match="subset_size"):
            kid(rng.normal(size=(10, 2)), rng.normal(size=(8, 2)), subset_size=9, n_subsets=1)


class TestExtraction:
    def test_same_image_same_row(self):
        img = torch.rand(3, 8, 8)
        feats = extract_features([img, img], PooledPixelExtractor())
        np.testing.assert_array_equal(feats[0], feats[1])

    def test_flatten_mock(self):
        imgs = [torch.rand(3, 2, 2) for _ in range(3)]
        feats = extract_features(imgs, FlattenExtractor())
        np.testing.assert_array_equal(feats, np.stack([i.flatten().double().numpy() for i in imgs]))

    def test_many_images(self):
        imgs = torch.rand(500, 3, 8, 8)
        assert extract_features(imgs, PooledPixelExtractor(grid=2)).shape == (500, 12)

    def test_too_few(self):
        with pytest.raises(ValueError):
            extract_features([torch.rand(3, 2, 2)], FlattenExtractor())

    def test_inception_feature_width(self):
        feats = extract_features(torch.rand(2, 3, 32, 32) * 2 - 1, InceptionExtractor())
        assert feats.shape == (2, 2048) and np.isfinite(feats).all()


def write_dir(path, images):
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        Image.fromarray(img).save(path / f"{i:03d}.png")


class TestEvaluatePair:
    @pytest.fixture
    def dirs(self, tmp_path):
        from weathergan.dataset import WeatherClass
        from weathergan.toy import toy_image

        r = np.random.default_rng(0)
        write_dir(tmp_path / "sunny", [toy_image(r, WeatherClass.SUNNY, 32) for _ in range(20)])
        write_dir(tmp_path / "cloudy", [toy_image(r, WeatherClass.CLOUDY, 32) for _ in range(20)])
        return tmp_path

    def test_same_directory(self, dirs):
        cfg = EvalConfig(image_size=(32, 32), subset_size=20, n_subsets=5)
        report = evaluate_pair(dirs / "sunny", dirs / "sunny", PooledPixelExtractor(), cfg)
        assert report.fid == pytest.approx(0.0, abs=1e-6)
        assert abs(report.kid_mean) <= 1e-6
        assert (report.n_real, report.n_fake, report.n_skipped) == (20, 20, 0)

    def test_different_classes_score_higher(self, dirs):
        cfg = EvalConfig(image_size=(32, 32), subset_size=10, n_subsets=5)
        same = evaluate_pair(dirs / "sunny", dirs / "sunny", PooledPixelExtractor(), cfg)
        diff = evaluate_pair(dirs / "sunny", dirs / "cloudy", PooledPixelExtractor(), cfg)
        assert diff.fid > same.fid
        assert diff.kid_mean > same.kid_mean

    def test_unreadable_skipped(self, dirs):
        (dirs / "sunny" / "broken.png").write_bytes(b"not an image")
        report = evaluate_pair(dirs / "sunny", dirs / "cloudy", PooledPixelExtractor(),
                               EvalConfig(image_size=(32, 32), subset_size=10, n_subsets=2))
        assert report.n_skipped == 1 and report.n_real == 20

    def test_report_round_trip(self, dirs):
        report = evaluate_pair(dirs / "sunny", dirs / "cloudy", PooledPixelExtractor(),
                               EvalConfig(image_size=(32, 32), subset_size=10, n_subsets=3))
        text = report.to_text()
        assert text.splitlines()[0].startswith("fid=")
        again = MetricReport.from_text(text)
        assert again.fid == report.fid and again.kid_mean == report.kid_mean and again.kid_std == report.kid_std
        assert again.to_text() == text
