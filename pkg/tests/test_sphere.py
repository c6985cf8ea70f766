import numpy as np
import pytest

from diffreg import sphere
from diffreg.errors import NotUnit, ShapeMismatch

MODES = sphere.MODES


def atan2_distance(a, b):
    """High-precision oracle: angle from tangent/normal magnitudes."""
    dot = float(np.dot(a, b))
    rej = a - dot * b
    return float(np.arctan2(np.linalg.norm(rej), dot))


def north(d):
    n = np.zeros(d + 1)
    n[-1] = 1.0
    return n


class TestSphericalExp:
    def test_zero_maps_to_north_pole(self):
        out = sphere.spherical_exp(np.zeros(4))
        assert np.array_equal(out, north(4))

    def test_quarter_arc(self):
        phi = np.array([3.0, 0.0, 4.0])
        phi = phi / np.linalg.norm(phi) * (np.pi / 2)
        out = sphere.spherical_exp(phi)
        assert abs(out[-1]) < 1e-15
        assert np.abs(out[:3] - phi / np.linalg.norm(phi)).max() < 1e-15

    @pytest.mark.parametrize("mode", MODES)
    def test_unit_norm(self, mode):
        rng = np.random.default_rng(31)
        for _ in range(200):
            phi = rng.normal(size=rng.integers(1, 6)) * rng.uniform(0, 4)
            out = sphere.spherical_exp(phi, mode)
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_arc_length_matches_tangent_norm(self):
        rng = np.random.default_rng(32)
        for _ in range(200):
            phi = rng.normal(size=4)
            phi *= rng.uniform(0.1, 0.98 * np.pi) / np.linalg.norm(phi)
            d = sphere.spherical_distance(sphere.spherical_exp(phi), north(4))
            assert abs(d - np.linalg.norm(phi)) < 1e-9


class TestSphericalDistance:
    def test_self_distance(self):
        rng = np.random.default_rng(33)
        a = rng.normal(size=5)
        a /= np.linalg.norm(a)
        assert sphere.spherical_distance(a, a) < 1e-7

    def test_antipodes(self):
        n = north(4)
        assert np.isclose(sphere.spherical_distance(n, -n), np.pi)

    def test_matches_atan2_oracle(self):
        rng = np.random.default_rng(34)
        for _ in range(200):
            a = rng.normal(size=4)
            a /= np.linalg.norm(a)
            b = rng.normal(size=4)
            b /= np.linalg.norm(b)
            assert abs(sphere.spherical_distance(a, b) - atan2_distance(a, b)) < 1e-9

    def test_rejects_non_unit(self):
        with pytest.raises(NotUnit):
            sphere.spherical_distance(np.array([2.0, 0.0]), np.array([1.0, 0.0]))

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(35)
        for _ in range(1000):
            a, b, c = rng.normal(size=(3, 4))
            a, b, c = (v / np.linalg.norm(v) for v in (a, b, c))
            dab = sphere.spherical_distance(a, b)
            dba = sphere.spherical_distance(b, a)
            assert abs(dab - dba) < 1e-9
            dac = sphere.spherical_distance(a, c)
            dbc = sphere.spherical_distance(b, c)
            assert dac <= dab + dbc + 1e-9


class TestEmbedFeatureMap:
    def test_zero_map_is_all_north(self):
        out = sphere.embed_feature_map(np.zeros((3, 5, 2)))
        assert np.array_equal(out, np.broadcast_to(north(2), (3, 5, 3)))

    def test_single_pixel_reduces_to_exp(self):
        rng = np.random.default_rng(36)
        phi = rng.normal(size=3)
        out = sphere.embed_feature_map(phi[None, None, :])
        assert np.array_equal(out[0, 0], sphere.spherical_exp(phi))

    @pytest.mark.parametrize("mode", MODES)
    def test_norm_scan(self, mode):
        rng = np.random.default_rng(37)
        field = sphere.embed_feature_map(rng.normal(size=(8, 7, 4)) * 2.0, mode)
        norms = np.linalg.norm(field, axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-12

    def test_rejects_bad_rank(self):
        with pytest.raises(ShapeMismatch):
            sphere.embed_feature_map(np.zeros((4, 4)))


class TestSphericalSimilarity:
    def test_identical_fields(self):
        rng = np.random.default_rng(38)
        f = sphere.embed_feature_map(rng.normal(size=(4, 4, 3)))
        assert sphere.spherical_similarity(f, f) < 1e-12

    def test_antipodal_fields(self):
        rng = np.random.default_rng(39)
        f = sphere.embed_feature_map(rng.normal(size=(5, 6, 3)))
        assert np.isclose(sphere.spherical_similarity(f, -f), 2.0 * 5 * 6, atol=1e-9)

    def test_matches_bruteforce_loops(self):
        rng = np.random.default_rng(40)
        for _ in range(10):
            a = sphere.embed_feature_map(rng.normal(size=(4, 4, 3)))
            b = sphere.embed_feature_map(rng.normal(size=(4, 4, 3)))
            acc = 0.0
            for i in range(4):
                for j in range(4):
                    dot = 0.0
                    for k in range(4):
                        dot += a[i, j, k] * b[i, j, k]
                    acc += 1.0 - dot
            assert abs(sphere.spherical_similarity(a, b) - acc) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sphere.spherical_similarity(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(41)
        a = sphere.embed_feature_map(rng.normal(size=(4, 5, 3)))
        b = sphere.embed_feature_map(rng.normal(size=(4, 5, 3)))
        base = sphere.spherical_similarity(a, b)
        perm = rng.permutation(4 * 5)
        ap = a.reshape(20, 4)[perm].reshape(4, 5, 4)
        bp = b.reshape(20, 4)[perm].reshape(4, 5, 4)
        assert np.isclose(sphere.spherical_similarity(ap, bp), base, atol=1e-12)


class TestResidualField:
    def test_identical_fields_zero(self):
        rng = np.random.default_rng(42)
        f = sphere.embed_feature_map(rng.normal(size=(3, 4, 2)))
        assert np.all(sphere.residual_field(f, f) < 1e-12)

    def test_sum_matches_similarity(self):
        rng = np.random.default_rng(43)
        a = sphere.embed_feature_map(rng.normal(size=(6, 5, 3)))
        b = sphere.embed_feature_map(rng.normal(size=(6, 5, 3)))
        r = sphere.residual_field(a, b)
        assert r.shape == (30,)
        assert abs(r.sum() - sphere.spherical_similarity(a, b)) < 1e-12

    def test_single_flipped_pixel(self):
        rng = np.random.default_rng(44)
        a = sphere.embed_feature_map(rng.normal(size=(4, 4, 3)))
        b = a.copy()
        b[2, 1] = -b[2, 1]
        r = sphere.residual_field(a, b)
        hot = 2 * 4 + 1  # row-major position of the flipped pixel
        assert np.isclose(r[hot], 2.0, atol=1e-12)
        mask = np.ones(16, dtype=bool)
        mask[hot] = False
        assert np.all(np.abs(r[mask]) < 1e-12)

    def test_monotone_link_residual_vs_distance(self):
        ds = np.linspace(0.0, np.pi, 50)
        residuals = 1.0 - np.cos(ds)
        assert np.all(np.diff(residuals) >= 0)
