import numpy as np
import pytest

from diffreg import lie
from diffreg.errors import BadFocal, NotARotation

from conftest import random_canonical_twist


def quat_rotation(omega):
    """Quaternion-composition oracle for the Rodrigues map."""
    theta = np.linalg.norm(omega)
    if theta == 0:
        return np.eye(3)
    w = np.cos(theta / 2.0)
    x, y, z = np.sin(theta / 2.0) * omega / theta
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def twist_matrix(theta):
    M = np.zeros((4, 4))
    M[:3, :3] = lie.skew(theta[:3])
    M[:3, 3] = theta[3:]
    return M


def series_expm(M, terms=20):
    """Truncated matrix-exponential series oracle."""
    out = np.eye(4)
    acc = np.eye(4)
    for k in range(1, terms + 1):
        acc = acc @ M / k
        out = out + acc
    return out


def as_matrix(T):
    M = np.eye(4)
    M[:3, :3] = T.R
    M[:3, 3] = T.t
    return M


class TestSO3:
    def test_zero_rotation(self):
        assert np.allclose(lie.so3_exp(np.zeros(3)), np.eye(3))

    def test_half_turn_about_x(self):
        assert np.allclose(lie.so3_exp([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_matches_quaternion_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            axis = rng.normal(size=3)
            omega = 0.7 * axis / np.linalg.norm(axis)
            assert np.abs(lie.so3_exp(omega) - quat_rotation(omega)).max() < 1e-12

    def test_log_identity(self):
        assert np.allclose(lie.so3_log(np.eye(3)), np.zeros(3))

    def test_log_half_turn(self):
        w = lie.so3_log(np.diag([1.0, -1.0, -1.0]))
        assert np.isclose(np.linalg.norm(w), np.pi)
        assert np.allclose(w / np.linalg.norm(w), [1, 0, 0])

    def test_roundtrip(self):
        rng = np.random.default_rng(12)
        for _ in range(500):
            omega = random_canonical_twist(rng)[:3]
            back = lie.so3_log(lie.so3_exp(omega))
            assert np.linalg.norm(back - omega) < 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(NotARotation):
            lie.so3_log(np.eye(3) * 1.5)
        with pytest.raises(NotARotation):
            lie.so3_log(np.diag([1.0, 1.0, -1.0]))  # determinant -1


class TestSE3:
    def test_zero_twist(self):
        T = lie.se3_exp(np.zeros(6))
        assert np.allclose(T.R, np.eye(3)) and np.allclose(T.t, 0)

    def test_pure_translation(self):
        T = lie.se3_exp([0, 0, 0, 1.0, 2.0, 3.0])
        assert np.allclose(T.R, np.eye(3)) and np.allclose(T.t, [1, 2, 3])

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            theta = random_canonical_twist(rng, rot_max=2.5, trans_max=10.0)
            M = series_expm(twist_matrix(theta), terms=25)
            assert np.abs(as_matrix(lie.se3_exp(theta)) - M).max() < 1e-10

    def test_log_identity_and_translation(self):
        assert np.allclose(lie.se3_log(lie.Transform3(np.eye(3), np.zeros(3))), np.zeros(6))
        T = lie.Transform3(np.eye(3), np.array([4.0, -1.0, 2.0]))
        assert np.allclose(lie.se3_log(T), [0, 0, 0, 4, -1, 2])

    def test_roundtrip(self):
        rng = np.random.default_rng(14)
        for _ in range(500):
            theta = random_canonical_twist(rng)
            T = lie.se3_exp(theta)
            assert np.linalg.norm(lie.se3_log(T) - theta) < 1e-9

    def test_compose_identity_and_inverse(self):
        rng = np.random.default_rng(15)
        T = lie.se3_exp(random_canonical_twist(rng))
        I = lie.identity_transform()
        assert np.allclose(as_matrix(lie.compose(T, I)), as_matrix(T))
        TI = lie.compose(T, lie.invert(T))
        assert np.abs(as_matrix(TI) - np.eye(4)).max() < 1e-12

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(16)
        for _ in range(50):
            A = lie.se3_exp(random_canonical_twist(rng))
            B = lie.se3_exp(random_canonical_twist(rng))
            assert np.abs(as_matrix(lie.compose(A, B)) - as_matrix(A) @ as_matrix(B)).max() < 1e-12

    def test_invert_matches_matrix_inverse(self):
        rng = np.random.default_rng(17)
        T = lie.se3_exp(random_canonical_twist(rng))
        assert np.abs(as_matrix(lie.invert(T)) - np.linalg.inv(as_matrix(T))).max() < 1e-12

    def test_invert_pure_translation(self):
        T = lie.invert(lie.Transform3(np.eye(3), np.array([1.0, 2.0, 3.0])))
        assert np.allclose(T.t, [-1, -2, -3])


class TestGeodesics:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(18)
        theta = random_canonical_twist(rng)
        assert lie.geodesic_se3(theta, theta) < 1e-12

    def test_pure_translation_norm(self):
        d = lie.geodesic_se3(np.zeros(6), np.array([0, 0, 0, 1.0, 2.0, 3.0]))
        assert np.isclose(d, np.sqrt(14.0), atol=1e-12)

    def test_left_invariance(self):
        rng = np.random.default_rng(19)
        for _ in range(100):
            g = random_canonical_twist(rng, rot_max=2.0)
            a = random_canonical_twist(rng, rot_max=2.0)
            b = random_canonical_twist(rng, rot_max=2.0)
            ga = lie.compose_twists(g, a)
            gb = lie.compose_twists(g, b)
            assert abs(lie.geodesic_se3(ga, gb) - lie.geodesic_se3(a, b)) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(20)
        a = random_canonical_twist(rng)
        b = random_canonical_twist(rng)
        assert np.isclose(lie.geodesic_se3(a, b), lie.geodesic_se3(b, a), atol=1e-12)

    def test_triangle_inequality_rotation_subgroup(self):
        # exact subadditivity: composed rotation angle never exceeds the sum
        rng = np.random.default_rng(21)
        for _ in range(1000):
            a, b, c = (random_canonical_twist(rng, trans_max=0.0) for _ in range(3))
            assert lie.geodesic_se3(a, c) <= lie.geodesic_se3(a, b) + lie.geodesic_se3(b, c) + 1e-9

    def test_triangle_inequality_translation_subgroup(self):
        rng = np.random.default_rng(22)
        for _ in range(1000):
            a, b, c = (random_canonical_twist(rng, rot_max=0.0) for _ in range(3))
            assert lie.geodesic_se3(a, c) <= lie.geodesic_se3(a, b) + lie.geodesic_se3(b, c) + 1e-9

    def test_triangle_inequality_near_identity(self):
        # The mixed rad/mm norm is only locally subadditive: the translation
        # block of the log picks up a V-inverse stretch of order theta^2, so
        # small twists need a matching slack (measured worst case 2.3e-3 at
        # 0.2 rad / 5 mm; asserted with margin).
        rng = np.random.default_rng(23)
        for _ in range(1000):
            a = random_canonical_twist(rng, rot_max=0.2, trans_max=5.0)
            b = random_canonical_twist(rng, rot_max=0.2, trans_max=5.0)
            c = random_canonical_twist(rng, rot_max=0.2, trans_max=5.0)
            dac = lie.geodesic_se3(a, c)
            dab = lie.geodesic_se3(a, b)
            dbc = lie.geodesic_se3(b, c)
            assert dac <= dab + dbc + 1e-2


class TestSO4:
    def test_zero_twist_identity(self):
        assert np.allclose(lie.map_so4(np.zeros(6), 500.0), np.eye(4))

    def test_pure_rotation_orthogonal(self):
        rng = np.random.default_rng(22)
        omega = random_canonical_twist(rng)[:3]
        H = lie.map_so4(np.concatenate([omega, np.zeros(3)]), 500.0)
        assert np.abs(H.T @ H - np.eye(4)).max() < 1e-9
        assert np.allclose(H[3, :3], 0) and np.allclose(H[:3, 3], 0) and H[3, 3] == 1.0

    def test_matches_block_assembly_oracle(self):
        rng = np.random.default_rng(23)
        f = 500.0
        for _ in range(20):
            theta = random_canonical_twist(rng)
            T = lie.se3_exp(theta)
            oracle = np.zeros((4, 4))
            oracle[:3, :3] = T.R
            oracle[:3, 3] = T.t / (2 * f)
            oracle[3, :3] = -T.t @ T.R
            oracle[3, 3] = 1.0
            assert np.abs(lie.map_so4(theta, f) - oracle).max() < 1e-12

    def test_bad_focal(self):
        with pytest.raises(BadFocal):
            lie.map_so4(np.zeros(6), 0.0)
        with pytest.raises(BadFocal):
            lie.geodesic_so4(np.zeros(6), np.zeros(6), -1.0)

    def test_distance_zero_and_translation_case(self):
        rng = np.random.default_rng(24)
        theta = random_canonical_twist(rng)
        assert lie.geodesic_so4(theta, theta, 500.0) == 0.0
        d = lie.geodesic_so4(np.zeros(6), np.array([0, 0, 0, 1.0, 0, 0]), 0.5)
        assert np.isclose(d, np.sqrt(2.0), atol=1e-12)

    def test_frobenius_bi_invariance(self):
        rng = np.random.default_rng(25)
        for _ in range(100):
            a = random_canonical_twist(rng)
            b = random_canonical_twist(rng)
            ha = lie.map_so4(a, 500.0)
            hb = lie.map_so4(b, 500.0)
            q1 = np.linalg.qr(rng.normal(size=(4, 4)))[0]
            q2 = np.linalg.qr(rng.normal(size=(4, 4)))[0]
            base = np.linalg.norm(ha - hb)
            rotated = np.linalg.norm(q1 @ (ha - hb) @ q2)
            assert abs(base - rotated) < 1e-9


class TestSamplePose:
    def test_zero_ranges_return_center(self):
        rng = np.random.default_rng(26)
        center = random_canonical_twist(rng)
        out = lie.sample_pose(center, 0.0, 0.0, rng)
        assert np.array_equal(out, center)

    def test_seed_determinism(self):
        center = np.zeros(6)
        a = lie.sample_pose(center, 5.0, 10.0, 123)
        b = lie.sample_pose(center, 5.0, 10.0, 123)
        assert np.array_equal(a, b)

    def test_offsets_within_ranges(self):
        rng = np.random.default_rng(27)
        rot_lim = np.deg2rad(5.0)
        for _ in range(2000):
            theta = lie.sample_pose(np.zeros(6), 5.0, 10.0, rng)
            assert np.all(np.abs(theta[:3]) <= rot_lim + 1e-15)
            assert np.all(np.abs(theta[3:]) <= 10.0 + 1e-12)

    def test_rejects_negative_ranges(self):
        with pytest.raises(ValueError):
            lie.sample_pose(np.zeros(6), -1.0, 0.0, 0)
