import numpy as np
import pytest
from scipy.ndimage import gaussian_filter, map_coordinates

from diffreg import lie, render
from diffreg.errors import BadEnergy, BadFocal, DegenerateRay, ShapeMismatch
from diffreg.phantom import generate_phantom
from diffreg.render import Camera, Volume


def dense_ray_oracle(vol, p0, p1, step_voxel=0.01):
    """Midpoint Riemann sum of the trilinear interpolant along the segment.

    Independent of the traversal code: clips the segment to the box with a
    plain slab test and samples with scipy's trilinear interpolation at
    voxel-center-aligned coordinates.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = p1 - p0
    lo = vol.origin
    hi = vol.origin + vol.extent
    t0, t1 = 0.0, 1.0
    for k in range(3):
        if d[k] == 0:
            if p0[k] < lo[k] or p0[k] >= hi[k]:
                return 0.0
            continue
        ta = (lo[k] - p0[k]) / d[k]
        tb = (hi[k] - p0[k]) / d[k]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if t0 >= t1:
        return 0.0
    seg = np.linalg.norm(d) * (t1 - t0)
    n = int(np.ceil(seg / (step_voxel * float(np.min(vol.spacing)))))
    ts = t0 + (t1 - t0) * (np.arange(n) + 0.5) / n
    pts = p0[None, :] + ts[:, None] * d[None, :]
    coords = (pts - vol.origin[None, :]) / vol.spacing[None, :] - 0.5
    vals = map_coordinates(vol.data, coords.T, order=1, mode="nearest")
    return float(vals.sum() * seg / n)


def smooth_random_volume(rng, dims=(24, 20, 28), spacing=1.5):
    data = gaussian_filter(rng.uniform(0.0, 1.0, dims), 4.0) + 0.4
    origin = -0.5 * np.array(dims) * spacing
    return Volume(spacing, origin, data)


class TestSiddon:
    def test_unit_cube_axis_ray_exact(self):
        vol = Volume(2.0, (-50.0, -50.0, -50.0), np.ones((50, 50, 50)))
        val = render.siddon_raycast(vol, (-200.0, 1.0, 1.0), (200.0, 1.0, 1.0))
        assert abs(val - 100.0) < 1e-9

    def test_miss_returns_zero(self):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.ones((16, 16, 16)))
        assert render.siddon_raycast(vol, (-50.0, 40.0, 0.0), (50.0, 40.0, 0.0)) == 0.0

    def test_degenerate_ray(self):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.ones((16, 16, 16)))
        with pytest.raises(DegenerateRay):
            render.siddon_raycast(vol, (1.0, 2.0, 3.0), (1.0, 2.0, 3.0))

    def test_matches_dense_sampling_oracle(self):
        rng = np.random.default_rng(50)
        vol = smooth_random_volume(rng)
        for _ in range(20):
            p0 = rng.uniform(-60, 60, 3)
            p0[rng.integers(3)] = -80.0
            p1 = rng.uniform(-15, 15, 3)
            p1[np.argmin(np.abs(p0))] = 80.0
            exact = render.siddon_raycast(vol, p0, p1)
            ref = dense_ray_oracle(vol, p0, p1)
            if ref > 1.0:
                assert abs(exact - ref) / ref < 1e-3


class TestRenderDrr:
    def test_zero_volume_renders_zero(self, small_camera):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.zeros((16, 16, 16)))
        assert np.all(render.render_drr(vol, small_camera, np.zeros(6)) == 0.0)

    def test_mirror_symmetry_for_symmetric_phantom(self, small_camera):
        ph = generate_phantom(
            {
                "dims": (32, 32, 32),
                "spacing": 1.0,
                "background": 0.0,
                "shapes": [
                    {"kind": "sphere", "center": (0.0, 0.0, 0.0), "radius": 10.0, "density": 1.0}
                ],
            }
        )
        img = render.render_drr(ph.volume, small_camera, np.zeros(6))
        assert np.abs(img - img[:, ::-1]).max() < 1e-9
        assert np.abs(img - img[::-1, :]).max() < 1e-9

    def test_deterministic(self, phantom64, small_camera):
        theta = np.array([0.02, -0.01, 0.03, 1.0, -2.0, 0.5])
        a = render.render_drr(phantom64.volume, small_camera, theta)
        b = render.render_drr(phantom64.volume, small_camera, theta)
        assert np.array_equal(a, b)

    def test_pixels_match_single_raycasts(self, phantom64):
        cam = Camera(f=600.0, det_w=4, det_h=4, pixel_mm=20.0)
        theta = np.array([0.1, 0.05, -0.04, 2.0, 1.0, -3.0])
        img = render.render_drr(phantom64.volume, cam, theta)
        T = lie.invert(lie.se3_exp(theta))
        src = T.apply(cam.source())
        px = cam.pixel_centers()
        for v in range(4):
            for u in range(4):
                val = render.siddon_raycast(phantom64.volume, src, T.apply(px[v, u]))
                assert np.isclose(img[v, u], val, atol=1e-12)


class TestEnhanceVolume:
    def test_zero_operator_identity(self, phantom64):
        assert render.enhance_volume(phantom64.volume) is phantom64.volume

    def test_identity_operator_doubles(self):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.full((16, 16, 16), 0.3))
        out = render.enhance_volume(vol, lambda v: v)
        assert np.allclose(out.data, 0.6)

    def test_random_table_matches_elementwise_sum(self):
        rng = np.random.default_rng(51)
        base = rng.uniform(0, 1, (16, 16, 16))
        extra = rng.uniform(0, 1, (16, 16, 16))
        vol = Volume(1.0, (-8.0, -8.0, -8.0), base)
        out = render.enhance_volume(vol, lambda v: extra)
        assert np.array_equal(out.data, base + extra)

    def test_shape_mismatch(self):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.zeros((16, 16, 16)))
        with pytest.raises(ShapeMismatch):
            render.enhance_volume(vol, lambda v: np.zeros((8, 8, 8)))


class TestInvertIntensity:
    def test_endpoints(self):
        assert render.invert_intensity(np.array([0.0]), 10.0)[0] == 1.0
        assert abs(render.invert_intensity(np.array([10.0]), 10.0)[0]) < 1e-15

    def test_power_of_two_midpoint(self):
        out = render.invert_intensity(np.array([15.0]), 255.0)
        assert np.isclose(out[0], 0.5, atol=1e-12)

    def test_bad_energy(self):
        with pytest.raises(BadEnergy):
            render.invert_intensity(np.zeros((2, 2)), 0.0)

    def test_monotone_decreasing_onto_unit_interval(self):
        xs = np.linspace(0.0, 31.0, 200)
        out = render.invert_intensity(xs, 31.0)
        assert out[0] == 1.0 and abs(out[-1]) < 1e-12
        assert np.all(np.diff(out) < 0)
        assert np.all((out >= 0) & (out <= 1))


class TestPoseGradient:
    def test_zero_volume_zero_gradient(self, small_camera):
        vol = Volume(1.0, (-8.0, -8.0, -8.0), np.zeros((16, 16, 16)))
        g = render.render_pose_gradient(vol, small_camera, np.zeros(6))
        assert g.shape == (6, 16, 16)
        assert np.all(g == 0.0)

    def test_translation_dipole_is_mass_preserving(self, small_camera):
        ph = generate_phantom(
            {
                "dims": (32, 32, 32),
                "spacing": 1.0,
                "background": 0.0,
                "shapes": [
                    {"kind": "sphere", "center": (0.0, 0.0, 0.0), "radius": 5.0, "density": 1.0}
                ],
            }
        )
        g = render.render_pose_gradient(ph.volume, small_camera, np.zeros(6))
        img = render.render_drr(ph.volume, small_camera, np.zeros(6))
        for axis in (3, 4):  # in-plane translations
            assert abs(g[axis].sum()) < 1e-6 * img.sum() / render.DEFAULT_FD_TRANS

    def test_richardson_step_halving(self, phantom64, small_camera):
        theta = np.array([0.05, -0.02, 0.01, 1.0, 2.0, -1.0])
        g1 = render.render_pose_gradient(phantom64.volume, small_camera, theta)
        g2 = render.render_pose_gradient(
            phantom64.volume, small_camera, theta, steps=render.fd_steps() / 2.0
        )
        for k in range(6):
            num = np.linalg.norm(g1[k] - g2[k])
            den = np.linalg.norm(g2[k])
            if den > 0:
                assert num / den < 0.01

    def test_rejects_bad_steps(self, phantom64, small_camera):
        with pytest.raises(ValueError):
            render.render_pose_gradient(
                phantom64.volume, small_camera, np.zeros(6), steps=np.zeros(6)
            )


class TestConservation:
    def test_total_attenuation_under_inplane_translation(self, phantom64):
        # quasi-parallel geometry: long focal length, small detector pitch
        cam = Camera(f=40000.0, det_w=48, det_h=48, pixel_mm=2.0)
        base = render.render_drr(phantom64.volume, cam, np.zeros(6)).sum()
        for t in ([0, 0, 0, 5.0, 0, 0], [0, 0, 0, 0, -5.0, 0], [0, 0, 0, 3.0, 3.0, 0]):
            moved = render.render_drr(phantom64.volume, cam, np.array(t, dtype=float)).sum()
            assert abs(moved - base) / base < 0.05


class TestValidation:
    def test_camera_validation(self):
        with pytest.raises(BadFocal):
            Camera(f=-1.0)
        with pytest.raises(ValueError):
            Camera(det_w=0)
        with pytest.raises(ValueError):
            Camera(pixel_mm=0.0)

    def test_volume_validation(self):
        with pytest.raises(ValueError):
            Volume(0.0, np.zeros(3), np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            Volume(1.0, np.zeros(3), np.full((4, 4, 4), np.nan))
        with pytest.raises(ShapeMismatch):
            Volume(1.0, np.zeros(3), np.zeros((4, 4)))
