import numpy as np
import pytest

from layerfields.geometry import (
    Camera,
    Ray,
    generate_ray,
    generate_rays,
    look_at,
    pixel_centers,
    sample_segments,
    stratified_samples,
)


def make_camera(**kw):
    args = dict(
        width=64,
        height=48,
        fx=50.0,
        fy=50.0,
        cx=32.0,
        cy=24.0,
        cam_to_world=np.eye(4),
        t_near=0.5,
        t_far=4.0,
    )
    args.update(kw)
    return Camera(**args)


class TestCamera:
    def test_valid_roundtrip(self):
        cam = make_camera()
        again = Camera.from_dict(cam.to_dict())
        assert np.array_equal(again.cam_to_world, cam.cam_to_world)
        assert again.fx == cam.fx and again.t_far == cam.t_far

    @pytest.mark.parametrize(
        "kw",
        [
            {"fx": 0.0},
            {"fy": -1.0},
            {"cx": 64.0},
            {"cy": -0.1},
            {"t_near": 2.0, "t_far": 1.0},
        ],
    )
    def test_invalid_fields(self, kw):
        with pytest.raises(ValueError):
            make_camera(**kw)

    def test_non_orthonormal_rotation_rejected(self):
        mat = np.eye(4)
        mat[0, 1] = 0.1
        with pytest.raises(ValueError):
            make_camera(cam_to_world=mat)


class TestGenerateRay:
    def test_principal_ray(self):
        cam = make_camera()
        ray = generate_ray(cam, (cam.cx, cam.cy))
        assert np.allclose(ray.direction, [0, 0, -1])
        assert np.allclose(ray.origin, 0)
        assert ray.t_near == cam.t_near and ray.t_far == cam.t_far

    def test_one_focal_length_offset_gives_45_degrees(self):
        cam = make_camera(width=128, cx=40.0, fx=30.0)
        ray = generate_ray(cam, (cam.cx + cam.fx, cam.cy))
        expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
        assert np.allclose(ray.direction, expected)

    def test_translation_moves_origin_only(self):
        pose = np.eye(4)
        pose[:3, 3] = [0, 0, 5]
        cam = make_camera(cam_to_world=pose)
        ray0 = generate_ray(make_camera(), (11.5, 7.25))
        ray1 = generate_ray(cam, (11.5, 7.25))
        assert np.allclose(ray1.direction, ray0.direction)
        assert np.allclose(ray1.origin, [0, 0, 5])

    def test_out_of_bounds_pixel_rejected(self):
        cam = make_camera()
        with pytest.raises(ValueError):
            generate_ray(cam, (65.0, 10.0))
        with pytest.raises(ValueError):
            generate_ray(cam, (10.0, -1.0))

    def test_jitter_shifts_like_pixel_offset(self):
        cam = make_camera()
        jittered = generate_ray(cam, (10.0, 10.0), jitter=(0.25, -0.25))
        direct = generate_ray(cam, (10.25, 9.75))
        assert np.allclose(jittered.direction, direct.direction)

    def test_directions_unit_norm(self):
        cam = make_camera(cam_to_world=look_at([2.0, -1.0, 3.0], [0, 0, 0]))
        px = pixel_centers(cam.width, cam.height).reshape(-1, 2)
        _, dirs = generate_rays(cam, px)
        assert np.abs(np.linalg.norm(dirs, axis=-1) - 1.0).max() < 1e-6


class TestRay:
    def test_direction_must_be_unit(self):
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([0, 0, -2.0]), 0.1, 1.0)

    def test_at(self):
        ray = Ray(np.array([1.0, 0, 0]), np.array([0, 0, -1.0]), 0.1, 9.0)
        assert np.allclose(ray.at(np.array([2.0]))[0], [1, 0, -2])


class TestSampling:
    def test_single_midpoint(self):
        t, delta = sample_segments(0.0, 1.0, 1)
        assert t[0] == pytest.approx(0.5)
        assert delta[0] == pytest.approx(0.5)  # last delta closes against t_far

    def test_four_bin_midpoints(self):
        t, delta = sample_segments(0.0, 1.0, 4)
        assert np.allclose(t, [0.125, 0.375, 0.625, 0.875])
        assert np.allclose(delta, [0.25, 0.25, 0.25, 0.125])

    def test_same_seed_identical(self):
        a, da = sample_segments(0.5, 4.0, 32, rng=np.random.default_rng(9))
        b, db = sample_segments(0.5, 4.0, 32, rng=np.random.default_rng(9))
        assert np.array_equal(a, b) and np.array_equal(da, db)

    def test_sorted_and_in_own_bins(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(1, 40))
            t, delta = sample_segments(1.0, 3.0, n, rng=rng)
            width = 2.0 / n
            edges = 1.0 + width * np.arange(n)
            assert np.all(np.diff(t) > 0)
            assert np.all(t >= edges) and np.all(t <= edges + width)
            assert np.all(delta > 0)
            assert t[-1] + delta[-1] == pytest.approx(3.0)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            sample_segments(0.0, 1.0, 0)

    def test_batched_shapes(self):
        t, delta = sample_segments(0.0, 1.0, 8, count=5)
        assert t.shape == (5, 8) and delta.shape == (5, 8)

    def test_stratified_samples_positions(self):
        ray = Ray(np.array([0.0, 0, 0]), np.array([0, 0, -1.0]), 1.0, 2.0)
        pts = stratified_samples(ray, 2)
        assert pts[0].t == pytest.approx(1.25)
        assert np.allclose(pts[0].x, [0, 0, -1.25])
        assert pts[1].delta == pytest.approx(0.25)
