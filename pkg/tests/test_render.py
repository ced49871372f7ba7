import numpy as np
import pytest

from layerfields import compositing
from layerfields.field import ClassSet, SnerfVoxelField, VoxelField, softplus_inverse
from layerfields.geometry import Camera, camera_rays, look_at, sample_segments
from layerfields.render import render_layer_view, render_rays, render_view


@pytest.fixture(scope="module")
def camera():
    return Camera(
        width=24,
        height=18,
        fx=26.0,
        fy=26.0,
        cx=12.0,
        cy=9.0,
        cam_to_world=look_at([0, 0, 2.5], [0, 0, 0], up=(0, 1, 0)),
        t_near=0.3,
        t_far=5.0,
    )


@pytest.fixture(scope="module")
def field():
    cs = ClassSet(("bg", "ball"))
    f = VoxelField((20, 20, 20), ((-2, -2, -2), (2, 2, 2)), cs, dtype=np.float64)
    f.raw_density[:] = softplus_inverse(1e-4)
    zs, ys, xs = np.meshgrid(*[np.linspace(-2, 2, 20)] * 3, indexing="ij")
    ball = (xs**2 + ys**2 + zs**2) < 0.6**2
    f.raw_density[..., 1][ball] = softplus_inverse(30.0)
    f.raw_density[..., 0][zs < -1.6] = softplus_inverse(30.0)
    f.raw_color[..., 1, :] = [3.0, -3.0, -3.0]
    f.raw_color[..., 0, :] = [0.0, 0.0, 0.0]
    return f


class TestRenderView:
    def test_matches_manual_composite(self, field, camera):
        out = render_view(field, camera, n_samples=32, chunk=100)
        origins, dirs = camera_rays(camera)
        t, delta = sample_segments(
            camera.t_near, camera.t_far, 32, count=origins.shape[0]
        )
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        sigma, color = field.query(pts)
        ref = compositing.composite_full(sigma, color, delta, t=t)
        assert np.abs(out.color.reshape(-1, 3) - ref.color).max() < 1e-12
        assert np.abs(out.sem_mask.reshape(-1, 2) - ref.sem_mask).max() < 1e-12

    def test_chunking_invariant(self, field, camera):
        a = render_view(field, camera, n_samples=16, chunk=64)
        b = render_view(field, camera, n_samples=16, chunk=10_000)
        assert np.array_equal(a.color, b.color)

    def test_ball_visible_in_center(self, field, camera):
        out = render_view(field, camera, n_samples=64)
        center = out.color[9, 12]
        corner = out.color[0, 0]
        assert center[0] > 0.8 and center[1] < 0.2  # red ball
        assert np.all(np.abs(corner - 0.5) < 0.1)  # gray backdrop

    def test_layer_view_isolates_class(self, field, camera):
        layer = render_layer_view(field, camera, 1, n_samples=64)
        assert layer.sem_mask[9, 12, 0] > 0.9
        assert layer.acc_alpha[0, 0] < 1e-3  # backdrop removed


class TestSnerfRender:
    def test_masks_are_softmax_probabilities(self, camera):
        cs = ClassSet(("bg", "a", "b"))
        f = SnerfVoxelField((8, 8, 8), ((-2, -2, -2), (2, 2, 2)), cs, dtype=np.float64)
        f.raw_density[:] = softplus_inverse(0.5)
        f.raw_logit[..., 1] = 2.0
        out = render_view(f, camera, n_samples=16)
        assert out.sem_mask.shape == (18, 24, 3)
        assert np.abs(out.sem_mask.sum(-1) - 1.0).max() < 1e-9
        assert np.all(out.sem_mask[..., 1] > out.sem_mask[..., 0])

    def test_layer_render_uses_probability_weighting(self, camera):
        cs = ClassSet(("bg", "a"))
        f = SnerfVoxelField((8, 8, 8), ((-2, -2, -2), (2, 2, 2)), cs, dtype=np.float64)
        f.raw_density[:] = softplus_inverse(1.0)
        f.raw_color[:] = 0.0
        # uniform logits -> p = 0.5 everywhere for both classes
        full = render_view(f, camera, n_samples=16)
        layer = render_layer_view(f, camera, 0, n_samples=16)
        assert np.all(layer.acc_alpha < full.acc_alpha)
