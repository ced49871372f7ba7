import numpy as np
import pytest

from layerfields.editing import (
    ClassEdit,
    EditSpec,
    dolly_zoom_path,
    frustum_width_at,
    render_edited,
)
from layerfields.field import ClassSet, VoxelField, softplus_inverse
from layerfields.geometry import Camera, look_at
from layerfields.render import render_view


def rot_z(deg):
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@pytest.fixture(scope="module")
def blob_field():
    """Hand-built field: class-1 blob left of center, class-2 blob right,
    background slab behind both."""
    cs = ClassSet(("bg", "left", "right"), background_index=0)
    f = VoxelField((28, 28, 28), ((-2, -2, -2), (2, 2, 2)), cs, dtype=np.float64)
    f.raw_density[:] = softplus_inverse(1e-4)
    zs, ys, xs = np.meshgrid(
        np.linspace(-2, 2, 28), np.linspace(-2, 2, 28), np.linspace(-2, 2, 28),
        indexing="ij",
    )
    left = ((xs + 0.8) ** 2 + ys**2 + zs**2) < 0.45**2
    right = ((xs - 0.8) ** 2 + ys**2 + zs**2) < 0.45**2
    back = zs < -1.55
    f.raw_density[..., 1][left] = softplus_inverse(25.0)
    f.raw_density[..., 2][right] = softplus_inverse(25.0)
    f.raw_density[..., 0][back] = softplus_inverse(25.0)
    f.raw_color[..., 1, :] = np.array([2.0, -2.0, -2.0])
    f.raw_color[..., 2, :] = np.array([-2.0, -2.0, 2.0])
    f.raw_color[..., 0, :] = np.array([0.5, 0.5, 0.5])
    return f


@pytest.fixture(scope="module")
def camera():
    return Camera(
        width=40,
        height=40,
        fx=44.0,
        fy=44.0,
        cx=20.0,
        cy=20.0,
        cam_to_world=look_at([0.0, 0.0, 1.9], [0, 0, -2.0], up=(0, 1, 0)),
        t_near=0.2,
        t_far=4.2,
    )


class TestRenderEdited:
    def test_identity_edit_bit_identical(self, blob_field, camera):
        plain = render_view(blob_field, camera, n_samples=48)
        edited = render_edited(blob_field, camera, EditSpec({}), n_samples=48)
        assert np.array_equal(edited.color, plain.color)
        assert np.array_equal(edited.sem_mask, plain.sem_mask)
        assert np.array_equal(edited.depth, plain.depth)

    def test_remove_equals_zero_density(self, blob_field, camera):
        edit = EditSpec({1: ClassEdit(remove=True)})
        removed = render_edited(blob_field, camera, edit, n_samples=48)
        import copy

        zeroed = copy.deepcopy(blob_field)
        zeroed.raw_density[..., 1] = -1e9  # softplus underflows to 0
        ref = render_view(zeroed, camera, n_samples=48)
        assert np.abs(removed.color - ref.color).max() < 1e-12
        assert np.abs(removed.sem_mask - ref.sem_mask).max() < 1e-12

    def test_removals_compose(self, blob_field, camera):
        both = render_edited(
            blob_field,
            camera,
            EditSpec({1: ClassEdit(remove=True), 2: ClassEdit(remove=True)}),
            n_samples=48,
        )
        merged = EditSpec({1: ClassEdit(remove=True)}).merged_with(
            EditSpec({2: ClassEdit(remove=True)})
        )
        via_merge = render_edited(blob_field, camera, merged, n_samples=48)
        assert np.array_equal(both.color, via_merge.color)

    def test_translate_out_of_bounds_removes_class(self, blob_field, camera):
        edit = EditSpec({1: ClassEdit(translation=np.array([50.0, 0, 0]))})
        out = render_edited(blob_field, camera, edit, n_samples=48)
        mask_mass = out.sem_mask[..., 1].mean()
        assert mask_mass < 1e-3
        removed = render_edited(
            blob_field, camera, EditSpec({1: ClassEdit(remove=True)}), n_samples=48
        )
        assert np.abs(out.color - removed.color).max() < 1e-9

    def test_recolor_leakage_bounded_by_mask(self, blob_field, camera):
        plain = render_view(blob_field, camera, n_samples=48)
        swap = np.array([[0, 0, 1.0], [0, 1.0, 0], [1.0, 0, 0]])
        edit = EditSpec({1: ClassEdit(color_matrix=swap)})
        out = render_edited(blob_field, camera, edit, n_samples=48)
        change = np.abs(out.color - plain.color).max(axis=-1)
        quiet = plain.sem_mask[..., 1] < 1e-3
        assert quiet.sum() > 100
        assert change[quiet].max() <= 1e-3

    def test_recolor_clamps_to_unit_range(self, blob_field, camera):
        edit = EditSpec(
            {1: ClassEdit(color_matrix=10 * np.eye(3), color_offset=np.array([0.5, 0, 0]))}
        )
        out = render_edited(blob_field, camera, edit, n_samples=48)
        assert out.color.max() <= 1.0 + 1e-9

    def test_transform_then_inverse_is_identity_within_tolerance(
        self, blob_field, camera
    ):
        rot = rot_z(30.0)
        trans = np.array([0.15, -0.1, 0.05])
        inv_rot = rot.T
        inv_trans = -inv_rot @ trans
        composed_rot = inv_rot @ rot
        composed_trans = inv_rot @ trans + inv_trans
        edit = EditSpec(
            {1: ClassEdit(rotation=composed_rot, translation=composed_trans)}
        )
        plain = render_view(blob_field, camera, n_samples=48)
        out = render_edited(blob_field, camera, edit, n_samples=48)
        assert np.abs(out.color - plain.color).max() < 1e-9

    def test_rotation_moves_content(self, blob_field, camera):
        edit = EditSpec({1: ClassEdit(rotation=rot_z(180.0))})
        out = render_edited(blob_field, camera, edit, n_samples=64)
        plain = render_view(blob_field, camera, n_samples=64)
        # left blob rotates onto the right side; its mask centroid flips
        xs = np.arange(40)
        def centroid(mask):
            return (mask.sum(axis=0) * xs).sum() / mask.sum()
        assert centroid(out.sem_mask[..., 1]) > 20 > centroid(plain.sem_mask[..., 1])

    def test_mask_normalization_preserved(self, blob_field, camera):
        edit = EditSpec(
            {2: ClassEdit(rotation=rot_z(25.0), translation=np.array([0.1, 0, 0]))}
        )
        out = render_edited(blob_field, camera, edit, n_samples=48)
        assert np.abs(out.sem_mask.sum(-1) - out.acc_alpha).max() < 1e-6

    def test_unknown_class_rejected(self, blob_field, camera):
        with pytest.raises(ValueError, match="out of range"):
            render_edited(blob_field, camera, EditSpec({7: ClassEdit(remove=True)}))

    def test_edit_spec_from_json_by_name(self, blob_field):
        spec = EditSpec.from_dict(
            {"left": {"remove": True}, "right": {"translation": [1, 0, 0]}},
            blob_field.class_set,
        )
        assert spec.per_class[1].remove
        assert np.allclose(spec.per_class[2].translation, [1, 0, 0])
        with pytest.raises(ValueError, match="unknown class"):
            EditSpec.from_dict({"nope": {}}, blob_field.class_set)


class TestDollyZoom:
    def start_camera(self):
        return Camera(
            width=64,
            height=48,
            fx=70.0,
            fy=70.0,
            cx=32.0,
            cy=24.0,
            cam_to_world=look_at([4.0, 0.0, 0.0], [0, 0, 0], up=(0, 0, 1)),
            t_near=0.1,
            t_far=10.0,
        )

    def test_single_frame_unchanged(self):
        start = self.start_camera()
        path = dolly_zoom_path(start, target_distance=4.0, frames=1)
        assert len(path) == 1
        assert np.array_equal(path[0].cam_to_world, start.cam_to_world)
        assert path[0].fx == start.fx

    def test_halving_distance_halves_focal(self):
        start = self.start_camera()
        path = dolly_zoom_path(start, 4.0, frames=2, travel=2.0)
        assert path[1].fx == pytest.approx(start.fx / 2)
        assert np.linalg.norm(path[1].position) == pytest.approx(2.0)

    def test_frustum_width_constant(self):
        start = self.start_camera()
        frames = 12
        path = dolly_zoom_path(start, 4.0, frames=frames, travel=3.0)
        target = np.zeros(3)
        widths = []
        for cam in path:
            d = np.linalg.norm(target - cam.position)
            widths.append(frustum_width_at(cam, d))
        widths = np.array(widths)
        assert np.abs(widths - widths[0]).max() <= 1e-9

    def test_reaching_target_rejected(self):
        start = self.start_camera()
        with pytest.raises(ValueError, match="pass"):
            dolly_zoom_path(start, 4.0, frames=3, travel=4.0)
        with pytest.raises(ValueError):
            dolly_zoom_path(start, -1.0, frames=3)

    def test_camera_advances_along_view_axis(self):
        start = self.start_camera()
        path = dolly_zoom_path(start, 4.0, frames=3, travel=1.0)
        forward = -start.rotation[:, 2]
        moved = path[-1].position - start.position
        assert np.allclose(np.cross(moved, forward), 0, atol=1e-12)
        assert np.dot(moved, forward) == pytest.approx(1.0)


class TestClassEdit:
    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError, match="orthonormal"):
            ClassEdit(rotation=np.eye(3) * 2.0)

    def test_invalid_shapes(self):
        with pytest.raises(ValueError):
            ClassEdit(color_matrix=np.eye(2))
        with pytest.raises(ValueError):
            ClassEdit(translation=np.zeros(2))
