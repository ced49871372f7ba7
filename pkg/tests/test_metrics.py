import numpy as np
import pytest

from layerfields.metrics import EvalReport, format_psnr, miou, psnr


class TestPsnr:
    def test_identical_images_exact(self):
        img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
        value = psnr(img, img.copy())
        assert np.isinf(value)
        assert format_psnr(value) == "exact"

    def test_uniform_mse(self):
        gt = np.zeros((10, 10, 3))
        pred = np.full((10, 10, 3), 0.1)
        assert psnr(pred, gt) == pytest.approx(20.0)

    def test_monotone_in_mse(self):
        gt = np.zeros((4, 4, 3))
        a = psnr(np.full((4, 4, 3), 0.05), gt)
        b = psnr(np.full((4, 4, 3), 0.2), gt)
        assert a > b

    def test_channel_permutation_invariance(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(0, 1, (6, 6, 3))
        gt = rng.uniform(0, 1, (6, 6, 3))
        perm = [2, 0, 1]
        assert psnr(pred[..., perm], gt[..., perm]) == pytest.approx(psnr(pred, gt))

    def test_peak_scaling(self):
        gt = np.zeros((4, 4))
        pred = np.full((4, 4), 0.1)
        assert psnr(pred, gt, peak=2.0) == pytest.approx(psnr(pred, gt) + 20 * np.log10(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)))


class TestMiou:
    def test_identical_hard_masks(self):
        rng = np.random.default_rng(2)
        masks = (rng.uniform(0, 1, (5, 5, 3)) > 0.5).astype(float)
        per_class, mean = miou(masks, masks.copy())
        assert all(v == 1.0 for v in per_class if v is not None)
        assert mean == 1.0

    def test_disjoint_equal_area(self):
        pred = np.zeros((4, 4, 1))
        gt = np.zeros((4, 4, 1))
        pred[:2, :, 0] = 1.0
        gt[2:, :, 0] = 1.0
        per_class, mean = miou(pred, gt)
        assert per_class[0] == 0.0 and mean == 0.0

    def test_half_coverage(self):
        pred = np.zeros((4, 4, 1))
        gt = np.zeros((4, 4, 1))
        gt[:, :, 0] = 1.0
        pred[:2, :, 0] = 1.0  # half of gt, no false positives
        per_class, _ = miou(pred, gt)
        assert per_class[0] == pytest.approx(0.5)

    def test_absent_class_excluded_from_mean(self):
        pred = np.zeros((4, 4, 2))
        gt = np.zeros((4, 4, 2))
        pred[:2, :, 0] = 1.0
        gt[:2, :, 0] = 1.0
        per_class, mean = miou(pred, gt)
        assert per_class[0] == 1.0
        assert per_class[1] is None
        assert mean == 1.0

    def test_all_absent_undefined(self):
        per_class, mean = miou(np.zeros((3, 3, 2)), np.zeros((3, 3, 2)))
        assert per_class == [None, None]
        assert mean is None

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(0, 1, (6, 6, 3))
        gt = rng.uniform(0, 1, (6, 6, 3))
        _, a = miou(pred, gt)
        _, b = miou(gt, pred)
        assert a == pytest.approx(b)

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0, 1, (6, 6, 3))
        gt = rng.uniform(0, 1, (6, 6, 3))
        perm = [1, 2, 0]
        base, mean_base = miou(pred, gt)
        permuted, mean_perm = miou(pred[..., perm], gt[..., perm])
        assert permuted == [base[i] for i in perm]
        assert mean_perm == pytest.approx(mean_base)

    def test_threshold_hardening(self):
        pred = np.full((2, 2, 1), 0.49)
        gt = np.full((2, 2, 1), 0.51)
        per_class, _ = miou(pred, gt, threshold=0.5)
        assert per_class[0] == 0.0


class TestEvalReport:
    def test_serialization(self, tmp_path):
        report = EvalReport(
            per_view_psnr=[30.0, float("inf")],
            mean_psnr=30.0,
            per_class_iou=[0.9, None],
            miou=0.9,
            view_count=2,
            split="val",
            class_names=["bg", "fg"],
        )
        path = tmp_path / "report.json"
        report.save(path)
        import json

        loaded = json.loads(path.read_text())
        assert loaded["per_view_psnr"] == [30.0, "exact"]
        assert loaded["per_class_iou"] == [0.9, None]
        assert loaded["background_included"] is True
