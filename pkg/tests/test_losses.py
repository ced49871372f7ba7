import numpy as np
import pytest

from layerfields.losses import (
    LossConfig,
    color_loss,
    group_sparsity_loss,
    instantaneous_recall,
    semantic_loss,
    sparsity_loss,
    total_loss,
)


def cfg(**kw):
    return LossConfig(**kw)


class TestLossConfig:
    def test_defaults_match_training_setup(self):
        c = cfg()
        assert (c.lambda_sem, c.lambda_sparse, c.lambda_group) == (1e-1, 1e-3, 1e-3)
        assert c.gamma_sem == 1.0 and c.gamma_sparse == 0.8

    @pytest.mark.parametrize(
        "kw",
        [
            {"lambda_sem": -0.1},
            {"gamma_sparse": 0.0},
            {"gamma_sparse": 1.5},
            {"ray_reduction": "median"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            cfg(**kw)


class TestColorLoss:
    def test_exact_fit_zero(self):
        pred = np.random.default_rng(0).uniform(0, 1, (5, 3))
        value, grad = color_loss(pred, pred.copy())
        assert value == 0.0
        assert np.all(grad == 0)

    def test_single_ray_value_and_grad(self):
        gt = np.array([[0.5, 0.5, 0.5]])
        pred = np.array([[0.6, 0.5, 0.5]])
        value, grad = color_loss(pred, gt)
        assert value == pytest.approx(0.01)
        assert np.allclose(grad, [[0.2, 0.0, 0.0]])

    def test_sums_over_rays(self):
        gt = np.zeros((3, 3))
        pred = np.full((3, 3), 0.1)
        value, _ = color_loss(pred, gt)
        assert value == pytest.approx(3 * 3 * 0.01)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            color_loss(np.zeros((0, 3)), np.zeros((0, 3)))


class TestRecall:
    def test_perfect_hard_predictions(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        stats = instantaneous_recall(gt.copy(), gt)
        assert np.allclose(stats.recall, 1.0)
        assert np.allclose(1.0 - stats.recall, 0.0)

    def test_absent_class_recall_one(self):
        gt = np.array([[1.0, 0.0], [1.0, 0.0]])
        pred = np.array([[0.4, 0.0], [0.6, 0.0]])
        stats = instantaneous_recall(pred, gt)
        assert stats.p[1] == 0
        assert stats.recall[1] == 1.0

    def test_soft_mass_mean(self):
        gt = np.tile([[0.0, 1.0]], (10, 1))
        pred = np.tile([[0.3, 0.7]], (10, 1))
        stats = instantaneous_recall(pred, gt)
        assert stats.recall[1] == pytest.approx(0.7)
        assert stats.tp[1] == pytest.approx(7.0)

    def test_recall_within_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gt = rng.uniform(0, 1, (16, 3))
            pred = rng.uniform(0, 1, (16, 3))
            stats = instantaneous_recall(pred, gt)
            assert np.all(stats.recall >= 0) and np.all(stats.recall <= 1)


class TestSemanticLoss:
    def test_exact_fit_zero(self):
        gt = np.random.default_rng(2).uniform(0, 1, (6, 3))
        stats = instantaneous_recall(gt, gt)
        value, grad = semantic_loss(gt, gt, stats, cfg())
        assert value == 0.0
        assert np.all(grad == 0)

    def test_single_term_gamma_one(self):
        gt = np.array([[0.25]])
        pred = np.array([[0.5]])
        stats = instantaneous_recall(pred, gt)
        stats.recall[:] = 0.0
        value, grad = semantic_loss(pred, gt, stats, cfg())
        assert value == pytest.approx(0.25)
        assert grad[0, 0] == pytest.approx(1.0)

    def test_recall_one_class_is_free(self):
        gt = np.array([[1.0, 0.0]])
        pred = np.array([[0.2, 0.0]])
        stats = instantaneous_recall(pred, gt)
        stats.recall[:] = [1.0, 0.0]
        v1, _ = semantic_loss(pred, gt, stats, cfg())
        pred2 = np.array([[0.4, 0.0]])  # halve the error of the recall-1 class
        v2, _ = semantic_loss(pred2, gt, stats, cfg())
        assert v1 == v2 == 0.0

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0, 1, (12, 4))
        pred = rng.uniform(0, 1, (12, 4))
        stats = instantaneous_recall(pred, gt)
        v, _ = semantic_loss(pred, gt, stats, cfg())
        perm = rng.permutation(4)
        stats_p = instantaneous_recall(pred[:, perm], gt[:, perm])
        v_p, _ = semantic_loss(pred[:, perm], gt[:, perm], stats_p, cfg())
        assert v_p == pytest.approx(v, rel=1e-12)

    def test_robust_gamma_below_one(self):
        gt = np.array([[0.0]])
        pred = np.array([[0.5]])
        stats = instantaneous_recall(pred, gt)
        stats.recall[:] = 0.0
        value, grad = semantic_loss(pred, gt, stats, cfg(gamma_sem=0.5))
        assert value == pytest.approx(0.5**0.5)
        assert grad[0, 0] == pytest.approx(0.5 * 0.5 ** (-0.5))


class TestSparsityLoss:
    def test_endpoint_values_are_one_per_term(self):
        c = cfg()
        delta = np.array([[1.0]])
        value0, _ = sparsity_loss(np.zeros((1, 1, 1)), delta, c)
        assert value0 == pytest.approx(1.0)  # 0^g + 1^g
        huge = np.full((1, 1, 1), 1e8)
        value1, _ = sparsity_loss(huge, delta, c)
        assert value1 == pytest.approx(1.0)

    def test_interior_maximum(self):
        # alpha = 0.5 per term: 2 * 0.5^0.8
        sigma = np.full((1, 1, 1), np.log(2.0))
        value, _ = sparsity_loss(sigma, np.ones((1, 1)), cfg())
        assert value == pytest.approx(2 * 0.5**0.8, rel=1e-9)
        assert value == pytest.approx(1.1487, abs=1e-4)

    def test_exceeds_endpoints_strictly_inside(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            sigma = rng.uniform(0.05, 5.0, size=(1, 1, 1))
            value, _ = sparsity_loss(sigma, np.ones((1, 1)), cfg())
            assert value > 1.0

    def test_sum_reduction_scales_with_rays(self):
        sigma = np.full((4, 2, 1), np.log(2.0))
        delta = np.ones((4, 2))
        v_mean, _ = sparsity_loss(sigma, delta, cfg(ray_reduction="mean"))
        v_sum, _ = sparsity_loss(sigma, delta, cfg(ray_reduction="sum"))
        assert v_sum == pytest.approx(4 * v_mean)

    def test_gamma_one_rejected(self):
        with pytest.raises(ValueError):
            sparsity_loss(np.ones((1, 1, 1)), np.ones((1, 1)), cfg(gamma_sparse=1.0))


class TestGroupSparsityLoss:
    def test_vacuum_zero(self):
        value, grad = group_sparsity_loss(np.zeros((2, 3, 2)), np.ones((2, 3)), cfg())
        assert value == 0.0
        assert np.all(np.abs(grad) <= cfg().eps_pow ** (cfg().gamma_sparse - 1))

    def test_concentration_favored(self):
        # same total opacity mass: concentrated in one class vs split over two
        delta = np.ones((1, 1))
        conc_sigma = np.array([[[np.log(2.0), 0.0]]])  # alphas (0.5, 0)
        alpha_half = -np.expm1(-np.log(2.0) / 2)  # split alphas
        split_sigma = np.full((1, 1, 2), np.log(2.0) / 2)
        v_conc, _ = group_sparsity_loss(conc_sigma, delta, cfg())
        v_split, _ = group_sparsity_loss(split_sigma, delta, cfg())
        assert v_conc == pytest.approx(0.5**0.8, rel=1e-9)
        assert v_conc == pytest.approx(0.574, abs=1e-3)
        assert v_split == pytest.approx(2 * alpha_half**0.8, rel=1e-9)
        assert v_split > v_conc

    def test_alpha_half_splits_match_stated_values(self):
        # explicit alpha = 0.5 per class: 2 * 0.5^0.8 = 1.149
        sigma = np.full((1, 1, 2), np.log(2.0))
        value, _ = group_sparsity_loss(sigma, np.ones((1, 1)), cfg())
        assert value == pytest.approx(1.149, abs=1e-3)

    def test_single_class_matches_first_half_of_sparsity(self):
        rng = np.random.default_rng(5)
        sigma = rng.uniform(0.1, 3.0, size=(3, 4, 1))
        delta = rng.uniform(0.1, 0.4, size=(3, 4))
        c = cfg()
        v_group, _ = group_sparsity_loss(sigma, delta, c)
        alpha = -np.expm1(-sigma * delta[..., None])
        expected = float((alpha**c.gamma_sparse).sum())
        assert v_group == pytest.approx(expected, rel=1e-12)
        v_mean, _ = group_sparsity_loss(sigma, delta, cfg(ray_reduction="mean"))
        assert v_mean == pytest.approx(expected / 3, rel=1e-12)


class TestTotalLoss:
    def test_all_lambdas_zero_equals_color(self):
        c = cfg(lambda_sem=0, lambda_sparse=0, lambda_group=0)
        total, report = total_loss(3.7, 10.0, 5.0, 2.0, c)
        assert total == 3.7
        assert report.color == 3.7 and report.sem == 10.0

    def test_default_weights_on_unit_terms(self):
        total, _ = total_loss(1.0, 1.0, 1.0, 1.0, cfg())
        assert total == pytest.approx(1.102)

    def test_hard_opacity_closed_form(self):
        # perfect fit, alphas exactly 0 or 1: sparsity contributes 1 per
        # term, group contributes 1 per saturated term
        c = cfg()
        b, n, m = 2, 3, 2
        sigma = np.zeros((b, n, m))
        sigma[:, :, 0] = 1e9  # alpha 1 on class 0, alpha 0 on class 1
        delta = np.ones((b, n))
        sp, _ = sparsity_loss(sigma, delta, c)
        gp, _ = group_sparsity_loss(sigma, delta, c)
        assert sp == pytest.approx(b * n * m)  # n*m terms per ray, each 1
        assert gp == pytest.approx(b * n)  # one saturated term per sample
        total, _ = total_loss(0.0, 0.0, sp, gp, c)
        assert total == pytest.approx(b * (c.lambda_sparse * n * m + c.lambda_group * n))

    def test_report_serialization_fields(self):
        _, report = total_loss(1.0, 2.0, 3.0, 4.0, cfg(), step=7, psnr_batch=30.0)
        line = report.to_json_line()
        import json

        parsed = json.loads(line)
        assert set(parsed) == {
            "step",
            "total",
            "color",
            "sem",
            "sparse",
            "group",
            "psnr_batch",
        }
        assert parsed["step"] == 7


class TestGradients:
    def test_all_loss_gradients_match_fd(self):
        from layerfields.gradcheck import check_losses

        assert check_losses(seed=6, cases=20) < 1e-4

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(7)
        c = cfg()
        for _ in range(20):
            pred = rng.uniform(0, 1, (8, 3))
            gt = rng.uniform(0, 1, (8, 3))
            assert color_loss(pred, gt)[0] >= 0
            stats = instantaneous_recall(pred, gt)
            assert semantic_loss(pred, gt, stats, c)[0] >= 0
            sigma = rng.uniform(0, 3, (8, 4, 3))
            delta = rng.uniform(0.05, 0.4, (8, 4))
            assert sparsity_loss(sigma, delta, c)[0] >= 0
            assert group_sparsity_loss(sigma, delta, c)[0] >= 0
