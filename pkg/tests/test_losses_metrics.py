import math
import unittest
import warnings

import numpy as np
import torch

from sackit.core.common import ConfigurationError, DegenerateInputError, ParameterError, ShapeError
from sackit.core.losses import LossForm, bce_loss, dice_loss, hybrid_loss
from sackit.core.metrics import (ConfusionCounts, MetricAccumulator, MetricValues, aggregate, binarize,
                                 compute_metrics, confusion, mean_std)

LN2 = math.log(2.0)


def bce_oracle(p, g):
    total = 0.0
    for pi, gi in zip(p.ravel(), g.ravel()):
        total -= gi * math.log(pi) + (1 - gi) * math.log(1 - pi)
    return total


def dice_oracle(p, g, smooth):
    num = den_p = den_g = 0.0
    for pi, gi in zip(p.ravel(), g.ravel()):
        num += pi * gi
        den_p += pi * pi
        den_g += gi * gi
    return 1.0 - (2.0 * num + smooth) / (den_p + den_g + smooth)


# --- Test Loss Forms ---
class TestLossForm(unittest.TestCase):
    def test_lambda_domains(self):
        LossForm("convex_hybrid", 0.0)
        LossForm("convex_hybrid", 1.0)
        LossForm("weighted_hybrid", 0.65)
        with self.assertRaises(ConfigurationError):
            LossForm("convex_hybrid", 1.5)
        with self.assertRaises(ConfigurationError):
            LossForm("weighted_hybrid", 0.0)
        with self.assertRaises(ConfigurationError):
            LossForm("dice", 0.5)
        with self.assertRaises(ConfigurationError):
            LossForm("focal")

    def test_config_round_trip(self):
        form = LossForm.from_dict({"kind": "weighted_hybrid", "lambda": 0.65, "reduction": "sum", "smooth": 0})
        self.assertEqual(LossForm.from_dict(form.to_dict()), form)


# --- Test Losses ---
class TestLosses(unittest.TestCase):
    def test_bce_examples(self):
        self.assertAlmostEqual(float(bce_loss([0.5], [1.0])), LN2, places=6)
        self.assertAlmostEqual(float(bce_loss([0.5, 0.5], [1.0, 0.0], "sum")), 2 * LN2, places=5)
        self.assertAlmostEqual(float(bce_loss([0.5, 0.5], [1.0, 0.0], "mean")), LN2, places=6)

    def test_bce_perfect_prediction(self):
        g = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        self.assertLess(float(bce_loss(g, g)), 1e-6)

    def test_dice_examples(self):
        g = torch.tensor([1.0, 0.0, 1.0, 1.0])
        self.assertAlmostEqual(float(dice_loss(g, g, smooth=0.0)), 0.0, places=6)
        self.assertAlmostEqual(float(dice_loss([0.5] * 4, [1.0, 0.0, 0.0, 0.0], smooth=0.0)), 0.5, places=6)
        self.assertAlmostEqual(float(dice_loss([0.0] * 4, [1.0, 0.0, 0.0, 0.0], smooth=0.0)), 1.0, places=6)

    def test_dice_degenerate(self):
        with self.assertRaises(DegenerateInputError):
            dice_loss([0.0, 0.0], [0.0, 0.0], smooth=0.0)
        self.assertAlmostEqual(float(dice_loss([0.0, 0.0], [0.0, 0.0])), 0.0, places=6)

    def test_dice_on_grad_tensor_is_silent(self):
        p = torch.tensor([0.2, 0.7, 0.9], requires_grad=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            hybrid_loss(LossForm("weighted_hybrid", 0.65), p, torch.tensor([0.0, 1.0, 1.0])).backward()
        self.assertEqual([str(w.message) for w in caught], [])
        self.assertIsNotNone(p.grad)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            bce_loss([0.5, 0.5], [1.0])
        with self.assertRaises(ShapeError):
            dice_loss([0.5, 0.5], [1.0])

    def test_weighted_hybrid_example(self):
        form = LossForm("weighted_hybrid", 0.65, "mean", 0.0)
        self.assertAlmostEqual(float(hybrid_loss(form, [0.5, 0.5], [1.0, 0.0])), 0.909814, places=5)

    def test_convex_endpoints_exact(self):
        gen = torch.Generator().manual_seed(0)
        p = torch.rand(16, 16, generator=gen)
        g = (torch.rand(16, 16, generator=gen) > 0.7).float()
        self.assertTrue(torch.equal(hybrid_loss(LossForm("convex_hybrid", 0.0), p, g), dice_loss(p, g)))
        self.assertTrue(torch.equal(hybrid_loss(LossForm("convex_hybrid", 1.0), p, g), bce_loss(p, g)))

    def test_convex_linear_in_lambda(self):
        gen = torch.Generator().manual_seed(1)
        p = torch.rand(8, 8, generator=gen, dtype=torch.float64)
        g = (torch.rand(8, 8, generator=gen) > 0.5).double()
        lo = float(hybrid_loss(LossForm("convex_hybrid", 0.0), p, g))
        hi = float(hybrid_loss(LossForm("convex_hybrid", 1.0), p, g))
        for lam in (0.25, 0.5, 0.75):
            mid = float(hybrid_loss(LossForm("convex_hybrid", lam), p, g))
            self.assertAlmostEqual(mid, lam * hi + (1 - lam) * lo, places=10)

    def test_oracle_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = rng.uniform(0.01, 0.99, size=(16, 16))
            g = (rng.random((16, 16)) > 0.8).astype(np.float64)
            pt, gt = torch.from_numpy(p), torch.from_numpy(g)
            self.assertAlmostEqual(float(bce_loss(pt, gt, "sum")), bce_oracle(p, g), delta=1e-6 * 256)
            self.assertAlmostEqual(float(dice_loss(pt, gt, 1e-6)), dice_oracle(p, g, 1e-6), delta=1e-6)

    def test_dice_bounds_and_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = torch.from_numpy((rng.random((8, 8)) > 0.5).astype(np.float64))
            g = torch.from_numpy((rng.random((8, 8)) > 0.5).astype(np.float64))
            value = float(dice_loss(p, g))
            self.assertTrue(0.0 <= value <= 1.0)
            self.assertAlmostEqual(value, float(dice_loss(g, p)), places=12)

    def test_gradients(self):
        gen = torch.Generator().manual_seed(2)
        g = (torch.rand(16, 16, generator=gen) > 0.8).double()
        for fn in (lambda p: bce_loss(p, g), lambda p: dice_loss(p, g),
                   lambda p: hybrid_loss(LossForm("weighted_hybrid", 0.65), p, g)):
            p = (0.05 + 0.9 * torch.rand(16, 16, generator=gen, dtype=torch.float64)).requires_grad_()
            self.assertTrue(torch.autograd.gradcheck(fn, (p,), eps=1e-6, atol=1e-6, rtol=1e-4))


# --- Test Metrics ---
class TestMetrics(unittest.TestCase):
    def test_binarize_strict(self):
        self.assertEqual(binarize([0.4, 0.5, 0.6], 0.5).tolist(), [0, 0, 1])
        for tau in (0.0, 1.0, -0.2):
            with self.assertRaises(ParameterError):
                binarize([0.5], tau)

    def test_confusion_example(self):
        pred = np.zeros((4, 4), dtype=np.uint8)
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred[0, 0] = pred[0, 1] = pred[1, 1] = 1
        gt[0, 1] = gt[1, 1] = gt[2, 2] = 1
        self.assertEqual(confusion(pred, gt), ConfusionCounts(2, 1, 1, 12))
        with self.assertRaises(ShapeError):
            confusion(pred, gt[:3])

    def test_metric_example(self):
        values = compute_metrics(ConfusionCounts(2, 1, 1, 12))
        self.assertAlmostEqual(values.precision, 2 / 3)
        self.assertAlmostEqual(values.recall, 2 / 3)
        self.assertAlmostEqual(values.f1, 2 / 3)
        self.assertAlmostEqual(values.iou, 0.5)

    def test_conventions(self):
        self.assertEqual(compute_metrics(ConfusionCounts(0, 0, 0, 16)), MetricValues(1.0, 1.0, 1.0, 1.0))
        self.assertEqual(compute_metrics(ConfusionCounts(0, 3, 0, 13)), MetricValues(0.0, 0.0, 0.0, 0.0))
        self.assertEqual(compute_metrics(ConfusionCounts(0, 0, 2, 14)).recall, 0.0)
        with self.assertRaises(ParameterError):
            ConfusionCounts(-1, 0, 0, 0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            pred = rng.random((6, 7)) > 0.6
            gt = rng.random((6, 7)) > 0.7
            tp = fp = fn = tn = 0
            for p, g in zip(pred.ravel(), gt.ravel()):
                tp += p and g
                fp += p and not g
                fn += g and not p
                tn += not p and not g
            self.assertEqual(confusion(pred, gt), ConfusionCounts(tp, fp, fn, tn))
            if tp + fp + fn:
                self.assertAlmostEqual(compute_metrics(ConfusionCounts(tp, fp, fn, tn)).iou,
                                       tp / (tp + fp + fn), delta=1e-12)

    def test_f1_iou_identity(self):
        rng = np.random.default_rng(11)
        for tp, fp, fn in rng.integers(0, 1000, size=(10_000, 3)):
            v = compute_metrics(ConfusionCounts(int(tp), int(fp), int(fn), 0))
            self.assertAlmostEqual(v.f1, 2 * v.iou / (1 + v.iou), delta=1e-12)
            self.assertGreaterEqual(v.f1, v.iou)

    def test_micro_versus_macro(self):
        a = np.array([[1, 1], [0, 0]])
        b = np.array([[1, 0], [0, 0]])
        micro, macro = MetricAccumulator(), MetricAccumulator(macro=True)
        for acc in (micro, macro):
            acc.update(a, a, "a")
            acc.update(b, np.zeros_like(b), "b")
        # pooled: tp=2, fp=1
        self.assertAlmostEqual(micro.compute().f1, 0.8)
        self.assertAlmostEqual(macro.compute().f1, 0.5)
        with self.assertRaises(ParameterError):
            MetricAccumulator(macro=True).compute()

    def test_aggregate_reported_row(self):
        def values(f1, iou):
            return MetricValues(0.0, 0.0, f1 / 100, iou / 100)

        rows = [("Road420", values(64.22, 47.3)), ("Facade390", values(61.74, 44.68)),
                ("Concrete3k", values(75.63, 60.82))]
        agg = aggregate(rows)
        self.assertAlmostEqual(100 * agg.f1_mean, 67.20, delta=0.01)
        self.assertAlmostEqual(100 * agg.f1_std, 6.05, delta=0.01)
        self.assertAlmostEqual(100 * agg.iou_mean, 50.93, delta=0.01)
        self.assertAlmostEqual(100 * agg.iou_std, 7.07, delta=0.01)

    def test_mean_std_population(self):
        mean, std = mean_std([0.4, 0.6])
        self.assertAlmostEqual(mean, 0.5)
        self.assertAlmostEqual(std, 0.1)
        with self.assertRaises(ParameterError):
            aggregate([])


if __name__ == '__main__':
    unittest.main()
