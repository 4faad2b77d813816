import math
import os
import shutil
import tempfile
import unittest

import torch
import torch.nn as nn

from sackit.core.common import CheckpointError, ConfigurationError, ScheduleError, TrainingDivergedError
from sackit.core.engine import (BEST_CHECKPOINT, HISTORY_FILE, TrainConfig, TrainingJob, cosine_lr,
                                load_checkpoint, save_checkpoint, train, validate)
from sackit.core.losses import LossForm
from sackit.core.selection import apply_plan, assert_frozen, make_plan, snapshot_parameters
from sackit.core.toy_model import ToySegmenterSpec, build_toy_segmenter
from sackit.processing.synth import synth_crack_dataset

SMALL_TOY = ToySegmenterSpec(input_size=32, patch_size=8, embed_dim=32, depth=2, num_heads=2,
                             decoder_channels=(16, 8))
BEST_LOSS = LossForm("weighted_hybrid", 0.65)


class NanModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, images):
        return images[:, 0] * self.w + float("nan")


# --- Test Schedule ---
class TestCosineSchedule(unittest.TestCase):
    def test_anchor_points(self):
        self.assertEqual(cosine_lr(0, 100, 5e-4), 5e-4)
        self.assertAlmostEqual(cosine_lr(50, 100, 5e-4), 2.5e-4, places=12)
        self.assertEqual(cosine_lr(100, 100, 5e-4), 0.0)

    def test_monotone(self):
        lrs = [cosine_lr(t, 40, 1.0) for t in range(41)]
        self.assertTrue(all(a >= b for a, b in zip(lrs, lrs[1:])))

    def test_out_of_range(self):
        with self.assertRaises(ScheduleError):
            cosine_lr(101, 100, 1.0)
        with self.assertRaises(ScheduleError):
            cosine_lr(-1, 100, 1.0)
        with self.assertRaises(ScheduleError):
            cosine_lr(0, 0, 1.0)


# --- Test Config ---
class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.epochs, config.base_lr, config.batch_size, config.weight_decay),
                         (4, 5e-4, 2, 5e-5))

    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig(base_lr=0.0).validate()
        with self.assertRaises(ConfigurationError):
            TrainConfig(batch_size=0).validate()
        with self.assertRaises(ConfigurationError):
            TrainConfig(epochs=-1).validate()
        with self.assertRaises(ConfigurationError):
            TrainConfig(tau=1.0).validate()

    def test_from_dict_keys(self):
        config = TrainConfig.from_dict({"epochs": 3, "lr": 0.001, "batch": 4})
        self.assertEqual((config.epochs, config.base_lr, config.batch_size), (3, 0.001, 4))


# --- Test Engine ---
class TestFineTuning(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.data_dir = tempfile.mkdtemp(prefix="sackit_engine_")
        cls.train_set = synth_crack_dataset(12, 32, 3, cls.data_dir, split="train")
        cls.val_set = synth_crack_dataset(6, 32, 4, cls.data_dir, split="val")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.data_dir, ignore_errors=True)

    def _run(self, plan, epochs=2, seed=0, output_dir=None):
        model = build_toy_segmenter(SMALL_TOY, seed=1)
        config = TrainConfig(epochs=epochs, batch_size=2, seed=seed)
        history = train(model, plan, BEST_LOSS, self.train_set, self.val_set, config, output_dir)
        return model, history

    def test_zero_epochs(self):
        model = build_toy_segmenter(SMALL_TOY)
        before = snapshot_parameters(model)
        history = train(model, make_plan("norm_only"), BEST_LOSS, self.train_set, self.val_set,
                        TrainConfig(epochs=0))
        self.assertEqual(history.epoch_val_f1, [])
        self.assertIsNone(history.best_val_f1)
        after = snapshot_parameters(model)
        self.assertTrue(all(torch.equal(before[k], after[k]) for k in before))

    def test_history_shape(self):
        _, history = self._run(make_plan("norm_only"), epochs=3)
        self.assertEqual(len(history.epoch_val_f1), 3)
        self.assertEqual(len(history.step_losses), 3 * 6)
        self.assertEqual(history.step_lrs[0], 5e-4)
        self.assertTrue(all(a >= b for a, b in zip(history.step_lrs, history.step_lrs[1:])))
        self.assertTrue(all(0.0 <= f <= 1.0 for f in history.epoch_val_f1))
        self.assertEqual(history.best_val_f1, max(history.epoch_val_f1))

    def test_frozen_parameters_untouched(self):
        for plan in (make_plan("norm_only"), make_plan("decoder_only"), make_plan("lora", {"r": 4})):
            with self.subTest(plan=plan.describe()):
                model = build_toy_segmenter(SMALL_TOY, seed=1)
                selection = apply_plan(model, plan, generator=torch.Generator().manual_seed(1))
                before = snapshot_parameters(model)
                train(model, plan, BEST_LOSS, self.train_set, self.val_set, TrainConfig(epochs=2))
                report = assert_frozen(model, selection, before, snapshot_parameters(model))
                self.assertTrue(report.passed, report.summary())

    def test_deterministic_curves(self):
        _, a = self._run(make_plan("norm_only"), seed=5)
        _, b = self._run(make_plan("norm_only"), seed=5)
        self.assertEqual(a.step_losses, b.step_losses)
        self.assertEqual(a.epoch_val_f1, b.epoch_val_f1)

    def test_divergence_reported(self):
        config = TrainConfig(epochs=1, resolution=16)
        with self.assertRaises(TrainingDivergedError) as ctx:
            train(NanModel(), make_plan("full"), BEST_LOSS, self.train_set, self.val_set, config)
        self.assertEqual(ctx.exception.step, 0)
        self.assertEqual(len(ctx.exception.batch_ids), 2)

    def test_checkpoint_written(self):
        out = os.path.join(self.data_dir, "run")
        model, history = self._run(make_plan("lora", {"r": 2}), output_dir=out)
        self.assertEqual(history.checkpoint_path, os.path.join(out, BEST_CHECKPOINT))
        self.assertTrue(os.path.exists(os.path.join(out, HISTORY_FILE)))
        restored, plan, meta = load_checkpoint(history.checkpoint_path)
        self.assertEqual(plan, make_plan("lora", {"r": 2}))
        self.assertEqual(meta["val_f1"], history.best_val_f1)
        self.assertAlmostEqual(validate(restored, self.val_set), history.best_val_f1, places=6)


# --- Test Checkpoints ---
class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="sackit_ckpt_")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_round_trip(self):
        model = build_toy_segmenter(SMALL_TOY, seed=2)
        plan = make_plan("lora", {"r": 4, "last_k": 1})
        apply_plan(model, plan, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.endswith("lora.B"):
                    p.normal_()
        path = save_checkpoint(os.path.join(self.test_dir, "model.pt"), model, plan, {"epoch": 1})
        restored, restored_plan, meta = load_checkpoint(path)
        self.assertEqual(restored_plan, plan)
        self.assertEqual(meta, {"epoch": 1})
        original = model.state_dict()
        for key, value in restored.state_dict().items():
            self.assertTrue(torch.equal(value, original[key]), key)
        model.eval()
        x = torch.rand(2, 3, 32, 32)
        self.assertTrue(torch.equal(model(x), restored(x)))

    def test_save_into_new_directory(self):
        model = build_toy_segmenter(SMALL_TOY, seed=6)
        plan = make_plan("norm_only")
        apply_plan(model, plan)
        out = os.path.join(self.test_dir, "fresh", "run")
        path = save_checkpoint(os.path.join(out, BEST_CHECKPOINT), model, plan)
        self.assertEqual(os.listdir(out), [BEST_CHECKPOINT])
        restored, restored_plan, _ = load_checkpoint(path)
        self.assertEqual(restored_plan, plan)
        original = model.state_dict()
        for key, value in restored.state_dict().items():
            self.assertTrue(torch.equal(value, original[key]), key)

    def test_missing_and_foreign(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.test_dir, "absent.pt"))
        path = os.path.join(self.test_dir, "foreign.pt")
        torch.save({"weights": torch.zeros(1)}, path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)


# --- Test Training Job ---
class TestTrainingJob(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="sackit_job_")
        synth_crack_dataset(6, 32, 0, self.test_dir, split="train")
        synth_crack_dataset(4, 32, 1, self.test_dir, split="val")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_run_from_dict(self):
        job = TrainingJob.from_dict({
            "model": SMALL_TOY.to_dict(),
            "plan": {"strategy": "norm_only"},
            "loss": {"kind": "weighted_hybrid", "lambda": 0.65},
            "epochs": 1,
            "lr": 0.0005,
            "batch": 2,
            "manifests": {"train": "train.json", "val": "val.json"},
            "output_dir": "out",
        }, base_dir=self.test_dir)
        self.assertEqual(job.output_dir, os.path.join(self.test_dir, "out"))
        history = job.run()
        self.assertEqual(len(history.epoch_val_f1), 1)
        self.assertTrue(os.path.exists(os.path.join(self.test_dir, "out", BEST_CHECKPOINT)))

    def test_missing_manifests(self):
        with self.assertRaises(ConfigurationError):
            TrainingJob.from_dict({"manifests": {"train": "train.json"}})

    def test_with_trial(self):
        job = TrainingJob.from_dict({"manifests": {"train": "a.json", "val": "b.json"}})
        trial = job.with_trial(LossForm("convex_hybrid", 0.2), 0.002, 8, 4)
        self.assertEqual((trial.config.base_lr, trial.config.batch_size, trial.config.epochs), (0.002, 8, 4))
        self.assertEqual(trial.loss.lam, 0.2)
        self.assertEqual(job.config.base_lr, 5e-4)


# --- Test Desk-Scale Fine-Tuning ---
class TestNormTuningGain(unittest.TestCase):
    """Norm-only tuning of the toy segmenter on synthetic cracks lifts validation F1."""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="sackit_gain_")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_f1_gain(self):
        train_set = synth_crack_dataset(200, 64, 0, self.test_dir, split="train")
        val_set = synth_crack_dataset(50, 64, 1, self.test_dir, split="val")
        model = build_toy_segmenter(ToySegmenterSpec(), seed=0)
        untrained = validate(model, val_set)
        config = TrainConfig(epochs=10, base_lr=5e-4, batch_size=2, seed=0)
        history = train(model, make_plan("norm_only"), BEST_LOSS, train_set, val_set, config)
        self.assertTrue(math.isfinite(history.best_val_f1))
        self.assertGreaterEqual(history.best_val_f1 - untrained, 0.20,
                                f"untrained {untrained:.3f}, tuned {history.epoch_val_f1}")


if __name__ == '__main__':
    unittest.main()
