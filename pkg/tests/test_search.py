import csv
import math
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

from sackit.core.common import BudgetError, ConfigurationError, SearchError
from sackit.core.engine import TrainConfig, TrainingHistory, train
from sackit.core.losses import LossForm
from sackit.core.search import (TRIALS_CSV, SearchSpace, enumerate_grid, expand_range, parse_values, pick_best,
                                resolve_budget, run_search, sample_trials)
from sackit.core.selection import make_plan
from sackit.core.toy_model import ToySegmenterSpec, build_toy_segmenter
from sackit.processing.synth import synth_crack_dataset

SMALL_TOY = ToySegmenterSpec(input_size=32, patch_size=8, embed_dim=32, depth=2, num_heads=2,
                             decoder_channels=(16, 8))


def scored_trainer(score):
    """Stand-in trainer whose validation F1 is score(loss, config)."""
    def trainer(model, plan, loss, train_data, val_data, config, out_dir):
        history = TrainingHistory()
        history.record_epoch(score(loss, config), 0.0)
        return history
    return trainer


def small_space(**overrides):
    data = {"loss": "weighted_hybrid", "lambda": [0.5], "lr": [0.001, 0.002], "batch": [2], "trials": 2}
    data.update(overrides)
    return SearchSpace.from_dict(data)


# --- Test Grid ---
class TestGrid(unittest.TestCase):
    def test_ranges(self):
        self.assertEqual(expand_range("0.0001:0.0001:0.0005"), [0.0001, 0.0002, 0.0003, 0.0004, 0.0005])
        self.assertEqual(len(expand_range("0.5:0.05:0.95")), 10)
        self.assertEqual(expand_range("0.0005:0.0002:0.0014")[-1], 0.0013)
        self.assertEqual(parse_values(["0.0001:0.0001:0.0005", 0.001, 0.002])[-2:], [0.001, 0.002])
        with self.assertRaises(ConfigurationError):
            expand_range("0.1:0:0.5")
        with self.assertRaises(ConfigurationError):
            expand_range("a:b")

    def test_shipped_grid_sizes(self):
        sizes = {name: len(enumerate_grid(SearchSpace.load(name)))
                 for name in ("sweep-hybrid", "sweep-dice", "sweep-weighted")}
        self.assertEqual(sizes, {"sweep-hybrid": 147, "sweep-dice": 21, "sweep-weighted": 150})

    def test_lexicographic_order(self):
        grid = enumerate_grid(small_space(lr=[0.1, 0.2], batch=[2, 4], **{"lambda": [0.5, 0.7]}))
        keys = [(t.lam, t.lr, t.batch_size) for t in grid]
        self.assertEqual(keys, sorted(keys))
        self.assertEqual(len(grid), 8)

    def test_empty_axis(self):
        with self.assertRaises(ConfigurationError):
            enumerate_grid(small_space(batch=[]))

    def test_space_budget_fields(self):
        with self.assertRaises(ConfigurationError):
            small_space(fraction=0.5)
        with self.assertRaises(ConfigurationError):
            SearchSpace.from_dict({"loss": "bce", "lambda": [0.5], "lr": [0.1], "batch": [2], "trials": 1})


# --- Test Sampling ---
class TestSampling(unittest.TestCase):
    def test_shipped_trial_counts(self):
        counts = {}
        for name in ("sweep-hybrid", "sweep-dice", "sweep-weighted"):
            space = SearchSpace.load(name)
            counts[name] = len(sample_trials(enumerate_grid(space), space.budget, space.seed))
        self.assertEqual(counts, {"sweep-hybrid": 30, "sweep-dice": 5, "sweep-weighted": 8})

    def test_distinct_and_deterministic(self):
        grid = enumerate_grid(SearchSpace.load("sweep-hybrid"))
        first = sample_trials(grid, 0.2, seed=3)
        self.assertEqual(len(set(first)), len(first))
        self.assertEqual(first, sample_trials(grid, 0.2, seed=3))
        self.assertTrue(all(t in grid for t in first))
        samples = {tuple(sample_trials(grid, 0.2, seed=s)) for s in range(10)}
        self.assertGreater(len(samples), 1)

    def test_full_fraction_is_exhaustive(self):
        grid = enumerate_grid(SearchSpace.load("sweep-dice"))
        self.assertEqual(sample_trials(grid, 1.0, seed=42), grid)

    def test_budget_errors(self):
        with self.assertRaises(BudgetError):
            resolve_budget(200, 147)
        with self.assertRaises(BudgetError):
            resolve_budget(0, 147)
        with self.assertRaises(BudgetError):
            resolve_budget(0.0, 147)
        self.assertEqual(resolve_budget(147, 147), 147)


# --- Test Search ---
class TestSearch(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="sackit_search_")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def _search(self, space, score, **kwargs):
        return run_search(space, lambda: None, (None, None), TrainConfig(), trainer=scored_trainer(score), **kwargs)

    def test_full_fraction_runs_whole_grid(self):
        space = SearchSpace.from_dict({"loss": "weighted_hybrid", "lambda": [0.5, 0.7], "lr": [0.001, 0.002],
                                       "batch": [2, 4], "fraction": 1.0})
        seen = []

        def score(loss, cfg):
            seen.append((loss.lam, cfg.base_lr, cfg.batch_size))
            return loss.lam + cfg.base_lr

        result = self._search(space, score)
        grid = enumerate_grid(space)
        self.assertEqual([r.config for r in result.trials], grid)
        self.assertEqual(sorted(seen), [(t.lam, t.lr, t.batch_size) for t in grid])
        self.assertEqual((result.best.config.lam, result.best.config.lr, result.best.config.batch_size),
                         (0.7, 0.002, 2))

    def test_trials_csv_in_new_directory(self):
        out = os.path.join(self.test_dir, "nested", "search")
        self._search(small_space(), lambda loss, cfg: 0.5, out_dir=out)
        self.assertEqual(sorted(os.listdir(out)), sorted(["search.json", TRIALS_CSV]))

    def test_best_trial_wins(self):
        result = self._search(small_space(), lambda loss, cfg: 0.8 if cfg.base_lr == 0.002 else 0.6)
        self.assertEqual(result.best.config.lr, 0.002)
        self.assertEqual(result.best.val_f1, 0.8)

    def test_trial_overrides(self):
        seen = []

        def score(loss, cfg):
            seen.append((loss.lam, cfg.base_lr, cfg.batch_size, cfg.epochs))
            return 0.5

        self._search(small_space(epochs=3), score)
        self.assertEqual(sorted(seen), [(0.5, 0.001, 2, 3), (0.5, 0.002, 2, 3)])

    def test_ties_keep_earliest(self):
        result = self._search(small_space(), lambda loss, cfg: 0.7)
        self.assertEqual(result.best.config.lr, 0.001)

    def test_failed_trials_skipped(self):
        def score(loss, cfg):
            if cfg.base_lr == 0.002:
                raise RuntimeError("diverged")
            return 0.4

        result = self._search(small_space(), score, out_dir=self.test_dir)
        self.assertEqual(result.best.config.lr, 0.001)
        self.assertEqual([r.failed for r in result.trials], [False, True])
        with open(os.path.join(self.test_dir, TRIALS_CSV), newline="") as f:
            rows = list(csv.DictReader(f))
        self.assertEqual([r["status"] for r in rows], ["ok", "failed"])
        self.assertEqual(rows[1]["error"], "diverged")
        self.assertTrue(os.path.exists(os.path.join(self.test_dir, "search.json")))

    def test_all_failed(self):
        def score(loss, cfg):
            raise RuntimeError("boom")

        with self.assertRaises(SearchError):
            self._search(small_space(), score)
        with self.assertRaises(SearchError):
            pick_best([])

    def test_monotone_transform_invariance(self):
        space = SearchSpace.from_dict({"loss": "weighted_hybrid", "lambda": "0.5:0.05:0.95",
                                       "lr": "0.0005:0.0002:0.0014", "batch": [2, 4, 8], "trials": 12, "seed": 1})

        def score(loss, cfg):
            return (loss.lam * 0.3 + cfg.base_lr * 100 + cfg.batch_size * 0.01) % 0.97

        plain = self._search(space, score)
        warped = self._search(space, lambda loss, cfg: math.exp(score(loss, cfg)) * 3 - 1)
        self.assertEqual(plain.best.config, warped.best.config)

    def test_parallel_matches_serial(self):
        space = SearchSpace.load("sweep-dice")

        def score(loss, cfg):
            return cfg.base_lr * cfg.batch_size

        serial = self._search(space, score)
        parallel = self._search(space, score, max_workers=3)
        self.assertEqual(serial.best.config, parallel.best.config)
        self.assertEqual([r.config for r in serial.trials], [r.config for r in parallel.trials])


# --- Test Search With Real Trials ---
class TestSearchAgainstExhaustive(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="sackit_exhaustive_")
        self.train_set = synth_crack_dataset(6, 32, 0, self.test_dir, split="train")
        self.val_set = synth_crack_dataset(4, 32, 1, self.test_dir, split="val")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_dice_two_lrs(self):
        space = SearchSpace.from_dict({"loss": "dice", "lr": [0.0005, 0.01], "batch": [2], "trials": 2, "epochs": 1})
        template = TrainConfig(seed=0)
        factory = lambda: build_toy_segmenter(SMALL_TOY, seed=1)
        result = run_search(space, factory, (self.train_set, self.val_set), template)

        scores = []
        for lr in (0.0005, 0.01):
            config = replace(template, base_lr=lr, batch_size=2, epochs=1)
            history = train(factory(), make_plan("norm_only"), LossForm("dice"), self.train_set, self.val_set, config)
            scores.append((history.best_val_f1, lr))
        best_lr = scores[0][1] if scores[0][0] >= scores[1][0] else scores[1][1]
        self.assertEqual(result.best.config.lr, best_lr)


if __name__ == '__main__':
    unittest.main()
