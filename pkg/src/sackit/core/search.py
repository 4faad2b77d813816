"""
Random search over hybrid-loss hyperparameters: grid enumeration, seeded sampling
of a fraction (or fixed count) of the grid, short trials, argmax by validation F1.
"""

import os
import csv
import math
import logging
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .common import (BudgetError, ConfigurationError, SacKitError, SearchError,
                     atomic_write, data_file, load_json, write_json)
from .engine import TrainConfig, TrainingHistory, train
from .losses import LOSS_KINDS, LossForm
from .selection import TuningPlan, make_plan

logger = logging.getLogger(__name__)

TRIALS_CSV = "trials.csv"

# --- Types ---

@dataclass(frozen=True)
class TrialConfig:
    loss_kind: str
    lam: Optional[float]
    lr: float
    batch_size: int

    def loss_form(self, reduction: str = "mean", smooth: float = 1e-6) -> LossForm:
        return LossForm(self.loss_kind, self.lam, reduction, smooth)

    def label(self) -> str:
        lam = "-" if self.lam is None else f"{self.lam:g}"
        return f"{self.loss_kind}(lambda={lam}), lr={self.lr:g}, batch={self.batch_size}"

    def to_dict(self) -> Dict[str, Any]:
        return {"loss": self.loss_kind, "lambda": self.lam, "lr": self.lr, "batch": self.batch_size}


@dataclass
class SearchSpace:
    loss_kind: str
    lambda_values: List[Optional[float]]
    lr_values: List[float]
    batch_values: List[int]
    trial_epochs: int = 4
    fraction: Optional[float] = None
    trials: Optional[int] = None
    seed: int = 0
    reduction: str = "mean"
    smooth: float = 1e-6
    job: Optional[Dict[str, Any]] = None  # base training config for the CLI
    base_dir: str = ""

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"Unknown loss kind '{self.loss_kind}'")
        if (self.fraction is None) == (self.trials is None):
            raise ConfigurationError("Search space needs exactly one of 'fraction' or 'trials'")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ConfigurationError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.trials is not None and self.trials < 1:
            raise ConfigurationError(f"trials must be positive, got {self.trials}")
        if self.trial_epochs < 1:
            raise ConfigurationError(f"epochs per trial must be positive, got {self.trial_epochs}")

    @property
    def budget(self) -> Union[float, int]:
        return self.fraction if self.fraction is not None else self.trials

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = "") -> "SearchSpace":
        loss = data.get("loss", "weighted_hybrid")
        if isinstance(loss, dict):
            kind, reduction, smooth = loss.get("kind"), loss.get("reduction", "mean"), loss.get("smooth", 1e-6)
        else:
            kind, reduction, smooth = loss, "mean", 1e-6
        has_lambda = kind in ("convex_hybrid", "weighted_hybrid")
        lambdas = parse_values(data.get("lambda")) if has_lambda else [None]
        if not has_lambda and data.get("lambda") not in (None, [], ["-"]):
            raise ConfigurationError(f"Loss '{kind}' takes no lambda values")
        fraction = data.get("fraction")
        trials = data.get("trials")
        return cls(
            loss_kind=kind,
            lambda_values=lambdas,
            lr_values=parse_values(data.get("lr")),
            batch_values=[int(b) for b in parse_values(data.get("batch"))],
            trial_epochs=int(data.get("epochs", 4)),
            fraction=float(fraction) if fraction is not None else None,
            trials=int(trials) if trials is not None else None,
            seed=int(data.get("seed", 0)),
            reduction=reduction,
            smooth=smooth,
            job=data.get("train"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str) -> "SearchSpace":
        """Load a search file; `sweep-hybrid`, `sweep-dice` and `sweep-weighted` resolve to the shipped spaces."""
        if not os.path.exists(path):
            shipped = data_file(path.replace("-", "_") + ".json")
            if os.path.exists(shipped):
                path = shipped
        return cls.from_dict(load_json(path), os.path.dirname(os.path.abspath(path)))


@dataclass
class TrialResult:
    config: TrialConfig
    val_f1: Optional[float]
    history: Optional[TrainingHistory] = None
    error: Optional[str] = None
    output_dir: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.val_f1 is None


@dataclass
class SearchResult:
    best: TrialResult
    trials: List[TrialResult] = field(default_factory=list)


# --- Grid ---

def expand_range(text: str) -> List[float]:
    """'a:step:b' -> [a, a+step, ...] up to b inclusive; an off-grid b is not reached."""
    try:
        start, step, stop = (float(part) for part in text.split(":"))
    except ValueError:
        raise ConfigurationError(f"Range '{text}' is not of the form start:step:stop")
    if step <= 0 or stop < start:
        raise ConfigurationError(f"Range '{text}' must have a positive step and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def parse_values(raw) -> List[float]:
    """A value list whose items are numbers or 'a:step:b' ranges (a bare range string works too)."""
    if raw is None:
        raise ConfigurationError("Missing value list")
    if isinstance(raw, (int, float, str)):
        raw = [raw]
    values: List[float] = []
    for item in raw:
        if isinstance(item, str):
            values.extend(expand_range(item) if ":" in item else [float(item)])
        else:
            values.append(float(item))
    return values


def enumerate_grid(space: SearchSpace) -> List[TrialConfig]:
    """Cartesian product in lexicographic (lambda, lr, batch) order."""
    for label, values in (("lambda", space.lambda_values), ("lr", space.lr_values), ("batch", space.batch_values)):
        if not values:
            raise ConfigurationError(f"Search space has an empty {label} list")
    return [
        TrialConfig(space.loss_kind, lam, float(lr), int(batch))
        for lam, lr, batch in itertools.product(space.lambda_values, space.lr_values, space.batch_values)
    ]


def resolve_budget(budget: Union[float, int], grid_size: int) -> int:
    if isinstance(budget, bool):
        raise BudgetError(f"Invalid budget {budget!r}")
    if isinstance(budget, float):
        if not 0.0 < budget <= 1.0:
            raise BudgetError(f"Fraction budget must lie in (0, 1], got {budget}")
        # rounding keeps e.g. 0.2 * 150 from landing a hair above 30
        return math.ceil(round(budget * grid_size, 9))
    if budget < 1:
        raise BudgetError(f"Trial count must be positive, got {budget}")
    if budget > grid_size:
        raise BudgetError(f"Asked for {budget} trials but the grid has only {grid_size} points")
    return int(budget)


def sample_trials(grid: Sequence[TrialConfig], budget: Union[float, int], seed: int) -> List[TrialConfig]:
    """Uniform sample without replacement, returned in grid order; deterministic under seed."""
    k = resolve_budget(budget, len(grid))
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(grid), size=k, replace=False))
    return [grid[i] for i in picked]


# --- Search ---

Trainer = Callable[..., TrainingHistory]


def _run_trial(index: int, trial: TrialConfig, space: SearchSpace, model_factory, data, template: TrainConfig,
               plan: TuningPlan, out_dir: Optional[str], trainer: Trainer) -> TrialResult:
    trial_dir = os.path.join(out_dir, f"trial_{index:03d}") if out_dir else None
    config = replace(template, base_lr=trial.lr, batch_size=trial.batch_size,
                     epochs=space.trial_epochs).validate()
    train_data, val_data = data
    try:
        history = trainer(model_factory(), plan, trial.loss_form(space.reduction, space.smooth),
                          train_data, val_data, config, trial_dir)
    except (SacKitError, RuntimeError, ValueError) as e:
        logger.warning(f"Trial {index} ({trial.label()}) failed: {e}")
        return TrialResult(trial, None, error=str(e), output_dir=trial_dir)
    if history.best_val_f1 is None:
        return TrialResult(trial, None, history, "no validation epoch recorded", trial_dir)
    logger.info(f"Trial {index} ({trial.label()}): val F1={history.best_val_f1:.4f}")
    return TrialResult(trial, history.best_val_f1, history, output_dir=trial_dir)


def pick_best(results: Sequence[TrialResult]) -> TrialResult:
    """Argmax of val F1 over finished trials; ties go to the earliest trial."""
    best = None
    for result in results:
        if result.failed:
            continue
        if best is None or result.val_f1 > best.val_f1:
            best = result
    if best is None:
        raise SearchError(f"All {len(results)} trials failed")
    return best


def run_search(space: SearchSpace, model_factory: Callable, data: Tuple[Any, Any], template: TrainConfig,
               plan: Optional[TuningPlan] = None, out_dir: Optional[str] = None,
               trainer: Trainer = train, max_workers: int = 1) -> SearchResult:
    """
    Sample the grid, train a fresh model per trial, and return the best trial.
    The trial list is fixed before any trial runs, so parallel execution does not
    change the outcome.
    """
    plan = plan or make_plan("norm_only")
    grid = enumerate_grid(space)
    trials = sample_trials(grid, space.budget, space.seed)
    logger.info(f"Random search: {len(trials)} of {len(grid)} grid points, {space.trial_epochs} epochs each")

    def job(item):
        index, trial = item
        return _run_trial(index, trial, space, model_factory, data, template, plan, out_dir, trainer)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(job, enumerate(trials)))
    else:
        results = [job(item) for item in enumerate(trials)]

    if out_dir:
        write_trials_csv(os.path.join(out_dir, TRIALS_CSV), results)
    best = pick_best(results)
    if out_dir:
        write_json(os.path.join(out_dir, "search.json"), {
            "grid_size": len(grid),
            "sampled": len(trials),
            "best": {**best.config.to_dict(), "val_f1": best.val_f1},
            "failed": sum(r.failed for r in results),
        })
    logger.info(f"Best trial: {best.config.label()} with val F1={best.val_f1:.4f}")
    return SearchResult(best, results)


def write_trials_csv(path: str, results: Sequence[TrialResult]) -> str:
    def _write(tmp_path):
        with open(tmp_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["trial", "loss", "lambda", "lr", "batch", "val_f1", "status", "error"])
            for i, r in enumerate(results):
                c = r.config
                writer.writerow([
                    i, c.loss_kind, "" if c.lam is None else f"{c.lam:g}", f"{c.lr:g}", c.batch_size,
                    "" if r.failed else f"{r.val_f1:.6f}", "failed" if r.failed else "ok", r.error or "",
                ])

    return atomic_write(path, _write)
