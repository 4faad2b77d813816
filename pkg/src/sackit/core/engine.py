import os
import math
import time
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .common import (AuditError, CheckpointError, ConfigurationError, ParameterError,
                     ScheduleError, TrainingDivergedError, atomic_write, load_json,
                     resolve_path, seed_everything, write_json)
from .losses import LossForm, hybrid_loss
from .metrics import DEFAULT_TAU, MetricAccumulator, binarize
from .primitives import AffineNorm
from .selection import (Selection, TuningPlan, apply_plan, assert_frozen,
                        snapshot_parameters, trainable_parameters)
from .toy_model import ToySegmenter, ToySegmenterSpec, build_toy_segmenter
from ..processing.dataset import (DEFAULT_RESOLUTION, DatasetManifest, ManifestDataset,
                                  load_manifest, make_loader)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sackit-checkpoint-v1"
BEST_CHECKPOINT = "best.pt"
HISTORY_FILE = "history.json"
# best configuration of the weighted sweep
DEFAULT_LOSS = {"kind": "weighted_hybrid", "lambda": 0.65}

# --- Config ---

@dataclass
class TrainConfig:
    epochs: int = 4
    base_lr: float = 5e-4
    batch_size: int = 2
    weight_decay: float = 5e-5
    seed: int = 0
    tau: float = DEFAULT_TAU
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    num_workers: int = 0
    update_bn_stats: bool = True
    resolution: Optional[int] = None  # defaults to the model's input size

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if self.base_lr <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigurationError(
                f"lr ({self.base_lr}) and batch size ({self.batch_size}) must be positive, weight decay non-negative"
            )
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        config = cls(
            epochs=int(data.get("epochs", 4)),
            base_lr=float(data.get("lr", data.get("base_lr", 5e-4))),
            batch_size=int(data.get("batch", data.get("batch_size", 2))),
            weight_decay=float(data.get("weight_decay", 5e-5)),
            seed=int(data.get("seed", 0)),
            tau=float(data.get("tau", DEFAULT_TAU)),
            num_workers=int(data.get("num_workers", 0)),
            update_bn_stats=bool(data.get("update_bn_stats", True)),
            resolution=data.get("resolution"),
        )
        return config.validate()

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainingHistory:
    step_losses: List[float] = field(default_factory=list)
    step_lrs: List[float] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list)
    epoch_val_f1: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_f1: Optional[float] = None
    checkpoint_path: Optional[str] = None

    def record_epoch(self, val_f1: float, seconds: float) -> bool:
        """Returns True when this epoch is the new best (ties keep the earlier epoch)."""
        self.epoch_val_f1.append(val_f1)
        self.epoch_seconds.append(seconds)
        if self.best_val_f1 is None or val_f1 > self.best_val_f1:
            self.best_epoch = len(self.epoch_val_f1) - 1
            self.best_val_f1 = val_f1
            return True
        return False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str) -> str:
        return write_json(path, self.to_dict())


# --- Schedule ---

def cosine_lr(step: int, total: int, base: float) -> float:
    """base * 0.5 * (1 + cos(pi * step / total)), no warmup, floored at 0."""
    if total <= 0:
        raise ScheduleError(f"Schedule horizon must be positive, got {total}")
    if step < 0 or step > total:
        raise ScheduleError(f"Step {step} outside schedule [0, {total}]")
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * step / total)))


# --- Checkpoints ---

def save_checkpoint(path: str, model: nn.Module, plan: TuningPlan, meta: Optional[Dict[str, Any]] = None) -> str:
    """Single-file parameter map with plan metadata, written via temp file + rename."""
    spec = getattr(model, "spec", None)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_spec": spec.to_dict() if isinstance(spec, ToySegmenterSpec) else None,
        "plan": plan.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    def _save(tmp_path):
        with open(tmp_path, "wb") as f:
            torch.save(payload, f)

    atomic_write(path, _save)
    logger.info(f"Saved checkpoint to: {path}")
    return path


def load_checkpoint(path: str) -> Tuple[ToySegmenter, TuningPlan, Dict[str, Any]]:
    """Rebuild the model, re-inject any adapters of its plan, and load the weights."""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("model_spec") is None:
        raise CheckpointError(f"{path} carries no model spec")

    plan = TuningPlan.from_dict(payload["plan"])
    model = build_toy_segmenter(ToySegmenterSpec.from_dict(payload["model_spec"]))
    apply_plan(model, plan)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint {path} does not match its declared model: {e}")
    model.eval()
    return model, plan, payload.get("meta", {})


# --- Inference helpers ---

def _as_dataset(data, resolution: int) -> ManifestDataset:
    if isinstance(data, ManifestDataset):
        return data
    if isinstance(data, DatasetManifest):
        return ManifestDataset(data, resolution)
    if isinstance(data, str):
        return ManifestDataset(load_manifest(data), resolution)
    raise ParameterError(f"Unsupported data source: {type(data).__name__}")


def model_resolution(model: nn.Module) -> int:
    spec = getattr(model, "spec", None)
    return spec.input_size if isinstance(spec, ToySegmenterSpec) else DEFAULT_RESOLUTION


@torch.no_grad()
def predict_batches(model: nn.Module, data, batch_size: int = 8) -> Iterator[Tuple[List[str], np.ndarray, np.ndarray]]:
    """Yield (sample ids, probability maps, ground-truth masks) in dataset order."""
    dataset = _as_dataset(data, model_resolution(model))
    was_training = model.training
    model.eval()
    try:
        for images, masks, indices in make_loader(dataset, batch_size, shuffle=False):
            ids = [dataset.manifest.sample_id(int(i)) for i in indices]
            yield ids, model(images).cpu().numpy(), masks.numpy().astype(np.uint8)
    finally:
        model.train(was_training)


def evaluate_counts(model: nn.Module, data, tau: float = DEFAULT_TAU, macro: bool = False,
                    batch_size: int = 8) -> MetricAccumulator:
    acc = MetricAccumulator(macro=macro)
    for ids, probs, masks in predict_batches(model, data, batch_size):
        for sample_id, prob, mask in zip(ids, probs, masks):
            acc.update(binarize(prob, tau), mask, sample_id)
    if not acc.per_image:
        raise ParameterError("Validation data is empty")
    return acc


def validate(model: nn.Module, data, tau: float = DEFAULT_TAU) -> float:
    """Micro-averaged F1 over the split at threshold tau; the model is left unchanged."""
    return evaluate_counts(model, data, tau).compute().f1


# --- Engine ---

class FineTuningEngine:
    """
    Runs one fine-tuning job: AdamW over the plan's selection only, per-step cosine
    schedule, validation after every epoch, best-F1 checkpoint.
    """

    def __init__(self, model: nn.Module, plan: TuningPlan, loss: LossForm, config: TrainConfig):
        self.model = model
        self.plan = plan
        self.loss = loss
        self.config = config.validate()
        self.selection: Optional[Selection] = None

    def _set_bn_update(self):
        for module in self.model.modules():
            if isinstance(module, AffineNorm):
                module.update_running_stats = self.config.update_bn_stats

    def train(self, train_data, val_data, output_dir: Optional[str] = None) -> TrainingHistory:
        config = self.config
        history = TrainingHistory()
        if config.epochs == 0:
            logger.info("epochs=0: nothing to train")
            return history

        resolution = config.resolution or model_resolution(self.model)
        train_set = _as_dataset(train_data, resolution)
        val_set = _as_dataset(val_data, resolution)
        if len(train_set) == 0 or len(val_set) == 0:
            raise ParameterError("Training and validation manifests must be non-empty")

        generator = seed_everything(config.seed)
        adapter_gen = torch.Generator().manual_seed(config.seed + 1)
        self.selection = apply_plan(self.model, self.plan, generator=adapter_gen)
        if self.selection.is_empty and self.plan.strategy != "none":
            raise ConfigurationError(f"Plan '{self.plan.describe()}' selected no parameters")
        self._set_bn_update()

        params = trainable_parameters(self.model)
        loader = make_loader(train_set, config.batch_size, shuffle=True, generator=generator,
                             num_workers=config.num_workers)
        total_steps = config.epochs * len(loader)
        optimizer, scheduler = None, None
        if params:
            optimizer = torch.optim.AdamW(params, lr=config.base_lr, betas=config.betas,
                                          eps=config.adam_eps, weight_decay=config.weight_decay)
            scheduler = torch.optim.lr_scheduler.LambdaLR(
                optimizer, lambda s: cosine_lr(min(s, total_steps), total_steps, 1.0)
            )

        before = snapshot_parameters(self.model)
        logger.info(f"Training {self.plan.describe()} with {self.loss.describe()}: "
                    f"{config.epochs} epochs x {len(loader)} steps, lr={config.base_lr:g}, batch={config.batch_size}")

        step = 0
        for epoch in range(config.epochs):
            epoch_start = time.perf_counter()
            self.model.train(optimizer is not None)
            for images, masks, indices in loader:
                step_start = time.perf_counter()
                lr = scheduler.get_last_lr()[0] if scheduler else 0.0
                with torch.set_grad_enabled(optimizer is not None):
                    loss = hybrid_loss(self.loss, self.model(images), masks)
                loss_value = float(loss.detach())
                if not math.isfinite(loss_value):
                    ids = [train_set.manifest.sample_id(int(i)) for i in indices]
                    logger.error(f"Loss diverged at step {step}")
                    raise TrainingDivergedError(step, lr, ids, loss_value)
                if optimizer is not None:
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    scheduler.step()
                history.step_losses.append(loss_value)
                history.step_lrs.append(lr)
                history.step_seconds.append(time.perf_counter() - step_start)
                logger.debug(f"step {step}: loss={loss_value:.5f} lr={lr:.3g}")
                step += 1

            val_f1 = validate(self.model, val_set, config.tau)
            report = assert_frozen(self.model, self.selection, before, snapshot_parameters(self.model),
                                   require_change=False)
            if not report.passed:
                raise AuditError(f"Frozen parameters moved during epoch {epoch}: {report.frozen_changed[:5]}")
            is_best = history.record_epoch(val_f1, time.perf_counter() - epoch_start)
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: val F1={val_f1:.4f}"
                        f"{' (best)' if is_best else ''}, {history.epoch_seconds[-1]:.1f}s")
            if is_best and output_dir:
                history.checkpoint_path = save_checkpoint(
                    os.path.join(output_dir, BEST_CHECKPOINT), self.model, self.plan,
                    {"epoch": epoch, "val_f1": val_f1, "loss": self.loss.to_dict(), "config": config.to_dict()},
                )

        if output_dir:
            history.save(os.path.join(output_dir, HISTORY_FILE))
        return history

    def validate(self, data, tau: Optional[float] = None) -> float:
        return validate(self.model, _as_dataset(data, self.config.resolution or model_resolution(self.model)),
                        self.config.tau if tau is None else tau)


def train(model: nn.Module, plan: TuningPlan, loss: LossForm, train_data, val_data,
          config: TrainConfig, output_dir: Optional[str] = None) -> TrainingHistory:
    return FineTuningEngine(model, plan, loss, config).train(train_data, val_data, output_dir)


# --- Job files ---

@dataclass
class TrainingJob:
    """Everything a `train` config file describes."""
    model_spec: ToySegmenterSpec
    plan: TuningPlan
    loss: LossForm
    config: TrainConfig
    train_manifest: str
    val_manifest: str
    output_dir: str = "./runs/train"
    model_seed: int = 0
    init_checkpoint: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = "") -> "TrainingJob":
        manifests = data.get("manifests") or {}
        if "train" not in manifests or "val" not in manifests:
            raise ConfigurationError("Training config needs manifests.train and manifests.val")
        model = data.get("model", {})
        if isinstance(model, str):
            path = resolve_path(model, base_dir)
            model_spec = ToySegmenterSpec.load(path if os.path.exists(path) else model)
        else:
            model_spec = ToySegmenterSpec.from_dict(model)
        init = data.get("init_checkpoint")
        return cls(
            model_spec=model_spec,
            plan=TuningPlan.from_dict(data.get("plan", {"strategy": "norm_only"})),
            loss=LossForm.from_dict(data.get("loss", DEFAULT_LOSS)),
            config=TrainConfig.from_dict(data),
            train_manifest=resolve_path(manifests["train"], base_dir),
            val_manifest=resolve_path(manifests["val"], base_dir),
            output_dir=resolve_path(data.get("output_dir", "./runs/train"), base_dir),
            model_seed=int(data.get("model_seed", data.get("seed", 0))),
            init_checkpoint=resolve_path(init, base_dir) if init else None,
        )

    @classmethod
    def load(cls, path: str) -> "TrainingJob":
        return cls.from_dict(load_json(path), os.path.dirname(os.path.abspath(path)))

    def build_model(self) -> ToySegmenter:
        """Fresh model in the job's starting state (seeded init or a saved checkpoint)."""
        model = build_toy_segmenter(self.model_spec, self.model_seed)
        if self.init_checkpoint:
            pretrained, _, _ = load_checkpoint(self.init_checkpoint)
            try:
                model.load_state_dict(pretrained.state_dict(), strict=False)
            except RuntimeError as e:
                raise CheckpointError(f"Initial checkpoint does not fit the model spec: {e}")
        return model

    def with_trial(self, loss: LossForm, lr: float, batch_size: int, epochs: int,
                   output_dir: Optional[str] = None) -> "TrainingJob":
        config = replace(self.config, base_lr=lr, batch_size=batch_size, epochs=epochs).validate()
        return replace(self, loss=loss, config=config, output_dir=output_dir or self.output_dir)

    def run(self, model: Optional[nn.Module] = None) -> TrainingHistory:
        model = model if model is not None else self.build_model()
        return train(model, self.plan, self.loss, load_manifest(self.train_manifest),
                     load_manifest(self.val_manifest), self.config, self.output_dir)
