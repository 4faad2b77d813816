"""
Evaluation reports for trained checkpoints: per-dataset metric rows, zero-shot
aggregation across datasets, qualitative panels and reference comparisons.
"""

import os
import csv
import io
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from ..core.common import (ContaminationError, OutputError, ParameterError, atomic_write,
                           data_file, load_json)
from ..core.engine import load_checkpoint, model_resolution, predict_batches
from ..core.metrics import (DEFAULT_TAU, Aggregate, ConfusionCounts, MetricAccumulator, MetricValues,
                            aggregate, binarize)
from .dataset import DatasetManifest, ImageSample, ManifestDataset, iter_samples, load_manifest, load_sample

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["dataset", "model", "plan", "precision", "recall", "f1", "iou"]
ZERO_SHOT_SPLITS = ("test", "zeroshot")
PANES = ("input", "groundtruth", "probability", "overlay", "binary")
OVERLAY_ALPHA = 0.5
OVERLAY_HUE = (255, 32, 32)
REFERENCE_FILE = "reference_results.json"

ModelSource = Union[str, nn.Module]
ManifestSource = Union[str, DatasetManifest]

# --- Types ---

@dataclass
class MetricReport:
    dataset: str
    model: str
    plan: str
    values: MetricValues
    counts: ConfusionCounts
    n_images: int
    macro: bool = False

    def row(self) -> Dict[str, str]:
        """CSV row, percentages at 2 decimals."""
        row = {"dataset": self.dataset, "model": self.model, "plan": self.plan}
        for key in ("precision", "recall", "f1", "iou"):
            row[key] = f"{100.0 * getattr(self.values, key):.2f}"
        return row


@dataclass
class ZeroShotReport:
    reports: List[MetricReport]
    summary: Aggregate

    def table(self) -> str:
        lines = [f"{'dataset':<20} {'F1 (%)':>8} {'IoU (%)':>8}"]
        for r in self.reports:
            lines.append(f"{r.dataset:<20} {100 * r.values.f1:>8.2f} {100 * r.values.iou:>8.2f}")
        s = self.summary
        lines.append(f"{'average':<20} {100 * s.f1_mean:.2f}±{100 * s.f1_std:.2f} "
                     f"{100 * s.iou_mean:.2f}±{100 * s.iou_std:.2f}")
        return "\n".join(lines)


@dataclass
class QualitativePanel:
    """Five same-sized panes for one sample; the binary pane is binarize(probability, tau)."""
    sample_id: str
    input: np.ndarray
    groundtruth: np.ndarray
    probability: np.ndarray
    overlay: np.ndarray
    binary: np.ndarray

    def panes(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PANES]

    def row(self) -> np.ndarray:
        rgb = [p if p.ndim == 3 else np.stack([p] * 3, axis=-1) for _, p in self.panes()]
        return np.concatenate(rgb, axis=1)


# --- Helpers ---

def _resolve_model(checkpoint: ModelSource) -> Tuple[nn.Module, str, str]:
    if isinstance(checkpoint, nn.Module):
        return checkpoint, type(checkpoint).__name__, "-"
    model, plan, _ = load_checkpoint(checkpoint)
    label = os.path.splitext(os.path.basename(checkpoint))[0]
    return model, label, plan.describe()


def _resolve_manifest(manifest: ManifestSource) -> DatasetManifest:
    return manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)


def report_csv_text(reports: Sequence[MetricReport]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buffer.getvalue()


def write_report_csv(path: str, reports: Sequence[MetricReport]) -> str:
    text = report_csv_text(reports)

    def _write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            f.write(text)

    atomic_write(path, _write)
    logger.info(f"Wrote {len(reports)} report row(s) to: {path}")
    return path


# --- Evaluation ---

def evaluate_dataset(checkpoint: ModelSource, manifest: ManifestSource, tau: float = DEFAULT_TAU,
                     macro: bool = False, resolution: Optional[int] = None,
                     predictions_dir: Optional[str] = None) -> MetricReport:
    """
    Run inference over every sample of the manifest and pool the confusion counts.
    With predictions_dir set, per-image probability maps are also saved as .npy.
    """
    model, model_label, plan_label = _resolve_model(checkpoint)
    manifest = _resolve_manifest(manifest)
    if len(manifest) == 0:
        raise ParameterError(f"Manifest '{manifest.name}' is empty")
    target = resolution or model_resolution(model)
    if predictions_dir:
        os.makedirs(predictions_dir, exist_ok=True)

    acc = MetricAccumulator(macro=macro)
    for ids, probs, masks in predict_batches(model, ManifestDataset(manifest, target)):
        for sample_id, prob, mask in zip(ids, probs, masks):
            acc.update(binarize(prob, tau), mask, sample_id)
            if predictions_dir:
                np.save(os.path.join(predictions_dir, f"{sample_id}.npy"), prob.astype(np.float32))

    report = MetricReport(manifest.name, model_label, plan_label, acc.compute(), acc.counts,
                          len(acc.per_image), macro)
    logger.info(f"{manifest.name}: F1={100 * report.values.f1:.2f}% IoU={100 * report.values.iou:.2f}% "
                f"over {report.n_images} images")
    return report


def recompute_from_predictions(predictions_dir: str, manifest: ManifestSource, tau: float = DEFAULT_TAU,
                               macro: bool = False) -> MetricValues:
    """Metrics from .npy probability maps saved by evaluate_dataset, without the model."""
    manifest = _resolve_manifest(manifest)
    acc = MetricAccumulator(macro=macro)
    for i in range(len(manifest)):
        sample_id = manifest.sample_id(i)
        path = os.path.join(predictions_dir, f"{sample_id}.npy")
        if not os.path.exists(path):
            raise ParameterError(f"No saved prediction for sample '{sample_id}'")
        prob = np.load(path)
        sample = load_sample(manifest, i, prob.shape[0])
        acc.update(binarize(prob, tau), sample.mask, sample_id)
    return acc.compute()


def zero_shot_suite(checkpoint: ModelSource, manifests: Sequence[ManifestSource], tau: float = DEFAULT_TAU,
                    macro: bool = False) -> ZeroShotReport:
    """Per-dataset reports plus mean and population std of F1 and IoU."""
    if len(manifests) < 2:
        raise ParameterError(f"Zero-shot evaluation needs at least 2 datasets, got {len(manifests)}")
    loaded = [_resolve_manifest(m) for m in manifests]
    for m in loaded:
        if m.split not in ZERO_SHOT_SPLITS:
            raise ContaminationError(
                f"Manifest '{m.name}' has split '{m.split}'; zero-shot datasets must be one of {ZERO_SHOT_SPLITS}"
            )
    model, model_label, plan_label = _resolve_model(checkpoint)
    reports = []
    for m in loaded:
        r = evaluate_dataset(model, m, tau, macro)
        reports.append(MetricReport(r.dataset, model_label, plan_label, r.values, r.counts, r.n_images, macro))
    summary = aggregate([(r.dataset, r.values) for r in reports])
    logger.info(f"Zero-shot average over {len(reports)} datasets: "
                f"F1={100 * summary.f1_mean:.2f}±{100 * summary.f1_std:.2f}")
    return ZeroShotReport(reports, summary)


def write_zero_shot_csv(path: str, suite: ZeroShotReport) -> str:
    """Per-dataset rows followed by `mean` and `std` rows carrying F1 and IoU only."""
    first = suite.reports[0]
    s = suite.summary
    rows = [r.row() for r in suite.reports]
    for label, f1, iou in (("mean", s.f1_mean, s.iou_mean), ("std", s.f1_std, s.iou_std)):
        rows.append({"dataset": label, "model": first.model, "plan": first.plan, "precision": "",
                     "recall": "", "f1": f"{100.0 * f1:.2f}", "iou": f"{100.0 * iou:.2f}"})

    def _write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)

    atomic_write(path, _write)
    return path


# --- Qualitative panels ---

def build_panel(sample: ImageSample, probability: np.ndarray, tau: float = DEFAULT_TAU) -> QualitativePanel:
    if probability.shape != sample.mask.shape:
        raise ParameterError(f"Probability map {probability.shape} does not match mask {sample.mask.shape}")
    image = np.round(np.clip(sample.image, 0.0, 1.0) * 255).astype(np.uint8)
    gray = np.asarray(Image.fromarray(image, "RGB").convert("L"), dtype=np.float32)
    prob = np.clip(probability.astype(np.float32), 0.0, 1.0)

    weight = (OVERLAY_ALPHA * prob)[..., None]
    hue = np.asarray(OVERLAY_HUE, dtype=np.float32)
    overlay = (1.0 - weight) * gray[..., None] + weight * hue

    return QualitativePanel(
        sample_id=sample.id,
        input=image,
        groundtruth=(sample.mask > 0).astype(np.uint8) * 255,
        probability=np.round(prob * 255).astype(np.uint8),
        overlay=np.round(overlay).astype(np.uint8),
        binary=binarize(prob, tau) * 255,
    )


def export_qualitative(checkpoint: ModelSource, samples: Union[ManifestSource, Sequence[ImageSample]],
                       tau: float = DEFAULT_TAU, out_dir: str = "./panels") -> List[str]:
    """
    Write <id>_<pane>.png for the five panes of every sample, plus <id>_row.png
    with the panes side by side. Returns the pane paths (5 per sample).
    """
    model, _, _ = _resolve_model(checkpoint)
    if isinstance(samples, (str, DatasetManifest)):
        samples = list(iter_samples(_resolve_manifest(samples), model_resolution(model)))
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OutputError(f"Cannot create panel directory '{out_dir}': {e}")

    paths = []
    was_training = model.training
    model.eval()
    try:
        for sample in samples:
            panel = build_panel(sample, _predict(model, sample), tau)
            for name, pane in panel.panes():
                path = os.path.join(out_dir, f"{sample.id}_{name}.png")
                _save_png(pane, path)
                paths.append(path)
            _save_png(panel.row(), os.path.join(out_dir, f"{sample.id}_row.png"))
    finally:
        model.train(was_training)
    logger.info(f"Exported {len(paths)} panes for {len(paths) // len(PANES)} samples to: {out_dir}")
    return paths


def _predict(model: nn.Module, sample: ImageSample) -> np.ndarray:
    if hasattr(model, "predict"):
        return model.predict(sample.image)
    with torch.no_grad():
        x = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
        return model(x)[0].cpu().numpy()


def _save_png(array: np.ndarray, path: str):
    try:
        Image.fromarray(array, "RGB" if array.ndim == 3 else "L").save(path)
    except OSError as e:
        raise OutputError(f"Could not write {path}: {e}")


# --- Reference rows ---

def load_reference(path: Optional[str] = None) -> Dict[str, Any]:
    return load_json(path or data_file(REFERENCE_FILE))


def reference_rows(section: str, reference: Optional[Dict[str, Any]] = None) -> List[Dict[str, Any]]:
    reference = reference or load_reference()
    if section not in reference:
        raise ParameterError(f"Unknown reference section '{section}'; have {sorted(k for k in reference if k != 'note')}")
    return reference[section]


def render_comparison(reports: Sequence[MetricReport], section: str = "norm_tuning",
                      reference: Optional[Dict[str, Any]] = None) -> str:
    """Reference rows next to this run's rows. Reference numbers come from full-scale runs."""
    lines = [f"{'source':<10} {'row':<44} {'F1 (%)':>8} {'IoU (%)':>8}"]
    for row in reference_rows(section, reference):
        flag = "  [inconsistent in source]" if row.get("inconsistent_in_source") else ""
        f1 = "-" if row.get("f1") is None else f"{row['f1']:.2f}"
        iou = "-" if row.get("iou") is None else f"{row['iou']:.2f}"
        lines.append(f"{'reference':<10} {row['label'][:44]:<44} {f1:>8} {iou:>8}{flag}")
    for r in reports:
        lines.append(f"{'this run':<10} {(r.dataset + ' / ' + r.plan)[:44]:<44} "
                     f"{100 * r.values.f1:>8.2f} {100 * r.values.iou:>8.2f}")
    return "\n".join(lines)
