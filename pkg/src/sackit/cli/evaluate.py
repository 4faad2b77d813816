"""Sub-commands that consume a trained checkpoint: eval, zeroshot and panels."""

import logging
from itertools import islice

from ..core.engine import load_checkpoint, model_resolution
from ..core.metrics import DEFAULT_TAU
from ..processing.dataset import iter_samples, load_manifest
from ..processing.reporting import (evaluate_dataset, export_qualitative, render_comparison, report_csv_text,
                                    write_report_csv, write_zero_shot_csv, zero_shot_suite)

logger = logging.getLogger(__name__)


def _common(parser):
    parser.add_argument("--ckpt", required=True, help="Checkpoint written by `sac-kit train`")
    parser.add_argument("--tau", type=float, default=DEFAULT_TAU, help="Binarization threshold (strict >)")


class EvalCommand:
    HELP = "Precision, recall, F1 and IoU of a checkpoint on one dataset"

    @staticmethod
    def configure(parser):
        _common(parser)
        parser.add_argument("--manifest", required=True, help="Dataset manifest JSON")
        parser.add_argument("--macro", action="store_true", help="Average per-image metrics instead of pooling")
        parser.add_argument("--csv", help="Write the report row to this CSV file")
        parser.add_argument("--predictions", help="Also save per-image probability maps (.npy) here")
        parser.add_argument("--compare", action="store_true", help="Print reference rows next to this run")

    @staticmethod
    def run(args) -> int:
        report = evaluate_dataset(args.ckpt, args.manifest, args.tau, args.macro,
                                  predictions_dir=args.predictions)
        if args.csv:
            write_report_csv(args.csv, [report])
        print(report_csv_text([report]), end="")
        if args.compare:
            print(render_comparison([report]))
        return 0


class ZeroShotCommand:
    HELP = "Evaluate a checkpoint on several unseen datasets and aggregate mean and std"

    @staticmethod
    def configure(parser):
        _common(parser)
        parser.add_argument("--manifests", nargs="+", required=True, help="Two or more test/zeroshot manifests")
        parser.add_argument("--macro", action="store_true", help="Average per-image metrics instead of pooling")
        parser.add_argument("--csv", help="Write per-dataset rows plus mean/std rows to this CSV file")

    @staticmethod
    def run(args) -> int:
        suite = zero_shot_suite(args.ckpt, args.manifests, args.tau, args.macro)
        if args.csv:
            write_zero_shot_csv(args.csv, suite)
        print(suite.table())
        return 0


class PanelsCommand:
    HELP = "Export input / ground truth / probability / overlay / binary panels"

    @staticmethod
    def configure(parser):
        _common(parser)
        parser.add_argument("--manifest", required=True, help="Dataset manifest JSON")
        parser.add_argument("--out", required=True, help="Output directory for PNG panels")
        parser.add_argument("--limit", type=int, help="Only the first N samples")

    @staticmethod
    def run(args) -> int:
        model, _, _ = load_checkpoint(args.ckpt)
        samples = list(islice(iter_samples(load_manifest(args.manifest), model_resolution(model)), args.limit))
        paths = export_qualitative(model, samples, args.tau, args.out)
        print(f"Wrote {len(paths)} panes to {args.out}")
        return 0
