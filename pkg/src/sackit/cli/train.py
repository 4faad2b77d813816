import logging
from dataclasses import replace

from ..core.engine import TrainingJob
from ..core.selection import audit_budget, describe_model

logger = logging.getLogger(__name__)

HELP = "Fine-tune the toy segmenter as described by a JSON training config"


def configure(parser):
    parser.add_argument("--config", required=True, help="Training config JSON")
    parser.add_argument("-o", "--output", help="Override the config's output directory")
    parser.add_argument("--epochs", type=int, help="Override the number of epochs")


def run(args) -> int:
    job = TrainingJob.load(args.config)
    if args.output:
        job = replace(job, output_dir=args.output)
    if args.epochs is not None:
        job = replace(job, config=replace(job.config, epochs=args.epochs).validate())

    model = job.build_model()
    budget = audit_budget(describe_model(model), job.plan)
    print(f"Plan {job.plan.describe()}: {budget.trainable_count:,} of {budget.total_count:,} "
          f"parameters trainable ({budget.percent:.3f}%)")

    history = job.run(model)
    if history.best_val_f1 is None:
        print("No epochs run")
        return 0
    print(f"Best validation F1: {history.best_val_f1:.4f} (epoch {history.best_epoch + 1})")
    if history.checkpoint_path:
        print(f"Checkpoint: {history.checkpoint_path}")
    return 0
