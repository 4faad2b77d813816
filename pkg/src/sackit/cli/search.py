import os
import logging
from dataclasses import replace

from ..core.common import ConfigurationError, resolve_path
from ..core.engine import TrainingJob
from ..core.search import SearchSpace, run_search
from ..processing.dataset import ManifestDataset, load_manifest

logger = logging.getLogger(__name__)

HELP = "Random search over loss weight, learning rate and batch size"


def configure(parser):
    parser.add_argument("--space", required=True,
                        help="Search space JSON or a shipped name (sweep-hybrid, sweep-dice, sweep-weighted)")
    parser.add_argument("--train", help="Base training config JSON (overrides the space's 'train' entry)")
    parser.add_argument("--trials", type=int, help="Run exactly this many trials instead of the space's budget")
    parser.add_argument("--fraction", type=float, help="Sample this fraction of the grid instead")
    parser.add_argument("--seed", type=int, help="Override the sampling seed")
    parser.add_argument("-o", "--output", help="Output directory for trial artifacts")
    parser.add_argument("--workers", type=int, default=1, help="Trials run in parallel")


def load_base_job(space: SearchSpace, override: str = None) -> TrainingJob:
    if override:
        return TrainingJob.load(override)
    if space.job is None:
        raise ConfigurationError("Search needs a base training config: add 'train' to the space or pass --train")
    if isinstance(space.job, str):
        return TrainingJob.load(resolve_path(space.job, space.base_dir))
    return TrainingJob.from_dict(space.job, space.base_dir)


def run(args) -> int:
    space = SearchSpace.load(args.space)
    if args.trials is not None:
        space = replace(space, trials=args.trials, fraction=None)
    elif args.fraction is not None:
        space = replace(space, fraction=args.fraction, trials=None)
    if args.seed is not None:
        space = replace(space, seed=args.seed)

    job = load_base_job(space, args.train)
    resolution = job.config.resolution or job.model_spec.input_size
    data = (ManifestDataset(load_manifest(job.train_manifest), resolution),
            ManifestDataset(load_manifest(job.val_manifest), resolution))
    out_dir = args.output or os.path.join(job.output_dir, "search")

    result = run_search(space, job.build_model, data, job.config, job.plan, out_dir, max_workers=args.workers)
    failed = sum(t.failed for t in result.trials)
    print(f"Ran {len(result.trials)} trials ({failed} failed)")
    print(f"Best: {result.best.config.label()} with validation F1 {result.best.val_f1:.4f}")
    print(f"Trials: {os.path.join(out_dir, 'trials.csv')}")
    return 0
