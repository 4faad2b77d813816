import os
import logging

from ..processing.synth import synth_crack_dataset

logger = logging.getLogger(__name__)

HELP = "Generate a seed-pinned synthetic crack dataset with manifests"


def configure(parser):
    parser.add_argument("--n", type=int, required=True, help="Number of training pairs")
    parser.add_argument("--seed", type=int, default=0, help="Random seed")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--size", type=int, default=64, help="Image side length in pixels")
    parser.add_argument("--val", type=int, default=0, help="Also write a validation split of this size")
    parser.add_argument("--test", type=int, default=0, help="Also write a test split of this size")


def run(args) -> int:
    splits = [("train", args.n, args.seed)]
    # distinct seeds per split keep the splits disjoint in content
    if args.val:
        splits.append(("val", args.val, args.seed + 1000))
    if args.test:
        splits.append(("test", args.test, args.seed + 2000))
    for split, n, seed in splits:
        manifest = synth_crack_dataset(n, args.size, seed, args.out, split=split)
        print(f"{split}: {len(manifest)} pairs, manifest {os.path.join(args.out, split + '.json')}")
    return 0
