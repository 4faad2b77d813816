import sys
import argparse
import logging
from typing import List, Optional

from ..core.common import SacKitError
from . import audit, evaluate, search, synth, train

COMMANDS = {
    "audit": audit,
    "train": train,
    "search": search,
    "eval": evaluate.EvalCommand,
    "zeroshot": evaluate.ZeroShotCommand,
    "panels": evaluate.PanelsCommand,
    "synth": synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sac-kit", description="Selective fine-tuning toolkit for crack segmentation")
    parser.add_argument("-v", "--verbose", help="Increase output verbosity", action="store_true")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        sub = subparsers.add_parser(name, help=command.HELP, description=command.HELP)
        command.configure(sub)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the `sac-kit` console script."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Set up logging
    logging_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=logging_level, format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        return COMMANDS[args.command].run(args)
    except SacKitError as e:
        print(f"Error [{e.category}]: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("Interrupted")
        return 130
    except Exception as e:
        print(f"Unexpected error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
