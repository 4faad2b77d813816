import os
import json
import logging
import tempfile
from typing import Any, Dict, Optional

import numpy as np
import torch

logger = logging.getLogger(__name__)

# --- Errors ---

class SacKitError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    category = "error"
    exit_code = 1


class ManifestError(SacKitError):
    """Manifest could not be loaded, paired or cross-checked."""
    category = "manifest"
    exit_code = 2

    def __init__(self, message: str, kind: str = "load"):
        super().__init__(message)
        self.kind = kind  # load | pairing | consistency


class ShapeError(SacKitError):
    category = "shape"
    exit_code = 3


class ParameterError(SacKitError):
    category = "parameter"
    exit_code = 4


class DegenerateInputError(SacKitError):
    category = "degenerate-input"
    exit_code = 5


class ConfigurationError(SacKitError):
    category = "configuration"
    exit_code = 6


class SelectionError(SacKitError):
    category = "selection"
    exit_code = 7


class AuditError(SacKitError):
    category = "audit"
    exit_code = 8


class ScheduleError(SacKitError):
    category = "schedule"
    exit_code = 9


class TrainingDivergedError(SacKitError):
    """Raised when the loss stops being finite."""
    category = "training"
    exit_code = 10

    def __init__(self, step: int, lr: float, batch_ids, loss_value: float):
        super().__init__(
            f"Non-finite loss {loss_value} at step {step} (lr={lr:.3g}, batch={list(batch_ids)})"
        )
        self.step = step
        self.lr = lr
        self.batch_ids = list(batch_ids)


class BudgetError(SacKitError):
    category = "budget"
    exit_code = 11


class SearchError(SacKitError):
    category = "search"
    exit_code = 12


class ContaminationError(SacKitError):
    category = "contamination"
    exit_code = 13


class CheckpointError(SacKitError):
    category = "checkpoint"
    exit_code = 14


class OutputError(SacKitError):
    category = "output"
    exit_code = 15


# --- File Utils ---

PACKAGE_DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data")


def data_file(name: str) -> str:
    """Absolute path of a file shipped in sackit/data."""
    return os.path.join(PACKAGE_DATA_DIR, name)


def load_json(path: str, error_cls=ConfigurationError) -> Dict[str, Any]:
    """Read a JSON document, turning I/O and syntax problems into toolkit errors."""
    if not os.path.exists(path):
        raise error_cls(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise error_cls(f"Could not parse {path}: {e}")


def resolve_path(path: str, base_dir: Optional[str]) -> str:
    if os.path.isabs(path) or not base_dir:
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def atomic_write(path: str, writer) -> str:
    """
    Write a file through a temporary sibling and rename it into place.
    `writer` receives the temporary path.
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise OutputError(f"Cannot create directory '{directory}': {e}")

    fd, tmp_path = tempfile.mkstemp(prefix="tmp-", suffix=os.path.splitext(path)[1] or ".tmp", dir=directory)
    os.close(fd)
    try:
        writer(tmp_path)
        os.replace(tmp_path, path)
    except OSError as e:
        raise OutputError(f"Failed to write '{path}': {e}")
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
    return path


def write_json(path: str, payload: Dict[str, Any]) -> str:
    def _dump(tmp_path):
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    return atomic_write(path, _dump)


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch and numpy; returns a dedicated torch generator for data shuffling."""
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
