import os
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from ..core.common import ManifestError, ParameterError, ShapeError, resolve_path, write_json

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "zeroshot")
DEFAULT_RESOLUTION = 256
MASK_THRESHOLD = 127

# --- Types ---

@dataclass
class ImageSample:
    """A prepared image (H x W x 3 float32 in [0, 1]) and its binary mask (H x W uint8)."""
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"Sample '{self.id}': image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeError(f"Sample '{self.id}': image {self.image.shape[:2]} and mask {self.mask.shape} differ")


@dataclass
class DatasetManifest:
    name: str
    split: str
    entries: List[Tuple[str, str]] = field(default_factory=list)
    declared_size: Optional[int] = None
    base_dir: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def resolved(self, index: int) -> Tuple[str, str]:
        image, mask = self.entries[index]
        return resolve_path(image, self.base_dir), resolve_path(mask, self.base_dir)

    def sample_id(self, index: int) -> str:
        return os.path.splitext(os.path.basename(self.entries[index][0]))[0]

    def to_dict(self) -> Dict:
        payload = {
            "name": self.name,
            "split": self.split,
            "entries": [{"image": i, "mask": m} for i, m in self.entries],
        }
        if self.declared_size is not None:
            payload["declared_size"] = self.declared_size
        return payload

    def save(self, path: str) -> str:
        return write_json(path, self.to_dict())


# --- Manifests ---

def load_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    """
    Load a JSON manifest {name, split, entries: [{image, mask}], declared_size?}.
    Entry paths are relative to the manifest's directory.
    """
    if not os.path.exists(path):
        raise ManifestError(f"Manifest not found: {path}", kind="load")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifest {path} is not valid JSON: {e}", kind="load")
    if not isinstance(data, dict):
        raise ManifestError(f"Manifest {path} must be a JSON object, got {type(data).__name__}", kind="load")

    name = data.get("name") or os.path.splitext(os.path.basename(path))[0]
    split = data.get("split")
    if split not in SPLITS:
        raise ManifestError(f"Manifest {path}: split must be one of {SPLITS}, got {split!r}", kind="load")

    base_dir = os.path.dirname(os.path.abspath(path))
    entries = []
    raw_entries = data.get("entries", [])
    if not isinstance(raw_entries, list):
        raise ManifestError(f"Manifest {path}: entries must be a list", kind="load")
    for i, entry in enumerate(raw_entries):
        if not isinstance(entry, dict):
            raise ManifestError(f"Manifest {path}: entry #{i} must be an object with image and mask", kind="load")
        image, mask = entry.get("image"), entry.get("mask")
        if not image or not mask:
            orphan = image or mask or f"entry #{i}"
            raise ManifestError(f"Manifest {path}: '{orphan}' has no paired {'mask' if image else 'image'}",
                                kind="pairing")
        if check_files:
            for p in (image, mask):
                full = resolve_path(p, base_dir)
                if not os.path.isfile(full):
                    raise ManifestError(f"Manifest {path}: file not readable: {full}", kind="load")
        entries.append((image, mask))

    declared = data.get("declared_size")
    if declared is not None and declared != len(entries):
        raise ManifestError(
            f"Manifest {path} declares {declared} entries but lists {len(entries)}", kind="consistency"
        )
    logger.info(f"Loaded manifest '{name}' ({split}): {len(entries)} pairs")
    return DatasetManifest(name, split, entries, declared, base_dir)


# --- Sample preparation ---

def _to_float_image(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.dtype == np.uint8 or (raw.size and raw.max() > 1.0):
        return raw.astype(np.float32) / 255.0
    return raw.astype(np.float32)


def _resize_channel(channel: np.ndarray, target: int, resample) -> np.ndarray:
    img = Image.fromarray(channel)
    # PIL returns a plain copy when the size already matches
    return np.asarray(img.resize((target, target), resample))


def _binary_mask(raw_mask: np.ndarray) -> np.ndarray:
    raw_mask = np.asarray(raw_mask)
    if np.isin(raw_mask, (0, 1)).all():
        return raw_mask.astype(np.uint8)
    return (raw_mask > MASK_THRESHOLD).astype(np.uint8)


def prepare_sample(raw_image: np.ndarray, raw_mask: np.ndarray, target: int = DEFAULT_RESOLUTION,
                   sample_id: str = "") -> ImageSample:
    """
    Resize to target x target: bilinear for the image (rescaled to [0, 1]),
    nearest-neighbour for the mask, which is then binarized at intensity > 127.
    Masks that are already {0, 1} are kept as they are.
    """
    if not isinstance(target, (int, np.integer)) or target < 1:
        raise ParameterError(f"Target resolution must be a positive integer, got {target!r}")
    raw_image = np.asarray(raw_image)
    raw_mask = np.asarray(raw_mask)
    if raw_mask.ndim == 3:
        raw_mask = raw_mask[..., 0]
    if raw_image.ndim == 2:
        raw_image = np.stack([raw_image] * 3, axis=-1)
    if raw_image.ndim != 3 or raw_image.shape[2] != 3:
        raise ShapeError(f"Image must be H x W x 3, got {raw_image.shape}")
    if raw_image.shape[:2] != raw_mask.shape:
        raise ShapeError(f"Image {raw_image.shape[:2]} and mask {raw_mask.shape} differ in spatial size")
    if min(raw_mask.shape) < 1:
        raise ShapeError("Empty image")

    image = _to_float_image(raw_image)
    channels = [_resize_channel(np.ascontiguousarray(image[..., c]), target, Image.BILINEAR) for c in range(3)]
    image = np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)

    mask = _binary_mask(raw_mask)
    mask = _resize_channel(mask, target, Image.NEAREST).astype(np.uint8)
    return ImageSample(sample_id, image, mask)


def read_pair(image_path: str, mask_path: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        image = np.asarray(Image.open(image_path).convert("RGB"))
        mask = np.asarray(Image.open(mask_path).convert("L"))
    except (OSError, ValueError) as e:
        raise ManifestError(f"Could not read pair ({image_path}, {mask_path}): {e}", kind="load")
    return image, mask


def load_sample(manifest: DatasetManifest, index: int, target: int = DEFAULT_RESOLUTION) -> ImageSample:
    image_path, mask_path = manifest.resolved(index)
    image, mask = read_pair(image_path, mask_path)
    return prepare_sample(image, mask, target, sample_id=manifest.sample_id(index))


def iter_samples(manifest: DatasetManifest, target: int = DEFAULT_RESOLUTION) -> Iterator[ImageSample]:
    """Every entry of the manifest, exactly once, in listing order."""
    for i in range(len(manifest)):
        yield load_sample(manifest, i, target)


# --- torch plumbing ---

class ManifestDataset(Dataset):
    """Prepared samples as (image CHW float tensor, mask HW float tensor, index)."""

    def __init__(self, manifest: DatasetManifest, target: int = DEFAULT_RESOLUTION, cache: bool = True):
        self.manifest = manifest
        self.target = target
        self._cache: Optional[Dict[int, ImageSample]] = {} if cache else None

    def __len__(self):
        return len(self.manifest)

    def sample(self, index: int) -> ImageSample:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        s = load_sample(self.manifest, index, self.target)
        if self._cache is not None:
            self._cache[index] = s
        return s

    def __getitem__(self, index: int):
        s = self.sample(index)
        image = torch.from_numpy(s.image).permute(2, 0, 1).contiguous()
        mask = torch.from_numpy(s.mask.astype(np.float32))
        return image, mask, index


def make_loader(dataset: ManifestDataset, batch_size: int, shuffle: bool,
                generator: Optional[torch.Generator] = None, num_workers: int = 0) -> DataLoader:
    """Deterministic under a seeded generator when num_workers == 0."""
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator,
                      num_workers=num_workers, drop_last=False)
