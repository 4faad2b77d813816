"""
Synthetic crack images: textured background with thin dark polylines, plus the
exact binary mask of the drawn lines.
"""

import os
import logging
import math
from typing import List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..core.common import OutputError, ParameterError
from .dataset import SPLITS, DatasetManifest

logger = logging.getLogger(__name__)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.5, 0.75)
    coarse_n = max(size // 8, 2)
    coarse = rng.normal(0.0, 0.06, (coarse_n, coarse_n)).astype(np.float32)
    coarse = np.asarray(Image.fromarray(coarse).resize((size, size), Image.BILINEAR))
    fine = rng.normal(0.0, 0.03, (size, size))
    return base + coarse + fine


def _polyline(rng: np.random.Generator, size: int) -> List[Tuple[float, float]]:
    n_points = int(rng.integers(3, 7))
    x, y = rng.uniform(0, size - 1, 2)
    angle = rng.uniform(0, 2 * math.pi)
    points = [(float(x), float(y))]
    for _ in range(n_points - 1):
        angle += rng.normal(0.0, 0.6)
        step = rng.uniform(0.1, 0.25) * size
        x = float(np.clip(x + step * math.cos(angle), 0, size - 1))
        y = float(np.clip(y + step * math.sin(angle), 0, size - 1))
        points.append((x, y))
    return points


def draw_crack_pair(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (uint8 RGB image, uint8 {0,255} mask) pair."""
    mask_img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask_img)
    while True:
        for _ in range(int(rng.integers(1, 3))):
            draw.line(_polyline(rng, size), fill=255, width=int(rng.integers(1, 3)))
        mask = np.asarray(mask_img) > 0
        if mask.any():
            break

    gray = _texture(rng, size)
    crack_level = rng.uniform(0.08, 0.25)
    gray = np.where(mask, crack_level + rng.normal(0.0, 0.02, gray.shape), gray)
    tint = rng.uniform(0.9, 1.1, 3)
    rgb = np.clip(gray[..., None] * tint, 0.0, 1.0)
    image = np.round(rgb * 255).astype(np.uint8)
    return image, mask.astype(np.uint8) * 255


def synth_crack_dataset(n: int, size: int, seed: int, out_dir: str, split: str = "train",
                        name: str = "synthcrack") -> DatasetManifest:
    """
    Generate n image/mask PNG pairs under out_dir/<split>/ and a manifest at
    out_dir/<split>.json. Output is a pure function of (n, size, seed).
    """
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    if size < 2:
        raise ParameterError(f"size must be at least 2, got {size}")
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}, got {split!r}")

    image_dir = os.path.join(out_dir, split, "images")
    mask_dir = os.path.join(out_dir, split, "masks")
    try:
        os.makedirs(image_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
    except OSError as e:
        raise OutputError(f"Cannot create output directory '{out_dir}': {e}")

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        image, mask = draw_crack_pair(rng, size)
        file_name = f"{i:05d}.png"
        Image.fromarray(image, "RGB").save(os.path.join(image_dir, file_name))
        Image.fromarray(mask, "L").save(os.path.join(mask_dir, file_name))
        entries.append((f"{split}/images/{file_name}", f"{split}/masks/{file_name}"))

    manifest = DatasetManifest(name, split, entries, declared_size=n, base_dir=os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, f"{split}.json"))
    logger.info(f"Generated {n} synthetic {size}x{size} crack pairs (seed={seed}) in {out_dir}/{split}")
    return manifest
