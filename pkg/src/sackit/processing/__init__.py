"""
Data handling: manifests, sample preparation, synthetic crack data.
Reporting lives in sackit.processing.reporting and is imported on demand.
"""

from .dataset import DatasetManifest, ImageSample, ManifestDataset, load_manifest, prepare_sample
from .synth import synth_crack_dataset

__all__ = [
    'DatasetManifest',
    'ImageSample',
    'ManifestDataset',
    'load_manifest',
    'prepare_sample',
    'synth_crack_dataset',
]
