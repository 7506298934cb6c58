"""Synthetic scenes, coarse-condition degradation, augmentation and dataset files."""

from .augment import augment_8x, compose, dihedral
from .degrade import DegradeSpec, degrade, trace, visibility
from .io import DatasetFormatError, DatasetHeader, read_dataset, split_dataset, write_dataset
from .scenes import CLASS_NAMES, SceneSpec, class_census, generate_scene

__all__ = [
    "CLASS_NAMES", "DatasetFormatError", "DatasetHeader", "DegradeSpec", "SceneSpec", "augment_8x",
    "class_census", "compose", "degrade", "dihedral", "generate_scene", "read_dataset",
    "split_dataset", "trace", "visibility", "write_dataset",
]
