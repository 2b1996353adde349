"""Level label vocabulary and the per-grid-point segmentation container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spinefuse.errors import ParameterError

CLASS_NAMES: tuple[str, ...] = ("GAP", "L5", "L4", "L3", "L2", "L1")
GAP = 0
NUM_CLASSES = len(CLASS_NAMES)
NUM_LEVELS = NUM_CLASSES - 1


def level_name(index: int) -> str:
    return CLASS_NAMES[index]


def level_index(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ParameterError(f"unknown level name {name!r}") from None


@dataclass
class LevelSegmentation:
    """Class labels on a uniform spatial grid.

    ``labels[i]`` is the class of grid point ``origin_mm + i * spacing_mm``;
    0 is the inter-vertebral gap, 1..5 are L5..L1.
    """

    labels: np.ndarray
    origin_mm: float = 0.0
    spacing_mm: float = 0.5

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ParameterError("labels must be one-dimensional")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ParameterError("labels must lie in 0..5")
        if self.spacing_mm <= 0:
            raise ParameterError("spacing_mm must be positive")

    def __len__(self):
        return self.labels.size

    @property
    def positions_mm(self) -> np.ndarray:
        return self.origin_mm + self.spacing_mm * np.arange(self.labels.size)

    def names(self) -> list[str]:
        return [CLASS_NAMES[i] for i in self.labels]
