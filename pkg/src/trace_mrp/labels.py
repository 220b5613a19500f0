"""Demographic label sets and the gender x age x region cell crossing."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import pandas as pd

DEFAULT_GENDERS = ("female", "male")
# Upper bin ">=40" follows the "older than 40" subdivision; the other cuts
# follow the M3 demographic-inference age bins.
DEFAULT_AGE_GROUPS = ("<=18", "19-29", "30-39", ">=40")
DEFAULT_REGIONS = (
    "TR1", "TR2", "TR3", "TR4", "TR5", "TR6",
    "TR7", "TR8", "TR9", "TRA", "TRB", "TRC",
)

CELL_COLUMNS = ("gender", "age_group", "region")


@dataclass(frozen=True)
class Labels:
    """Ordered label sets for the three poststratification dimensions.

    The order of each tuple fixes the canonical cell order used everywhere:
    gender varies slowest, then age group, then region.
    """

    genders: tuple[str, ...] = DEFAULT_GENDERS
    age_groups: tuple[str, ...] = DEFAULT_AGE_GROUPS
    regions: tuple[str, ...] = DEFAULT_REGIONS

    def __post_init__(self):
        for name, values, size in (
            ("genders", self.genders, 2),
            ("age_groups", self.age_groups, 4),
            ("regions", self.regions, 12),
        ):
            values = tuple(values)
            object.__setattr__(self, name, values)
            if len(values) != size:
                raise ValueError(f"{name} needs exactly {size} labels, got {len(values)}")
            if len(set(values)) != size:
                raise ValueError(f"{name} contains duplicate labels: {values}")

    @property
    def n_cells(self) -> int:
        return len(self.genders) * len(self.age_groups) * len(self.regions)

    @property
    def male_index(self) -> int:
        """Gender code of the contrast level ("male" when present, else the second label)."""
        return self.genders.index("male") if "male" in self.genders else 1

    def levels(self, dimension: str) -> tuple[str, ...]:
        return {
            "gender": self.genders,
            "age_group": self.age_groups,
            "region": self.regions,
        }[dimension]

    def cells(self) -> list[tuple[str, str, str]]:
        """All 96 cell keys in canonical order."""
        return list(product(self.genders, self.age_groups, self.regions))

    def cell_codes(self) -> np.ndarray:
        """(n_cells, 3) integer codes matching :meth:`cells`."""
        g, a, r = np.meshgrid(
            np.arange(len(self.genders)),
            np.arange(len(self.age_groups)),
            np.arange(len(self.regions)),
            indexing="ij",
        )
        return np.column_stack([g.ravel(), a.ravel(), r.ravel()])

    def code(self, dimension: str, values) -> np.ndarray:
        """Integer codes for ``values``; raises ``KeyError`` naming the first unknown label."""
        levels = self.levels(dimension)
        arr = np.asarray(values, dtype=object)
        codes = pd.Categorical(arr, categories=levels).codes
        bad = np.flatnonzero(codes < 0)
        if bad.size:
            raise KeyError(f"unknown {dimension} label {arr[bad[0]]!r}")
        return codes.astype(np.int64)

    def cell_index(self, gender, age_group, region) -> np.ndarray:
        """Flat canonical cell index for parallel label sequences."""
        g = self.code("gender", gender)
        a = self.code("age_group", age_group)
        r = self.code("region", region)
        return (g * len(self.age_groups) + a) * len(self.regions) + r

    def to_dict(self) -> dict:
        return {
            "genders": list(self.genders),
            "age_groups": list(self.age_groups),
            "regions": list(self.regions),
        }
