"""Min-max normalization of attribution maps at detection, image or dataset scope."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NormalizationScope(str, enum.Enum):
    DETECTION = "detection"
    IMAGE = "image"
    DATASET = "dataset"

    @classmethod
    def parse(cls, value) -> "NormalizationScope":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown normalization scope {value!r}; "
                             f"choose from {[s.value for s in cls]}") from None


@dataclass(frozen=True)
class MapGroup:
    """Maps sharing one min-max range.

    Members only need ``values``, ``raw_min`` and ``raw_max``; both
    :class:`~yolocam.gradcam.AttributionMap` and persisted records qualify.
    """

    maps: tuple
    scope: NormalizationScope
    group_min: float = field(init=False)
    group_max: float = field(init=False)

    def __post_init__(self):
        if not self.maps:
            raise ValueError("cannot normalize an empty map group")
        object.__setattr__(self, "group_min", min(m.raw_min for m in self.maps))
        object.__setattr__(self, "group_max", max(m.raw_max for m in self.maps))


def normalize(group: MapGroup) -> list:
    """Scale every member by the group's extrema into [0, 1].

    A constant group has no contrast and maps to all zeros.
    """
    lo, hi = group.group_min, group.group_max
    out = []
    for m in group.maps:
        v = np.asarray(m.values, dtype=np.float64)
        if hi > lo:
            n = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        else:
            n = np.zeros_like(v)
        out.append(n.astype(np.float32))
    return out


def regroup(maps: Sequence, scope, image_assignment: Sequence, *, separate_targets: bool = False) -> list:
    """Partition ``maps`` into normalization groups.

    ``image_assignment[i]`` names the source image of ``maps[i]``. Groups
    come back in order of first appearance. With ``separate_targets``
    objectness and class maps never share a group.
    """
    scope = NormalizationScope.parse(scope)
    if len(image_assignment) != len(maps):
        raise ValueError(f"{len(image_assignment)} image assignments for {len(maps)} maps")
    if scope is NormalizationScope.DETECTION:
        return [MapGroup((m,), scope) for m in maps]
    buckets = {}
    for m, img in zip(maps, image_assignment):
        key = img if scope is NormalizationScope.IMAGE else None
        if separate_targets:
            key = (key, m.target)
        buckets.setdefault(key, []).append(m)
    return [MapGroup(tuple(ms), scope) for ms in buckets.values()]


def normalize_all(maps: Sequence, scope, image_assignment: Sequence, *, separate_targets: bool = False) -> list:
    """Normalized arrays aligned with ``maps``."""
    groups = regroup(maps, scope, image_assignment, separate_targets=separate_targets)
    by_id = {}
    for g in groups:
        for m, n in zip(g.maps, normalize(g)):
            by_id[id(m)] = n
    return [by_id[id(m)] for m in maps]
