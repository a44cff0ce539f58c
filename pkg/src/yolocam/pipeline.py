"""Image-level glue between detection, explanation, persistence and rendering."""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .detector import (DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, TARGETS, decode, forward, nms)
from .gradcam import explain_detection
from .model_io import NetworkSpec
from .normalize import NormalizationScope, normalize_all
from .persistence import ExplanationRecord
from .render import DEFAULT_ALPHA, render_heatmap, to_rgb8, write_png

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")
PNG_PATTERN = re.compile(
    r"^(?P<image_id>.+)__det(?P<detection>\d{3,})__(?P<target>objectness|class\d+)"
    r"__(?P<scope>detection|image|dataset)\.png$")


@dataclass(frozen=True)
class ExplainSettings:
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    targets: tuple = TARGETS
    cam_mode: str = "classic"
    target_transform: str = "sigmoid"
    class_id: Optional[int] = None
    target_layer: Optional[int] = None


@dataclass
class ImageResult:
    image_id: str
    source_path: str
    detections: list
    records: list
    seconds: float

    @property
    def seconds_per_explanation(self) -> Optional[float]:
        return self.seconds / len(self.records) if self.records else None


def load_image(path, width: int, height: int) -> np.ndarray:
    """Read an image, resize (no letterbox) and return ``3 x H x W`` float32 in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (width, height):
            im = im.resize((width, height), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def list_images(directory) -> list:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def png_name(record, scope) -> str:
    """``<image_id>__det<NNN>__<objectness|classK>__<scope>.png``; see :data:`PNG_PATTERN`."""
    return f"{record.record_id}__{NormalizationScope.parse(scope).value}.png"


def explain_image(spec: NetworkSpec, image: np.ndarray, image_id: str,
                  settings: ExplainSettings = ExplainSettings(), source_path: str = "") -> ImageResult:
    """Detect, then explain every surviving detection for the requested targets."""
    start = time.perf_counter()
    heads, cache = forward(spec, image)
    detections = nms(decode(spec, heads), settings.conf_threshold, settings.iou_threshold)
    records = []
    for k, d in enumerate(detections):
        maps = explain_detection(spec, image, d, settings.targets, cache=cache,
                                 target_layer=settings.target_layer,
                                 target_transform=settings.target_transform, mode=settings.cam_mode,
                                 class_id=settings.class_id, detection_ref=f"{image_id}#{k}")
        records += [ExplanationRecord.from_map(m, image_id, k, d, source_path) for m in maps]
    return ImageResult(image_id, source_path, detections, records, time.perf_counter() - start)


def render_records(records: Sequence, scope, out_dir, image_for: Callable[[str], Optional[np.ndarray]],
                   alpha: float = DEFAULT_ALPHA, separate_targets: bool = False) -> list:
    """Normalize ``records`` at ``scope`` and write one overlay PNG each.

    ``image_for(image_id)`` returns the ``H x W x 3`` uint8 background or
    None to skip that image's records.
    """
    scope = NormalizationScope.parse(scope)
    records = list(records)
    if not records:
        return []
    normalized = normalize_all(records, scope, [r.image_id for r in records],
                               separate_targets=separate_targets)
    written = []
    for rec, norm in zip(records, normalized):
        background = image_for(rec.image_id)
        if background is None:
            continue
        rgb = render_heatmap(background, norm, rec.detection.box, alpha)
        written.append(write_png(Path(out_dir) / png_name(rec, scope), rgb))
    return written


class ImageSource:
    """Loads and memoizes 8-bit backgrounds by image id."""

    def __init__(self, paths: dict, width: int, height: int):
        self.paths = dict(paths)
        self.width, self.height = width, height
        self._cache = {}

    def __call__(self, image_id: str) -> Optional[np.ndarray]:
        if image_id not in self._cache:
            path = self.paths.get(image_id)
            try:
                self._cache[image_id] = to_rgb8(load_image(path, self.width, self.height))
            except (OSError, TypeError, ValueError) as exc:
                logger.warning("source image for %r unavailable (%s); skipping its maps", image_id, exc)
                self._cache[image_id] = None
        return self._cache[image_id]

    @classmethod
    def from_records(cls, records: Iterable, width: int, height: int) -> "ImageSource":
        return cls({r.image_id: r.source_path for r in records}, width, height)
