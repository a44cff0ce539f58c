"""On-disk storage of raw attribution maps for later re-normalization.

A run directory looks like::

    run/
      manifest.json          # every record id with its raw extrema
      records/<id>.json      # metadata (UTF-8 JSON)
      records/<id>.f32       # payload, little-endian float32, row-major h x w

The README describes both JSON schemas.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .detector import Detection, NeuronAddress

FORMAT = "yolocam-run"
VERSION = 1
MANIFEST_NAME = "manifest.json"
_BLOB = "<f4"


class RunFormatError(ValueError):
    """Malformed, incomplete or tampered run directory."""


@dataclass(frozen=True, eq=False)  # array payload: compare via metadata() and bytes
class ExplanationRecord:
    image_id: str
    detection_index: int
    detection: Detection
    target: str
    class_id: Optional[int]
    neuron: NeuronAddress
    target_layer: int
    map_shape: tuple
    raw_min: float
    raw_max: float
    payload: np.ndarray
    source_path: str = ""

    def __post_init__(self):
        h, w = self.map_shape
        if self.payload.ndim != 1 or self.payload.size != h * w:
            raise ValueError(f"payload has {self.payload.size} values, map_shape {self.map_shape} needs {h * w}")
        if self.payload.size and (float(self.payload.min()) != self.raw_min
                                  or float(self.payload.max()) != self.raw_max):
            raise ValueError("stored raw extrema do not match the payload")

    @classmethod
    def from_map(cls, amap, image_id: str, detection_index: int, detection: Detection,
                 source_path: str = "") -> "ExplanationRecord":
        values = np.ascontiguousarray(amap.values, dtype=np.float32)
        return cls(image_id, detection_index, detection, amap.target, amap.class_id, amap.neuron,
                   amap.target_layer, tuple(values.shape), amap.raw_min, amap.raw_max,
                   values.reshape(-1), source_path)

    @property
    def values(self) -> np.ndarray:
        return self.payload.reshape(self.map_shape)

    @property
    def target_label(self) -> str:
        return "objectness" if self.target == "objectness" else f"class{self.class_id}"

    @property
    def record_id(self) -> str:
        return record_id(self.image_id, self.detection_index, self.target_label)

    def metadata(self) -> dict:
        return {
            "id": self.record_id,
            "image_id": self.image_id,
            "source_path": self.source_path,
            "detection_index": self.detection_index,
            "detection": self.detection.to_dict(),
            "target": self.target,
            "class_id": self.class_id,
            "neuron": self.neuron._asdict(),
            "target_layer": self.target_layer,
            "map_shape": list(self.map_shape),
            "raw_min": self.raw_min,
            "raw_max": self.raw_max,
        }


def record_id(image_id: str, detection_index: int, target_label: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", image_id)
    return f"{safe}__det{detection_index:03d}__{target_label}"


class RunWriter:
    """Single writer for one run directory; call :meth:`close` to emit the manifest."""

    def __init__(self, run_dir, config: Optional[dict] = None):
        self.run_dir = Path(run_dir)
        self.record_dir = self.run_dir / "records"
        self.record_dir.mkdir(parents=True, exist_ok=True)
        self.config = dict(config or {})
        self._entries = []
        self._ids = set()
        self.closed = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self.closed:
            self.close()

    def write_record(self, record: ExplanationRecord) -> str:
        if self.closed:
            raise RunFormatError("run writer already closed")
        rid = record.record_id
        if rid in self._ids:
            raise RunFormatError(f"duplicate record id {rid!r}")
        (self.record_dir / f"{rid}.f32").write_bytes(record.payload.astype(_BLOB).tobytes())
        (self.record_dir / f"{rid}.json").write_text(
            json.dumps(record.metadata(), indent=2, sort_keys=True), encoding="utf-8")
        self._ids.add(rid)
        self._entries.append({"id": rid, "image_id": record.image_id,
                              "raw_min": record.raw_min, "raw_max": record.raw_max})
        return rid

    def close(self) -> Path:
        lo = min((e["raw_min"] for e in self._entries), default=None)
        hi = max((e["raw_max"] for e in self._entries), default=None)
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "config": self.config,
            "global_min": lo,
            "global_max": hi,
            "records": self._entries,
        }
        path = self.run_dir / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        self.closed = True
        return path


def write_record(record: ExplanationRecord, sink: RunWriter) -> str:
    return sink.write_record(record)


def _load_record(record_dir: Path, entry: dict, verify: bool) -> ExplanationRecord:
    rid = entry["id"]
    meta_path, blob_path = record_dir / f"{rid}.json", record_dir / f"{rid}.f32"
    if not blob_path.exists():
        raise RunFormatError(f"record {rid!r}: payload blob {blob_path.name} is missing")
    if not meta_path.exists():
        raise RunFormatError(f"record {rid!r}: metadata {meta_path.name} is missing")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    payload = np.frombuffer(blob_path.read_bytes(), dtype=_BLOB).astype(np.float32)
    shape = tuple(meta["map_shape"])
    if payload.size != shape[0] * shape[1]:
        raise RunFormatError(f"record {rid!r}: blob holds {payload.size} floats, map_shape {shape}")
    if verify:
        actual = (float(payload.min()), float(payload.max()))
        stored = (meta["raw_min"], meta["raw_max"])
        listed = (entry["raw_min"], entry["raw_max"])
        if actual != stored or actual != listed:
            raise RunFormatError(f"record {rid!r}: extrema mismatch, payload {actual}, "
                                 f"metadata {stored}, manifest {listed}")
    # extrema taken from the payload so unverified reads still build a valid record
    return ExplanationRecord(
        image_id=meta["image_id"],
        detection_index=meta["detection_index"],
        detection=Detection.from_dict(meta["detection"]),
        target=meta["target"],
        class_id=meta["class_id"],
        neuron=NeuronAddress(**meta["neuron"]),
        target_layer=meta["target_layer"],
        map_shape=shape,
        raw_min=float(payload.min()) if payload.size else meta["raw_min"],
        raw_max=float(payload.max()) if payload.size else meta["raw_max"],
        payload=payload,
        source_path=meta.get("source_path", ""),
    )


class Run:
    """Read-only view of a run; iterating loads one record at a time."""

    def __init__(self, manifest_path, verify: bool = True):
        self.manifest_path = Path(manifest_path)
        if self.manifest_path.is_dir():
            self.manifest_path = self.manifest_path / MANIFEST_NAME
        try:
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RunFormatError(f"cannot read manifest {self.manifest_path}: {exc}") from exc
        if self.manifest.get("format") != FORMAT:
            raise RunFormatError(f"{self.manifest_path} is not a {FORMAT} manifest")
        self.entries = list(self.manifest.get("records", []))
        self.verify = verify
        self.record_dir = self.manifest_path.parent / "records"
        if verify and self.entries:
            lo = min(e["raw_min"] for e in self.entries)
            hi = max(e["raw_max"] for e in self.entries)
            if (lo, hi) != (self.manifest.get("global_min"), self.manifest.get("global_max")):
                raise RunFormatError("manifest global extrema disagree with its record entries")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ExplanationRecord]:
        for entry in self.entries:
            yield _load_record(self.record_dir, entry, self.verify)

    @property
    def ids(self) -> list:
        return [e["id"] for e in self.entries]

    @property
    def config(self) -> dict:
        return self.manifest.get("config", {})

    @property
    def global_min(self) -> Optional[float]:
        return self.manifest.get("global_min") if self.entries else None

    @property
    def global_max(self) -> Optional[float]:
        return self.manifest.get("global_max") if self.entries else None

    def extrema(self) -> Optional[tuple]:
        """``(min, max)`` over all records, or None for an empty run."""
        if not self.entries:
            return None
        return self.global_min, self.global_max


def read_run(manifest_path, verify: bool = True) -> Run:
    return Run(manifest_path, verify)
