"""Command line interface: ``explain``, ``batch`` and ``renormalize``.

Any long option may also come from a JSON file given with ``--config``
(keys use the option's underscore spelling, e.g. ``"conf_threshold"``);
explicit flags win. ``YOLOCAM_WORKERS`` sets the default batch worker count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .detector import DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, TARGETS
from .gradcam import CAM_MODES, TRANSFORMS
from .model_io import ConfigError, WeightsError, load_model
from .normalize import NormalizationScope
from .persistence import MANIFEST_NAME, RunFormatError, RunWriter, read_run
from .pipeline import (ExplainSettings, ImageSource, explain_image, list_images, load_image,
                       render_records)
from .render import DEFAULT_ALPHA

logger = logging.getLogger("yolocam")

WORKERS_ENV = "YOLOCAM_WORKERS"
SCOPES = tuple(s.value for s in NormalizationScope)
TARGET_CHOICES = {"objectness": ("objectness",), "class": ("class",), "both": TARGETS}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: str
    weights: str
    output: str
    inputs: list = field(default_factory=list)
    conf_threshold: float = DEFAULT_CONF_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    targets: str = "both"
    scopes: tuple = ("detection",)
    cam_mode: str = "classic"
    target_transform: str = "sigmoid"
    alpha: float = DEFAULT_ALPHA
    class_names: Optional[list] = None
    class_id: Optional[int] = None
    target_layer: Optional[int] = None
    separate_targets: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("conf_threshold", "iou_threshold", "alpha"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise UsageError(f"{name.replace('_', '-')} must lie in [0, 1], got {v}")
        if self.targets not in TARGET_CHOICES:
            raise UsageError(f"targets must be one of {sorted(TARGET_CHOICES)}")
        self.scopes = tuple(dict.fromkeys(NormalizationScope.parse(s).value for s in self.scopes))
        if self.workers < 1:
            raise UsageError("workers must be >= 1")

    def settings(self) -> ExplainSettings:
        return ExplainSettings(self.conf_threshold, self.iou_threshold, TARGET_CHOICES[self.targets],
                               self.cam_mode, self.target_transform, self.class_id, self.target_layer)

    def check_model(self, spec):
        classes = {spec.head_node(h).classes for h in range(len(spec.head_indices))}
        if len(classes) != 1:
            raise UsageError(f"heads disagree on class count: {sorted(classes)}")
        n = classes.pop()
        if self.class_names is None:
            self.class_names = [f"class{i}" for i in range(n)]
        if len(self.class_names) != n:
            raise UsageError(f"{len(self.class_names)} class names given, model has {n} classes")
        if self.class_id is not None and not 0 <= self.class_id < n:
            raise UsageError(f"class-id {self.class_id} out of range for {n} classes")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _class_names(value) -> Optional[list]:
    if value is None or isinstance(value, list):
        return value
    p = Path(value)
    if p.is_file():
        return [ln.strip() for ln in p.read_text().splitlines() if ln.strip()]
    return [s.strip() for s in value.split(",") if s.strip()]


def _scopes(value) -> list:
    items = value if isinstance(value, list) else str(value).split(",")
    for s in items:
        if s not in SCOPES:
            raise argparse.ArgumentTypeError(f"unknown scope {s!r}; choose from {', '.join(SCOPES)}")
    return items


def _add_model_options(p):
    p.add_argument("--model", "--cfg", dest="model", help="darknet-style network description")
    p.add_argument("--weights", help="darknet weights file")
    p.add_argument("--conf-threshold", type=float, default=DEFAULT_CONF_THRESHOLD,
                   help="decision threshold on objectness x class probability (default: %(default)s)")
    p.add_argument("--iou-threshold", type=float, default=DEFAULT_IOU_THRESHOLD,
                   help="NMS overlap threshold (default: %(default)s)")
    p.add_argument("--targets", choices=sorted(TARGET_CHOICES), default="both",
                   help="scores to explain (default: %(default)s)")
    p.add_argument("--cam-mode", choices=CAM_MODES, default="classic",
                   help="classic: pooled-gradient channel weights; elementwise: gradient x activation "
                        "(default: %(default)s)")
    p.add_argument("--target-transform", choices=TRANSFORMS, default="sigmoid",
                   help="differentiate the probability (sigmoid) or the raw logit (default: %(default)s)")
    p.add_argument("--class-names", default=None,
                   help="comma-separated names or a file with one name per line (default: class0..classN)")
    p.add_argument("--class-id", type=int, default=None,
                   help="explain this class instead of each detection's argmax class")
    p.add_argument("--target-layer", type=int, default=None,
                   help="conv layer to explain against (default: the conv feeding each head's output conv)")


def _add_render_options(p, scope_help):
    p.add_argument("--scope", type=_scopes, default=["detection"],
                   help=f"{scope_help}; comma-separated from {', '.join(SCOPES)} (default: detection)")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="heatmap opacity (default: %(default)s)")
    p.add_argument("--separate-targets", action="store_true",
                   help="normalize objectness and class maps in separate pools")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yolocam", description="Grad-CAM explanations for Tiny-YOLO-v3 detections")
    parser.add_argument("--config", help="JSON file supplying default values for any option")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="explain every detection in one image")
    p.add_argument("image")
    p.add_argument("-o", "--output", default="explanations", help="output directory (default: %(default)s)")
    _add_model_options(p)
    _add_render_options(p, "normalization scope(s) to render")

    p = sub.add_parser("batch", help="explain a directory of images and persist the raw maps")
    p.add_argument("image_dir")
    p.add_argument("-o", "--output", default="run", help="run directory (default: %(default)s)")
    _add_model_options(p)
    _add_render_options(p, "scope(s) to render after the run")
    p.add_argument("--workers", type=int, default=int(os.environ.get(WORKERS_ENV, "1")),
                   help=f"concurrent images (default: ${WORKERS_ENV} or 1)")

    p = sub.add_parser("renormalize", help="re-render a persisted run under another scope")
    p.add_argument("manifest", help=f"run directory or its {MANIFEST_NAME}")
    p.add_argument("-o", "--output", default=None, help="output directory (default: <run>/png)")
    _add_render_options(p, "normalization scope(s)")
    p.add_argument("--no-verify", action="store_true", help="skip payload extrema checks")
    return parser


def _parse(argv):
    parser = build_parser()
    config_path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif a.startswith("--config="):
            config_path = a.split("=", 1)[1]
    if config_path:
        try:
            defaults = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {config_path}: {exc}")
        if "scope" in defaults:
            defaults["scope"] = _scopes(defaults["scope"])
        for action in parser._subparsers._group_actions:
            for subparser in action.choices.values():
                subparser.set_defaults(**defaults)
    return parser, parser.parse_args(argv)


def _run_config(args, inputs) -> RunConfig:
    if not args.model or not args.weights:
        raise UsageError("--model and --weights are required")
    return RunConfig(
        model=args.model, weights=args.weights, output=args.output, inputs=[str(i) for i in inputs],
        conf_threshold=args.conf_threshold, iou_threshold=args.iou_threshold, targets=args.targets,
        scopes=tuple(args.scope), cam_mode=args.cam_mode, target_transform=args.target_transform,
        alpha=args.alpha, class_names=_class_names(args.class_names), class_id=args.class_id,
        target_layer=args.target_layer, separate_targets=args.separate_targets,
        workers=getattr(args, "workers", 1),
    )


def _load(cfg: RunConfig):
    spec = load_model(cfg.model, cfg.weights)
    cfg.check_model(spec)
    return spec


def _detections_document(result, cfg: RunConfig, pngs: dict) -> dict:
    dets = []
    for k, d in enumerate(result.detections):
        entry = d.to_dict()
        entry["index"] = k
        entry["class_name"] = cfg.class_names[d.class_id]
        entry["explanations"] = [
            {"target": r.target, "class_id": r.class_id, "neuron": r.neuron._asdict(),
             "target_layer": r.target_layer, "map_shape": list(r.map_shape),
             "raw_min": r.raw_min, "raw_max": r.raw_max, "png": pngs.get(r.record_id, [])}
            for r in result.records if r.detection_index == k
        ]
        dets.append(entry)
    return {"image": result.source_path, "image_id": result.image_id, "detections": dets}


def cmd_explain(cfg: RunConfig) -> dict:
    spec = _load(cfg)
    path = Path(cfg.inputs[0])
    image = load_image(path, spec.input_width, spec.input_height)
    result = explain_image(spec, image, path.stem, cfg.settings(), str(path.resolve()))
    scopes = list(cfg.scopes)
    if "dataset" in scopes:
        logger.warning("dataset scope on a single image behaves as image scope")
        scopes = list(dict.fromkeys("image" if s == "dataset" else s for s in scopes))
    source = ImageSource({result.image_id: result.source_path}, spec.input_width, spec.input_height)
    pngs = {}
    for scope in scopes:
        for rec, p in zip(result.records, render_records(result.records, scope, cfg.output, source,
                                                         cfg.alpha, cfg.separate_targets)):
            pngs.setdefault(rec.record_id, []).append(p.name)
    doc = _detections_document(result, cfg, pngs)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{result.image_id}.detections.json").write_text(json.dumps(doc, indent=2))
    print(f"{result.image_id}: {len(result.detections)} detection(s), {len(result.records)} map(s)")
    return doc


def cmd_batch(cfg: RunConfig) -> Path:
    spec = _load(cfg)
    images = list_images(cfg.inputs[0]) if Path(cfg.inputs[0]).is_dir() else []
    if not images:
        raise UsageError(f"no decodable images in {cfg.inputs[0]}")
    settings = cfg.settings()

    def work(path):
        try:
            image = load_image(path, spec.input_width, spec.input_height)
            return explain_image(spec, image, path.stem, settings, str(path.resolve()))
        except Exception as exc:  # one bad image must not sink the batch
            logger.error("%s: %s", path.name, exc)
            return None

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(work, images))
    ok = [r for r in results if r is not None]
    if not ok:
        raise RuntimeError("every image in the batch failed")

    run_dir = Path(cfg.output)
    config = cfg.to_dict()
    del config["output"]
    config.update(input_width=spec.input_width, input_height=spec.input_height)
    records = []
    with RunWriter(run_dir, config) as writer:
        for r in ok:
            for rec in r.records:
                writer.write_record(rec)
            records += r.records
            per = r.seconds_per_explanation
            timing = f"{per * 1000:.1f} ms/explanation" if per is not None else "no explanations"
            print(f"{r.image_id}: {len(r.detections)} detection(s), {timing}")
    print(f"{len(records)} record(s) written to {run_dir / MANIFEST_NAME}")
    source = ImageSource.from_records(records, spec.input_width, spec.input_height)
    for scope in cfg.scopes:
        render_records(records, scope, run_dir / "png", source, cfg.alpha, cfg.separate_targets)
    return run_dir / MANIFEST_NAME


def cmd_renormalize(manifest, scopes, output=None, alpha=DEFAULT_ALPHA, separate_targets=False,
                    verify=True) -> list:
    run = read_run(manifest, verify=verify)
    out = Path(output) if output else run.manifest_path.parent / "png"
    records = list(run)
    width = run.config.get("input_width", 416)
    height = run.config.get("input_height", 416)
    source = ImageSource.from_records(records, width, height)
    written = []
    for scope in scopes:
        written += render_records(records, scope, out, source, alpha, separate_targets)
    print(f"{len(written)} PNG(s) written to {out}")
    return written


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, args = _parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        if args.command == "renormalize":
            cmd_renormalize(args.manifest, args.scope, args.output, args.alpha, args.separate_targets,
                            verify=not args.no_verify)
        elif args.command == "explain":
            cmd_explain(_run_config(args, [args.image]))
        else:
            cmd_batch(_run_config(args, [args.image_dir]))
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ConfigError, WeightsError, RunFormatError, RuntimeError, ValueError) as exc:
        print(f"yolocam: error: {exc}", file=sys.stderr)
        return 1
    logger.info("done in %.2f s", time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
