"""Forward pass, head decoding, NMS and detection-to-neuron provenance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .model_io import NetworkSpec
from .tensor import (ShapeError, concat_channels, conv2d, maxpool, pointwise, sigmoid,
                     upsample2x)

TARGETS = ("objectness", "class")
DEFAULT_CONF_THRESHOLD = 0.5
DEFAULT_IOU_THRESHOLD = 0.45
_MAX_SIZE_LOGIT = 80.0


class Provenance(NamedTuple):
    head_index: int
    grid_y: int
    grid_x: int
    anchor_index: int


@dataclass(frozen=True)
class Detection:
    """A decoded box with the head/cell/anchor it came from.

    ``provenance`` survives NMS untouched, which is what lets an
    explanation walk back from a final box to output-layer neurons.
    """

    box: tuple
    objectness: float
    class_id: int
    class_prob: float
    provenance: Provenance
    confidence: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "confidence", self.objectness * self.class_prob)

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "objectness": self.objectness,
            "class_id": self.class_id,
            "class_prob": self.class_prob,
            "confidence": self.confidence,
            "provenance": self.provenance._asdict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(tuple(d["box"]), d["objectness"], d["class_id"], d["class_prob"],
                   Provenance(**d["provenance"]))


class NeuronAddress(NamedTuple):
    layer_index: int
    channel: int
    grid_y: int
    grid_x: int


@dataclass
class ActivationCache:
    """Per-layer outputs of one forward pass and the matching backward closures.

    ``backward[i]`` maps the gradient on ``outputs[i]`` to a tuple of
    gradients, one per entry of ``spec.inputs_of(i)``.
    """

    image: np.ndarray
    outputs: list
    backward: list

    def output(self, index: int) -> np.ndarray:
        return self.image if index < 0 else self.outputs[index]


def _layer_forward(spec: NetworkSpec, i: int, inputs: Sequence[np.ndarray]):
    node = spec.layers[i]
    if node.kind == "conv":
        if node.params is None:
            raise ValueError(f"layer {i}: conv has no parameters; load weights first")
        lin, conv_bw = conv2d(inputs[0], node.params, node.stride, node.pad)
        out, act_bw = pointwise(node.activation, lin)
        return out, lambda g: (conv_bw(act_bw(g)),)
    if node.kind == "maxpool":
        out, bw = maxpool(inputs[0], node.size, node.stride)
        return out, lambda g: (bw(g),)
    if node.kind == "upsample":
        out, bw = upsample2x(inputs[0])
        return out, lambda g: (bw(g),)
    if node.kind == "route":
        out, bw = concat_channels(list(inputs))
        return out, lambda g: tuple(bw(g))
    return inputs[0], lambda g: (g,)


def forward(spec: NetworkSpec, image: np.ndarray, dtype=np.float32):
    """Run the network; returns ``(head_outputs, cache)``.

    Head outputs are the raw (pre-sigmoid) tensors of shape
    ``A*(5+C) x Gy x Gx``, one per yolo head in layer order.
    """
    image = np.ascontiguousarray(image, dtype=dtype)
    if image.shape != spec.input_shape:
        raise ShapeError(f"image shape {image.shape} != network input {spec.input_shape}")
    outputs, backward = [], []
    for i in range(len(spec.layers)):
        srcs = [image if j < 0 else outputs[j] for j in spec.inputs_of(i)]
        out, bw = _layer_forward(spec, i, srcs)
        outputs.append(out)
        backward.append(bw)
    cache = ActivationCache(image, outputs, backward)
    return [outputs[i] for i in spec.head_indices], cache


def ancestors(spec: NetworkSpec, index: int) -> set:
    """All layers (and -1 for the image) whose output can influence ``index``."""
    seen, stack = set(), [index]
    while stack:
        for j in spec.inputs_of(stack.pop()):
            if j not in seen:
                seen.add(j)
                if j >= 0:
                    stack.append(j)
    return seen


def backpropagate(spec: NetworkSpec, cache: ActivationCache, seeds: dict, target: int) -> np.ndarray:
    """Gradient with respect to ``cache.output(target)``.

    ``seeds`` maps layer index -> gradient on that layer's output. The
    traversal visits layers in reverse order and stops at ``target``;
    layers before it cannot depend on it.
    """
    grads = {}
    for i, g in seeds.items():
        if i <= target:
            raise ValueError(f"seed layer {i} is not downstream of target layer {target}")
        grads[i] = g
    for i in range(max(grads), target, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        for j, gj in zip(spec.inputs_of(i), cache.backward[i](g)):
            if j < target:
                continue
            grads[j] = grads[j] + gj if j in grads else gj
    out = grads.get(target)
    if out is None:
        out = np.zeros_like(cache.output(target))
    return out


def head_strides(spec: NetworkSpec, head_index: int) -> tuple:
    _, gy, gx = spec.shapes[spec.head_indices[head_index]]
    return spec.input_width / gx, spec.input_height / gy


def decode_head(raw: np.ndarray, anchors: Sequence, stride: tuple, num_classes: int,
                head_index: int = 0, image_size: Optional[tuple] = None) -> list:
    """Turn one head's raw tensor into one candidate per (cell, anchor).

    ``stride`` is ``(sx, sy)`` in pixels per cell; ``image_size`` is
    ``(width, height)`` for clamping and defaults to grid x stride.
    Class scores are independent sigmoids; each candidate carries its
    argmax class.
    """
    n_anchor = len(anchors)
    depth = 5 + num_classes
    if raw.ndim != 3 or raw.shape[0] != n_anchor * depth:
        raise ShapeError(f"head tensor has {raw.shape[0] if raw.ndim == 3 else raw.shape} channels, "
                         f"expected {n_anchor} x (5 + {num_classes}) = {n_anchor * depth}")
    _, gy, gx = raw.shape
    sx, sy = stride
    width, height = image_size if image_size is not None else (gx * sx, gy * sy)
    t = raw.astype(np.float64).reshape(n_anchor, depth, gy, gx)
    cols = np.arange(gx)[None, None, :]
    rows = np.arange(gy)[None, :, None]
    aw = np.array([a[0] for a in anchors], dtype=np.float64)[:, None, None]
    ah = np.array([a[1] for a in anchors], dtype=np.float64)[:, None, None]
    cx = (cols + sigmoid(t[:, 0])) * sx
    cy = (rows + sigmoid(t[:, 1])) * sy
    bw = aw * np.exp(np.minimum(t[:, 2], _MAX_SIZE_LOGIT))
    bh = ah * np.exp(np.minimum(t[:, 3], _MAX_SIZE_LOGIT))
    x0 = np.clip(cx - bw / 2, 0, width)
    x1 = np.clip(cx + bw / 2, 0, width)
    y0 = np.clip(cy - bh / 2, 0, height)
    y1 = np.clip(cy + bh / 2, 0, height)
    obj = sigmoid(t[:, 4])
    cls_logits = t[:, 5:]
    best = cls_logits.argmax(axis=1)
    best_prob = sigmoid(np.take_along_axis(cls_logits, best[:, None], axis=1)[:, 0])

    out = []
    for i in range(gy):
        for j in range(gx):
            for a in range(n_anchor):
                out.append(Detection(
                    box=(float(x0[a, i, j]), float(y0[a, i, j]), float(x1[a, i, j]), float(y1[a, i, j])),
                    objectness=float(obj[a, i, j]),
                    class_id=int(best[a, i, j]),
                    class_prob=float(best_prob[a, i, j]),
                    provenance=Provenance(head_index, i, j, a),
                ))
    return out


def decode(spec: NetworkSpec, head_outputs: Sequence[np.ndarray]) -> list:
    """Candidates from every head of ``spec``, in head order."""
    candidates = []
    for h, raw in enumerate(head_outputs):
        node = spec.head_node(h)
        candidates += decode_head(raw, node.head_anchors, head_strides(spec, h), node.classes,
                                  head_index=h, image_size=(spec.input_width, spec.input_height))
    return candidates


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def _iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    ix = np.clip(np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0]), 0, None)
    iy = np.clip(np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1]), 0, None)
    inter = ix * iy
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(candidates: Sequence[Detection], conf_threshold: float = DEFAULT_CONF_THRESHOLD,
        iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list:
    """Threshold then greedy per-class suppression.

    Survivors come back ordered by confidence (ties: lower input index)
    and are the very objects passed in, provenance included.
    """
    for name, v in (("conf_threshold", conf_threshold), ("iou_threshold", iou_threshold)):
        if not 0 <= v <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    idx = [i for i, d in enumerate(candidates) if d.confidence >= conf_threshold]
    if not idx:
        return []
    conf = np.array([candidates[i].confidence for i in idx])
    order = [idx[k] for k in np.argsort(-conf, kind="stable")]
    keep = []
    for cls in sorted({candidates[i].class_id for i in order}):
        members = [i for i in order if candidates[i].class_id == cls]
        boxes = np.array([candidates[i].box for i in members], dtype=np.float64)
        alive = np.ones(len(members), dtype=bool)
        for k in range(len(members)):
            if alive[k]:
                keep.append(members[k])
                alive[k + 1:] &= _iou_one_to_many(boxes[k], boxes[k + 1:]) <= iou_threshold
    rank = {i: r for r, i in enumerate(order)}
    return [candidates[i] for i in sorted(keep, key=rank.__getitem__)]


def detect(spec: NetworkSpec, image: np.ndarray, conf_threshold: float = DEFAULT_CONF_THRESHOLD,
           iou_threshold: float = DEFAULT_IOU_THRESHOLD):
    """Forward pass + decode + NMS; returns ``(detections, head_outputs, cache)``."""
    heads, cache = forward(spec, image)
    return nms(decode(spec, heads), conf_threshold, iou_threshold), heads, cache


def locate_target_neuron(d: Detection, target: str, spec: NetworkSpec,
                         class_id: Optional[int] = None) -> NeuronAddress:
    """Output-layer neuron holding ``d``'s objectness or class logit.

    ``class_id`` overrides the detection's own (argmax) class.
    """
    head, gy, gx, anchor = d.provenance
    node = spec.head_node(head)
    depth = 5 + node.classes
    _, hy, hx = spec.shapes[spec.head_indices[head]]
    if not (0 <= gy < hy and 0 <= gx < hx and 0 <= anchor < node.num_anchors):
        raise ValueError(f"provenance {d.provenance} outside head {head} grid {hy}x{hx}, "
                         f"{node.num_anchors} anchors")
    if target == "objectness":
        channel = anchor * depth + 4
    elif target == "class":
        cid = d.class_id if class_id is None else class_id
        if not 0 <= cid < node.classes:
            raise ValueError(f"class_id {cid} out of range for {node.classes} classes")
        channel = anchor * depth + 5 + cid
    else:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    return NeuronAddress(spec.head_conv(head), channel, gy, gx)
