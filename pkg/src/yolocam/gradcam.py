"""Grad-CAM maps for the objectness and class neurons of a detection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .detector import (TARGETS, ActivationCache, Detection, NeuronAddress, ancestors,
                       backpropagate, forward, locate_target_neuron)
from .model_io import NetworkSpec
from .tensor import sigmoid_grad

CAM_MODES = ("classic", "elementwise")
TRANSFORMS = ("sigmoid", "logit")


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Raw (unnormalized, non-negative) map at target-layer resolution."""

    values: np.ndarray
    target: str
    neuron: NeuronAddress
    target_layer: int
    class_id: Optional[int] = None
    detection_ref: str = ""
    raw_min: float = field(init=False)
    raw_max: float = field(init=False)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"attribution values must be h x w, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("attribution values must be non-negative")
        object.__setattr__(self, "raw_min", float(self.values.min()))
        object.__setattr__(self, "raw_max", float(self.values.max()))

    @property
    def target_label(self) -> str:
        return "objectness" if self.target == "objectness" else f"class{self.class_id}"


def _conv_ancestor(spec: NetworkSpec, index: int) -> int:
    j = index
    while j >= 0 and spec.layers[j].kind != "conv":
        srcs = spec.inputs_of(j)
        if len(srcs) != 1:
            raise ValueError(f"no single conv layer feeds layer {index}; pass an explicit target layer")
        j = srcs[0]
    if j < 0:
        raise ValueError(f"no conv layer feeds layer {index}")
    return j


def select_target_layer(spec: NetworkSpec, head_index: int, override: Optional[int] = None) -> int:
    """Feature map to explain against for head ``head_index``.

    Defaults to the conv directly feeding the head's 1x1 output conv.
    """
    head_conv = spec.head_conv(head_index)
    if override is None:
        return _conv_ancestor(spec, spec.inputs_of(head_conv)[0])
    if not 0 <= override < len(spec.layers) or spec.layers[override].kind != "conv":
        raise ValueError(f"target layer {override} is not a conv layer")
    if override not in ancestors(spec, head_conv):
        raise ValueError(f"target layer {override} is not on the forward path of head {head_index}")
    return override


def compute_cam(spec: NetworkSpec, cache: ActivationCache, neuron: NeuronAddress, target_layer: int,
                target_transform: str = "sigmoid", mode: str = "classic", *,
                target: str = "objectness", class_id: Optional[int] = None,
                detection_ref: str = "") -> AttributionMap:
    """Grad-CAM of one output neuron against ``target_layer``'s activations.

    ``classic`` weights each channel by its spatially averaged gradient;
    ``elementwise`` multiplies gradient and activation per position.
    Either way the channels are averaged and the result rectified.
    """
    if target_transform not in TRANSFORMS:
        raise ValueError(f"target_transform must be one of {TRANSFORMS}, got {target_transform!r}")
    if mode not in CAM_MODES:
        raise ValueError(f"cam mode must be one of {CAM_MODES}, got {mode!r}")
    if target_layer not in ancestors(spec, neuron.layer_index):
        raise ValueError(f"neuron layer {neuron.layer_index} is not downstream of layer {target_layer}")

    out = cache.outputs[neuron.layer_index]
    z = out[neuron.channel, neuron.grid_y, neuron.grid_x]
    seed = np.zeros_like(out)
    seed[neuron.channel, neuron.grid_y, neuron.grid_x] = sigmoid_grad(z) if target_transform == "sigmoid" else 1
    grad = backpropagate(spec, cache, {neuron.layer_index: seed}, target_layer).astype(np.float64)
    act = cache.outputs[target_layer].astype(np.float64)
    if mode == "classic":
        weights = grad.mean(axis=(1, 2))
        cam = np.tensordot(weights, act, axes=1) / act.shape[0]
    else:
        cam = (grad * act).mean(axis=0)
    cam = np.maximum(cam, 0).astype(np.float32)
    if target == "class" and class_id is None:
        class_id = _class_of_channel(spec, neuron)
    return AttributionMap(cam, target, neuron, target_layer,
                          class_id=None if target == "objectness" else class_id,
                          detection_ref=detection_ref)


def _class_of_channel(spec: NetworkSpec, neuron: NeuronAddress) -> int:
    for h in range(len(spec.head_indices)):
        if spec.head_conv(h) == neuron.layer_index:
            return neuron.channel % (5 + spec.head_node(h).classes) - 5
    raise ValueError(f"layer {neuron.layer_index} is not a head output conv")


def explain_detection(spec: NetworkSpec, image, d: Detection, targets: Iterable[str] = TARGETS, *,
                      cache: Optional[ActivationCache] = None, target_layer: Optional[int] = None,
                      target_transform: str = "sigmoid", mode: str = "classic",
                      class_id: Optional[int] = None, detection_ref: str = "") -> list:
    """One map per requested target, sharing a single forward pass."""
    wanted = set(targets)
    unknown = wanted - set(TARGETS)
    if unknown:
        raise ValueError(f"unknown targets {sorted(unknown)}; choose from {TARGETS}")
    if not wanted:
        return []
    if cache is None:
        _, cache = forward(spec, image)
    layer = select_target_layer(spec, d.provenance.head_index, target_layer)
    maps = []
    for t in TARGETS:
        if t not in wanted:
            continue
        neuron = locate_target_neuron(d, t, spec, class_id)
        cid = None if t == "objectness" else (d.class_id if class_id is None else class_id)
        maps.append(compute_cam(spec, cache, neuron, layer, target_transform, mode,
                                target=t, class_id=cid, detection_ref=detection_ref))
    return maps
