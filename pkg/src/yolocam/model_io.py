"""Darknet-style network description and weights file support."""
from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import BatchNorm, LayerParams, conv_output_size, maxpool_output_size

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "maxpool", "upsample", "route", "yolo_head")
_SECTION_KIND = {
    "convolutional": "conv",
    "conv": "conv",
    "maxpool": "maxpool",
    "upsample": "upsample",
    "route": "route",
    "yolo": "yolo_head",
}
_ACTIVATIONS = ("leaky", "linear", "logistic")

# Keys understood per section. The second set holds keys that show up in
# stock darknet files but do not affect inference; they are dropped quietly.
_KNOWN = {
    "net": ({"width", "height", "channels"},
            {"batch", "subdivisions", "momentum", "decay", "angle", "saturation", "exposure",
             "hue", "learning_rate", "burn_in", "max_batches", "policy", "steps", "scales"}),
    "conv": ({"batch_normalize", "filters", "size", "stride", "pad", "padding", "activation"}, set()),
    "maxpool": ({"size", "stride"}, set()),
    "upsample": ({"stride"}, set()),
    "route": ({"layers"}, set()),
    "yolo_head": ({"mask", "anchors", "classes", "num"},
                  {"jitter", "ignore_thresh", "truth_thresh", "random"}),
}

HEADER_WORDS = 5
DEFAULT_HEADER = (0, 2, 0, 0, 0)


class ConfigError(ValueError):
    """Malformed network description."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class WeightsError(ValueError):
    """Weights blob does not match the network description."""


@dataclass(frozen=True)
class LayerNode:
    kind: str
    filters: int = 0
    size: int = 1
    stride: int = 1
    pad: int = 0
    activation: str = "linear"
    batchnorm: bool = False
    sources: tuple = ()
    anchors: tuple = ()
    mask: tuple = ()
    classes: int = 0
    params: Optional[LayerParams] = field(default=None, compare=False, repr=False)

    @property
    def num_anchors(self) -> int:
        return len(self.mask)

    @property
    def head_anchors(self) -> tuple:
        """(width, height) pixel anchors used by this head, in mask order."""
        return tuple(self.anchors[m] for m in self.mask)


@dataclass(frozen=True)
class NetworkSpec:
    """Parsed layer graph plus inferred output shapes.

    ``shapes[i]`` is the ``(C, H, W)`` output of layer ``i``. For a conv
    layer the input is always the previous layer (or the image for
    layer 0); routes and heads name their sources explicitly.
    """

    layers: tuple
    shapes: tuple
    input_width: int = 416
    input_height: int = 416
    input_channels: int = 3
    header: tuple = DEFAULT_HEADER

    def __post_init__(self):
        _validate(self)

    @property
    def input_shape(self) -> tuple:
        return (self.input_channels, self.input_height, self.input_width)

    @property
    def head_indices(self) -> list:
        return [i for i, node in enumerate(self.layers) if node.kind == "yolo_head"]

    def inputs_of(self, index: int) -> tuple:
        """Indices feeding layer ``index``; -1 stands for the network input."""
        node = self.layers[index]
        if node.kind in ("route", "yolo_head"):
            return node.sources
        return (index - 1,)

    def shape_of(self, index: int) -> tuple:
        return self.input_shape if index < 0 else self.shapes[index]

    def head_conv(self, head_index: int) -> int:
        """Layer index of the 1x1 output conv feeding head ``head_index`` (0-based)."""
        return self.layers[self.head_indices[head_index]].sources[0]

    def head_node(self, head_index: int) -> LayerNode:
        return self.layers[self.head_indices[head_index]]

    def conv_indices(self) -> list:
        return [i for i, node in enumerate(self.layers) if node.kind == "conv"]

    @property
    def has_weights(self) -> bool:
        return all(self.layers[i].params is not None for i in self.conv_indices())

    def with_params(self, params: dict, header=None) -> "NetworkSpec":
        layers = tuple(
            dataclasses.replace(node, params=params[i]) if i in params else node
            for i, node in enumerate(self.layers)
        )
        return dataclasses.replace(self, layers=layers, header=tuple(header or self.header))


def _infer_shape(spec_input, layers, shapes, i, node, line=None):
    def shape_of(j):
        return spec_input if j < 0 else shapes[j]

    if node.kind == "conv":
        c, h, w = shape_of(i - 1)
        try:
            return (node.filters,
                    conv_output_size(h, node.size, node.stride, node.pad),
                    conv_output_size(w, node.size, node.stride, node.pad))
        except ValueError as exc:
            raise ConfigError(f"layer {i}: {exc}", line) from None
    if node.kind == "maxpool":
        c, h, w = shape_of(i - 1)
        return (c, maxpool_output_size(h, node.size, node.stride),
                maxpool_output_size(w, node.size, node.stride))
    if node.kind == "upsample":
        c, h, w = shape_of(i - 1)
        return (c, 2 * h, 2 * w)
    if node.kind == "route":
        src = [shape_of(j) for j in node.sources]
        if len({s[1:] for s in src}) != 1:
            raise ConfigError(f"layer {i}: route sources disagree on H x W: {src}", line)
        return (sum(s[0] for s in src),) + src[0][1:]
    if node.kind == "yolo_head":
        return shape_of(node.sources[0])
    raise ConfigError(f"layer {i}: unknown kind {node.kind!r}", line)


def _validate(spec: NetworkSpec):
    if len(spec.shapes) != len(spec.layers):
        raise ConfigError("shapes and layers differ in length")
    for i, node in enumerate(spec.layers):
        if node.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unknown kind {node.kind!r}")
        for j in spec.inputs_of(i):
            if not -1 <= j < i or (j == -1 and node.kind in ("route", "yolo_head")):
                raise ConfigError(f"layer {i}: source {j} does not refer to an earlier layer")
        if node.kind == "conv":
            if node.activation not in _ACTIVATIONS:
                raise ConfigError(f"layer {i}: unsupported activation {node.activation!r}")
            if node.params is not None:
                want = (node.filters, spec.shape_of(i - 1)[0], node.size, node.size)
                if node.params.weights.shape != want:
                    raise ConfigError(f"layer {i}: weights shape {node.params.weights.shape} != {want}")
        if node.kind == "yolo_head":
            src = spec.layers[node.sources[0]]
            if src.kind != "conv":
                raise ConfigError(f"layer {i}: yolo head must follow a conv layer")
            if any(a[0] <= 0 or a[1] <= 0 for a in node.anchors):
                raise ConfigError(f"layer {i}: anchors must be positive")
            if not node.mask or any(not 0 <= m < len(node.anchors) for m in node.mask):
                raise ConfigError(f"layer {i}: anchor mask {node.mask} out of range")
            want = node.num_anchors * (5 + node.classes)
            if src.filters != want:
                raise ConfigError(
                    f"layer {i}: head conv has {src.filters} channels, expected "
                    f"{node.num_anchors} x (5 + {node.classes}) = {want}")


def _ints(value: str) -> list:
    return [int(v) for v in value.replace(" ", "").split(",") if v]


def _build_node(kind, opts, index, line):
    def get(key, default, cast=int):
        try:
            return cast(opts[key]) if key in opts else default
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {opts[key]!r}", line) from None

    if kind == "conv":
        size = get("size", 1)
        pad = get("padding", size // 2 if get("pad", 0) else 0)
        return LayerNode("conv", filters=get("filters", 1), size=size, stride=get("stride", 1), pad=pad,
                         activation=get("activation", "logistic", str),
                         batchnorm=bool(get("batch_normalize", 0)))
    if kind == "maxpool":
        return LayerNode("maxpool", size=get("size", 2), stride=get("stride", 2))
    if kind == "upsample":
        if get("stride", 2) != 2:
            raise ConfigError("only 2x upsampling is supported", line)
        return LayerNode("upsample", stride=2)
    if kind == "route":
        if "layers" not in opts:
            raise ConfigError("route without layers", line)
        src = tuple(j + index if j < 0 else j for j in get("layers", [], _ints))
        if not src:
            raise ConfigError("route without layers", line)
        for j in src:
            if not 0 <= j < index:
                raise ConfigError(f"route reference {j} out of range for layer {index}", line)
        return LayerNode("route", sources=src)
    # yolo head
    if index == 0:
        raise ConfigError("yolo section without a preceding conv", line)
    flat = get("anchors", [], lambda v: [float(a) for a in v.replace(" ", "").split(",") if a])
    if len(flat) % 2:
        raise ConfigError("anchors must come in (width, height) pairs", line)
    anchors = tuple(zip(flat[0::2], flat[1::2]))
    num = get("num", len(anchors))
    if num != len(anchors):
        raise ConfigError(f"num={num} but {len(anchors)} anchors given", line)
    mask = tuple(get("mask", list(range(num)), _ints))
    return LayerNode("yolo_head", sources=(index - 1,), anchors=anchors, mask=mask,
                     classes=get("classes", 0))


def parse_network_config(text: str) -> NetworkSpec:
    """Parse a darknet-style ``[section]`` / ``key=value`` document."""
    sections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            name = line[1:-1].strip().lower()
            if name != "net" and name != "network" and name not in _SECTION_KIND:
                raise ConfigError(f"unknown section kind [{name}]", lineno)
            sections.append(("net" if name in ("net", "network") else _SECTION_KIND[name], lineno, {}))
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", lineno)
        if not sections:
            raise ConfigError("key=value before any section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        kind, _, opts = sections[-1]
        used, quiet = _KNOWN[kind]
        if key not in used and key not in quiet:
            logger.warning("line %d: ignoring unknown key %r in [%s]", lineno, key, kind)
        opts[key] = value

    net = {}
    if sections and sections[0][0] == "net":
        net = sections.pop(0)[2]
    for kind, lineno, _ in sections:
        if kind == "net":
            raise ConfigError("[net] must be the first section", lineno)

    def net_int(key, default):
        try:
            return int(net.get(key, default))
        except ValueError:
            raise ConfigError(f"bad [net] value for {key!r}: {net[key]!r}") from None

    in_shape = (net_int("channels", 3), net_int("height", 416), net_int("width", 416))
    layers, shapes = [], []
    for index, (kind, lineno, opts) in enumerate(sections):
        if kind == "yolo_head" and (index == 0 or layers[-1].kind != "conv"):
            raise ConfigError("yolo section without a preceding conv", lineno)
        node = _build_node(kind, opts, index, lineno)
        layers.append(node)
        shapes.append(_infer_shape(in_shape, layers, shapes, index, node, lineno))
    return NetworkSpec(tuple(layers), tuple(shapes), input_width=in_shape[2],
                       input_height=in_shape[1], input_channels=in_shape[0])


def emit_network_config(spec: NetworkSpec) -> str:
    """Canonical text form; ``parse_network_config`` inverts it exactly."""
    out = ["[net]", f"width={spec.input_width}", f"height={spec.input_height}",
           f"channels={spec.input_channels}", ""]
    for i, node in enumerate(spec.layers):
        if node.kind == "conv":
            out += ["[convolutional]", f"batch_normalize={int(node.batchnorm)}", f"filters={node.filters}",
                    f"size={node.size}", f"stride={node.stride}", f"padding={node.pad}",
                    f"activation={node.activation}"]
        elif node.kind == "maxpool":
            out += ["[maxpool]", f"size={node.size}", f"stride={node.stride}"]
        elif node.kind == "upsample":
            out += ["[upsample]", "stride=2"]
        elif node.kind == "route":
            out += ["[route]", "layers=" + ",".join(str(j) for j in node.sources)]
        else:
            anchors = ",".join(f"{w!r},{h!r}" for w, h in node.anchors)
            out += ["[yolo]", "mask=" + ",".join(map(str, node.mask)), f"anchors={anchors}",
                    f"classes={node.classes}", f"num={len(node.anchors)}"]
        out.append("")
    return "\n".join(out)


def reference_config_text() -> str:
    """The bundled five-class Tiny YOLO v3 description."""
    return resources.files("yolocam").joinpath("data/yolov3-tiny-5cls.cfg").read_text()


def load_network_config(path) -> NetworkSpec:
    return parse_network_config(Path(path).read_text())


def _conv_layout(spec: NetworkSpec):
    """(layer index, out channels, weight shape, batchnorm) for every conv, in file order."""
    for i in spec.conv_indices():
        node = spec.layers[i]
        cin = spec.shape_of(i - 1)[0]
        yield i, node.filters, (node.filters, cin, node.size, node.size), node.batchnorm


def count_parameters(spec: NetworkSpec) -> int:
    """Number of float32 values in the weights body (bias, batchnorm vectors, kernels)."""
    total = 0
    for _, n, wshape, bn in _conv_layout(spec):
        total += n * (4 if bn else 1) + int(np.prod(wshape))
    return total


def load_weights(blob: bytes, spec: NetworkSpec) -> NetworkSpec:
    """Populate every conv layer's parameters from a darknet weights blob."""
    header_bytes = 4 * HEADER_WORDS
    if len(blob) < header_bytes:
        raise WeightsError(f"weights blob has {len(blob)} bytes, shorter than the {header_bytes}-byte header")
    header = struct.unpack(f"<{HEADER_WORDS}i", blob[:header_bytes])
    body = blob[header_bytes:]
    expected = count_parameters(spec)
    if len(body) % 4 or len(body) // 4 != expected:
        raise WeightsError(
            f"weights body holds {len(body) / 4:g} floats, expected {expected} for this network")
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise WeightsError(f"non-finite weight value at float offset {bad}")

    params, pos = {}, 0

    def take(n):
        nonlocal pos
        chunk = values[pos:pos + n]
        pos += n
        return chunk.copy()

    for i, n, wshape, bn in _conv_layout(spec):
        bias = take(n)
        if bn:
            scale, mean, var = take(n), take(n), take(n)
            if np.any(var < 0):
                raise WeightsError(f"layer {i}: negative running variance")
            norm = BatchNorm(scale=scale, shift=bias, mean=mean, var=var)
            p = LayerParams(take(int(np.prod(wshape))).reshape(wshape), np.zeros(n, np.float32), norm)
        else:
            p = LayerParams(take(int(np.prod(wshape))).reshape(wshape), bias)
        params[i] = p
    return spec.with_params(params, header)


def serialize_weights(spec: NetworkSpec) -> bytes:
    """Inverse of :func:`load_weights`."""
    if not spec.has_weights:
        raise WeightsError("network has conv layers without parameters")
    chunks = [struct.pack(f"<{HEADER_WORDS}i", *spec.header)]
    for i, n, wshape, bn in _conv_layout(spec):
        p = spec.layers[i].params
        if bn != (p.batchnorm is not None):
            raise WeightsError(f"layer {i}: batchnorm flag disagrees with parameters")
        parts = [p.batchnorm.shift, p.batchnorm.scale, p.batchnorm.mean, p.batchnorm.var] if bn else [p.bias]
        parts.append(p.weights.reshape(-1))
        chunks.extend(np.asarray(a, dtype="<f4").tobytes() for a in parts)
    return b"".join(chunks)


def load_model(cfg_path, weights_path) -> NetworkSpec:
    spec = load_network_config(cfg_path)
    return load_weights(Path(weights_path).read_bytes(), spec)


def random_params(spec: NetworkSpec, rng: np.random.Generator, scale: float = 1.0) -> NetworkSpec:
    """Fill every conv with fan-in scaled random weights (for tests and benchmarks)."""
    params = {}
    for i, n, wshape, bn in _conv_layout(spec):
        fan_in = int(np.prod(wshape[1:]))
        w = (rng.standard_normal(wshape) * scale / np.sqrt(fan_in)).astype(np.float32)
        if bn:
            norm = BatchNorm(
                scale=rng.uniform(0.5, 1.5, n).astype(np.float32),
                shift=(0.1 * rng.standard_normal(n)).astype(np.float32),
                mean=(0.1 * rng.standard_normal(n)).astype(np.float32),
                var=rng.uniform(0.5, 1.5, n).astype(np.float32),
            )
            params[i] = LayerParams(w, np.zeros(n, np.float32), norm)
        else:
            params[i] = LayerParams(w, (0.1 * rng.standard_normal(n)).astype(np.float32))
    return spec.with_params(params)
