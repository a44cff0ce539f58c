"""Small synthetic detectors for tests, demos and sanity checks.

No trained weights ship with the package; these networks have the same
layer vocabulary and head layout as Tiny YOLO v3 at toy sizes.
"""
from __future__ import annotations

import numpy as np

from .model_io import NetworkSpec, parse_network_config, random_params
from .tensor import LayerParams, conv_output_size

CLASS_NAMES = ("person", "cycle", "car", "truck", "train")

# Two heads, same wiring as the reference network: a 16-channel head 1
# feature map at 4x4 and an 8-channel head 2 map at 8x8.
MINI_TINY_CFG = """\
[net]
width=32
height=32
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
batch_normalize=1
filters=8
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[convolutional]
batch_normalize=1
filters=16
size=3
stride=1
pad=1
activation=leaky

[convolutional]
size=1
stride=1
filters={filters}
activation=linear

[yolo]
mask=2,3
anchors=4,6, 8,8, 12,10, 20,24
classes={classes}
num=4

[route]
layers=-3

[convolutional]
batch_normalize=1
filters=8
size=1
stride=1
activation=leaky

[upsample]
stride=2

[route]
layers=-1,3

[convolutional]
batch_normalize=1
filters=8
size=3
stride=1
pad=1
activation=leaky

[convolutional]
size=1
stride=1
filters={filters}
activation=linear

[yolo]
mask=0,1
anchors=4,6, 8,8, 12,10, 20,24
classes={classes}
num=4
"""


def mini_tiny_spec(classes: int = 2) -> NetworkSpec:
    return parse_network_config(MINI_TINY_CFG.format(classes=classes, filters=2 * (5 + classes)))


def random_mini_tiny(rng: np.random.Generator, classes: int = 2, scale: float = 1.0) -> NetworkSpec:
    return random_params(mini_tiny_spec(classes), rng, scale)


ONE_BY_ONE_CFG = """\
[net]
width={size}
height={size}
channels={channels}

[convolutional]
filters={channels}
size=1
stride=1
activation=linear

[convolutional]
filters={filters}
size=1
stride=1
activation=linear

[yolo]
mask=0
anchors=3,3
classes={classes}
num=1
"""


def one_by_one_head(rng: np.random.Generator, channels: int = 2, size: int = 2, classes: int = 2) -> NetworkSpec:
    """Identity 1x1 conv (so the target activation equals the image) feeding a random 1x1 head conv."""
    spec = parse_network_config(ONE_BY_ONE_CFG.format(size=size, channels=channels,
                                                      filters=5 + classes, classes=classes))
    eye = np.eye(channels, dtype=np.float32)[:, :, None, None]
    head = LayerParams(rng.standard_normal((5 + classes, channels, 1, 1)).astype(np.float32),
                       rng.standard_normal(5 + classes).astype(np.float32))
    return spec.with_params({0: LayerParams(eye, np.zeros(channels, np.float32)), 1: head})


BRIGHT_SPOT_CFG = """\
[net]
width=32
height=32
channels=3

[convolutional]
filters=1
size=1
stride=1
activation=linear

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[maxpool]
size=2
stride=2

[convolutional]
filters=2
size=1
stride=1
activation=leaky

[convolutional]
filters={filters}
size=1
stride=1
activation=linear

[yolo]
mask=0
anchors=6,6
classes={classes}
num=1
"""


def bright_spot_detector(classes: int = 5, zero: bool = False) -> NetworkSpec:
    """Fires one detection (class 0) per 8x8 grid cell whose brightness is high.

    Layer 0 averages RGB, three pools reduce 32x32 to a 4x4 grid of cell
    maxima, layer 4 is the Grad-CAM target (2 channels) and layer 5 the
    head. Objectness logit is ``10 * brightness - 5``; the class-0 logit
    is ``4 * brightness + 2``, every other class sits at -6. Anchor 6x6
    keeps boxes of neighbouring cells disjoint. ``zero`` gives all-zero
    parameters, which never clear the default threshold.
    """
    depth = 5 + classes
    spec = parse_network_config(BRIGHT_SPOT_CFG.format(filters=depth, classes=classes))
    f32 = np.float32
    gray = LayerParams(np.full((1, 3, 1, 1), 1 / 3, f32), np.zeros(1, f32))
    feat = LayerParams(np.array([1.0, 0.5], f32).reshape(2, 1, 1, 1), np.zeros(2, f32))
    w = np.zeros((depth, 2, 1, 1), f32)
    b = np.zeros(depth, f32)
    w[4, 0] = 10.0
    b[4] = -5.0
    w[5, 1] = 8.0
    b[5] = 2.0
    b[6:] = -6.0
    params = {0: gray, 4: feat, 5: LayerParams(w, b)}
    if zero:
        params = {i: LayerParams(np.zeros_like(p.weights), np.zeros_like(p.bias)) for i, p in params.items()}
    return spec.with_params(params)


def spot_image(cells, brightness=1.0, size: int = 32, cell: int = 8) -> np.ndarray:
    """Black ``3 x size x size`` image with bright ``cell``-sized squares at (row, col) grid cells.

    ``brightness`` may be a scalar or one value per cell.
    """
    img = np.zeros((3, size, size), np.float32)
    levels = np.broadcast_to(np.asarray(brightness, dtype=np.float32), (len(cells),))
    for (r, c), v in zip(cells, levels):
        img[:, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = v
    return img


def random_graph_config(rng: np.random.Generator, max_layers: int = 5) -> str:
    """Random darknet description with 2..max_layers layers and input <= 3 x 16 x 16.

    Draws from conv (1x1 / 3x3, stride 1 / 2, optional batchnorm, any
    supported activation), maxpool, 2x upsample and route; no heads.
    """
    while True:
        c = int(rng.integers(1, 4))
        h = w = int(rng.choice([4, 5, 6, 7, 8]))
        n_layers = int(rng.integers(2, max_layers + 1))
        shapes, lines = [], [f"[net]\nwidth={w}\nheight={h}\nchannels={c}\n"]
        cur = (c, h, w)
        ok = True
        for i in range(n_layers):
            kinds = ["conv", "conv", "maxpool", "route"]
            if cur[1] <= 8:
                kinds.append("upsample")
            kind = rng.choice(kinds) if i else "conv"
            if kind == "conv":
                size = int(rng.choice([1, 3]))
                stride = int(rng.choice([1, 1, 2]))
                pad = size // 2
                try:
                    ho = conv_output_size(cur[1], size, stride, pad)
                    wo = conv_output_size(cur[2], size, stride, pad)
                except ValueError:
                    stride = 1
                    ho, wo = cur[1] + 2 * pad - size + 1, cur[2] + 2 * pad - size + 1
                filters = int(rng.integers(1, 5))
                act = rng.choice(["leaky", "linear", "logistic"])
                bn = int(rng.integers(0, 2))
                lines.append(f"[convolutional]\nbatch_normalize={bn}\nfilters={filters}\nsize={size}\n"
                             f"stride={stride}\npadding={pad}\nactivation={act}\n")
                cur = (filters, ho, wo)
            elif kind == "maxpool":
                size, stride = [(2, 2), (2, 1), (3, 2), (3, 1)][int(rng.integers(0, 4))]
                lines.append(f"[maxpool]\nsize={size}\nstride={stride}\n")
                cur = (cur[0], (cur[1] - 1) // stride + 1, (cur[2] - 1) // stride + 1)
            elif kind == "upsample":
                lines.append("[upsample]\nstride=2\n")
                cur = (cur[0], 2 * cur[1], 2 * cur[2])
            else:
                partners = [j for j in range(i - 1) if shapes[j][1:] == cur[1:]]
                if partners:
                    j = int(rng.choice(partners))
                    lines.append(f"[route]\nlayers=-1,{j}\n")
                    cur = (cur[0] + shapes[j][0],) + cur[1:]
                else:
                    lines.append("[route]\nlayers=-1\n")
            shapes.append(cur)
            if cur[0] * cur[1] * cur[2] > 3 * 32 * 32:
                ok = False
                break
        if ok:
            return "\n".join(lines)


def random_graph(rng: np.random.Generator, max_layers: int = 5) -> NetworkSpec:
    return random_params(parse_network_config(random_graph_config(rng, max_layers)), rng)
