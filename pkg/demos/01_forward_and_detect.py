#!/usr/bin/env python3
# Parse the bundled Tiny YOLO v3 description, fill it with random weights
# and look at what comes out of the two heads.
import time

import numpy as np

from yolocam import count_parameters, decode, forward, nms, parse_network_config, random_params, reference_config_text

spec = parse_network_config(reference_config_text())
print(len(spec.layers), "layers,", count_parameters(spec), "parameters")
for h in range(len(spec.head_indices)):
    conv = spec.head_conv(h)
    print(f"head {h + 1}: conv {conv} reads {spec.shape_of(conv - 1)}, writes {spec.shapes[conv]}")

rng = np.random.default_rng(0)
spec = random_params(spec, rng)
image = rng.random(spec.input_shape, dtype=np.float32)

start = time.perf_counter()
heads, cache = forward(spec, image)
print(f"forward pass: {time.perf_counter() - start:.2f} s")

# every anchor of every cell is a candidate; NMS keeps the provenance
candidates = decode(spec, heads)
print(len(candidates), "candidates")
kept = nms(candidates, conf_threshold=0.3, iou_threshold=0.45)
for d in kept[:5]:
    print(f"conf {d.confidence:.3f} class {d.class_id} box {np.round(d.box, 1)} from {d.provenance}")
