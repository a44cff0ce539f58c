#!/usr/bin/env python3
# A hand-built detector that fires on bright 8x8 squares. Its Grad-CAM
# maps can be checked by eye.
import numpy as np

from yolocam import detect, explain_detection
from yolocam.toys import bright_spot_detector, spot_image

spec = bright_spot_detector()
image = spot_image([(1, 2), (3, 0)], brightness=[1.0, 0.7])
detections, heads, cache = detect(spec, image)

np.set_printoptions(precision=3, suppress=True)
for k, d in enumerate(detections):
    print(f"detection {k}: cell {d.provenance[1:3]}, objectness {d.objectness:.3f}")
    for m in explain_detection(spec, image, d, cache=cache):
        print(f"  {m.target_label} map (layer {m.target_layer}, neuron channel {m.neuron.channel}):")
        print(m.values)

# With the logit the seed no longer depends on how saturated the neuron is
d = detections[0]
sig, = explain_detection(spec, image, d, {"objectness"}, cache=cache)
logit, = explain_detection(spec, image, d, {"objectness"}, cache=cache, target_transform="logit")
print("sigmoid / logit peak ratio:", sig.raw_max / logit.raw_max)

# elementwise mode keeps the gradient's spatial layout
ew, = explain_detection(spec, image, d, {"objectness"}, cache=cache, mode="elementwise")
print("elementwise map:")
print(ew.values)
