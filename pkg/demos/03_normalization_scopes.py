#!/usr/bin/env python3
# The same raw maps look very different depending on which maps share a
# min-max range. A dim spot looks as hot as a bright one until it is
# pooled with it.
import numpy as np

from yolocam import NormalizationScope, detect, explain_detection, normalize_all
from yolocam.toys import bright_spot_detector, spot_image

spec = bright_spot_detector()
images = {"street": spot_image([(0, 0)], 1.0), "poster": spot_image([(2, 2)], 0.6)}

maps, owners = [], []
for name, image in images.items():
    detections, _, cache = detect(spec, image, conf_threshold=0.5)
    for d in detections:
        for m in explain_detection(spec, image, d, cache=cache, target_transform="logit"):
            maps.append(m)
            owners.append(name)

for scope in NormalizationScope:
    peaks = [float(n.max()) for n in normalize_all(maps, scope, owners)]
    row = ", ".join(f"{o}/{m.target_label} {p:.2f}" for o, m, p in zip(owners, maps, peaks))
    print(f"{scope.value:>9}: {row}")

# pooling objectness and class maps separately keeps their scales apart
peaks = [float(n.max()) for n in normalize_all(maps, "dataset", owners, separate_targets=True)]
print("separate targets:", np.round(peaks, 2))
