#!/usr/bin/env python3
# End to end through the command line: write a model and some images,
# run a batch, then re-render the stored maps at dataset scope without
# touching the network again.
import tempfile
from pathlib import Path

from PIL import Image

from yolocam import emit_network_config, read_run, serialize_weights
from yolocam.cli import main
from yolocam.render import to_rgb8
from yolocam.toys import bright_spot_detector, spot_image

work = Path(tempfile.mkdtemp(prefix="yolocam-demo-"))
spec = bright_spot_detector()
(work / "spot.cfg").write_text(emit_network_config(spec))
(work / "spot.weights").write_bytes(serialize_weights(spec))

(work / "images").mkdir()
for name, cells, level in [("one", [(0, 1)], 1.0), ("two", [(2, 2), (3, 0)], 0.8)]:
    Image.fromarray(to_rgb8(spot_image(cells, level))).save(work / "images" / f"{name}.png")

model = ["--model", str(work / "spot.cfg"), "--weights", str(work / "spot.weights")]
main(["batch", str(work / "images"), "-o", str(work / "run"), "--scope", "detection"] + model)

run = read_run(work / "run")
print("global extrema:", run.extrema())
for record in run:
    print(record.record_id, record.map_shape, f"{record.raw_max:.4f}")

main(["renormalize", str(work / "run"), "--scope", "dataset"])
print("PNGs:", *sorted(p.name for p in (work / "run" / "png").glob("*.png")), sep="\n  ")
