"""Acceptance criteria, one test each.

Each test carries an ``acceptance`` marker; a summary section at the end
of the pytest run prints one PASS/FAIL line per criterion together with
the measured numbers. Run alone with ``pytest tests/test_acceptance.py``.
"""
import json
import time
from contextlib import nullcontext

import numpy as np
import pytest
from PIL import Image

from gradcheck import check
from oracles import brute_nms, closed_form_cam, random_candidates
from yolocam.cli import main
from yolocam.detector import _layer_forward, backpropagate, decode, forward, locate_target_neuron, nms
from yolocam.gradcam import compute_cam, explain_detection, select_target_layer
from yolocam.model_io import (emit_network_config, parse_network_config, random_params,
                              reference_config_text, serialize_weights)
from yolocam.normalize import MapGroup, NormalizationScope, normalize, normalize_all, regroup
from yolocam.persistence import read_run
from yolocam.pipeline import ExplainSettings, explain_image, load_image
from yolocam.render import to_rgb8
from yolocam.tensor import LayerParams, sigmoid
from yolocam.toys import bright_spot_detector, one_by_one_head, random_graph, random_mini_tiny, spot_image

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # optional; without it BLAS may use several threads
    threadpool_limits = None


@pytest.mark.acceptance(1, "gradient fidelity on random networks")
def test_gradient_fidelity(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    n_nets = n_entries = n_excused = n_kernels = 0
    failures = []
    while n_nets < 100:
        spec = random_graph(rng)
        x = rng.standard_normal(spec.input_shape)
        _, cache = forward(spec, x, dtype=np.float64)
        last = len(spec.layers) - 1
        r = rng.standard_normal(cache.outputs[last].shape)

        # network level: d sum(r * output) / d image
        def f(v):
            return float(np.sum(r * forward(spec, v, dtype=np.float64)[1].outputs[last]))

        n, ex, ok = check(f, x, backpropagate(spec, cache, {last: r}, -1))
        n_entries, n_excused = n_entries + n, n_excused + ex
        if not ok:
            failures.append(f"net {n_nets} to input")

        # kernel level: each layer's backward against each of its inputs. Upsample and
        # overlapping pools leave exact ties, where max has no derivative, so each kernel
        # is checked at a jittered copy of its cached inputs.
        for i, node in enumerate(spec.layers):
            srcs = [cache.output(j) + 1e-2 * rng.standard_normal(cache.output(j).shape)
                    for j in spec.inputs_of(i)]
            out, backward = _layer_forward(spec, i, srcs)
            ri = rng.standard_normal(out.shape)
            grads = backward(ri)
            for pos, src in enumerate(srcs):
                def g(v, pos=pos):
                    s = list(srcs)
                    s[pos] = v
                    return float(np.sum(ri * _layer_forward(spec, i, s)[0]))

                n, ex, ok = check(g, src, grads[pos])
                n_kernels += 1
                n_entries, n_excused = n_entries + n, n_excused + ex
                if not ok:
                    failures.append(f"net {n_nets} layer {i} ({node.kind})")
        n_nets += 1
    elapsed = time.perf_counter() - start
    report(f"{n_nets} networks, {n_kernels} kernel checks, {n_entries} entries, "
           f"{n_excused} kink re-tests, {elapsed:.1f} s")
    assert not failures, failures[:5]
    assert elapsed < 60


@pytest.mark.acceptance(2, "closed-form Grad-CAM oracle")
def test_closed_form_oracle(report):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        channels, size, classes = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        spec = one_by_one_head(rng, channels, size, classes)
        heads, cache = forward(spec, rng.standard_normal((channels, size, size)))
        for d in decode(spec, heads):
            for target in ("objectness", "class"):
                n = locate_target_neuron(d, target, spec)
                cam = compute_cam(spec, cache, n, 0)
                worst = max(worst, float(np.abs(cam.values - closed_form_cam(spec, cache, n, 0)).max()))
    report(f"max abs error {worst:.2e} over 50 parameterizations")
    assert worst <= 1e-6


@pytest.mark.acceptance(3, "NMS equals brute-force reference")
def test_nms_equivalence(report):
    rng = np.random.default_rng(303)
    mismatches = 0
    for k in range(1000):
        cands = random_candidates(rng, int(rng.integers(0, 21)), 2, tie_levels=4 if k % 4 == 0 else None)
        conf_t, iou_t = float(rng.uniform(0, 0.6)), float(rng.uniform(0.1, 0.9))
        got = {next(j for j, c in enumerate(cands) if c is d) for d in nms(cands, conf_t, iou_t)}
        mismatches += got != brute_nms(cands, conf_t, iou_t)
    report(f"{mismatches} mismatches over 1000 sets")
    assert mismatches == 0


@pytest.mark.acceptance(4, "neuron consistency with decoded scores")
def test_neuron_consistency(report):
    rng = np.random.default_rng(404)
    worst, count = 0.0, 0
    for _ in range(10):
        spec = random_mini_tiny(rng, classes=int(rng.integers(1, 6)), scale=float(rng.uniform(0.5, 2)))
        heads, cache = forward(spec, rng.random((3, 32, 32)))
        for d in decode(spec, heads):
            for target, score in (("objectness", d.objectness), ("class", d.class_prob)):
                n = locate_target_neuron(d, target, spec)
                z = float(cache.outputs[n.layer_index][n.channel, n.grid_y, n.grid_x])
                worst = max(worst, abs(float(sigmoid(z)) - score))
                count += 1
    report(f"{count} scores, max deviation {worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.acceptance(5, "normalization scope laws")
def test_normalization_scope_laws(report):
    rng = np.random.default_rng(505)

    class M:
        def __init__(self, values):
            self.values = values.astype(np.float32)
            self.raw_min, self.raw_max = float(self.values.min()), float(self.values.max())

    def collection(zero_floor):
        maps, imgs = [], []
        for _ in range(int(rng.integers(1, 9))):
            v = rng.random((int(rng.integers(1, 5)), int(rng.integers(1, 5)))) * rng.uniform(0, 10)
            if rng.random() < 0.15:
                v[:] = v.flat[0]  # constant map
            if zero_floor:
                v.flat[0] = 0.0
            maps.append(M(v))
            imgs.append(int(rng.integers(0, 3)))
        return maps, imgs

    groups = degenerate = 0
    for _ in range(500):
        maps, imgs = collection(zero_floor=False)
        for scope in NormalizationScope:
            for g in regroup(maps, scope, imgs):
                out = np.concatenate([o.ravel() for o in normalize(g)])
                groups += 1
                assert out.min() >= 0 and out.max() <= 1
                if g.group_max > g.group_min:
                    assert out.min() == 0 and out.max() == 1
                else:
                    degenerate += 1
                    assert not out.any()

    # monotonicity holds exactly when every map shares the floor 0, the post-ReLU norm
    checked = 0
    for _ in range(500):
        maps, imgs = collection(zero_floor=True)
        peaks = {s: [float(n.max()) for n in normalize_all(maps, s, imgs)] for s in NormalizationScope}
        for k in range(len(maps)):
            assert (peaks[NormalizationScope.DETECTION][k] >= peaks[NormalizationScope.IMAGE][k]
                    >= peaks[NormalizationScope.DATASET][k])
            checked += 1
    report(f"{groups} groups ({degenerate} constant), monotonicity on {checked} zero-floored maps; "
           "min-max over a group with a lower floor can raise a peak, so maps with a positive "
           "minimum are excluded from the monotonicity law")


@pytest.mark.acceptance(6, "scalar invariance of logit vs sigmoid at detection scope")
def test_scalar_invariance(report):
    rng = np.random.default_rng(606)
    worst, count = 0.0, 0
    for _ in range(5):
        spec = random_mini_tiny(rng, classes=3)
        img = rng.random((3, 32, 32))
        heads, cache = forward(spec, img)
        for d in decode(spec, heads)[::5]:
            layer = select_target_layer(spec, d.provenance.head_index)
            for target in ("objectness", "class"):
                n = locate_target_neuron(d, target, spec)
                for mode in ("classic", "elementwise"):
                    a, b = (normalize(MapGroup((compute_cam(spec, cache, n, layer, t, mode),),
                                               NormalizationScope.DETECTION))[0]
                            for t in ("sigmoid", "logit"))
                    worst = max(worst, float(np.abs(a - b).max()))
                    count += 1
    report(f"{count} map pairs, max difference {worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.acceptance(7, "global support beyond the detection box")
def test_global_support(report):
    rng = np.random.default_rng(707)
    spec = one_by_one_head(rng, channels=3, size=8, classes=2)
    head = spec.layers[1].params
    spec = spec.with_params({1: LayerParams(np.abs(head.weights), head.bias)})
    img = np.full((3, 8, 8), 0.7)
    heads, cache = forward(spec, img)
    d = next(c for c in decode(spec, heads) if c.provenance[1:3] == (1, 1))
    x0, y0, x1, y1 = d.box
    ys, xs = np.mgrid[0:8, 0:8] + 0.5  # cell centres, stride 1
    outside = (xs < x0) | (xs > x1) | (ys < y0) | (ys > y1)
    for m in explain_detection(spec, img, d, cache=cache):
        assert outside.sum() > 0
        assert m.raw_max == m.raw_min > 0
        assert (m.values[outside] > 0).all()
    report(f"{int(outside.sum())} of 64 cells outside the box, map uniform and positive")


@pytest.mark.acceptance(8, "batch round trip and byte-identical re-rendering")
def test_round_trip(tmp_path, report):
    spec = bright_spot_detector()
    cfg, weights = tmp_path / "spot.cfg", tmp_path / "spot.weights"
    cfg.write_text(emit_network_config(spec))
    weights.write_bytes(serialize_weights(spec))
    images = {"a": [(0, 0), (2, 3)], "b": [(1, 1)], "c": [(3, 0), (0, 3), (3, 3)]}
    (tmp_path / "imgs").mkdir()
    for name, cells in images.items():
        Image.fromarray(to_rgb8(spot_image(cells))).save(tmp_path / "imgs" / f"{name}.png")
    run = tmp_path / "run"
    assert main(["batch", str(tmp_path / "imgs"), "-o", str(run), "--model", str(cfg),
                 "--weights", str(weights)]) == 0

    records = list(read_run(run))
    assert len(records) == 2 * sum(len(c) for c in images.values())
    for name in images:
        path = tmp_path / "imgs" / f"{name}.png"
        fresh = explain_image(spec, load_image(path, 32, 32), name, ExplainSettings(), str(path.resolve()))
        stored = [r for r in records if r.image_id == name]
        assert [r.record_id for r in stored] == [r.record_id for r in fresh.records]
        for a, b in zip(stored, fresh.records):
            assert a.payload.tobytes() == b.payload.tobytes()
            assert a.metadata() == json.loads(json.dumps(b.metadata()))

    batch_pngs = {p.name: p.read_bytes() for p in (run / "png").glob("*.png")}
    assert main(["renormalize", str(run), "--scope", "detection", "-o", str(tmp_path / "again")]) == 0
    again = {p.name: p.read_bytes() for p in (tmp_path / "again").glob("*.png")}
    assert again == batch_pngs and len(again) == len(records)
    report(f"{len(records)} records bit-exact, {len(again)} PNGs byte-identical")


@pytest.mark.acceptance(9, "performance of one explanation at 416x416 (soft, <= 2.0 s)")
def test_performance(report):
    rng = np.random.default_rng(909)
    spec = random_params(parse_network_config(reference_config_text()), rng)
    img = rng.random((3, 416, 416)).astype(np.float32)
    limit = threadpool_limits(limits=1) if threadpool_limits else nullcontext()
    times = []
    with limit:
        forward(spec, img)  # warm-up
        for _ in range(3):
            start = time.perf_counter()
            heads, cache = forward(spec, img)
            d = max(decode(spec, heads), key=lambda c: c.confidence)
            n = locate_target_neuron(d, "objectness", spec)
            compute_cam(spec, cache, n, select_target_layer(spec, d.provenance.head_index))
            times.append(time.perf_counter() - start)
    best, median = min(times), float(np.median(times))
    report(f"median {median:.3f} s, best {best:.3f} s, "
           f"{'single BLAS thread' if threadpool_limits else 'BLAS threads not pinned'}")
    assert median <= 2.0


@pytest.mark.acceptance(10, "reference head topology")
def test_topology(report):
    spec = parse_network_config(reference_config_text())
    found = []
    for h, cin in ((0, 512), (1, 256)):
        node = spec.layers[spec.head_conv(h)]
        shape = node.params.weights.shape if node.params is not None else None
        assert node.size == 1 and node.filters == 3 * (5 + 5) == 30
        assert spec.shape_of(spec.head_conv(h) - 1)[0] == cin
        assert shape is None or shape == (30, cin, 1, 1)
        found.append(f"head {h + 1}: {cin}->{node.filters} 1x1")
    assert spec.shapes[spec.head_indices[0]] == (30, 13, 13)
    assert spec.shapes[spec.head_indices[1]] == (30, 26, 26)
    report(", ".join(found))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
