"""Compare the compiled and pure-numpy kernel backends.

Two suites:

* micro  -- individual kernels at model-scale shapes (a ~10 node graph
  with hidden width 64), best-of-k timing per backend.
* step   -- one full training step on a synthetic scene: graph build,
  propagation, readouts, multitask loss, backward pass and an Adam
  update. This is the unit of work the training loop repeats.

Usage::

    python3 benchmarks/bench_kernels.py            # both suites
    python3 benchmarks/bench_kernels.py --suite micro --repeats 7

The compiled backend is skipped (with a note) when the extension was
not built. BEVGRAPH_KERNELS is ignored here; backends are selected
explicitly so both get measured in one process.
"""

import argparse
import time

import numpy as np

from bevgraph import autodiff as ad
from bevgraph.autodiff import kernels
from bevgraph.graph import build_graph
from bevgraph.losses import (LossWeights, encode_orientation_targets,
                             focal_loss, multitask_total, orientation_loss,
                             smooth_l1_loss)
from bevgraph.propagation import (PropagationConfig, build_parameters,
                                  propagate, readout_early_heads,
                                  readout_localization)
from bevgraph.sim import (SimConfig, make_detections, sample_scene,
                          scene_rng, scene_targets)


def best_of(fn, repeats, loops):
    """Best average seconds per call over `repeats` timed batches."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        best = min(best, (time.perf_counter() - t0) / loops)
    return best


def micro_cases(rng):
    """Representative kernel invocations at graph-model shapes."""
    n, e, hidden = 10, 15, 64
    x = rng.standard_normal((n, hidden + 4))
    w = rng.standard_normal((hidden + 4, hidden))
    h = rng.standard_normal((n, hidden))
    g = rng.standard_normal((n, hidden))
    scores = rng.standard_normal((n, n))
    mask = (rng.random((n, n)) < 0.5).astype(np.float64)
    np.fill_diagonal(mask, 0.0)
    rows = rng.integers(0, n, size=e).astype(np.intp)
    cols = (rows + 1 + rng.integers(0, n - 1, size=e)).astype(np.intp) % n
    edge_vals = rng.standard_normal((e, 1))
    edge_feats = rng.standard_normal((e, hidden))
    edge_grad = rng.standard_normal((e, hidden))
    return [
        ("matmul (10x68)@(68x64)", lambda: kernels.matmul(x, w)),
        ("matmul bwd wrt weights", lambda: kernels.matmul_bwd_b(x, g)),
        ("leaky_relu fwd+bwd", lambda: kernels.leaky_relu_bwd(
            kernels.leaky_relu(h, 0.1), g, 0.1)),
        ("masked_softmax (10x10)", lambda: kernels.masked_softmax(
            scores, mask)),
        ("gather_rows 15 of 10x64", lambda: kernels.gather_rows(h, rows)),
        ("scatter_pairs 15 into 10x10", lambda: kernels.scatter_pairs(
            edge_vals, rows, cols, n, n, True)),
        ("smooth_l1 fwd+bwd", lambda: kernels.smooth_l1_bwd(edge_feats,
                                                            edge_grad)),
        ("sum_rows (10x64)", lambda: kernels.sum_rows(h)),
    ]


def scene_step_fn(seed=0):
    """Closure running one forward/backward/update on a fixed scene."""
    sim = SimConfig(n_objects=(10, 10), seed=404)
    scene = sample_scene(sim, scene_rng(404, "train", 0))
    detections = make_detections(scene, sim.detection_jitter,
                                 scene_rng(404, "train", 1))
    graph = build_graph(detections, scene.camera, k=3)
    config = PropagationConfig(readout_depth_center=25.0,
                               readout_depth_scale=12.0)
    features = detections[0][1]
    store = build_parameters(config, features.scanline.size,
                             features.appearance.size,
                             sim.num_classes, seed=seed)
    optim = ad.Adam(store, ad.AdamConfig(learning_rate=1e-4))
    targets = scene_targets(scene)
    conf, sin_off, cos_off = encode_orientation_targets(targets["betas"])
    first, second = graph.edge_endpoint_arrays()
    midpoints = 0.5 * (targets["positions"][first]
                       + targets["positions"][second])

    def step():
        embedded = propagate(graph, store, config)
        node_xz, edge_xz, _ = readout_localization(embedded, store, config)
        logits, dims_pred, orient_pred = readout_early_heads(
            graph, store, config)
        parts = {
            "loc_nodes": smooth_l1_loss(node_xz, targets["positions"]),
            "loc_edges": smooth_l1_loss(edge_xz, midpoints),
            "orientation": orientation_loss(orient_pred, conf, sin_off,
                                            cos_off),
            "dims": smooth_l1_loss(dims_pred, targets["dims"]),
            "classification": focal_loss(
                ad.masked_softmax(logits, np.ones(logits.shape)),
                targets["class_ids"]),
        }
        total = multitask_total(parts, LossWeights())
        total.backward()
        optim.step()
        return total.values[0, 0]

    return step


def fmt_time(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} us"
    return f"{seconds * 1e3:8.2f} ms"


def run_micro(backends, repeats):
    print("== micro kernels ==")
    rng = np.random.default_rng(7)
    cases = micro_cases(rng)
    results = {}
    for backend in backends:
        kernels.set_backend(backend)
        results[backend] = [
            best_of(fn, repeats, loops=2000) for _, fn in cases
        ]
    header = f"{'kernel':30s}" + "".join(f"{b:>14s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for i, (name, _) in enumerate(cases):
        row = f"{name:30s}"
        for backend in backends:
            row += f"{fmt_time(results[backend][i]):>14s}"
        if len(backends) == 2:
            row += f"{results[backends[1]][i] / results[backends[0]][i]:9.2f}x"
        print(row)


def run_step(backends, repeats):
    print("== scene training step (10 objects, k=3, 2 layers) ==")
    for backend in backends:
        kernels.set_backend(backend)
        step = scene_step_fn()
        step()  # warm caches; first call also triggers lazy allocations
        per = best_of(step, repeats, loops=20)
        print(f"{backend:>8s}: {fmt_time(per)} / step")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--suite", choices=("micro", "step", "all"),
                        default="all")
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed batches per measurement; best is kept")
    args = parser.parse_args()

    backends = kernels.available_backends()
    # report the compiled backend first so the speedup column reads c vs python
    backends = sorted(backends, key=lambda b: b != "c")
    print(f"backends: {', '.join(backends)}")
    if "c" not in backends:
        print("note: compiled extension not built; timing python only")

    original = kernels.get_backend()
    try:
        if args.suite in ("micro", "all"):
            run_micro(backends, args.repeats)
        if args.suite in ("step", "all"):
            run_step(backends, args.repeats)
    finally:
        kernels.set_backend(original)


if __name__ == "__main__":
    main()
