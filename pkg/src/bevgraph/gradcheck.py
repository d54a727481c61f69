"""End-to-end gradient verification for the model and every loss.

The model check drives full scenes through graph construction,
propagation, both readouts, and the complete multitask objective, then
compares tape gradients with central differences for a sample of
coordinates in every parameter tensor. Squared-state terms are added so
each layer's parameters carry first-order signal; a readout-only loss
leaves deep attention gradients near the measurement floor.

Loss functions also get standalone checks on free inputs, covering the
branches a random scene may miss.
"""

import numpy as np

from . import autodiff as ad
from . import propagation as pg
from .graph import build_graph
from .losses import (LossWeights, dice_loss, encode_orientation_targets,
                     focal_loss, multitask_total, orientation_loss,
                     smooth_l1_loss)
from .sim import (APPEARANCE_DIM, SCANLINE_BANDS, SimConfig,
                  make_detections, sample_scene, scene_rng, scene_targets)

# kink-aware defaults: scores are |a - n| / max(floor, |a| + |n|), and
# flagged coordinates are re-measured at smaller eps (see ad.grad_check)
DENOM_FLOOR = 1e-3
DEFAULT_THRESHOLD = 1e-4


def _scene_objective(scene, graph, store, config):
    """Full multitask loss plus state-energy terms, as a closure."""
    targets = scene_targets(scene)

    def f():
        emb = pg.propagate(graph, store, config)
        node_xz, edge_xz, _ = pg.readout_localization(emb, store, config)
        loss = smooth_l1_loss(node_xz, targets["positions"])
        if graph.num_edges:
            first, second = graph.edge_endpoint_arrays()
            midpoints = 0.5 * (targets["positions"][first]
                               + targets["positions"][second])
            loss = ad.add(loss, smooth_l1_loss(edge_xz, midpoints))
        conf, sin_off, cos_off = encode_orientation_targets(targets["betas"])
        logits, dims, orient = pg.readout_early_heads(graph, store, config)
        loss = ad.add(loss, orientation_loss(orient, conf, sin_off, cos_off))
        loss = ad.add(loss, smooth_l1_loss(dims, targets["dims"]))
        probs = ad.masked_softmax(logits, np.ones(logits.shape))
        loss = ad.add(loss, focal_loss(probs, targets["class_ids"]))
        for state in pg.FEATURE_STATES:
            for tensor in (emb.node_states[state], emb.edge_states[state]):
                loss = ad.add(loss, ad.mean_all(ad.mul(tensor, tensor)))
        loss = ad.add(loss, ad.mean_all(ad.mul(emb.node_pos, emb.node_pos)))
        return loss

    return f


def check_model_gradients(draws=20, eps=1e-6, seed=0, config=None,
                          max_coords_per_param=3,
                          threshold=DEFAULT_THRESHOLD):
    """Gradient-check the full model on random scenes.

    Returns a report dict with the overall worst relative error, the
    per-draw results, and the worst parameter coordinate seen.
    """
    if draws < 1:
        raise ValueError("need at least one draw")
    config = config or pg.PropagationConfig()
    sim = SimConfig(n_objects=(4, 8), seed=974_000 + seed)
    results = []
    worst = None
    for i in range(draws):
        scene = sample_scene(sim, scene_rng(sim.seed, "train", i),
                             scene_id=i)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        detections = make_detections(scene, sim.detection_jitter, rng)
        graph = build_graph(detections, scene.camera,
                            k=min(3, len(detections) - 1))
        store = pg.build_parameters(config, SCANLINE_BANDS, APPEARANCE_DIM,
                                    sim.num_classes, seed=1000 + i)
        result = ad.grad_check(
            _scene_objective(scene, graph, store, config), store, eps=eps,
            max_coords_per_param=max_coords_per_param,
            rng=np.random.default_rng(np.random.SeedSequence([seed, i, 1])),
            denom_floor=DENOM_FLOOR, refine_threshold=threshold)
        results.append({"draw": i, "nodes": graph.num_nodes,
                        "edges": graph.num_edges,
                        "max_rel_error": result.max_rel_error,
                        "worst_param": result.worst_param,
                        "checked": result.checked})
        if worst is None or result.max_rel_error > worst.max_rel_error:
            worst = result
    return {
        "max_rel_error": worst.max_rel_error,
        "worst": str(worst),
        "draws": results,
    }


def _loss_cases(seed):
    """Standalone objectives, one per loss, over free input parameters."""
    rng = np.random.default_rng(seed)
    cases = {}

    pred = rng.normal(scale=1.5, size=(5, 2))
    target = pred + rng.normal(scale=1.0, size=(5, 2))
    target[0] = pred[0] + 0.3   # keep both smooth-l1 branches populated
    target[1] = pred[1] + 2.5
    cases["smooth_l1"] = ({"pred": pred},
                          lambda s: smooth_l1_loss(s["pred"], target))

    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    cases["focal"] = (
        {"logits": logits},
        lambda s: focal_loss(ad.masked_softmax(s["logits"],
                                               np.ones((6, 4))), labels))

    betas = rng.uniform(-np.pi, np.pi, size=5)
    conf, sin_off, cos_off = encode_orientation_targets(betas)
    orient = rng.normal(size=(5, 6))
    cases["orientation"] = (
        {"orient": orient},
        lambda s: orientation_loss(s["orient"], conf, sin_off, cos_off))

    raw_a = rng.normal(size=(3, 12))
    raw_b = rng.normal(size=(3, 8))
    mask_a = (rng.random((3, 12)) < 0.4).astype(float)
    mask_b = (rng.random((3, 8)) < 0.4).astype(float)
    cases["dice"] = (
        {"raw_a": raw_a, "raw_b": raw_b},
        lambda s: dice_loss([ad.sigmoid(s["raw_a"]),
                             ad.sigmoid(s["raw_b"])], [mask_a, mask_b]))

    part_inputs = {name: rng.normal(size=(3, 3))
                   for name in ("loc_nodes", "dims")}
    weights = LossWeights(loc_nodes=2.0, dims=0.5)
    cases["multitask"] = (
        dict(part_inputs),
        lambda s: multitask_total(
            {name: ad.mean_all(ad.mul(s[name], s[name]))
             for name in part_inputs}, weights))

    return cases


def check_loss_gradients(eps=1e-6, seed=0, threshold=DEFAULT_THRESHOLD):
    """Gradient-check each loss on its own inputs; returns name -> error."""
    report = {}
    for name, (inputs, build) in _loss_cases(seed).items():
        store = ad.ParameterStore()
        for key, values in inputs.items():
            store.create_zeros(key, values.shape)
            store[key].values = np.asarray(values, dtype=np.float64)
        result = ad.grad_check(lambda s=store: build(s), store, eps=eps,
                               denom_floor=DENOM_FLOOR,
                               refine_threshold=threshold)
        report[name] = result.max_rel_error
    return report


def run_gradcheck(draws=20, eps=1e-6, seed=0, threshold=DEFAULT_THRESHOLD,
                  config=None):
    """Model plus per-loss checks; one report with a pass flag."""
    model = check_model_gradients(draws=draws, eps=eps, seed=seed,
                                  config=config, threshold=threshold)
    losses = check_loss_gradients(eps=eps, seed=seed, threshold=threshold)
    overall = max(model["max_rel_error"], *losses.values())
    return {
        "model": model,
        "losses": losses,
        "max_rel_error": overall,
        "threshold": threshold,
        "passed": bool(overall < threshold),
    }
