"""End-to-end training: batching, optimization, checkpoints, metrics.

One training step builds per-scene graphs from freshly jittered
detections, propagates, applies the heads, and averages the per-scene
multitask losses over the batch before a single backward pass. Scenes
are never merged into one graph. Everything is deterministic given the
config seed: epoch shuffles, per-scene jitter streams, and parameter
initialization all derive from it.
"""

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import evalharness
from .graph import FeatureTuple, build_graph
from .losses import (LossWeights, encode_orientation_targets, focal_loss,
                     multitask_total, orientation_loss, smooth_l1_loss)
from .propagation import PropagationConfig, build_parameters, propagate, \
    readout_early_heads, readout_localization
from .sim import (APPEARANCE_DIM, SCANLINE_BANDS, SimConfig,
                  config_from_dict, load_split, make_detections,
                  scene_targets)

FEATURE_NAMES = ("appearance", "scanline", "geometry", "position")

# fixed tag so validation detections are identical across training runs,
# letting different seeds be compared on the same inputs
_EVAL_JITTER_TAG = 9331

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Training recipe; defaults give the full-scale schedule."""

    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-5
    weight_decay: float = 1e-4
    lr_decay: float = 0.99
    k_neighbors: int = 3
    propagation: PropagationConfig = PropagationConfig()
    loss_weights: LossWeights = LossWeights()
    feature_set: tuple = FEATURE_NAMES
    jitter_sigma: float = None
    grad_clip: float = 10.0
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr decay must sit in (0, 1]")
        if self.k_neighbors < 0:
            raise ValueError("k neighbors must be >= 0")
        bad = set(self.feature_set) - set(FEATURE_NAMES)
        if bad or not self.feature_set:
            raise ValueError(f"feature set must be a non-empty subset of "
                             f"{FEATURE_NAMES}, got {self.feature_set}")
        if len(set(self.feature_set)) != len(self.feature_set):
            raise ValueError(f"duplicate features in {self.feature_set}")
        has_position = "position" in self.feature_set
        if has_position != self.propagation.use_position:
            raise ValueError(
                "feature set and propagation config disagree on position "
                f"(feature_set={self.feature_set}, "
                f"use_position={self.propagation.use_position})")
        if self.jitter_sigma is not None and self.jitter_sigma < 0:
            raise ValueError("jitter sigma must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("gradient clip must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class RunRecord:
    """What one training run produced: loss curves, val metrics, timing."""

    history: list
    val_history: list
    final_val_loc_error: float
    final_val_iou: float
    wall_clock: float
    config_hash: str
    checkpoint_path: str = ""

    def __post_init__(self):
        epochs = [row["epoch"] for row in self.history]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"epoch indices must increase: {epochs}")
        for row in self.history:
            values = [row["train_loss"], *row["parts"].values()]
            if not all(math.isfinite(v) for v in values):
                raise ValueError(f"non-finite loss in epoch {row['epoch']}")

    def to_dict(self):
        return asdict(self)


class TrainingDivergence(RuntimeError):
    """Raised when a loss goes non-finite; names the offending scene."""

    def __init__(self, message, scene_id=None, epoch=None):
        super().__init__(message)
        self.scene_id = scene_id
        self.epoch = epoch


@dataclass
class SceneDataset:
    sim_config: SimConfig
    train: list
    val: list

    @classmethod
    def from_dir(cls, path):
        configs, splits = [], {}
        for split in ("train", "val"):
            file_path = os.path.join(path, f"{split}.json.gz")
            if not os.path.exists(file_path):
                raise FileNotFoundError(f"missing dataset split {file_path}")
            config, name, scenes = load_split(file_path)
            if name != split:
                raise ValueError(f"{file_path} holds split {name!r}")
            configs.append(config)
            splits[split] = scenes
        if configs[0] != configs[1]:
            raise ValueError("train and val splits were generated from "
                             "different configs")
        return cls(configs[0], splits["train"], splits["val"])


def config_hash(config):
    payload = json.dumps(train_config_to_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def train_config_to_dict(config):
    return asdict(config)


def train_config_from_dict(doc):
    doc = dict(doc)
    doc["propagation"] = PropagationConfig(**doc["propagation"])
    doc["loss_weights"] = LossWeights(**doc["loss_weights"])
    doc["feature_set"] = tuple(doc["feature_set"])
    return TrainConfig(**doc)


def _mask_features(detections, feature_set):
    """Zero the withheld feature states; graph structure still comes
    from the boxes, only the embedded inputs are blanked."""
    on = {"geometry": "geometry" in feature_set,
          "scanline": "scanline" in feature_set,
          "appearance": "appearance" in feature_set}
    if all(on.values()):
        return detections
    masked = []
    for box, feats in detections:
        masked.append((box, FeatureTuple(
            bbox_geom=feats.bbox_geom if on["geometry"]
            else np.zeros_like(feats.bbox_geom),
            scanline=feats.scanline if on["scanline"]
            else np.zeros_like(feats.scanline),
            appearance=feats.appearance if on["appearance"]
            else np.zeros_like(feats.appearance),
        )))
    return masked


def _scene_jitter_rng(seed, epoch, scene_id):
    return np.random.default_rng(
        np.random.SeedSequence([seed, epoch, scene_id]))


def _eval_jitter_rng(scene_id):
    return np.random.default_rng(
        np.random.SeedSequence([_EVAL_JITTER_TAG, scene_id]))


def _scene_graph(scene, config, sim_config, rng):
    sigma = sim_config.detection_jitter if config.jitter_sigma is None \
        else config.jitter_sigma
    detections = make_detections(scene, sigma, rng)
    detections = _mask_features(detections, config.feature_set)
    # scenes with few objects cap the degree at what exists
    k = min(config.k_neighbors, len(detections) - 1)
    return build_graph(detections, scene.camera, k=max(k, 0))


def _scene_loss(scene, graph, store, config, sim_config):
    """Multitask loss of one scene; returns (total, parts, diagnostics)."""
    targets = scene_targets(scene)
    embedded = propagate(graph, store, config.propagation)
    node_xz, edge_xz, diagnostics = readout_localization(
        embedded, store, config.propagation)
    class_logits, dims_pred, orient_pred = readout_early_heads(
        graph, store, config.propagation)

    parts = {"loc_nodes": smooth_l1_loss(node_xz, targets["positions"])}
    if graph.num_edges:
        first, second = graph.edge_endpoint_arrays()
        midpoints = 0.5 * (targets["positions"][first]
                           + targets["positions"][second])
        parts["loc_edges"] = smooth_l1_loss(edge_xz, midpoints)
    conf, sin_off, cos_off = encode_orientation_targets(targets["betas"])
    parts["orientation"] = orientation_loss(orient_pred, conf, sin_off,
                                            cos_off)
    parts["dims"] = smooth_l1_loss(dims_pred, targets["dims"])
    probs = ad.masked_softmax(class_logits, np.ones(class_logits.shape))
    parts["classification"] = focal_loss(probs, targets["class_ids"])
    total = multitask_total(parts, config.loss_weights)
    return total, parts, diagnostics


def evaluate(store, config, sim_config, scenes, grid=None, binned=False,
             bin_edges=(0, 10, 20, 30, 40, 50)):
    """Deterministic metrics on a scene list; parameters untouched.

    Detections are jittered with per-scene streams that do not depend
    on the training seed, so runs with different seeds are scored on
    identical inputs. Returns mean localization error, mean and
    per-class IoU, and optionally distance-binned metrics.
    """
    if not scenes:
        raise ValueError("no scenes to evaluate")
    grid = grid or evalharness.BevGrid()
    preds, gts = [], []
    errors = []
    for scene in scenes:
        graph = _scene_graph(scene, config, sim_config,
                             _eval_jitter_rng(scene.scene_id))
        embedded = propagate(graph, store, config.propagation)
        node_xz, _, _ = readout_localization(embedded, store,
                                             config.propagation)
        targets = scene_targets(scene)
        pred_centroids = node_xz.values.copy()
        yaws = np.array([o.pose.yaw for o in scene.objects])
        gt_boxes = evalharness.SceneBoxes(
            targets["positions"], yaws, targets["dims"],
            targets["class_ids"])
        pred_boxes = evalharness.SceneBoxes(
            pred_centroids, yaws, targets["dims"], targets["class_ids"])
        preds.append(pred_boxes)
        gts.append(gt_boxes)
        errors.append(np.linalg.norm(pred_centroids - targets["positions"],
                                     axis=1))
    iou_stats = evalharness.iou(preds, gts, grid, sim_config.num_classes)
    metrics = {
        "loc_error": float(np.mean(np.concatenate(errors))),
        "iou": iou_stats["mean"],
        "per_class_iou": iou_stats["per_class"],
        "num_scenes": len(scenes),
    }
    if binned:
        metrics["binned"] = evalharness.distance_binned_metrics(
            preds, gts, grid, sim_config.num_classes, bin_edges)
    return metrics


def save_checkpoint(path, store, config, sim_config):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "train_config": train_config_to_dict(config),
        "sim_config": {
            "n_objects": list(sim_config.n_objects),
            "depth_range": list(sim_config.depth_range),
            "lateral_range": list(sim_config.lateral_range),
            "class_dims": [list(d) for d in sim_config.class_dims],
            "appearance_noise": sim_config.appearance_noise,
            "depth_cue_mode": sim_config.depth_cue_mode,
            "detection_jitter": sim_config.detection_jitter,
            "seed": sim_config.seed,
        },
        "params": {name: p.values.tolist()
                   for name, p in sorted(store.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Restore (store, train_config, sim_config); every parameter must
    match the shape the config implies."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{doc.get('format_version')!r} in {path}")
    config = train_config_from_dict(doc["train_config"])
    sim_config = config_from_dict(doc["sim_config"])
    store = _build_store(config, doc["sim_config"])
    expected = {name: p.values.shape for name, p in store.items()}
    loaded = {name: np.asarray(v, dtype=np.float64)
              for name, v in doc["params"].items()}
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ValueError(f"checkpoint parameters do not match the config "
                         f"(missing {missing}, unexpected {extra})")
    for name, values in loaded.items():
        if values.shape != expected[name]:
            raise ValueError(
                f"checkpoint parameter {name} has shape {values.shape}, "
                f"config implies {expected[name]}")
        store[name].values = values
    return store, config, sim_config


def _build_store(config, sim_doc):
    num_classes = len(sim_doc["class_dims"])
    return build_parameters(config.propagation, SCANLINE_BANDS,
                            APPEARANCE_DIM, num_classes, seed=config.seed)


def _feature_dims(dataset):
    feats = dataset.train[0].features[0]
    return feats.scanline.size, feats.appearance.size


def train(dataset, config, out_dir=None):
    """Run the full schedule; returns a RunRecord.

    Per epoch the train split is reshuffled deterministically, each
    scene gets a fresh jitter stream keyed by (seed, epoch, scene id),
    and per-batch losses are the scene-loss average. Validation runs
    before training (epoch 0) and every eval_every epochs. A non-finite
    loss aborts immediately, naming the scene. With out_dir set, the
    checkpoint, run record, and a line-per-epoch metrics stream are
    written there.
    """
    start = time.perf_counter()
    scanline_dim, appearance_dim = _feature_dims(dataset)
    store = build_parameters(config.propagation, scanline_dim,
                             appearance_dim,
                             dataset.sim_config.num_classes,
                             seed=config.seed)
    adam = ad.Adam(store, ad.AdamConfig(
        learning_rate=config.lr, weight_decay=config.weight_decay,
        lr_decay_per_epoch=config.lr_decay))

    metrics_stream = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_stream = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def emit(row):
        if metrics_stream is not None:
            metrics_stream.write(json.dumps(row, sort_keys=True) + "\n")
            metrics_stream.flush()

    def run_eval(epoch):
        metrics = evaluate(store, config, dataset.sim_config, dataset.val)
        entry = {"epoch": epoch, "loc_error": metrics["loc_error"],
                 "iou": metrics["iou"]}
        val_history.append(entry)
        emit({"kind": "val", **entry})

    history = []
    val_history = []
    part_names = ("loc_nodes", "loc_edges", "orientation", "dims",
                  "classification")
    try:
        run_eval(0)
        n_train = len(dataset.train)
        for epoch in range(1, config.epochs + 1):
            shuffle = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch]))
            order = shuffle.permutation(n_train)
            loss_sum = 0.0
            part_sums = dict.fromkeys(part_names, 0.0)
            clamped = 0
            for lo in range(0, n_train, config.batch_size):
                batch = order[lo:lo + config.batch_size]
                store.zero_grad()
                batch_total = None
                for idx in batch:
                    scene = dataset.train[idx]
                    rng = _scene_jitter_rng(config.seed, epoch,
                                            scene.scene_id)
                    try:
                        graph = _scene_graph(scene, config,
                                             dataset.sim_config, rng)
                        total, parts, diag = _scene_loss(
                            scene, graph, store, config,
                            dataset.sim_config)
                    except ad.NonFiniteError as exc:
                        raise TrainingDivergence(
                            f"non-finite value in epoch {epoch}, scene "
                            f"{scene.scene_id}: {exc}",
                            scene_id=scene.scene_id, epoch=epoch)
                    value = float(total.values[0, 0])
                    if not math.isfinite(value):
                        raise TrainingDivergence(
                            f"non-finite loss {value} in epoch {epoch}, "
                            f"scene {scene.scene_id}",
                            scene_id=scene.scene_id, epoch=epoch)
                    loss_sum += value
                    for name in part_names:
                        if name in parts:
                            part_sums[name] += float(
                                parts[name].values[0, 0])
                    clamped += diag["alpha_clamped"]
                    scaled = ad.scal(total, 1.0 / len(batch))
                    batch_total = scaled if batch_total is None \
                        else ad.add(batch_total, scaled)
                batch_total.backward()
                ad.clip_gradients(store, config.grad_clip)
                adam.step()
            adam.end_epoch()
            epoch_row = {
                "epoch": epoch,
                "train_loss": loss_sum / n_train,
                "parts": {k: v / n_train for k, v in part_sums.items()},
                "lr": adam.learning_rate,
                "alpha_clamped": clamped,
            }
            history.append(epoch_row)
            emit({"kind": "train", **epoch_row})
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                run_eval(epoch)
    finally:
        if metrics_stream is not None:
            metrics_stream.close()

    checkpoint_path = ""
    if out_dir is not None:
        checkpoint_path = os.path.join(out_dir, "checkpoint.json")
        save_checkpoint(checkpoint_path, store, config, dataset.sim_config)

    record = RunRecord(
        history=history,
        val_history=val_history,
        final_val_loc_error=val_history[-1]["loc_error"],
        final_val_iou=val_history[-1]["iou"],
        wall_clock=time.perf_counter() - start,
        config_hash=config_hash(config),
        checkpoint_path=checkpoint_path,
    )
    if out_dir is not None:
        evalharness.write_json(os.path.join(out_dir, "run_record.json"),
                               record.to_dict())
    record.store = store
    return record
