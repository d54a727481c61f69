"""Synthetic urban-scene generator standing in for an image frontend.

Scenes are sampled as loose groups of objects on the ground plane,
projected through a pinhole camera, and described by the same feature
tuples a detector head would emit: normalized box geometry, a vertical
scanline profile, and an appearance vector built from a per-class
prototype plus noise. Appearance depth cues are controllable so
experiments can withhold them and force models onto geometry and graph
context.

All objects share one prototype height equal to the camera height. The
nearness score from the graph constructor reads the projected box
center, whose image row depends on the object's height; mixing heights
would make that score non-monotone in depth across classes, while a
shared height keeps the depth ordering exact for noiseless boxes.
"""

import gzip
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .camera import (CameraModel, GroundPose, ImageBox, footprint_corners,
                     project_ground_to_image, wrap_angle)
from .graph import FeatureTuple, normalized_box, scanline_descriptor

CAMERA_HEIGHT = 1.6
OBJECT_HEIGHT = 1.6
APPEARANCE_DIM = 16
SCANLINE_BANDS = 8
DEPTH_CUE_CHANNEL = 12
SIN_CHANNEL = 14
COS_CHANNEL = 15
DEPTH_CUE_GAIN = 2.0
CLASS_NAMES = ("car", "pedestrian", "van")
DEFAULT_CLASS_DIMS = ((4.4, 1.8, OBJECT_HEIGHT),
                      (0.7, 0.7, OBJECT_HEIGHT),
                      (7.5, 2.4, OBJECT_HEIGHT))
GROUP_SIZES = (1, 2, 3, 4)
GROUP_SIZE_PROBS = (0.15, 0.30, 0.35, 0.20)
GROUP_SPREAD = 2.2
GROUP_HEADING_NOISE = 0.15
GROUP_ABANDON_AFTER = 30
MAX_PLACEMENT_ATTEMPTS = 1000
SCHEMA_VERSION = 1
_SPLIT_CODES = {"train": 0, "val": 1}
_PROTOTYPE_SEED = 811319


@dataclass(frozen=True)
class SimConfig:
    """Scene sampling knobs.

    depth_cue_mode selects what the appearance vector carries beyond the
    class prototype: "full" adds a depth-correlated channel and the
    orientation sine/cosine, "geometry_only" keeps orientation but
    withholds the depth channel, and "none" is prototype plus isotropic
    noise only.
    """

    n_objects: tuple = (2, 8)
    depth_range: tuple = (6.0, 44.0)
    lateral_range: tuple = (-12.0, 12.0)
    class_dims: tuple = DEFAULT_CLASS_DIMS
    appearance_noise: float = 0.1
    depth_cue_mode: str = "full"
    detection_jitter: float = 2.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if not (1 <= lo <= hi):
            raise ValueError(f"bad n_objects range {self.n_objects}")
        z_lo, z_hi = self.depth_range
        if not (1.0 < z_lo < z_hi <= 50.0):
            raise ValueError(
                f"depth range {self.depth_range} must sit inside (1, 50]")
        x_lo, x_hi = self.lateral_range
        if not x_lo < x_hi:
            raise ValueError(f"bad lateral range {self.lateral_range}")
        if not self.class_dims:
            raise ValueError("need at least one object class")
        for dims in self.class_dims:
            if len(dims) != 3 or any(d <= 0 for d in dims):
                raise ValueError(f"bad class dims {dims}")
        if self.appearance_noise < 0:
            raise ValueError("appearance noise must be >= 0")
        if self.depth_cue_mode not in ("full", "geometry_only", "none"):
            raise ValueError(
                f"unknown depth_cue_mode {self.depth_cue_mode!r}")
        if self.detection_jitter < 0:
            raise ValueError("detection jitter must be >= 0")

    @property
    def num_classes(self):
        return len(self.class_dims)


@dataclass(frozen=True)
class SimObject:
    pose: GroundPose
    class_id: int
    height: float


@dataclass
class SyntheticScene:
    camera: CameraModel
    objects: list
    image_boxes: list
    features: list
    scene_id: int = 0

    def __post_init__(self):
        n = len(self.objects)
        if len(self.image_boxes) != n or len(self.features) != n:
            raise ValueError(
                f"misaligned scene: {n} objects, {len(self.image_boxes)} "
                f"boxes, {len(self.features)} feature tuples")

    @property
    def num_objects(self):
        return len(self.objects)


def class_prototypes(num_classes, dim=APPEARANCE_DIM):
    """Fixed per-class appearance prototypes, stable across runs.

    The depth-cue and orientation channels are zeroed so they carry only
    their designated signals; class identity lives on the remaining
    channels.
    """
    rng = np.random.default_rng(_PROTOTYPE_SEED)
    protos = rng.normal(size=(num_classes, dim))
    for ch in (DEPTH_CUE_CHANNEL, SIN_CHANNEL, COS_CHANNEL):
        if ch < dim:
            protos[:, ch] = 0.0
    return protos


def local_orientation(pose):
    """Heading relative to the ray toward the object (observation angle)."""
    return wrap_angle(pose.yaw - math.atan2(pose.x, pose.z))


def footprints_overlap(pose_a, pose_b):
    """Separating-axis test between two rotated BEV rectangles."""
    ca = footprint_corners(pose_a.x, pose_a.z, pose_a.yaw,
                           pose_a.length, pose_a.width)
    cb = footprint_corners(pose_b.x, pose_b.z, pose_b.yaw,
                           pose_b.length, pose_b.width)
    for yaw in (pose_a.yaw, pose_b.yaw):
        for axis in ((math.cos(yaw), -math.sin(yaw)),
                     (math.sin(yaw), math.cos(yaw))):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _appearance(config, class_id, pose, rng):
    proto = class_prototypes(config.num_classes)[class_id]
    vec = proto + config.appearance_noise * rng.normal(size=APPEARANCE_DIM)
    if config.depth_cue_mode == "full":
        z_lo, z_hi = config.depth_range
        vec[DEPTH_CUE_CHANNEL] += DEPTH_CUE_GAIN * (1.0 - pose.z / z_hi)
    if config.depth_cue_mode in ("full", "geometry_only"):
        beta = local_orientation(pose)
        vec[SIN_CHANNEL] += math.sin(beta)
        vec[COS_CHANNEL] += math.cos(beta)
    return vec


def _scene_camera(rng):
    # principal point gets a per-scene nudge; the lateral one stays tiny
    # because the nearness score's u-term grows with it and large values
    # would scramble depth ordering for near-equal depths
    return CameraModel(fu=500.0, fv=500.0,
                      u0=400.0 + rng.uniform(-0.5, 0.5),
                      v0=300.0 + rng.uniform(-8.0, 8.0),
                      width=800.0, height=600.0)


def _clip_box_to_image(box, cam):
    """Visible part of a projected box; projection guarantees overlap."""
    u_min, u_max = _widen_span(max(0.0, box.u_min),
                               min(cam.width, box.u_max), cam.width)
    v_min, v_max = _widen_span(max(0.0, box.v_min),
                               min(cam.height, box.v_max), cam.height)
    return ImageBox(u_min, v_min, u_max, v_max)


def sample_scene(config, rng, scene_id=0):
    """Sample one collision-free scene and its projected detections.

    Objects arrive in loose groups: a group depth, lateral offset, and
    shared heading are drawn, then members scatter around them. Each
    placement must project into the image and keep its BEV footprint
    disjoint from everything placed so far; failures are resampled up to
    a shared attempt budget. Stored boxes are the visible, image-clipped
    extents, matching what a detector would report.
    """
    cam = _scene_camera(rng)
    z_lo, z_hi = config.depth_range
    x_lo, x_hi = config.lateral_range
    n_lo, n_hi = config.n_objects
    target = int(rng.integers(n_lo, n_hi + 1))

    objects = []
    boxes = []
    features = []
    attempts = 0
    while len(objects) < target:
        size = min(int(rng.choice(GROUP_SIZES, p=GROUP_SIZE_PROBS)),
                   target - len(objects))
        margin = min(GROUP_SPREAD, 0.5 * (z_hi - z_lo))
        zg = rng.uniform(z_lo + margin, z_hi - margin)
        # keep group centers at projectable viewing angles
        x_cap = min(x_hi, 0.6 * zg)
        xg = rng.uniform(max(x_lo, -x_cap), x_cap)
        heading = rng.uniform(-math.pi, math.pi)
        placed_in_group = 0
        group_failures = 0
        while placed_in_group < size:
            if attempts >= MAX_PLACEMENT_ATTEMPTS:
                raise RuntimeError(
                    f"scene placement failed after {attempts} attempts "
                    f"({len(objects)}/{target} objects placed)")
            # a group whose location cannot host its members (large
            # footprints, view-cone edge) is abandoned, not retried
            # until the scene budget is gone
            if group_failures >= GROUP_ABANDON_AFTER:
                break
            attempts += 1
            class_id = int(rng.integers(0, config.num_classes))
            length, width, height = config.class_dims[class_id]
            spread = GROUP_SPREAD + 0.5 * length
            z = float(np.clip(zg + rng.uniform(-spread, spread),
                              z_lo, z_hi))
            x = float(np.clip(xg + rng.uniform(-spread, spread),
                              x_lo, x_hi))
            yaw = wrap_angle(heading + GROUP_HEADING_NOISE * rng.normal())
            pose = GroundPose(x, z, yaw, length, width)
            if any(footprints_overlap(pose, o.pose) for o in objects):
                group_failures += 1
                continue
            try:
                box = _clip_box_to_image(
                    project_ground_to_image(pose, height, cam,
                                            CAMERA_HEIGHT), cam)
            except ValueError:
                group_failures += 1
                continue
            objects.append(SimObject(pose, class_id, height))
            boxes.append(box)
            features.append(FeatureTuple(
                bbox_geom=normalized_box(box, cam),
                scanline=scanline_descriptor(box, cam.height,
                                             SCANLINE_BANDS),
                appearance=_appearance(config, class_id, pose, rng),
            ))
            placed_in_group += 1
    return SyntheticScene(cam, objects, boxes, features, scene_id)


def _widen_span(lo, hi, limit, min_extent=1e-3):
    # a span collapsed by clipping is widened toward the interior so the
    # box stays valid without leaving the image
    if hi - lo >= min_extent:
        return lo, hi
    hi = min(limit, lo + min_extent)
    return hi - min_extent, hi


def make_detections(scene, jitter_sigma, rng):
    """Perturb ground-truth boxes into detections.

    Every box corner coordinate gets independent Gaussian noise, then
    the box is clipped to the image. Geometry-derived features are
    recomputed from the jittered box (they describe what the detector
    saw); appearance vectors carry over unchanged. Output order matches
    the scene's object order.
    """
    if jitter_sigma < 0:
        raise ValueError("jitter sigma must be >= 0")
    cam = scene.camera
    detections = []
    for box, feats in zip(scene.image_boxes, scene.features):
        corners = np.array([box.u_min, box.v_min, box.u_max, box.v_max])
        if jitter_sigma > 0:
            corners = corners + rng.normal(0.0, jitter_sigma, size=4)
        u_a, u_b = np.clip(corners[[0, 2]], 0.0, cam.width)
        v_a, v_b = np.clip(corners[[1, 3]], 0.0, cam.height)
        u_min, u_max = _widen_span(min(u_a, u_b), max(u_a, u_b), cam.width)
        v_min, v_max = _widen_span(min(v_a, v_b), max(v_a, v_b), cam.height)
        jittered = ImageBox(u_min, v_min, u_max, v_max)
        detections.append((jittered, FeatureTuple(
            bbox_geom=normalized_box(jittered, cam),
            scanline=scanline_descriptor(jittered, cam.height,
                                         SCANLINE_BANDS),
            appearance=feats.appearance.copy(),
        )))
    return detections


def scene_targets(scene):
    """Ground-truth arrays for supervision, aligned with object order."""
    n = scene.num_objects
    positions = np.zeros((n, 2))
    dims = np.zeros((n, 2))
    betas = np.zeros(n)
    class_ids = np.zeros(n, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        positions[i] = (obj.pose.x, obj.pose.z)
        dims[i] = (obj.pose.length, obj.pose.width)
        betas[i] = local_orientation(obj.pose)
        class_ids[i] = obj.class_id
    return {"positions": positions, "dims": dims, "betas": betas,
            "class_ids": class_ids}


def scene_rng(master_seed, split, index):
    """Per-scene generator; (master seed, split, index) fixes the stream."""
    code = _SPLIT_CODES[split]
    return np.random.default_rng(np.random.SeedSequence(
        [int(master_seed), code, int(index)]))


def scene_to_json_dict(scene):
    cam = scene.camera
    return {
        "scene_id": scene.scene_id,
        "camera": {"fu": cam.fu, "fv": cam.fv, "u0": cam.u0, "v0": cam.v0,
                   "width": cam.width, "height": cam.height},
        "objects": [{"x": o.pose.x, "z": o.pose.z, "yaw": o.pose.yaw,
                     "length": o.pose.length, "width": o.pose.width,
                     "height": o.height, "class_id": o.class_id}
                    for o in scene.objects],
        "boxes": [[b.u_min, b.v_min, b.u_max, b.v_max]
                  for b in scene.image_boxes],
        "features": [{"bbox_geom": f.bbox_geom.tolist(),
                      "scanline": f.scanline.tolist(),
                      "appearance": f.appearance.tolist()}
                     for f in scene.features],
    }


def scene_from_json_dict(doc):
    cam = CameraModel(**doc["camera"])
    objects = [SimObject(GroundPose(o["x"], o["z"], o["yaw"], o["length"],
                                    o["width"]), o["class_id"], o["height"])
               for o in doc["objects"]]
    boxes = [ImageBox(*b) for b in doc["boxes"]]
    features = [FeatureTuple(bbox_geom=np.asarray(f["bbox_geom"]),
                             scanline=np.asarray(f["scanline"]),
                             appearance=np.asarray(f["appearance"]))
                for f in doc["features"]]
    return SyntheticScene(cam, objects, boxes, features, doc["scene_id"])


def _config_dict(config):
    return {
        "n_objects": list(config.n_objects),
        "depth_range": list(config.depth_range),
        "lateral_range": list(config.lateral_range),
        "class_dims": [list(d) for d in config.class_dims],
        "appearance_noise": config.appearance_noise,
        "depth_cue_mode": config.depth_cue_mode,
        "detection_jitter": config.detection_jitter,
        "seed": config.seed,
    }


def config_from_dict(doc):
    return SimConfig(
        n_objects=tuple(doc["n_objects"]),
        depth_range=tuple(doc["depth_range"]),
        lateral_range=tuple(doc["lateral_range"]),
        class_dims=tuple(tuple(d) for d in doc["class_dims"]),
        appearance_noise=doc["appearance_noise"],
        depth_cue_mode=doc["depth_cue_mode"],
        detection_jitter=doc["detection_jitter"],
        seed=doc["seed"],
    )


def build_split(config, split, count):
    """Sample `count` scenes for a split; ids and seeds are disjoint
    across splits by construction."""
    code = _SPLIT_CODES[split]
    scenes = []
    for i in range(count):
        rng = scene_rng(config.seed, split, i)
        scenes.append(sample_scene(config, rng,
                                   scene_id=code * 1_000_000 + i))
    return scenes


def save_split(path, config, split, scenes):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "split": split,
        "config": _config_dict(config),
        "scenes": [scene_to_json_dict(s) for s in scenes],
    }
    payload = json.dumps(doc, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(gzip.compress(payload, mtime=0))


def load_split(path):
    with gzip.open(path, "rb") as fh:
        doc = json.loads(fh.read().decode("utf-8"))
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported dataset schema {doc.get('schema_version')!r} "
            f"in {path}")
    config = config_from_dict(doc["config"])
    scenes = [scene_from_json_dict(s) for s in doc["scenes"]]
    return config, doc["split"], scenes


def generate_dataset(config, n_train, n_val, out_dir):
    """Write train/val splits under out_dir; returns the file paths."""
    if n_train <= 0 or n_val <= 0:
        raise ValueError("split sizes must be positive")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, count in (("train", n_train), ("val", n_val)):
        scenes = build_split(config, split, count)
        path = os.path.join(out_dir, f"{split}.json.gz")
        save_split(path, config, split, scenes)
        paths[split] = path
    return paths
