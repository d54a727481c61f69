"""Tests for the synthetic scene generator: placement, projection
statistics, detection jitter, and dataset serialization."""

import gzip
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevgraph import sim
from bevgraph.camera import GroundPose, ImageBox
from bevgraph.graph import (coarse_relative_depth, normalized_box,
                            scanline_descriptor)
from bevgraph.sim import (SimConfig, SimObject, SyntheticScene,
                          class_prototypes, config_from_dict,
                          footprints_overlap, generate_dataset, load_split,
                          local_orientation, make_detections, sample_scene,
                          save_split, scene_from_json_dict, scene_rng,
                          scene_targets, scene_to_json_dict)


@pytest.fixture(scope="module")
def noiseless_scenes():
    """A large pool of scenes under the default config, shared by the
    statistical tests; ground-truth boxes double as noiseless detections."""
    cfg = SimConfig(seed=17)
    return [sample_scene(cfg, scene_rng(17, "train", i), scene_id=i)
            for i in range(2200)]


class TestSimConfig:
    def test_defaults_valid(self):
        cfg = SimConfig()
        assert cfg.num_classes == 3
        assert cfg.depth_cue_mode == "full"

    @pytest.mark.parametrize("kwargs", [
        dict(n_objects=(0, 5)),
        dict(n_objects=(5, 2)),
        dict(depth_range=(1.0, 44.0)),
        dict(depth_range=(6.0, 55.0)),
        dict(depth_range=(10.0, 8.0)),
        dict(lateral_range=(2.0, 2.0)),
        dict(class_dims=()),
        dict(class_dims=((4.0, -1.0, 1.6),)),
        dict(class_dims=((4.0, 1.8),)),
        dict(appearance_noise=-0.1),
        dict(depth_cue_mode="half"),
        dict(detection_jitter=-1.0),
    ])
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SimConfig(**kwargs)

    def test_config_is_frozen(self):
        cfg = SimConfig()
        with pytest.raises(Exception):
            cfg.seed = 5

    def test_round_trip_through_dataset_file(self, tmp_path):
        cfg = SimConfig(n_objects=(1, 3), depth_range=(8.0, 30.0),
                        appearance_noise=0.25, depth_cue_mode="none",
                        detection_jitter=0.5, seed=41)
        paths = generate_dataset(cfg, 2, 2, tmp_path)
        loaded_cfg, split, _ = load_split(paths["train"])
        assert loaded_cfg == cfg
        assert split == "train"


class TestClassPrototypes:
    def test_deterministic_across_calls(self):
        a = class_prototypes(3)
        b = class_prototypes(3)
        assert np.array_equal(a, b)

    def test_shape(self):
        assert class_prototypes(5).shape == (5, sim.APPEARANCE_DIM)

    def test_reserved_channels_are_zero(self):
        protos = class_prototypes(3)
        for ch in (sim.DEPTH_CUE_CHANNEL, sim.SIN_CHANNEL, sim.COS_CHANNEL):
            assert np.all(protos[:, ch] == 0.0)

    def test_classes_are_distinguishable(self):
        protos = class_prototypes(3)
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(protos[i] - protos[j]) > 1.0


class TestLocalOrientation:
    def test_object_on_optical_axis(self):
        pose = GroundPose(0.0, 10.0, 0.3, 4.0, 2.0)
        assert local_orientation(pose) == pytest.approx(0.3)

    def test_heading_along_viewing_ray_is_zero(self):
        # yaw equal to the ray angle cancels exactly
        pose = GroundPose(5.0, 10.0, math.atan2(5.0, 10.0), 4.0, 2.0)
        assert local_orientation(pose) == pytest.approx(0.0)

    @given(st.floats(-10.0, 10.0), st.floats(2.0, 40.0),
           st.floats(-math.pi, 3.14159))
    def test_result_in_principal_range(self, x, z, yaw):
        beta = local_orientation(GroundPose(x, z, yaw, 4.0, 2.0))
        assert -math.pi <= beta < math.pi


class TestFootprintsOverlap:
    def test_identical_poses_overlap(self):
        p = GroundPose(1.0, 10.0, 0.4, 4.0, 2.0)
        assert footprints_overlap(p, p)

    def test_distant_poses_disjoint(self):
        a = GroundPose(-5.0, 10.0, 0.0, 4.0, 2.0)
        b = GroundPose(5.0, 30.0, 1.0, 4.0, 2.0)
        assert not footprints_overlap(a, b)

    def test_rotated_square_near_axis_aligned_square(self):
        # unit square at the origin; unit square rotated 45 degrees has
        # half-diagonal sqrt(2)/2, so centers 1.3 apart are separated and
        # centers 1.1 apart are not
        a = GroundPose(0.0, 10.0, 0.0, 1.0, 1.0)
        assert not footprints_overlap(a, GroundPose(1.3, 10.0, math.pi / 4,
                                                    1.0, 1.0))
        assert footprints_overlap(a, GroundPose(1.1, 10.0, math.pi / 4,
                                                1.0, 1.0))

    def test_edge_touching_counts_as_overlap(self):
        a = GroundPose(0.0, 10.0, 0.0, 2.0, 2.0)
        b = GroundPose(2.0, 10.0, 0.0, 2.0, 2.0)
        assert footprints_overlap(a, b)

    @given(st.floats(-8.0, 8.0), st.floats(5.0, 30.0), st.floats(-3.0, 3.0),
           st.floats(-8.0, 8.0), st.floats(5.0, 30.0), st.floats(-3.0, 3.0))
    def test_symmetric(self, xa, za, ya, xb, zb, yb):
        a = GroundPose(xa, za, ya, 4.0, 2.0)
        b = GroundPose(xb, zb, yb, 3.0, 1.5)
        assert footprints_overlap(a, b) == footprints_overlap(b, a)


class TestSampleScene:
    def test_single_object_scene(self):
        cfg = SimConfig(n_objects=(1, 1), seed=2)
        scene = sample_scene(cfg, scene_rng(2, "train", 0))
        assert scene.num_objects == 1
        assert len(scene.image_boxes) == 1
        assert len(scene.features) == 1

    def test_object_count_within_configured_range(self):
        cfg = SimConfig(n_objects=(3, 6), seed=5)
        for i in range(20):
            scene = sample_scene(cfg, scene_rng(5, "train", i))
            assert 3 <= scene.num_objects <= 6

    def test_identical_seed_reproduces_scene_bitwise(self):
        cfg = SimConfig(seed=9)
        a = sample_scene(cfg, scene_rng(9, "train", 4), scene_id=4)
        b = sample_scene(cfg, scene_rng(9, "train", 4), scene_id=4)
        assert len(a.objects) == len(b.objects)
        for oa, ob in zip(a.objects, b.objects):
            assert oa == ob
        assert a.image_boxes == b.image_boxes
        for fa, fb in zip(a.features, b.features):
            assert np.array_equal(fa.bbox_geom, fb.bbox_geom)
            assert np.array_equal(fa.scanline, fb.scanline)
            assert np.array_equal(fa.appearance, fb.appearance)

    def test_different_indices_give_different_scenes(self):
        cfg = SimConfig(seed=9)
        a = sample_scene(cfg, scene_rng(9, "train", 0))
        b = sample_scene(cfg, scene_rng(9, "train", 1))
        assert [o.pose for o in a.objects] != [o.pose for o in b.objects]

    def test_footprints_pairwise_disjoint(self):
        cfg = SimConfig(n_objects=(4, 8), seed=13)
        for i in range(30):
            scene = sample_scene(cfg, scene_rng(13, "train", i))
            for a in range(scene.num_objects):
                for b in range(a + 1, scene.num_objects):
                    assert not footprints_overlap(scene.objects[a].pose,
                                                  scene.objects[b].pose)

    def test_boxes_valid_and_inside_depth_range(self):
        cfg = SimConfig(seed=21)
        for i in range(20):
            scene = sample_scene(cfg, scene_rng(21, "train", i))
            cam = scene.camera
            z_lo, z_hi = cfg.depth_range
            for obj, box in zip(scene.objects, scene.image_boxes):
                assert 0.0 <= box.u_min < box.u_max <= cam.width
                assert 0.0 <= box.v_min < box.v_max <= cam.height
                assert z_lo <= obj.pose.z <= z_hi

    def test_object_dims_follow_class_table(self):
        cfg = SimConfig(seed=8)
        scene = sample_scene(cfg, scene_rng(8, "train", 3))
        for obj in scene.objects:
            length, width, height = cfg.class_dims[obj.class_id]
            assert obj.pose.length == length
            assert obj.pose.width == width
            assert obj.height == height

    def test_impossible_layout_raises(self):
        # one van fits in a 2 x 1 m strip, a second never can
        cfg = SimConfig(n_objects=(2, 2), depth_range=(5.0, 6.0),
                        lateral_range=(-1.0, 1.0),
                        class_dims=((7.5, 2.4, 1.6),), seed=1)
        with pytest.raises(RuntimeError, match="placement failed"):
            sample_scene(cfg, scene_rng(1, "train", 0))

    def test_misaligned_scene_rejected(self):
        cfg = SimConfig(n_objects=(2, 2), seed=3)
        scene = sample_scene(cfg, scene_rng(3, "train", 0))
        with pytest.raises(ValueError, match="misaligned"):
            SyntheticScene(scene.camera, scene.objects,
                           scene.image_boxes[:1], scene.features)


class TestProjectionStatistics:
    def test_box_height_tracks_inverse_depth(self, noiseless_scenes):
        log_h, log_inv_z = [], []
        for scene in noiseless_scenes[:1000]:
            for obj, box in zip(scene.objects, scene.image_boxes):
                log_h.append(math.log(box.v_max - box.v_min))
                log_inv_z.append(math.log(1.0 / obj.pose.z))
        r = np.corrcoef(log_h, log_inv_z)[0, 1]
        assert r > 0.95

    def test_nearness_score_orders_depth(self, noiseless_scenes):
        # pairwise agreement between the box-center nearness score and
        # true depth order, on clean boxes
        agree, total = 0, 0
        for scene in noiseless_scenes[:1000]:
            cam = scene.camera
            scores = [coarse_relative_depth(
                (0.5 * (b.u_min + b.u_max), 0.5 * (b.v_min + b.v_max)), cam)
                for b in scene.image_boxes]
            zs = [o.pose.z for o in scene.objects]
            for a in range(len(zs)):
                for b in range(a + 1, len(zs)):
                    if zs[a] == zs[b]:
                        continue
                    total += 1
                    if (scores[a] > scores[b]) == (zs[a] < zs[b]):
                        agree += 1
        assert total > 5000
        assert agree / total >= 0.99


class TestAppearanceModes:
    def _collect(self, mode, n_scenes=300, noise=0.1):
        cfg = SimConfig(seed=31, depth_cue_mode=mode,
                        appearance_noise=noise)
        zs, vecs, betas = [], [], []
        for i in range(n_scenes):
            scene = sample_scene(cfg, scene_rng(31, "train", i))
            for obj, feats in zip(scene.objects, scene.features):
                zs.append(obj.pose.z)
                vecs.append(feats.appearance)
                betas.append(local_orientation(obj.pose))
        return np.array(zs), np.array(vecs), np.array(betas)

    def test_full_mode_depth_channel_tracks_depth(self):
        zs, vecs, _ = self._collect("full")
        r = np.corrcoef(zs, vecs[:, sim.DEPTH_CUE_CHANNEL])[0, 1]
        assert r < -0.9

    @pytest.mark.parametrize("mode", ["geometry_only", "none"])
    def test_withheld_depth_channel_uncorrelated(self, mode):
        zs, vecs, _ = self._collect(mode)
        r = np.corrcoef(zs, vecs[:, sim.DEPTH_CUE_CHANNEL])[0, 1]
        assert abs(r) < 0.05

    def test_none_mode_is_prototype_only(self):
        # with the noise term off, "none" leaves the exact prototype:
        # nothing pose-dependent can remain
        cfg = SimConfig(seed=7, depth_cue_mode="none", appearance_noise=0.0)
        protos = class_prototypes(cfg.num_classes)
        for i in range(20):
            scene = sample_scene(cfg, scene_rng(7, "train", i))
            for obj, feats in zip(scene.objects, scene.features):
                assert np.array_equal(feats.appearance, protos[obj.class_id])

    def test_orientation_channels_encode_observation_angle(self):
        zs, vecs, betas = self._collect("geometry_only", n_scenes=20,
                                        noise=0.0)
        assert np.allclose(vecs[:, sim.SIN_CHANNEL], np.sin(betas))
        assert np.allclose(vecs[:, sim.COS_CHANNEL], np.cos(betas))

    def test_no_depth_channel_in_any_mode_without_cue(self):
        zs, vecs, _ = self._collect("none", n_scenes=20, noise=0.0)
        assert np.all(vecs[:, sim.DEPTH_CUE_CHANNEL] == 0.0)


class TestMakeDetections:
    def test_zero_jitter_is_identity(self):
        cfg = SimConfig(seed=11)
        scene = sample_scene(cfg, scene_rng(11, "train", 0))
        dets = make_detections(scene, 0.0, np.random.default_rng(0))
        for (box, feats), gt_box, gt_feats in zip(dets, scene.image_boxes,
                                                  scene.features):
            assert box == gt_box
            assert np.array_equal(feats.bbox_geom, gt_feats.bbox_geom)
            assert np.array_equal(feats.scanline, gt_feats.scanline)
            assert np.array_equal(feats.appearance, gt_feats.appearance)
            assert feats.appearance is not gt_feats.appearance

    def test_negative_sigma_rejected(self):
        cfg = SimConfig(seed=11)
        scene = sample_scene(cfg, scene_rng(11, "train", 0))
        with pytest.raises(ValueError):
            make_detections(scene, -1.0, np.random.default_rng(0))

    def test_mean_coordinate_displacement_is_folded_normal(
            self, noiseless_scenes):
        # |N(0, sigma)| has mean sigma * sqrt(2/pi); image clipping
        # truncates moves for boxes poking past the frame, so the law is
        # checked on boxes with comfortable margins
        rng = np.random.default_rng(4181)
        margin = 10.0
        moves = []
        n_boxes = 0
        for scene in noiseless_scenes:
            cam = scene.camera
            dets = make_detections(scene, 2.0, rng)
            n_boxes += len(dets)
            for gt, (box, _) in zip(scene.image_boxes, dets):
                if not (gt.u_min >= margin and gt.u_max <= cam.width - margin
                        and gt.v_min >= margin
                        and gt.v_max <= cam.height - margin):
                    continue
                moves.extend([abs(box.u_min - gt.u_min),
                              abs(box.u_max - gt.u_max),
                              abs(box.v_min - gt.v_min),
                              abs(box.v_max - gt.v_max)])
        assert n_boxes >= 10000
        expected = 2.0 * math.sqrt(2.0 / math.pi)
        assert np.mean(moves) == pytest.approx(expected, rel=0.03)

    def test_jittered_boxes_stay_inside_image(self, noiseless_scenes):
        rng = np.random.default_rng(77)
        for scene in noiseless_scenes[:200]:
            cam = scene.camera
            for box, _ in make_detections(scene, 6.0, rng):
                assert 0.0 <= box.u_min < box.u_max <= cam.width
                assert 0.0 <= box.v_min < box.v_max <= cam.height

    @given(st.floats(0.0, 60.0), st.integers(0, 2 ** 32 - 1))
    def test_boxes_valid_under_any_jitter(self, sigma, seed):
        cfg = SimConfig(n_objects=(2, 3), seed=19)
        scene = sample_scene(cfg, scene_rng(19, "train", 0))
        cam = scene.camera
        for box, _ in make_detections(scene, sigma,
                                      np.random.default_rng(seed)):
            assert 0.0 <= box.u_min < box.u_max <= cam.width
            assert 0.0 <= box.v_min < box.v_max <= cam.height

    def test_geometry_recomputed_appearance_carried(self):
        cfg = SimConfig(seed=23)
        scene = sample_scene(cfg, scene_rng(23, "train", 0))
        dets = make_detections(scene, 3.0, np.random.default_rng(5))
        cam = scene.camera
        for (box, feats), gt_feats in zip(dets, scene.features):
            assert np.array_equal(feats.bbox_geom, normalized_box(box, cam))
            assert np.array_equal(
                feats.scanline,
                scanline_descriptor(box, cam.height, sim.SCANLINE_BANDS))
            assert np.array_equal(feats.appearance, gt_feats.appearance)


class TestSceneTargets:
    def test_targets_align_with_objects(self):
        cfg = SimConfig(seed=29)
        scene = sample_scene(cfg, scene_rng(29, "train", 0))
        targets = scene_targets(scene)
        n = scene.num_objects
        assert targets["positions"].shape == (n, 2)
        assert targets["dims"].shape == (n, 2)
        assert targets["betas"].shape == (n,)
        assert targets["class_ids"].shape == (n,)
        for i, obj in enumerate(scene.objects):
            assert targets["positions"][i, 0] == obj.pose.x
            assert targets["positions"][i, 1] == obj.pose.z
            assert targets["dims"][i, 0] == obj.pose.length
            assert targets["class_ids"][i] == obj.class_id
            assert targets["betas"][i] == local_orientation(obj.pose)


class TestSceneRngAndSplits:
    def test_same_key_same_stream(self):
        a = scene_rng(3, "train", 7).normal(size=5)
        b = scene_rng(3, "train", 7).normal(size=5)
        assert np.array_equal(a, b)

    def test_splits_use_disjoint_streams(self):
        a = scene_rng(3, "train", 7).normal(size=5)
        b = scene_rng(3, "val", 7).normal(size=5)
        assert not np.array_equal(a, b)

    def test_unknown_split_rejected(self):
        with pytest.raises(KeyError):
            scene_rng(3, "test", 0)

    def test_split_scene_ids_disjoint(self):
        cfg = SimConfig(n_objects=(1, 2), seed=43)
        train = sim.build_split(cfg, "train", 5)
        val = sim.build_split(cfg, "val", 5)
        train_ids = {s.scene_id for s in train}
        val_ids = {s.scene_id for s in val}
        assert len(train_ids) == 5 and len(val_ids) == 5
        assert not (train_ids & val_ids)


class TestSceneSerialization:
    def test_round_trip_is_exact(self):
        cfg = SimConfig(seed=37)
        scene = sample_scene(cfg, scene_rng(37, "train", 2), scene_id=2)
        restored = scene_from_json_dict(
            json.loads(json.dumps(scene_to_json_dict(scene))))
        assert restored.scene_id == scene.scene_id
        assert restored.camera == scene.camera
        assert restored.objects == scene.objects
        assert restored.image_boxes == scene.image_boxes
        for fa, fb in zip(restored.features, scene.features):
            assert np.array_equal(fa.bbox_geom, fb.bbox_geom)
            assert np.array_equal(fa.scanline, fb.scanline)
            assert np.array_equal(fa.appearance, fb.appearance)


class TestDatasetFiles:
    def test_generate_writes_both_splits(self, tmp_path):
        cfg = SimConfig(n_objects=(1, 3), seed=53)
        paths = generate_dataset(cfg, 4, 3, tmp_path)
        _, split, scenes = load_split(paths["train"])
        assert split == "train" and len(scenes) == 4
        _, split, scenes = load_split(paths["val"])
        assert split == "val" and len(scenes) == 3

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = SimConfig(n_objects=(1, 3), seed=53)
        a = generate_dataset(cfg, 6, 2, tmp_path / "a")
        b = generate_dataset(cfg, 6, 2, tmp_path / "b")
        for split in ("train", "val"):
            with open(a[split], "rb") as fa, open(b[split], "rb") as fb:
                assert fa.read() == fb.read()

    def test_loaded_scenes_match_generated(self, tmp_path):
        cfg = SimConfig(n_objects=(1, 3), seed=59)
        scenes = sim.build_split(cfg, "val", 4)
        path = tmp_path / "val.json.gz"
        save_split(path, cfg, "val", scenes)
        _, _, loaded = load_split(path)
        assert [s.scene_id for s in loaded] == [s.scene_id for s in scenes]
        assert all(a.objects == b.objects for a, b in zip(loaded, scenes))

    def test_unknown_schema_rejected(self, tmp_path):
        doc = {"schema_version": 99, "split": "train", "config": {},
               "scenes": []}
        path = tmp_path / "bad.json.gz"
        with open(path, "wb") as fh:
            fh.write(gzip.compress(json.dumps(doc).encode("utf-8")))
        with pytest.raises(ValueError, match="schema"):
            load_split(path)

    def test_empty_split_sizes_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(SimConfig(), 0, 5, tmp_path)

    def test_config_dict_round_trip(self):
        cfg = SimConfig(n_objects=(2, 4), depth_cue_mode="geometry_only",
                        seed=61)
        doc = json.loads(json.dumps(sim._config_dict(cfg)))
        assert config_from_dict(doc) == cfg
