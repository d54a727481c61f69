"""Tests for pinhole geometry: depth scores, angles, projection."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevgraph.camera import (
    CameraModel,
    GroundPose,
    ImageBox,
    coarse_relative_depth,
    footprint_corners,
    initial_bev_position,
    project_ground_to_image,
    viewing_angle,
    wrap_angle,
)

CAM = CameraModel(fu=800.0, fv=800.0, u0=400.0, v0=300.0, width=800.0, height=600.0)


class TestCameraModel:
    def test_valid_construction(self):
        assert CAM.fu == 800.0

    @pytest.mark.parametrize("kwargs", [
        dict(fu=-1.0), dict(fv=0.0), dict(u0=0.0), dict(u0=800.0),
        dict(v0=-5.0), dict(v0=600.0),
    ])
    def test_invalid_intrinsics_rejected(self, kwargs):
        base = dict(fu=800.0, fv=800.0, u0=400.0, v0=300.0,
                    width=800.0, height=600.0)
        base.update(kwargs)
        with pytest.raises(ValueError):
            CameraModel(**base)


class TestImageBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            ImageBox(10.0, 10.0, 10.0, 20.0)
        with pytest.raises(ValueError):
            ImageBox(10.0, 30.0, 20.0, 20.0)

    def test_union_of_identical_box_is_itself(self):
        b = ImageBox(1.0, 2.0, 3.0, 4.0)
        assert b.union(b) == b

    def test_union_of_disjoint_boxes_spans_both(self):
        a = ImageBox(0.0, 0.0, 1.0, 1.0)
        b = ImageBox(2.0, 2.0, 3.0, 3.0)
        assert a.union(b) == ImageBox(0.0, 0.0, 3.0, 3.0)

    def test_union_of_nested_boxes_is_outer(self):
        outer = ImageBox(0.0, 0.0, 10.0, 10.0)
        inner = ImageBox(2.0, 3.0, 4.0, 5.0)
        assert outer.union(inner) == outer
        assert inner.union(outer) == outer

    def test_center_and_extents(self):
        b = ImageBox(0.0, 10.0, 4.0, 20.0)
        assert b.center == (2.0, 15.0)
        assert b.extent_u == 4.0
        assert b.extent_v == 10.0


class TestCoarseRelativeDepth:
    def test_zero_at_principal_point(self):
        assert coarse_relative_depth((400.0, 300.0), CAM) == 0.0

    def test_hand_computed_values(self):
        # c = (0, -300); centers below the principal point score positive.
        assert coarse_relative_depth((400.0, 450.0), CAM) == pytest.approx(45000.0)
        assert coarse_relative_depth((400.0, 360.0), CAM) == pytest.approx(18000.0)

    def test_lower_box_center_scores_higher(self):
        rows = np.linspace(310.0, 590.0, 29)
        scores = [coarse_relative_depth((400.0, v), CAM) for v in rows]
        assert all(s2 > s1 for s1, s2 in zip(scores, scores[1:]))

    def test_full_dot_product_used(self):
        # With an off-center principal column the horizontal term
        # contributes: c = (10, -300), d = (-40, -150).
        cam = CameraModel(fu=800.0, fv=800.0, u0=410.0, v0=300.0,
                          width=800.0, height=600.0)
        got = coarse_relative_depth((450.0, 450.0), cam)
        assert got == pytest.approx(-40.0 * 10.0 + (-150.0) * (-300.0))


class TestViewingAngle:
    def test_zero_at_principal_column(self):
        assert viewing_angle(400.0, CAM) == 0.0

    def test_one_focal_length_is_quarter_pi(self):
        assert viewing_angle(400.0 + 800.0, CAM) == pytest.approx(math.pi / 4)
        assert viewing_angle(400.0 - 800.0, CAM) == pytest.approx(-math.pi / 4)

    @given(st.floats(min_value=-1e7, max_value=1e7))
    def test_always_within_open_half_pi(self, u):
        a = viewing_angle(u, CAM)
        assert -math.pi / 2 < a < math.pi / 2


class TestInitialBevPosition:
    def test_on_axis(self):
        assert initial_bev_position(7.0, 0.0) == (0.0, 7.0)

    def test_forty_five_degrees(self):
        x, z = initial_bev_position(10.0, math.pi / 4)
        assert x == pytest.approx(10.0)
        assert z == 10.0

    def test_zero_depth(self):
        assert initial_bev_position(0.0, 1.2) == (0.0, 0.0)

    def test_rejects_half_pi(self):
        with pytest.raises(ValueError):
            initial_bev_position(5.0, math.pi / 2)
        with pytest.raises(ValueError):
            initial_bev_position(5.0, -math.pi / 2 - 0.1)

    def test_alternative_lateral_formula(self):
        x, z = initial_bev_position(10.0, 0.5, formula="atan")
        assert x == pytest.approx(10.0 * math.atan(0.5))
        assert z == 10.0
        with pytest.raises(ValueError):
            initial_bev_position(1.0, 0.0, formula="sin")

    @given(st.floats(min_value=0.0, max_value=100.0),
           st.floats(min_value=-1.5, max_value=1.5))
    def test_exact_z_and_sign_correct_x(self, z0, alpha):
        x, z = initial_bev_position(z0, alpha)
        assert z == z0
        if z0 > 0 and alpha != 0.0:
            assert math.copysign(1.0, x) == math.copysign(1.0, alpha)


class TestGroundPose:
    def test_validation(self):
        GroundPose(x=0.0, z=5.0, yaw=0.0, length=4.0, width=2.0)
        with pytest.raises(ValueError):
            GroundPose(x=0.0, z=-1.0, yaw=0.0, length=4.0, width=2.0)
        with pytest.raises(ValueError):
            GroundPose(x=0.0, z=5.0, yaw=0.0, length=0.0, width=2.0)
        with pytest.raises(ValueError):
            GroundPose(x=0.0, z=5.0, yaw=4.0, length=4.0, width=2.0)


class TestFootprintCorners:
    def test_axis_aligned_at_zero_yaw(self):
        corners = footprint_corners(1.0, 10.0, 0.0, 4.0, 2.0)
        assert corners.shape == (4, 2)
        np.testing.assert_allclose(sorted(corners[:, 0]), [0.0, 0.0, 2.0, 2.0])
        np.testing.assert_allclose(sorted(corners[:, 1]), [8.0, 8.0, 12.0, 12.0])

    def test_rotation_preserves_area(self):
        for yaw in (0.3, -1.2, 2.9):
            c = footprint_corners(0.0, 5.0, yaw, 4.0, 2.0)
            # Shoelace formula over the (ordered) quadrilateral.
            x, z = c[:, 0], c[:, 1]
            area = 0.5 * abs(sum(x[i] * z[(i + 1) % 4] - x[(i + 1) % 4] * z[i]
                                 for i in range(4)))
            assert area == pytest.approx(8.0)

    def test_heading_convention(self):
        # yaw=0 faces +z: front corners have larger z than back corners.
        c = footprint_corners(0.0, 10.0, 0.0, 4.0, 2.0)
        assert c[0, 1] == c[1, 1] == 12.0
        # yaw=pi/2 faces +x.
        c = footprint_corners(0.0, 10.0, math.pi / 2, 4.0, 2.0)
        assert c[0, 0] == pytest.approx(2.0)
        assert c[2, 0] == pytest.approx(-2.0)


class TestProjection:
    def test_on_axis_object_centered_at_principal_column(self):
        pose = GroundPose(x=0.0, z=10.0, yaw=0.0, length=4.0, width=2.0)
        box = project_ground_to_image(pose, 1.5, CAM)
        cu, _ = box.center
        assert cu == pytest.approx(400.0)

    def test_doubling_depth_halves_box_size(self):
        near = GroundPose(x=1.0, z=8.0, yaw=0.4, length=4.0, width=2.0)
        far = GroundPose(x=1.0, z=16.0, yaw=0.4, length=4.0, width=2.0)
        box_near = project_ground_to_image(near, 1.5, CAM)
        box_far = project_ground_to_image(far, 1.5, CAM)
        assert box_far.extent_v == pytest.approx(box_near.extent_v / 2, abs=1e-9)
        assert box_far.extent_u == pytest.approx(box_near.extent_u / 2, abs=1e-9)

    def test_behind_camera_rejected(self):
        with pytest.raises(ValueError):
            GroundPose(x=0.0, z=-3.0, yaw=0.0, length=4.0, width=2.0)

    def test_fully_outside_image_rejected(self):
        pose = GroundPose(x=500.0, z=5.0, yaw=0.0, length=4.0, width=2.0)
        with pytest.raises(ValueError):
            project_ground_to_image(pose, 1.5, CAM)

    def test_center_column_recovers_viewing_angle(self):
        # Near-point objects make the box center column the centroid ray.
        for x, z in [(3.0, 12.0), (-6.0, 20.0), (0.5, 7.0)]:
            pose = GroundPose(x=x, z=z, yaw=0.7, length=1e-6, width=1e-6)
            box = project_ground_to_image(pose, 1.5, CAM)
            cu, _ = box.center
            assert viewing_angle(cu, CAM) == pytest.approx(math.atan(x / z),
                                                           abs=1e-6)

    def test_taller_object_taller_box(self):
        pose = GroundPose(x=0.0, z=10.0, yaw=0.0, length=4.0, width=2.0)
        short = project_ground_to_image(pose, 1.0, CAM)
        tall = project_ground_to_image(pose, 2.0, CAM)
        assert tall.extent_v > short.extent_v
        assert tall.v_max == short.v_max  # both feet on the ground


class TestWrapAngle:
    @pytest.mark.parametrize("theta,expected", [
        (0.0, 0.0),
        (math.pi, -math.pi),
        (-math.pi, -math.pi),
        (3 * math.pi / 2, -math.pi / 2),
        (2 * math.pi + 0.25, 0.25),
        (-7 * math.pi, -math.pi),
    ])
    def test_values(self, theta, expected):
        assert wrap_angle(theta) == pytest.approx(expected)

    @given(st.floats(min_value=-50.0, max_value=50.0))
    def test_range_and_equivalence(self, theta):
        w = wrap_angle(theta)
        assert -math.pi <= w < math.pi
        assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-9)
        assert math.sin(w) == pytest.approx(math.sin(theta), abs=1e-9)
