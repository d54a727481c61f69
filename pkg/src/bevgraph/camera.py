"""Pinhole camera geometry for ground-plane scenes.

Conventions used throughout the package:

* Camera frame: X right, Y down, Z forward (optical axis). The camera
  sits `cam_height` meters above the ground with its axis level, so the
  ground plane is Y = +cam_height.
* BEV frame: (x, z) in meters, x right, z forward; the camera is at the
  origin looking along +z.
* Heading: yaw is measured so that yaw = 0 faces +z and the heading
  vector is (sin yaw, cos yaw); positive yaw turns toward +x.
* Pixels: u is the column (0 at the left), v the row (0 at the top), so
  v grows downward and objects near the bottom edge of the image are
  close to the camera.
"""

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap an angle in radians to [-pi, pi)."""
    return float((theta + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class CameraModel:
    """Intrinsics of a pinhole camera.

    Attributes:
        fu, fv: focal lengths in pixels.
        u0, v0: principal point in pixels.
        width, height: image size in pixels.
    """

    fu: float
    fv: float
    u0: float
    v0: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fu}, {self.fv})")
        if not (0 < self.u0 < self.width):
            raise ValueError(f"u0={self.u0} outside image width {self.width}")
        if not (0 < self.v0 < self.height):
            raise ValueError(f"v0={self.v0} outside image height {self.height}")


@dataclass(frozen=True)
class ImageBox:
    """An axis-aligned pixel-space box with u_min < u_max, v_min < v_max."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(
                f"degenerate box ({self.u_min}, {self.v_min}, "
                f"{self.u_max}, {self.v_max})"
            )

    @property
    def center(self):
        return (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))

    @property
    def extent_u(self):
        return self.u_max - self.u_min

    @property
    def extent_v(self):
        return self.v_max - self.v_min

    def union(self, other):
        """Smallest axis-aligned box containing both boxes."""
        return ImageBox(
            min(self.u_min, other.u_min),
            min(self.v_min, other.v_min),
            max(self.u_max, other.u_max),
            max(self.v_max, other.v_max),
        )

    def intersects_image(self, cam):
        return (self.u_max > 0 and self.u_min < cam.width
                and self.v_max > 0 and self.v_min < cam.height)


@dataclass(frozen=True)
class GroundPose:
    """An object's pose on the ground plane.

    Attributes:
        x, z: centroid in the BEV frame, meters.
        yaw: heading in radians, in [-pi, pi); 0 faces +z.
        length: extent along the heading, meters.
        width: extent perpendicular to the heading, meters.
    """

    x: float
    z: float
    yaw: float
    length: float
    width: float

    def __post_init__(self):
        if self.z <= 0:
            raise ValueError(f"pose must be in front of the camera, z={self.z}")
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"dimensions must be positive, got "
                             f"({self.length}, {self.width})")
        if not (-math.pi <= self.yaw < math.pi):
            raise ValueError(f"yaw={self.yaw} outside [-pi, pi)")


def footprint_corners(x, z, yaw, length, width):
    """BEV corners of an oriented rectangular footprint.

    Returns a (4, 2) array of (x, z) corners in the order
    front-right, front-left, back-left, back-right, where "front" is the
    heading direction (sin yaw, cos yaw) and "right" is (cos yaw, -sin yaw).
    """
    hx, hz = math.sin(yaw), math.cos(yaw)
    rx, rz = math.cos(yaw), -math.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    return np.array([
        [x + hl * hx + hw * rx, z + hl * hz + hw * rz],
        [x + hl * hx - hw * rx, z + hl * hz - hw * rz],
        [x - hl * hx - hw * rx, z - hl * hz - hw * rz],
        [x - hl * hx + hw * rx, z - hl * hz + hw * rz],
    ])


def coarse_relative_depth(box_center, cam):
    """Unscaled nearness score of a detection from its box center.

    Let c be the vector from the bottom-center pixel (width/2, height)
    to the principal point and d the vector from the box center to the
    principal point; the score is the dot product d . c. Boxes whose
    centers sit near the bottom edge (close objects) score high, boxes
    near the principal point (far objects, at the horizon for a level
    camera) score near zero. Only relative order is meaningful.
    """
    cu, cv = box_center
    c = (cam.u0 - 0.5 * cam.width, cam.v0 - cam.height)
    d = (cam.u0 - cu, cam.v0 - cv)
    return d[0] * c[0] + d[1] * c[1]


def viewing_angle(u, cam):
    """Angle between the optical axis and the ray through pixel column u.

    alpha = atan((u - u0) / fu), so alpha is 0 at the principal column,
    positive to the right, and always within (-pi/2, pi/2).
    """
    return math.atan((u - cam.u0) / cam.fu)


def initial_bev_position(z0, alpha, formula="tan"):
    """Place an object in the BEV plane from a depth score and an angle.

    The z component equals z0 exactly. The lateral component is
    x = z0 * tan(alpha) by default; formula="atan" switches to
    x = z0 * atan(alpha) for the alternative reading of the lateral
    placement rule.
    """
    if abs(alpha) >= math.pi / 2:
        raise ValueError(f"viewing angle {alpha} outside (-pi/2, pi/2)")
    if formula == "tan":
        x = z0 * math.tan(alpha)
    elif formula == "atan":
        x = z0 * math.atan(alpha)
    else:
        raise ValueError(f"unknown lateral placement formula {formula!r}")
    return (x, z0)


def project_ground_to_image(pose, obj_height, cam, cam_height=1.6):
    """Project an object standing on the ground plane into the image.

    The box's vertical extent spans the object's base and top rows at
    the centroid depth, and the horizontal extent spans the footprint
    corners evaluated at that same depth. Keeping a single depth for the
    whole box makes the projected size scale exactly as 1/z and keeps
    the box center column aligned with the centroid's viewing angle;
    projecting each corner at its own depth would break both.

    Args:
        pose: GroundPose of the object.
        obj_height: vertical extent of the object in meters.
        cam: CameraModel.
        cam_height: camera center's height above the ground, meters.

    Returns:
        ImageBox of the projection.

    Raises:
        ValueError: if the pose is behind the camera or the projected
            box lies fully outside the image rectangle.
    """
    if pose.z <= 0:
        raise ValueError(f"object behind the camera, z={pose.z}")
    if obj_height <= 0:
        raise ValueError(f"object height must be positive, got {obj_height}")
    z = pose.z
    corners = footprint_corners(pose.x, pose.z, pose.yaw, pose.length, pose.width)
    xs = corners[:, 0]
    u_min = cam.u0 + cam.fu * xs.min() / z
    u_max = cam.u0 + cam.fu * xs.max() / z
    v_bottom = cam.v0 + cam.fv * cam_height / z
    v_top = cam.v0 + cam.fv * (cam_height - obj_height) / z
    box = ImageBox(u_min, v_top, u_max, v_bottom)
    if not box.intersects_image(cam):
        raise ValueError(
            f"projected box {box} lies fully outside the "
            f"{cam.width}x{cam.height} image"
        )
    return box
