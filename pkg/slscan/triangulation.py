"""Linear triangulation of camera/projector correspondences.

The camera frame is the world frame: P_cam = K_cam [I | 0] and P_proj = K_proj [R | t], where (R, t) maps camera
coordinates to projector coordinates.
"""
import dataclasses
import logging
import math
import torch
import warnings

from . import errors
from . import geometry
from . import misc
from . import registration


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class StereoRig:
    """A calibrated camera/projector pair. `transform` maps camera coordinates into projector coordinates."""
    camera: geometry.CameraModel
    projector: geometry.CameraModel
    transform: geometry.RigidTransform

    @property
    def P_cam(self):
        return build_projection(self.camera, geometry.RigidTransform.identity())

    @property
    def P_proj(self):
        return build_projection(self.projector, self.transform)

    @property
    def baseline(self):
        return geometry.invert(self.transform).t.norm().item()


@dataclasses.dataclass(frozen=True)
class TriangulationReport:
    mode: str
    candidates: int
    kept: int
    dropped_cheirality: int
    dropped_residual: int
    dropped_degenerate: int


def build_projection(model, pose):
    """The (3, 4) projection matrix K [R | t]. Distortion is not part of it; undistort pixels first."""
    return model.K @ torch.cat([pose.R, pose.t.unsqueeze(-1)], dim=-1)


def _device_rows(P, pixels):
    # The first two rows of the cross product of (u, v, 1) with P X; the third is a combination of these two.
    u = pixels[..., 0:1]
    v = pixels[..., 1:2]
    return torch.stack([v * P[2] - P[1], P[0] - u * P[2]], dim=-2)


def _depth(P, points):
    homogeneous = torch.cat([points, torch.ones_like(points[..., :1])], dim=-1)
    return (homogeneous @ P[2]) * torch.sign(torch.det(P[:, :3]))


def triangulate_points(P_cam, P_proj, x_cam, x_proj):
    """Batched homogeneous linear triangulation.

    For every pair of pixels, the 4x4 system [v p3 - p2; p1 - u p3; v' q3 - q2; q1 - u' q3] X = 0 is assembled with
    every row scaled to unit norm, and solved by SVD: X is the right singular vector of the smallest singular value,
    which is the residual. Row scaling makes the result invariant to the scale of either projection matrix.

    Arguments:
        P_cam, P_proj: (3, 4) projection matrices.
        x_cam, x_proj: Tensors of shape (N, 2) of undistorted pixels.

    Returns:
        A tuple of points of shape (N, 3), residuals of shape (N,), and a bool tensor of shape (N,) marking rays that
        are parallel or coincident; their points are NaN.
    """
    P_cam = misc.as_float64(P_cam, 'P_cam')
    P_proj = misc.as_float64(P_proj, 'P_proj')
    if P_cam.shape != (3, 4) or P_proj.shape != (3, 4):
        raise ValueError("Projection matrices must have shape (3, 4). They instead have shapes {} and {}."
                         .format(tuple(P_cam.shape), tuple(P_proj.shape)))
    x_cam = misc.validate_points(x_cam, 2, 'x_cam')
    x_proj = misc.validate_points(x_proj, 2, 'x_proj')
    if x_cam.shape != x_proj.shape or x_cam.ndimension() != 2:
        raise ValueError("x_cam and x_proj must have the same shape (N, 2). They instead have shapes {} and {}."
                         .format(tuple(x_cam.shape), tuple(x_proj.shape)))
    if x_cam.size(0) == 0:
        empty = torch.zeros(0, dtype=torch.float64)
        return torch.zeros(0, 3, dtype=torch.float64), empty, torch.zeros(0, dtype=torch.bool)

    A = torch.cat([_device_rows(P_cam, x_cam), _device_rows(P_proj, x_proj)], dim=-2)
    A = A / A.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    _, S, Vh = torch.linalg.svd(A)
    homogeneous = Vh[:, -1, :]
    w = homogeneous[:, 3]
    degenerate = (S[:, -2] < 1e-12 * S[:, 0]) | (w.abs() < 1e-12)
    safe_w = torch.where(degenerate, torch.ones_like(w), w)
    points = homogeneous[:, :3] / safe_w.unsqueeze(-1)
    points = torch.where(degenerate.unsqueeze(-1), torch.full_like(points, math.nan), points)
    return points, S[:, -1], degenerate


def triangulate_point(P_cam, P_proj, x_cam, x_proj):
    """Triangulates a single correspondence; see `triangulate_points`.

    Returns:
        A tuple of the world point, as a tensor of shape (3,), and the residual.

    Raises:
        DegenerateRays if the two rays are parallel or coincide.

    Warns:
        CheiralityWarning if the point is not in front of both devices.
    """
    x_cam = misc.validate_points(x_cam, 2, 'x_cam').reshape(1, 2)
    x_proj = misc.validate_points(x_proj, 2, 'x_proj').reshape(1, 2)
    points, residuals, degenerate = triangulate_points(P_cam, P_proj, x_cam, x_proj)
    if degenerate[0]:
        raise errors.DegenerateRays("The camera and projector rays are parallel.")
    point = points[0]
    if _depth(P_cam, point) <= 0 or _depth(P_proj, point) <= 0:
        warnings.warn("Triangulated point {} is behind one of the devices.".format(point.tolist()),
                      errors.CheiralityWarning)
    return point, residuals[0].item()


def _undistorted_pixels(model, pixels):
    xy = geometry.undistort(model.dist, model.normalize(pixels))
    return geometry._normalized_to_pixels(model.K, xy)


def _reprojection(P, points, pixels):
    homogeneous = torch.cat([points, torch.ones_like(points[..., :1])], dim=-1) @ P.T
    return homogeneous[..., :2] / homogeneous[..., 2:] - pixels


def _ray_plane(rig, x_cam, coordinate, axis):
    # The projector column u (or row v) spans the plane n . X_p = 0 in projector coordinates, with
    # n = (fx, skew, cx - u) (or (0, fy, cy - v)); moved into the camera frame it is (R^T n) . X + n . t = 0.
    K = rig.projector.K
    if axis == 'x':
        normals = torch.stack([K[0, 0].expand_as(coordinate), K[0, 1].expand_as(coordinate), K[0, 2] - coordinate],
                              dim=-1)
    else:
        normals = torch.stack([torch.zeros_like(coordinate), K[1, 1].expand_as(coordinate), K[1, 2] - coordinate],
                              dim=-1)
    rays = torch.cat([geometry._pixels_to_normalized(rig.camera.K, x_cam), torch.ones_like(x_cam[:, :1])], dim=-1)
    denominator = ((normals @ rig.transform.R) * rays).sum(dim=-1)
    numerator = -(normals @ rig.transform.t)
    degenerate = denominator.abs() < 1e-12 * normals.norm(dim=-1) * rays.norm(dim=-1)
    scale = numerator / torch.where(degenerate, torch.ones_like(denominator), denominator)
    points = rays * scale.unsqueeze(-1)
    points = torch.where(degenerate.unsqueeze(-1), torch.full_like(points, math.nan), points)
    return points, degenerate


def triangulate_map(corr, rig, max_residual=1.):
    """Triangulates every valid pixel of a correspondence map.

    With both projector axes decoded, each pixel is triangulated with `triangulate_points`. With a single axis, the
    camera ray is intersected with the plane of the decoded projector column (or row); projector distortion is not
    modelled in that mode. Points behind either device, or that reproject further than `max_residual` pixels from
    their observations in either device, are dropped.

    Arguments:
        corr: A `CorrespondenceMap`.
        rig: A `StereoRig`.
        max_residual: Reprojection gate, in pixels.

    Returns:
        A tuple of a `PointCloud`, in row-major pixel order with (row, column) provenance, and a
        `TriangulationReport`.

    Raises:
        MissingAxis if neither axis was decoded.
    """
    axes = corr.axes
    if len(axes) == 0:
        raise errors.MissingAxis("The correspondence map has no decoded axis.")
    mode = 'points' if len(axes) == 2 else 'plane-' + axes[0]

    pixel = torch.nonzero(corr.valid)
    candidates = pixel.size(0)
    x_cam_raw = pixel.flip(-1).to(torch.float64) + 0.5
    x_cam = _undistorted_pixels(rig.camera, x_cam_raw)
    P_cam = rig.P_cam
    P_proj = rig.P_proj

    if mode == 'points':
        x_proj = torch.stack([corr.proj_x[corr.valid], corr.proj_y[corr.valid]], dim=-1)
        x_proj = _undistorted_pixels(rig.projector, x_proj)
        points, _, degenerate = triangulate_points(P_cam, P_proj, x_cam, x_proj)
        observed = x_proj
        compare = slice(0, 2)
    else:
        axis = axes[0]
        coordinate = (corr.proj_x if axis == 'x' else corr.proj_y)[corr.valid]
        if not rig.projector.dist.is_zero:
            logger.info("Projector distortion is ignored when triangulating against projector planes.")
        points, degenerate = _ray_plane(rig, x_cam, coordinate, axis)
        observed = torch.stack([coordinate, coordinate], dim=-1)
        compare = slice(0, 1) if axis == 'x' else slice(1, 2)

    finite = degenerate.logical_not()
    safe = torch.where(finite.unsqueeze(-1), points, torch.zeros_like(points))
    in_front = finite & (_depth(P_cam, safe) > 0) & (_depth(P_proj, safe) > 0)
    camera_error = _reprojection(P_cam, safe, x_cam).norm(dim=-1)
    projector_error = _reprojection(P_proj, safe, observed)[:, compare].norm(dim=-1)
    small = (camera_error <= max_residual) & (projector_error <= max_residual)
    keep = in_front & small

    report = TriangulationReport(mode=mode,
                                 candidates=candidates,
                                 kept=int(keep.sum()),
                                 dropped_cheirality=int((finite & in_front.logical_not()).sum()),
                                 dropped_residual=int((in_front & small.logical_not()).sum()),
                                 dropped_degenerate=int(degenerate.sum()))
    logger.info("Triangulated %d of %d pixels (%s).", report.kept, candidates, mode)
    cloud = registration.PointCloud(points[keep], provenance=pixel[keep])
    return cloud, report
