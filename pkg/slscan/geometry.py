"""Pinhole camera/projector model, lens distortion and rigid transforms.

A projector is modelled as a "reverse camera": the same `CameraModel` describes both devices.

Pixel convention: pixel (row i, column j) covers [j, j + 1) x [i, i + 1), so its centre is at (j + 0.5, i + 0.5). This
holds for cameras and projectors alike, which is why a decoded projector column c is reported at c + 0.5.

Scene units are abstract; they are documented as millimetres throughout.
"""
import dataclasses
import logging
import math
import torch

from . import errors
from . import misc


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DistortionCoeffs:
    """Brown-Conrady radial-tangential distortion coefficients. All zero means an ideal pinhole."""
    k1: float = 0.
    k2: float = 0.
    p1: float = 0.
    p2: float = 0.
    k3: float = 0.

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = float(getattr(self, field.name))
            if not math.isfinite(value):
                raise ValueError("Distortion coefficient {} must be finite. It is instead {}."
                                 .format(field.name, value))
            object.__setattr__(self, field.name, value)

    @classmethod
    def from_sequence(cls, values):
        """Builds coefficients from the usual five-element layout (k1, k2, p1, p2, k3)."""
        values = [float(v) for v in values]
        if len(values) != 5:
            raise ValueError("Expected 5 distortion coefficients (k1, k2, p1, p2, k3), got {}.".format(len(values)))
        return cls(*values)

    def as_tensor(self):
        return torch.tensor([self.k1, self.k2, self.p1, self.p2, self.k3], dtype=torch.float64)

    def as_list(self):
        return [self.k1, self.k2, self.p1, self.p2, self.k3]

    @property
    def is_zero(self):
        return not any(self.as_list())


@dataclasses.dataclass(frozen=True)
class CameraModel:
    """Intrinsics and distortion of a camera, or of a projector.

    Attributes:
        fx, fy: Focal lengths, in pixels.
        cx, cy: Principal point, in pixels.
        width, height: Sensor (or projector panel) size, in pixels.
        skew: Axis skew, in pixels. In practice zero.
        dist: Lens distortion, applied in normalised coordinates before the intrinsic matrix.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    skew: float = 0.
    dist: DistortionCoeffs = DistortionCoeffs()

    def __post_init__(self):
        for name in ('fx', 'fy', 'cx', 'cy', 'skew'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError("{} must be finite. It is instead {}.".format(name, value))
            object.__setattr__(self, name, value)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("Focal lengths must be positive. Got fx={}, fy={}.".format(self.fx, self.fy))
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("Image size must be positive. Got {}x{}.".format(self.width, self.height))
        object.__setattr__(self, 'width', int(self.width))
        object.__setattr__(self, 'height', int(self.height))
        if not isinstance(self.dist, DistortionCoeffs):
            object.__setattr__(self, 'dist', DistortionCoeffs.from_sequence(self.dist))
        # Projectors commonly have their principal point off the panel, so this is legal.
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            logger.warning("Principal point (%g, %g) lies outside the %dx%d sensor.", self.cx, self.cy, self.width,
                           self.height)

    @classmethod
    def from_matrix(cls, K, width, height, dist=DistortionCoeffs()):
        K = misc.as_float64(K, 'K')
        return cls(fx=K[0, 0].item(), fy=K[1, 1].item(), cx=K[0, 2].item(), cy=K[1, 2].item(), width=width,
                   height=height, skew=K[0, 1].item(), dist=dist)

    @property
    def K(self):
        return torch.tensor([[self.fx, self.skew, self.cx],
                             [0., self.fy, self.cy],
                             [0., 0., 1.]], dtype=torch.float64)

    @property
    def size(self):
        return self.width, self.height

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def normalize(self, pixels):
        """Maps pixel coordinates to (still distorted) normalised coordinates."""
        pixels = misc.validate_points(pixels, 2, 'pixels')
        return _pixels_to_normalized(self.K, pixels)

    def denormalize(self, normalized):
        """Maps (already distorted) normalised coordinates to pixel coordinates."""
        normalized = misc.validate_points(normalized, 2, 'normalized')
        return _normalized_to_pixels(self.K, normalized)


@dataclasses.dataclass(frozen=True, eq=False)
class RigidTransform:
    """A rotation R followed by a translation t: x -> R x + t.

    Poses map world (or board) coordinates into device coordinates.
    """
    R: torch.Tensor
    t: torch.Tensor

    def __post_init__(self):
        R = misc.as_float64(self.R, 'R')
        t = misc.as_float64(self.t, 't')
        if R.shape != (3, 3):
            raise ValueError("R must have shape (3, 3). It instead has shape {}.".format(tuple(R.shape)))
        if t.shape != (3,):
            raise ValueError("t must have shape (3,). It instead has shape {}.".format(tuple(t.shape)))
        # Loose check: transforms read from files are only orthonormal to the precision they were printed at.
        if orthonormality_error(R) > 1e-6 or torch.det(R) <= 0:
            raise ValueError("R is not a proper rotation matrix.")
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls):
        return cls(torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))

    @classmethod
    def from_matrix(cls, matrix):
        """From a (3, 4) or (4, 4) matrix [R | t]."""
        matrix = misc.as_float64(matrix, 'matrix')
        if matrix.shape not in ((3, 4), (4, 4)):
            raise ValueError("matrix must have shape (3, 4) or (4, 4). It instead has shape {}."
                             .format(tuple(matrix.shape)))
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, t=None):
        rotvec = misc.as_float64(rotvec, 'rotvec')
        if t is None:
            t = torch.zeros(3, dtype=torch.float64)
        return cls(rotation_from_rotvec(rotvec), t)

    @classmethod
    def about_axis(cls, axis, angle, point=None):
        """Rotation by `angle` radians about the line through `point` (default the origin) along `axis`."""
        axis = misc.as_float64(axis, 'axis')
        norm = axis.norm()
        if norm == 0:
            raise ValueError("axis must be non-zero.")
        R = rotation_from_rotvec(axis / norm * angle)
        if point is None:
            return cls(R, torch.zeros(3, dtype=torch.float64))
        point = misc.as_float64(point, 'point')
        return cls(R, point - R @ point)

    @property
    def matrix(self):
        out = torch.eye(4, dtype=torch.float64)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out

    @property
    def rotation_angle(self):
        """Angle of the rotation part, in radians, in [0, pi]."""
        return rotation_angle(self.R)

    def apply(self, points):
        points = misc.validate_points(points, 3, 'points')
        return points @ self.R.T + self.t

    def rotate(self, vectors):
        vectors = misc.validate_points(vectors, 3, 'vectors')
        return vectors @ self.R.T

    def compose(self, other):
        return compose(self, other)

    def inverse(self):
        return invert(self)

    def is_valid(self, tolerance=1e-9):
        return orthonormality_error(self.R) <= tolerance and abs(torch.det(self.R).item() - 1) <= tolerance

    def allclose(self, other, atol=1e-9):
        return self.R.allclose(other.R, rtol=0, atol=atol) and self.t.allclose(other.t, rtol=0, atol=atol)

    def __repr__(self):
        return "RigidTransform(R={}, t={})".format(self.R.tolist(), self.t.tolist())


def compose(a, b):
    """Returns the transform x -> a(b(x))."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def invert(a):
    R_inv = a.R.T
    return RigidTransform(R_inv, -(R_inv @ a.t))


def orthonormality_error(R):
    return (R.T @ R - torch.eye(3, dtype=R.dtype)).abs().max().item()


def nearest_rotation(M):
    """Projects a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vh = torch.linalg.svd(misc.as_float64(M, 'M'))
    D = torch.ones(3, dtype=torch.float64)
    D[2] = torch.sign(torch.det(U @ Vh))
    return U @ torch.diag(D) @ Vh


def rotation_from_rotvec(rotvec):
    # Differentiable at rotvec = 0.
    return torch.linalg.matrix_exp(misc.skew_symmetric(rotvec))


def rotation_angle(R):
    axis = torch.stack([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(axis.norm().item(), (torch.trace(R) - 1).item())


def rotation_to_quaternion(R):
    """Returns the unit quaternion (w, x, y, z) of a rotation matrix, with w >= 0."""
    R = misc.as_float64(R, 'R')
    trace = torch.trace(R)
    if trace > 0:
        s = torch.sqrt(trace + 1) * 2
        q = torch.stack([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = torch.sqrt(1 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = torch.stack([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = torch.sqrt(1 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = torch.stack([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = torch.sqrt(1 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = torch.stack([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / q.norm()
    if q[0] < 0:
        q = -q
    return q


def quaternion_to_rotation(q):
    q = misc.as_float64(q, 'q')
    w, x, y, z = (q / q.norm()).unbind()
    return torch.stack([torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)]),
                        torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)]),
                        torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)])])


###################
# Distortion
###################

def _coeffs(dist):
    if isinstance(dist, DistortionCoeffs):
        return dist.as_tensor()
    dist = torch.as_tensor(dist, dtype=torch.float64)
    if dist.shape != (5,):
        raise ValueError("Distortion coefficients must have shape (5,). They instead have shape {}."
                         .format(tuple(dist.shape)))
    return dist


def _distort(coeffs, xy):
    # coeffs is ordered (k1, k2, p1, p2, k3); works with tensors that require grad.
    k1, k2, p1, p2, k3 = coeffs.unbind()
    x = xy[..., 0]
    y = xy[..., 1]
    r2 = x * x + y * y
    radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    x_out = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    y_out = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return torch.stack([x_out, y_out], dim=-1)


def _distort_jacobian(coeffs, xy):
    k1, k2, p1, p2, k3 = coeffs.unbind()
    x = xy[..., 0]
    y = xy[..., 1]
    r2 = x * x + y * y
    radial = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    # d(radial)/dx = g * x, d(radial)/dy = g * y
    g = 2 * k1 + r2 * (4 * k2 + 6 * k3 * r2)
    dxdx = radial + g * x * x + 2 * p1 * y + 6 * p2 * x
    dxdy = g * x * y + 2 * p1 * x + 2 * p2 * y
    dydx = g * x * y + 2 * p1 * x + 2 * p2 * y
    dydy = radial + g * y * y + 6 * p1 * y + 2 * p2 * x
    return dxdx, dxdy, dydx, dydy


def distort(dist, normalized):
    """Applies radial-tangential lens distortion to normalised camera coordinates.

    x' = x (1 + k1 r^2 + k2 r^4 + k3 r^6) + 2 p1 x y + p2 (r^2 + 2 x^2), and symmetrically for y'.

    Arguments:
        dist: A `DistortionCoeffs`, or a tensor ordered (k1, k2, p1, p2, k3).
        normalized: Tensor of shape (..., 2).

    Returns:
        Tensor of shape (..., 2) of distorted normalised coordinates.
    """
    normalized = misc.validate_points(normalized, 2, 'normalized')
    return _distort(_coeffs(dist), normalized)


def undistort(dist, distorted, max_iterations=50, tolerance=1e-9):
    """Inverts `distort` by damped Newton iteration.

    Arguments:
        dist: As `distort`.
        distorted: Tensor of shape (..., 2) of distorted normalised coordinates.
        max_iterations: Iteration cap.
        tolerance: Required accuracy of distort(undistort(p)) = p.

    Returns:
        Tensor of shape (..., 2) of undistorted normalised coordinates.

    Raises:
        NoConvergence if some point cannot be inverted to `tolerance` within `max_iterations`; typically because it
        lies outside the region where the distortion polynomial is invertible.
    """
    target = misc.validate_points(distorted, 2, 'distorted')
    coeffs = _coeffs(dist)
    if not coeffs.any():
        return target.clone()

    xy = target.clone()
    residual = _distort(coeffs, xy) - target
    norm = residual.norm(dim=-1)
    for _ in range(max_iterations):
        if not (norm > tolerance).any():
            break
        a, b, c, d = _distort_jacobian(coeffs, xy)
        det = a * d - b * c
        safe_det = torch.where(det == 0, torch.ones_like(det), det)
        step = torch.stack([(d * residual[..., 0] - b * residual[..., 1]) / safe_det,
                            (a * residual[..., 1] - c * residual[..., 0]) / safe_det], dim=-1)
        step = torch.where((det == 0).unsqueeze(-1), torch.zeros_like(step), step)
        # Backtrack wherever the full Newton step would increase the residual.
        scale = torch.ones_like(norm)
        for _ in range(30):
            candidate = xy - scale.unsqueeze(-1) * step
            candidate_residual = _distort(coeffs, candidate) - target
            candidate_norm = candidate_residual.norm(dim=-1)
            worse = candidate_norm > norm
            if not worse.any():
                break
            scale = torch.where(worse, scale / 2, scale)
        xy = candidate
        residual = candidate_residual
        norm = candidate_norm

    worst = norm.max().item() if norm.numel() > 0 else 0.
    if worst > tolerance:
        raise errors.NoConvergence("Undistortion did not converge: residual {:.3g} after {} iterations."
                                   .format(worst, max_iterations))
    return xy


###################
# Projection
###################

def _pixels_to_normalized(K, pixels):
    y = (pixels[..., 1] - K[1, 2]) / K[1, 1]
    x = (pixels[..., 0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
    return torch.stack([x, y], dim=-1)


def _normalized_to_pixels(K, xy):
    u = K[0, 0] * xy[..., 0] + K[0, 1] * xy[..., 1] + K[0, 2]
    v = K[1, 1] * xy[..., 1] + K[1, 2]
    return torch.stack([u, v], dim=-1)


def project_unchecked(model, pose, points):
    """As `project`, but never raises: points at or behind the camera get NaN pixels (and their true depth)."""
    points = misc.validate_points(points, 3, 'points')
    camera_points = pose.apply(points)
    depth = camera_points[..., 2]
    in_front = depth > 0
    safe_depth = torch.where(in_front, depth, torch.ones_like(depth))
    xy = camera_points[..., :2] / safe_depth.unsqueeze(-1)
    pixels = _normalized_to_pixels(model.K, _distort(model.dist.as_tensor(), xy))
    pixels = torch.where(in_front.unsqueeze(-1), pixels, torch.full_like(pixels, math.nan))
    return pixels, depth


def project(model, pose, points):
    """Projects world points into a device.

    Arguments:
        model: The `CameraModel` of the device.
        pose: `RigidTransform` from world coordinates to device coordinates.
        points: Tensor of shape (..., 3) of world points.

    Returns:
        A tuple of a tensor of shape (..., 2) of distorted pixel coordinates, and a tensor of shape (...) of depths
        (the Z coordinate in the device frame; the lambda of the pinhole equation).

    Raises:
        BehindCamera if any point has Z <= 0 in the device frame.
    """
    pixels, depth = project_unchecked(model, pose, points)
    if (depth <= 0).any():
        raise errors.BehindCamera("{} point(s) lie at or behind the image plane.".format(int((depth <= 0).sum())))
    return pixels, depth


def pixel_rays(model, pixels):
    """Returns the undistorted normalised viewing directions (x, y, 1) of pixels, in the device frame."""
    xy = undistort(model.dist, model.normalize(pixels))
    return torch.cat([xy, torch.ones_like(xy[..., :1])], dim=-1)


def back_project(model, pose, pixels, depth):
    """Inverse of `project`: recovers world points from pixels and their depths."""
    depth = torch.as_tensor(depth, dtype=torch.float64)
    camera_points = pixel_rays(model, pixels) * depth.unsqueeze(-1)
    return invert(pose).apply(camera_points)
