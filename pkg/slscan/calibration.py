"""Planar-target calibration of the camera, of the projector as a reverse camera, and of their stereo extrinsics."""
import dataclasses
import logging
import math
import torch
import warnings

from . import codec
from . import errors
from . import geometry
from . import misc


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class CalibrationView:
    """One pose of the calibration board.

    Attributes:
        board_points: Tensor of shape (N, 2) of board-plane corner coordinates (Z = 0 is implied), in scene units.
        image_points: Tensor of shape (N, 2) of the same corners in camera pixels, in the same order.
        projector_points: Optional tensor of shape (N, 2) of the corners in projector pixels. NaN rows mark corners
            that could not be transferred.
        correspondence: Optional decoded `CorrespondenceMap` captured with the board in this pose.
        name: Optional label, used in logs and reports.
    """
    board_points: torch.Tensor
    image_points: torch.Tensor
    projector_points: torch.Tensor = None
    correspondence: codec.CorrespondenceMap = None
    name: str = None

    def __post_init__(self):
        board = torch.as_tensor(self.board_points, dtype=torch.float64)
        if board.ndimension() == 2 and board.size(-1) == 3:
            if (board[:, 2] != 0).any():
                raise ValueError("Board points must lie on the plane Z = 0.")
            board = board[:, :2]
        board = misc.validate_points(board, 2, 'board_points')
        image = misc.validate_points(self.image_points, 2, 'image_points')
        if board.ndimension() != 2 or image.shape != board.shape:
            raise ValueError("board_points and image_points must both have shape (N, 2). They instead have shapes {} "
                             "and {}.".format(tuple(board.shape), tuple(image.shape)))
        if board.size(0) < 4:
            raise ValueError("A calibration view needs at least 4 corners, got {}.".format(board.size(0)))
        object.__setattr__(self, 'board_points', board)
        object.__setattr__(self, 'image_points', image)
        if self.projector_points is not None:
            projector = torch.as_tensor(self.projector_points, dtype=torch.float64)
            if projector.shape != board.shape:
                raise ValueError("projector_points must have shape {}. It instead has shape {}."
                                 .format(tuple(board.shape), tuple(projector.shape)))
            object.__setattr__(self, 'projector_points', projector)

    def __len__(self):
        return self.board_points.size(0)

    def observations(self, use_projector_points=False):
        """The (board, pixel) pairs seen by the camera, or by the projector if `use_projector_points`."""
        if not use_projector_points:
            return self.board_points, self.image_points
        if self.projector_points is None:
            raise ValueError("View {} has no projector points; transfer its corners first.".format(self.name))
        keep = torch.isfinite(self.projector_points).all(dim=-1)
        return self.board_points[keep], self.projector_points[keep]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class CalibrationResult:
    """A calibrated device: its model, the board pose of every view, and the RMS reprojection error in pixels."""
    model: geometry.CameraModel
    poses: tuple
    rms: float
    cost_trace: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'poses', tuple(self.poses))
        if not self.rms >= 0:
            raise ValueError("rms must be non-negative. It is instead {}.".format(self.rms))


@dataclasses.dataclass(frozen=True)
class ReprojectionReport:
    rms: float
    per_view: tuple
    ok: bool


@dataclasses.dataclass(frozen=True, eq=False)
class CornerTransfer:
    """Corners transferred into the projector. `points` has NaN rows for the `dropped` corner indices."""
    points: torch.Tensor
    dropped: tuple
    support: tuple


@dataclasses.dataclass(frozen=True, eq=False)
class StereoCalibration:
    camera: CalibrationResult
    projector: CalibrationResult
    transform: geometry.RigidTransform
    spread: float
    views: tuple
    projector_views: tuple


def checkerboard_points(columns, rows, square_size):
    """Inner-corner coordinates of a board, row-major from the board origin, as a (rows * columns, 2) tensor."""
    if columns < 2 or rows < 2 or square_size <= 0:
        raise ValueError("A board needs at least 2x2 corners and a positive square size. Got {}x{} at {}."
                         .format(columns, rows, square_size))
    y, x = torch.meshgrid(torch.arange(rows, dtype=torch.float64), torch.arange(columns, dtype=torch.float64),
                          indexing='ij')
    return torch.stack([x, y], dim=-1).reshape(-1, 2) * square_size


###################
# Homographies
###################

def _normalization(points):
    # Similarity moving the centroid to the origin and the mean distance to sqrt(2).
    centroid = points.mean(dim=0)
    scale = (points - centroid).norm(dim=-1).mean()
    if scale == 0:
        raise errors.Degenerate("All points coincide.")
    scale = math.sqrt(2) / scale
    T = torch.tensor([[scale, 0., -scale * centroid[0]],
                      [0., scale, -scale * centroid[1]],
                      [0., 0., 1.]], dtype=torch.float64)
    return T, (points - centroid) * scale


def _null_vector(A, rank, error, message):
    # Pad so that the reduced SVD still returns a full basis of the row space's complement.
    if A.size(0) < A.size(1):
        A = torch.cat([A, A.new_zeros(A.size(1) - A.size(0), A.size(1))])
    _, S, Vh = torch.linalg.svd(A, full_matrices=False)
    if S[0] == 0 or S[rank - 1] / S[0] < 1e-10:
        raise error(message)
    return Vh[-1]


def apply_homography(H, points):
    """Maps (..., 2) points through a 3x3 homography."""
    points = misc.validate_points(points, 2, 'points')
    H = misc.as_float64(H, 'H')
    homogeneous = torch.cat([points, torch.ones_like(points[..., :1])], dim=-1) @ H.T
    return homogeneous[..., :2] / homogeneous[..., 2:]


def estimate_homography(src, dst):
    """Estimates the homography H with dst ~ H src by the normalised direct linear transform.

    Both point sets are moved to their centroid and scaled to a mean distance of sqrt(2) before the SVD solve, and
    the result is de-normalised afterwards.

    Arguments:
        src: Tensor of shape (N, 2), N >= 4.
        dst: Tensor of shape (N, 2).

    Returns:
        A (3, 3) float64 tensor, scaled so that H[2, 2] = 1 where that entry is non-zero.

    Raises:
        Degenerate if the linear system has rank below 8, for example when the points are collinear.
    """
    src = misc.validate_points(src, 2, 'src')
    dst = misc.validate_points(dst, 2, 'dst')
    if src.ndimension() != 2 or src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape (N, 2). They instead have shapes {} and {}."
                         .format(tuple(src.shape), tuple(dst.shape)))
    if src.size(0) < 4:
        raise errors.Degenerate("A homography needs at least 4 correspondences, got {}.".format(src.size(0)))

    T_src, src_n = _normalization(src)
    T_dst, dst_n = _normalization(dst)
    x, y = src_n.unbind(-1)
    u, v = dst_n.unbind(-1)
    one = torch.ones_like(x)
    zero = torch.zeros_like(x)
    rows_u = torch.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], dim=-1)
    rows_v = torch.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], dim=-1)
    A = torch.cat([rows_u, rows_v])
    h = _null_vector(A, 8, errors.Degenerate, "Homography system is rank deficient; are the points collinear?")
    H = torch.linalg.solve(T_dst, h.view(3, 3) @ T_src)
    if H[2, 2].abs() > 1e-12 * H.abs().max():
        return H / H[2, 2]
    return H / H.norm()


###################
# Closed form
###################

def _v(H, i, j):
    h_i = H[:, i]
    h_j = H[:, j]
    return torch.stack([h_i[0] * h_j[0],
                        h_i[0] * h_j[1] + h_i[1] * h_j[0],
                        h_i[1] * h_j[1],
                        h_i[2] * h_j[0] + h_i[0] * h_j[2],
                        h_i[2] * h_j[1] + h_i[1] * h_j[2],
                        h_i[2] * h_j[2]])


def zhang_intrinsics(homographies, image_size, zero_skew=False):
    """Closed-form intrinsics from the board-to-image homographies of several views.

    Every view contributes the two constraints v12^T b = 0 and (v11 - v22)^T b = 0 on the symmetric matrix
    B = K^-T K^-1, which is recovered by SVD and factored into the intrinsics. Homographies are first expressed in
    pixel coordinates normalised by the image size, which keeps the system well conditioned.

    Arguments:
        homographies: Sequence of (3, 3) tensors.
        image_size: (width, height) of the device.
        zero_skew: Whether to add the constraint B12 = 0. Two views suffice in that case.

    Returns:
        A `CameraModel` without distortion.

    Raises:
        DegenerateMotion if there are too few views or the constraint system is rank deficient (e.g. all boards
        parallel).
    """
    homographies = [misc.as_float64(H, 'homography') for H in homographies]
    minimum = 2 if zero_skew else 3
    if len(homographies) < minimum:
        raise errors.DegenerateMotion("Closed-form intrinsics need at least {} views, got {}."
                                      .format(minimum, len(homographies)))
    width, height = image_size
    scale = float(max(width, height))
    N = torch.tensor([[1 / scale, 0., -width / (2 * scale)],
                      [0., 1 / scale, -height / (2 * scale)],
                      [0., 0., 1.]], dtype=torch.float64)

    rows = []
    for H in homographies:
        H = N @ H
        H = H / H.norm()
        rows.append(_v(H, 0, 1))
        rows.append(_v(H, 0, 0) - _v(H, 1, 1))
    if zero_skew:
        rows.append(torch.tensor([0., 1., 0., 0., 0., 0.], dtype=torch.float64))
    b = _null_vector(torch.stack(rows), 5, errors.DegenerateMotion,
                     "Intrinsics constraints are rank deficient; the board orientations are too similar.")
    if b[0] < 0:
        b = -b
    B11, B12, B22, B13, B23, B33 = b.tolist()

    denominator = B11 * B22 - B12 ** 2
    if B11 <= 0 or denominator <= 0:
        raise errors.DegenerateMotion("Recovered conic is not positive definite.")
    v0 = (B12 * B13 - B11 * B23) / denominator
    lambda_ = B33 - (B13 ** 2 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lambda_ / B11 <= 0:
        raise errors.DegenerateMotion("Recovered conic is not positive definite.")
    alpha = math.sqrt(lambda_ / B11)
    beta = math.sqrt(lambda_ * B11 / denominator)
    gamma = -B12 * alpha ** 2 * beta / lambda_
    u0 = gamma * v0 / beta - B13 * alpha ** 2 / lambda_

    K = torch.linalg.solve(N, torch.tensor([[alpha, gamma, u0],
                                            [0., beta, v0],
                                            [0., 0., 1.]], dtype=torch.float64))
    if zero_skew:
        K[0, 1] = 0
    return geometry.CameraModel.from_matrix(K, width, height)


def zhang_extrinsics(model, H):
    """Board pose from the intrinsics and the board-to-image homography of one view.

    r1 = l K^-1 h1, r2 = l K^-1 h2, r3 = r1 x r2, t = l K^-1 h3, with the scale l chosen so that the board lies in
    front of the device (t_z > 0), followed by projection onto the nearest rotation.
    """
    H = misc.as_float64(H, 'H')
    K_inv = torch.linalg.inv(model.K)
    a1 = K_inv @ H[:, 0]
    a2 = K_inv @ H[:, 1]
    a3 = K_inv @ H[:, 2]
    scale = 2 / (a1.norm() + a2.norm())
    if (scale * a3)[2] < 0:
        scale = -scale
    r1 = scale * a1
    r2 = scale * a2
    t = scale * a3
    R = geometry.nearest_rotation(torch.stack([r1, r2, torch.linalg.cross(r1, r2)], dim=1))
    return geometry.RigidTransform(R, t)


###################
# Reprojection
###################

def _board3(board):
    return torch.cat([board, torch.zeros_like(board[:, :1])], dim=-1)


def _view_errors(model, pose, board, pixels):
    projected, _ = geometry.project_unchecked(model, pose, _board3(board))
    return (projected - pixels).norm(dim=-1)


def reprojection_error(views, result, use_projector_points=False):
    """Root-mean-square Euclidean reprojection error over every corner of every view.

    Returns:
        A `ReprojectionReport` with the RMS, the mean error of each view, and `ok`, which is true iff the RMS is
        below 1 pixel.
    """
    if len(views) != len(result.poses):
        raise ValueError("Got {} views but {} poses.".format(len(views), len(result.poses)))
    squared = []
    per_view = []
    for view, pose in zip(views, result.poses):
        board, pixels = view.observations(use_projector_points)
        view_errors = _view_errors(result.model, pose, board, pixels)
        squared.append(view_errors ** 2)
        per_view.append(view_errors.mean().item() if view_errors.numel() > 0 else 0.)
    squared = torch.cat(squared)
    rms = math.sqrt(squared.mean().item()) if squared.numel() > 0 else 0.
    return ReprojectionReport(rms=rms, per_view=tuple(per_view), ok=rms < 1.)


###################
# Refinement
###################

_DISTORTION_NAMES = ('k1', 'k2', 'p1', 'p2', 'k3')


def _intrinsic_names(estimate_distortion, estimate_skew, estimate_k3):
    names = ['fx', 'fy', 'cx', 'cy']
    if estimate_skew:
        names.append('skew')
    if estimate_distortion:
        names.extend(['k1', 'k2', 'p1', 'p2'])
        if estimate_k3:
            names.append('k3')
    return tuple(names)


class _ReprojectionResidual(torch.nn.Module):
    def __init__(self, names, model, poses, boards, observed):
        """Stacked reprojection residuals as a function of a parameter vector.

        The vector holds the intrinsics named by `names`, then for every view a local rotation update w and the
        translation t; the rotation of view i is (I + [w]x) R_i, which has the derivative of exp([w]x) R_i at w = 0.

        Arguments:
            names: Names of the intrinsics being estimated, in order.
            model: The current `CameraModel`, providing the intrinsics that are held fixed.
            poses: The current per-view `RigidTransform`s, providing the R_i.
            boards: Per view, a (N_i, 3) tensor of board points.
            observed: Per view, a (N_i, 2) tensor of observed pixels.
        """
        super(_ReprojectionResidual, self).__init__()
        self.names = names
        self.fixed = {name: torch.tensor(value, dtype=torch.float64)
                      for name, value in zip(_DISTORTION_NAMES, model.dist.as_list())}
        self.fixed['skew'] = torch.tensor(model.skew, dtype=torch.float64)
        self.rotations = [pose.R for pose in poses]
        self.boards = boards
        self.observed = observed
        self.eye = torch.eye(3, dtype=torch.float64)

    def forward(self, params):
        values = dict(zip(self.names, params[:len(self.names)].unbind()))
        skew = values.get('skew', self.fixed['skew'])
        coeffs = torch.stack([values.get(name, self.fixed[name]) for name in _DISTORTION_NAMES])
        pose_params = params[len(self.names):].reshape(-1, 6)
        residuals = []
        for R, pose, board, observed in zip(self.rotations, pose_params.unbind(0), self.boards, self.observed):
            rotation = (self.eye + misc.skew_symmetric(pose[:3])) @ R
            camera = board @ rotation.T + pose[3:]
            xy = geometry._distort(coeffs, camera[:, :2] / camera[:, 2:])
            u = values['fx'] * xy[:, 0] + skew * xy[:, 1] + values['cx']
            v = values['fy'] * xy[:, 1] + values['cy']
            residuals.append(torch.stack([u, v], dim=-1) - observed)
        return torch.cat(residuals).reshape(-1)


def _pack(names, model, poses):
    intrinsics = {'fx': model.fx, 'fy': model.fy, 'cx': model.cx, 'cy': model.cy, 'skew': model.skew}
    intrinsics.update(zip(_DISTORTION_NAMES, model.dist.as_list()))
    blocks = [torch.tensor([intrinsics[name] for name in names], dtype=torch.float64)]
    for pose in poses:
        blocks.append(torch.zeros(3, dtype=torch.float64))
        blocks.append(pose.t)
    return torch.cat(blocks)


def _unpack(names, model, poses, params):
    values = dict(zip(names, params[:len(names)].tolist()))
    if values['fx'] <= 0 or values['fy'] <= 0:
        return None
    dist = model.dist.as_list()
    dist = geometry.DistortionCoeffs(*[values.get(name, value) for name, value in zip(_DISTORTION_NAMES, dist)])
    changes = {name: values[name] for name in ('fx', 'fy', 'cx', 'cy', 'skew') if name in values}
    new_model = dataclasses.replace(model, dist=dist, **changes)
    new_poses = []
    for pose, block in zip(poses, params[len(names):].reshape(-1, 6)):
        R = geometry.rotation_from_rotvec(block[:3]) @ pose.R
        new_poses.append(geometry.RigidTransform(R, block[3:]))
    return new_model, new_poses


def _cost(names, model, poses, boards, observed):
    residual = _ReprojectionResidual(names, model, poses, boards, observed)
    value = (residual(_pack(names, model, poses)) ** 2).sum().item()
    return value if math.isfinite(value) else math.inf


def refine_calibration(views, initial, estimate_distortion=True, estimate_skew=False, estimate_k3=True,
                       use_projector_points=False, max_iterations=100, tolerance=1e-12):
    """Levenberg-Marquardt refinement of intrinsics, distortion and every board pose.

    Minimises the sum of squared reprojection errors. The damping is Marquardt's, lambda * diag(J^T J); a step is
    accepted only if it lowers the cost, so the accepted cost sequence is non-increasing. Rotations are updated by a
    three-parameter local rotation and stay exactly orthonormal.

    Arguments:
        views: Sequence of `CalibrationView`.
        initial: `CalibrationResult`, typically from the closed form.
        estimate_distortion: Whether to estimate k1, k2, p1, p2 (and k3).
        estimate_skew: Whether to estimate the skew; otherwise it is held at its initial value.
        estimate_k3: Whether to estimate k3 when estimating distortion.
        use_projector_points: Calibrate the projector from the views' projector points instead of the camera.
        max_iterations: Cap on the number of Jacobian evaluations.
        tolerance: Stop once an accepted step changes the cost by less than this, relatively.

    Returns:
        A refined `CalibrationResult`, whose `cost_trace` holds the cost after every accepted step.

    Warns:
        NoImprovement if no step lowered the cost; `initial` is then returned unchanged.
    """
    if len(views) != len(initial.poses):
        raise ValueError("Got {} views but {} poses.".format(len(views), len(initial.poses)))
    names = _intrinsic_names(estimate_distortion, estimate_skew, estimate_k3)
    boards = []
    observed = []
    for view in views:
        board, pixels = view.observations(use_projector_points)
        boards.append(_board3(board))
        observed.append(pixels)

    model = initial.model
    poses = list(initial.poses)
    cost = _cost(names, model, poses, boards, observed)
    trace = [cost]
    damping = 1e-3
    accepted_any = False
    for iteration in range(max_iterations):
        if cost == 0:
            break
        residual_fn = _ReprojectionResidual(names, model, poses, boards, observed)
        params = _pack(names, model, poses)
        residual = residual_fn(params)
        J = torch.autograd.functional.jacobian(residual_fn, params, vectorize=True, strategy='forward-mode')
        gradient = J.T @ residual
        approximation = J.T @ J
        diagonal = torch.diagonal(approximation)
        diagonal = diagonal + 1e-12 * diagonal.max()

        accepted = False
        while damping < 1e16:
            system = approximation + damping * torch.diag(diagonal)
            step = torch.linalg.solve(system, -gradient)
            candidate = _unpack(names, model, poses, params + step)
            if candidate is not None:
                candidate_cost = _cost(names, *candidate, boards, observed)
                if candidate_cost < cost:
                    accepted = True
                    break
            damping *= 10
        if not accepted:
            break
        accepted_any = True
        model, poses = candidate
        change = (cost - candidate_cost) / cost
        cost = candidate_cost
        trace.append(cost)
        damping = max(damping / 10, 1e-12)
        logger.debug("Refinement iteration %d: cost %.6g.", iteration, cost)
        if change < tolerance:
            break

    if not accepted_any:
        warnings.warn("Refinement found no step that lowers the reprojection cost {:.3g}.".format(cost),
                      errors.NoImprovement)
        return initial
    result = CalibrationResult(model=model, poses=tuple(poses), rms=0., cost_trace=tuple(trace))
    rms = reprojection_error(views, result, use_projector_points).rms
    return dataclasses.replace(result, rms=rms)


###################
# Projector corners
###################

def transfer_corners_local_homography(view, window_radius=30, min_support=20, strict=False):
    """Transfers the camera-space board corners of a view into projector pixels through local homographies.

    For every corner, a homography from camera pixel centres to decoded projector coordinates is fitted over the
    valid pixels of a square window around the corner, and the corner is mapped through it.

    Arguments:
        view: A `CalibrationView` carrying a `correspondence` map with both axes decoded.
        window_radius: Half the side of the square window, in camera pixels.
        min_support: Minimum number of valid decoded pixels in a window.
        strict: Raise instead of dropping corners with too little support.

    Returns:
        A `CornerTransfer`. Dropped corners have NaN coordinates.

    Raises:
        MissingAxis if the map lacks an axis. InsufficientSupport if `strict` and some window has too few valid
        pixels.
    """
    corr = view.correspondence
    if corr is None:
        raise ValueError("View {} has no correspondence map.".format(view.name))
    if corr.proj_x is None or corr.proj_y is None:
        raise errors.MissingAxis("Corner transfer needs both projector axes decoded.")
    projector = torch.stack([corr.proj_x, corr.proj_y], dim=-1)
    centres = misc.pixel_centres(corr.width, corr.height)

    points = torch.full((len(view), 2), math.nan, dtype=torch.float64)
    dropped = []
    support = []
    for index, (u, v) in enumerate(view.image_points.tolist()):
        left = max(0, math.ceil(u - window_radius - 0.5))
        right = min(corr.width, math.floor(u + window_radius - 0.5) + 1)
        top = max(0, math.ceil(v - window_radius - 0.5))
        bottom = min(corr.height, math.floor(v + window_radius - 0.5) + 1)
        if right <= left or bottom <= top:
            valid = torch.zeros(0, dtype=torch.bool)
        else:
            valid = corr.valid[top:bottom, left:right].reshape(-1)
        count = int(valid.sum())
        support.append(count)
        error = None
        if count < min_support:
            error = errors.InsufficientSupport(index, count)
        else:
            src = centres[top:bottom, left:right].reshape(-1, 2)[valid]
            dst = projector[top:bottom, left:right].reshape(-1, 2)[valid]
            try:
                H = estimate_homography(src, dst)
            except errors.Degenerate:
                error = errors.InsufficientSupport(index, count)
            else:
                points[index] = apply_homography(H, torch.tensor([u, v], dtype=torch.float64))
        if error is not None:
            if strict:
                raise error
            logger.warning("Dropping corner %d of view %s: %s", index, view.name, error)
            dropped.append(index)
    return CornerTransfer(points=points, dropped=tuple(dropped), support=tuple(support))


###################
# Stereo
###################

def stereo_extrinsics(cam_poses, proj_poses, max_spread=5.):
    """The camera-to-projector transform, fused over views.

    Per view, T = T_proj o T_cam^-1. Rotations are averaged as sign-aligned quaternions, translations
    arithmetically.

    Arguments:
        cam_poses: Per-view board-to-camera `RigidTransform`s.
        proj_poses: Per-view board-to-projector `RigidTransform`s, for the same views.
        max_spread: Largest tolerated angle, in degrees, between any per-view rotation and the average.

    Returns:
        A tuple of the fused `RigidTransform` and the rotational spread in degrees.

    Raises:
        InconsistentViews if the spread exceeds `max_spread`.
    """
    if len(cam_poses) != len(proj_poses) or len(cam_poses) == 0:
        raise ValueError("Need the same, non-zero, number of camera and projector poses. Got {} and {}."
                         .format(len(cam_poses), len(proj_poses)))
    relatives = [geometry.compose(proj, geometry.invert(cam)) for cam, proj in zip(cam_poses, proj_poses)]
    if len(relatives) == 1:
        return relatives[0], 0.

    quaternions = [geometry.rotation_to_quaternion(relative.R) for relative in relatives]
    reference = quaternions[0]
    aligned = [q if torch.dot(q, reference) >= 0 else -q for q in quaternions]
    mean = torch.stack(aligned).mean(dim=0)
    R = geometry.quaternion_to_rotation(mean / mean.norm())
    t = torch.stack([relative.t for relative in relatives]).mean(dim=0)
    spread = max(misc.degrees(geometry.rotation_angle(relative.R @ R.T)) for relative in relatives)
    if spread > max_spread:
        raise errors.InconsistentViews("Per-view extrinsics disagree by up to {:.3g} degrees.".format(spread))
    return geometry.RigidTransform(R, t), spread


###################
# Pipelines
###################

def calibrate_device(views, image_size, use_projector_points=False, estimate_distortion=True, estimate_skew=False,
                     estimate_k3=True, refine=True):
    """Closed-form initialisation followed by refinement, for the camera or (with `use_projector_points`) the
    projector."""
    if len(views) == 0:
        raise errors.DegenerateMotion("No calibration views.")
    homographies = [estimate_homography(*view.observations(use_projector_points)) for view in views]
    model = zhang_intrinsics(homographies, image_size, zero_skew=not estimate_skew)
    poses = tuple(zhang_extrinsics(model, H) for H in homographies)
    initial = CalibrationResult(model=model, poses=poses, rms=0.)
    initial = dataclasses.replace(initial, rms=reprojection_error(views, initial, use_projector_points).rms)
    logger.info("Closed-form calibration: rms %.4g px over %d views.", initial.rms, len(views))
    if not refine:
        return initial
    result = refine_calibration(views, initial, estimate_distortion=estimate_distortion, estimate_skew=estimate_skew,
                                estimate_k3=estimate_k3, use_projector_points=use_projector_points)
    logger.info("Refined calibration: rms %.4g px.", result.rms)
    return result


def calibrate_stereo(views, camera_size, projector_size, window_radius=30, min_support=20, max_spread=5.,
                     **kwargs):
    """Camera calibration, corner transfer, projector calibration and stereo extrinsics in one go.

    Views whose transfer leaves fewer than 4 corners are left out of the projector calibration and of the stereo
    fusion.

    Returns:
        A `StereoCalibration`.
    """
    camera = calibrate_device(views, camera_size, **kwargs)
    transferred = []
    for view in views:
        transfer = transfer_corners_local_homography(view, window_radius=window_radius, min_support=min_support)
        transferred.append(view.replace(projector_points=transfer.points))
    usable = [i for i, view in enumerate(transferred)
              if int(torch.isfinite(view.projector_points).all(dim=-1).sum()) >= 4]
    if len(usable) < len(views):
        logger.warning("%d of %d views have too few transferred corners for the projector.",
                       len(views) - len(usable), len(views))
    projector_views = [transferred[i] for i in usable]
    projector = calibrate_device(projector_views, projector_size, use_projector_points=True, **kwargs)
    transform, spread = stereo_extrinsics([camera.poses[i] for i in usable], projector.poses, max_spread=max_spread)
    return StereoCalibration(camera=camera, projector=projector, transform=transform, spread=spread,
                             views=tuple(transferred), projector_views=tuple(usable))
