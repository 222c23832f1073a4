"""Point clouds and their rigid registration by iterative closest point."""
import dataclasses
import logging
import math
import numpy as np
import torch
from scipy import spatial

from . import errors
from . import geometry
from . import misc


logger = logging.getLogger(__name__)


CORRESPONDENCE_MODES = ('closest-point', 'normal-shooting', 'projective')
ERROR_METRICS = ('point-point', 'point-plane')


@dataclasses.dataclass(frozen=True, eq=False)
class PointCloud:
    """Points with optional unit normals and optional source-pixel provenance.

    Attributes:
        points: float64 tensor of shape (N, 3).
        normals: Optional float64 tensor of shape (N, 3). Normalised to unit length on construction.
        provenance: Optional int64 tensor of shape (N, 2) of (row, column) source camera pixels; (-1, -1) for points
            without a source pixel.
        comments: Free-form text carried along, e.g. into PLY comment lines.
    """
    points: torch.Tensor
    normals: torch.Tensor = None
    provenance: torch.Tensor = None
    comments: tuple = ()

    def __post_init__(self):
        points = torch.as_tensor(self.points, dtype=torch.float64)
        if points.numel() == 0:
            points = points.reshape(0, 3)
        points = misc.validate_points(points, 3, 'points')
        if points.ndimension() != 2:
            raise ValueError("points must have shape (N, 3). It instead has shape {}.".format(tuple(points.shape)))
        object.__setattr__(self, 'points', points)
        if self.normals is not None:
            normals = torch.as_tensor(self.normals, dtype=torch.float64)
            if normals.numel() == 0:
                normals = normals.reshape(0, 3)
            normals = misc.validate_points(normals, 3, 'normals')
            if normals.shape != points.shape:
                raise ValueError("normals must have shape {}. It instead has shape {}."
                                 .format(tuple(points.shape), tuple(normals.shape)))
            norm = normals.norm(dim=-1, keepdim=True)
            if (norm == 0).any():
                raise ValueError("normals must be non-zero.")
            object.__setattr__(self, 'normals', normals / norm)
        if self.provenance is not None:
            provenance = torch.as_tensor(self.provenance, dtype=torch.int64).reshape(-1, 2)
            if provenance.size(0) != points.size(0):
                raise ValueError("provenance must have shape ({}, 2). It instead has shape {}."
                                 .format(points.size(0), tuple(provenance.shape)))
            object.__setattr__(self, 'provenance', provenance)
        object.__setattr__(self, 'comments', tuple(self.comments))

    def __len__(self):
        return self.points.size(0)

    @property
    def has_normals(self):
        return self.normals is not None

    @property
    def centroid(self):
        return self.points.mean(dim=0)

    @property
    def bounding_box_diagonal(self):
        if len(self) == 0:
            return 0.
        return (self.points.max(dim=0).values - self.points.min(dim=0).values).norm().item()

    def transform(self, transform):
        return dataclasses.replace(self,
                                   points=transform.apply(self.points),
                                   normals=None if self.normals is None else transform.rotate(self.normals))

    def select(self, index):
        """The sub-cloud at `index`, a bool mask or an integer index tensor."""
        return dataclasses.replace(self,
                                   points=self.points[index],
                                   normals=None if self.normals is None else self.normals[index],
                                   provenance=None if self.provenance is None else self.provenance[index])

    def with_normals(self, normals):
        return dataclasses.replace(self, normals=normals)


def concatenate(clouds):
    """One cloud holding every point of `clouds`, in order. Normals and provenance survive if every cloud has them."""
    clouds = list(clouds)
    if len(clouds) == 0:
        return PointCloud(torch.zeros(0, 3, dtype=torch.float64))
    normals = None
    if all(cloud.normals is not None for cloud in clouds):
        normals = torch.cat([cloud.normals for cloud in clouds])
    provenance = None
    if all(cloud.provenance is not None for cloud in clouds):
        provenance = torch.cat([cloud.provenance for cloud in clouds])
    return PointCloud(torch.cat([cloud.points for cloud in clouds]), normals, provenance, clouds[0].comments)


def voxel_downsample(cloud, voxel_size):
    """Keeps the first point, in cloud order, of every occupied cubic voxel of side `voxel_size`."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive. It is instead {}.".format(voxel_size))
    if len(cloud) == 0:
        return cloud
    keys = torch.floor(cloud.points / voxel_size).to(torch.int64).numpy()
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = torch.from_numpy(np.sort(first))
    return cloud.select(keep)


@dataclasses.dataclass(frozen=True, eq=False)
class Pairs:
    """Matched indices into a source and a target cloud, with their Euclidean distances."""
    source: torch.Tensor
    target: torch.Tensor
    distance: torch.Tensor

    def __len__(self):
        return self.source.size(0)

    @classmethod
    def empty(cls):
        index = torch.zeros(0, dtype=torch.int64)
        return cls(index, index.clone(), torch.zeros(0, dtype=torch.float64))

    def nearest(self, count):
        """The `count` shortest pairs, in source order. Equal distances keep their order."""
        if count >= len(self):
            return self
        order = torch.sort(self.distance, stable=True).indices[:count]
        order = torch.sort(order).values
        return Pairs(self.source[order], self.target[order], self.distance[order])


def _make_pairs(source_index, target_index, source, target, max_pair_distance):
    source_index = torch.as_tensor(source_index, dtype=torch.int64)
    target_index = torch.as_tensor(target_index, dtype=torch.int64)
    distance = (source.points[source_index] - target.points[target_index]).norm(dim=-1)
    keep = distance <= max_pair_distance
    return Pairs(source_index[keep], target_index[keep], distance[keep])


###################
# Closed form
###################

def rigid_from_correspondences(X, P):
    """The rigid transform minimising the mean of ||x_i - (R p_i + t)||^2 over paired points.

    With centroids removed, Q = sum x_i' p_i'^T = U S V^T and R = U diag(1, 1, det(U V^T)) V^T; the middle factor
    rules out reflections. t = mu_x - R mu_p.

    Arguments:
        X: Target points, tensor of shape (N, 3).
        P: Source points, tensor of shape (N, 3), paired row by row with X.

    Returns:
        A `RigidTransform` mapping P onto X.

    Raises:
        DegenerateConfiguration if the points are collinear (Q has rank below 2) or fewer than 3.
    """
    X = misc.validate_points(X, 3, 'X')
    P = misc.validate_points(P, 3, 'P')
    if X.shape != P.shape or X.ndimension() != 2:
        raise ValueError("X and P must have the same shape (N, 3). They instead have shapes {} and {}."
                         .format(tuple(X.shape), tuple(P.shape)))
    if X.size(0) < 3:
        raise errors.DegenerateConfiguration("A rigid fit needs at least 3 pairs, got {}.".format(X.size(0)))
    mu_x = X.mean(dim=0)
    mu_p = P.mean(dim=0)
    Q = (X - mu_x).T @ (P - mu_p)
    U, S, Vh = torch.linalg.svd(Q)
    if S[0] == 0 or S[1] < 1e-12 * S[0]:
        raise errors.DegenerateConfiguration("Paired points are collinear.")
    D = torch.ones(3, dtype=torch.float64)
    D[2] = torch.sign(torch.det(U @ Vh))
    R = U @ torch.diag(D) @ Vh
    return geometry.RigidTransform(R, mu_x - R @ mu_p)


###################
# Normals
###################

def estimate_normals(cloud, k=10, viewpoint=(0., 0., 0.)):
    """Per-point normals from the covariance of the k nearest neighbours.

    The normal is the eigenvector of the smallest eigenvalue, oriented towards `viewpoint`.

    Raises:
        TooFewPoints unless 3 <= k < len(cloud).
    """
    if k < 3 or len(cloud) <= k:
        raise errors.TooFewPoints("Normal estimation with k={} needs more than k points; the cloud has {}."
                                  .format(k, len(cloud)))
    points = cloud.points.numpy()
    _, neighbours = spatial.cKDTree(points).query(points, k=k + 1, workers=misc.worker_count())
    neighbourhood = cloud.points[torch.from_numpy(neighbours)]
    centred = neighbourhood - neighbourhood.mean(dim=1, keepdim=True)
    covariance = centred.transpose(1, 2) @ centred
    _, eigenvectors = torch.linalg.eigh(covariance)
    normals = eigenvectors[..., 0]
    towards = torch.as_tensor(viewpoint, dtype=torch.float64) - cloud.points
    flip = (normals * towards).sum(dim=-1) < 0
    normals = torch.where(flip.unsqueeze(-1), -normals, normals)
    return cloud.with_normals(normals)


###################
# Correspondences
###################

def correspond_closest(source, target, max_pair_distance=math.inf):
    """Pairs every source point with its nearest target point, via a k-d tree; ties go to the lowest target index."""
    if len(source) == 0 or len(target) == 0:
        return Pairs.empty()
    k = min(4, len(target))
    points = target.points.numpy()
    tree = spatial.cKDTree(points)
    queries = source.points.numpy()
    distance, index = tree.query(queries, k=k, workers=misc.worker_count())
    distance = distance.reshape(len(source), k)
    index = index.reshape(len(source), k)
    tied = distance == distance[:, :1]
    nearest = np.where(tied, index, np.iinfo(np.int64).max).min(axis=1)
    if k < len(target):
        # Every returned neighbour ties: more may lie on the same sphere.
        for row in np.flatnonzero(tied.all(axis=1)):
            candidates = np.asarray(tree.query_ball_point(queries[row], distance[row, 0] * (1 + 1e-12)))
            gaps = np.linalg.norm(points[candidates] - queries[row], axis=-1)
            nearest[row] = candidates[gaps == gaps.min()].min()
    return _make_pairs(torch.arange(len(source)), torch.from_numpy(nearest), source, target, max_pair_distance)


def _line_distances(points, origin, direction):
    offset = points - origin
    along = offset @ direction
    return np.sqrt(np.maximum((offset * offset).sum(axis=-1) - along * along, 0.))


def _slab_clip(origins, directions, lower, upper):
    # Parameter interval [start, end] of each line inside the box; empty where start > end.
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (lower - origins) / directions
        t2 = (upper - origins) / directions
    parallel = directions == 0
    inside = (origins >= lower) & (origins <= upper)
    low = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    high = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return low.max(axis=1), high.min(axis=1)


def correspond_normal_shoot(source, target, max_pair_distance=math.inf):
    """Pairs every source point p with the target point closest to its normal line {p + s n}.

    A pair is kept if that point's perpendicular distance to the line is below `max_pair_distance`. Candidates are
    gathered with k-d tree ball queries at samples along the part of the line near the target, then tested exactly;
    ties go to the lowest target index.

    Raises:
        MissingNormals if the source has no normals.
    """
    if source.normals is None:
        raise errors.MissingNormals("Normal shooting needs source normals.")
    if len(source) == 0 or len(target) == 0:
        return Pairs.empty()
    origins = source.points.numpy()
    directions = source.normals.numpy()
    targets = target.points.numpy()

    chosen = np.full(len(source), -1, dtype=np.int64)
    if not math.isfinite(max_pair_distance):
        for start, end in misc.chunks(len(source), 256):
            offset = targets[None, :, :] - origins[start:end, None, :]
            along = (offset * directions[start:end, None, :]).sum(axis=-1)
            squared = np.maximum((offset * offset).sum(axis=-1) - along * along, 0.)
            chosen[start:end] = squared.argmin(axis=1)
        return _make_pairs(torch.arange(len(source)), torch.from_numpy(chosen), source, target, math.inf)

    step = max_pair_distance
    lower = targets.min(axis=0) - step
    upper = targets.max(axis=0) + step
    start, end = _slab_clip(origins, directions, lower, upper)
    counts = np.where(end >= start, np.ceil((end - start) / step).astype(np.int64) + 1, 0)
    owners = np.repeat(np.arange(len(source)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    samples = origins[owners] + (start[owners] + offsets * step)[:, None] * directions[owners]
    tree = spatial.cKDTree(targets)
    neighbours = tree.query_ball_point(samples, r=step * math.sqrt(1.25), workers=misc.worker_count())

    boundaries = np.cumsum(counts)
    for i in range(len(source)):
        lists = neighbours[boundaries[i] - counts[i]:boundaries[i]]
        if len(lists) == 0:
            continue
        candidates = np.unique(np.concatenate([np.asarray(l, dtype=np.int64) for l in lists]))
        if len(candidates) == 0:
            continue
        distance = _line_distances(targets[candidates], origins[i], directions[i])
        best = np.lexsort((candidates, distance))[0]
        if distance[best] < max_pair_distance:
            chosen[i] = candidates[best]
    paired = np.nonzero(chosen >= 0)[0]
    return _make_pairs(torch.from_numpy(paired), torch.from_numpy(chosen[paired]), source, target, math.inf)


def correspond_projective(source, target, rig, max_pair_distance=math.inf):
    """Pairs every source point with the target point recorded at the camera pixel the source point projects into.

    Arguments:
        source: `PointCloud`.
        target: `PointCloud` with provenance, i.e. organised by camera pixel.
        rig: Tuple (CameraModel, RigidTransform) of the camera that saw the target, the transform mapping the target
            frame into the camera frame.
        max_pair_distance: Pairs further apart are dropped.

    Raises:
        MissingProvenance, MissingRig.
    """
    if target.provenance is None:
        raise errors.MissingProvenance("Projective association needs a target organised by camera pixel.")
    if rig is None:
        raise errors.MissingRig("Projective association needs the target's camera.")
    camera, pose = rig
    if len(source) == 0 or len(target) == 0:
        return Pairs.empty()
    table = torch.full((camera.height, camera.width), -1, dtype=torch.int64)
    row, col = target.provenance.unbind(-1)
    inside = (row >= 0) & (row < camera.height) & (col >= 0) & (col < camera.width)
    index = torch.arange(len(target))[inside]
    # Reverse order so that the lowest index wins where provenance repeats.
    table[row[inside].flip(0), col[inside].flip(0)] = index.flip(0)

    pixels, depth = geometry.project_unchecked(camera, pose, source.points)
    seen = (depth > 0) & torch.isfinite(pixels).all(dim=-1)
    safe = torch.where(seen.unsqueeze(-1), pixels, torch.full_like(pixels, -1))
    u = torch.floor(safe[:, 0]).to(torch.int64)
    v = torch.floor(safe[:, 1]).to(torch.int64)
    seen &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    source_index = torch.nonzero(seen).squeeze(-1)
    target_index = table[v[seen], u[seen]]
    hit = target_index >= 0
    return _make_pairs(source_index[hit], target_index[hit], source, target, max_pair_distance)


def correspond(source, target, mode='closest-point', max_pair_distance=math.inf, rig=None):
    if mode == 'closest-point':
        return correspond_closest(source, target, max_pair_distance)
    elif mode == 'normal-shooting':
        return correspond_normal_shoot(source, target, max_pair_distance)
    elif mode == 'projective':
        return correspond_projective(source, target, rig, max_pair_distance)
    raise ValueError("Unknown correspondence mode {!r}; expected one of {}.".format(mode, CORRESPONDENCE_MODES))


###################
# Error metrics
###################

def _residuals(source_points, target_points, transform):
    source_points = misc.validate_points(source_points, 3, 'source_points')
    target_points = misc.validate_points(target_points, 3, 'target_points')
    if source_points.shape != target_points.shape:
        raise ValueError("Paired points must have the same shape. Got {} and {}."
                         .format(tuple(source_points.shape), tuple(target_points.shape)))
    if source_points.size(0) == 0:
        raise errors.EmptyPairs("No pairs to evaluate.")
    if transform is not None:
        source_points = transform.apply(source_points)
    return target_points - source_points


def error_point_point(source_points, target_points, transform=None):
    """Mean of ||x_i - (R p_i + t)||^2 over paired points."""
    residual = _residuals(source_points, target_points, transform)
    return (residual ** 2).sum(dim=-1).mean().item()


def error_point_plane(source_points, target_points, target_normals, transform=None):
    """Mean of ((x_i - (R p_i + t)) . n_i)^2 over paired points, with n_i the target normals."""
    residual = _residuals(source_points, target_points, transform)
    target_normals = misc.validate_points(target_normals, 3, 'target_normals')
    if target_normals.shape != residual.shape:
        raise ValueError("target_normals must have shape {}. It instead has shape {}."
                         .format(tuple(residual.shape), tuple(target_normals.shape)))
    return ((residual * target_normals).sum(dim=-1) ** 2).mean().item()


###################
# ICP
###################

@dataclasses.dataclass(frozen=True, eq=False)
class IcpParams:
    """ICP settings.

    Attributes:
        correspondence_mode: One of `CORRESPONDENCE_MODES`.
        max_iterations: Iteration cap, at least 1.
        error_tolerance: Stop once the error falls below this, in squared scene units.
        error_metric: One of `ERROR_METRICS`. Only evaluated; every step is the point-point closed form.
        max_pair_distance: Pairs further apart are discarded. None means 10% of the target's bounding-box diagonal.
        overlap: Fraction of the source expected to overlap the target. Each iteration keeps only the
            ceil(overlap * len(source)) shortest pairs, so surface seen by one view only does not drag the fit.
        projective_rig: (CameraModel, RigidTransform) of the target's camera, for projective association.
    """
    correspondence_mode: str = 'closest-point'
    max_iterations: int = 50
    error_tolerance: float = 1e-10
    error_metric: str = 'point-point'
    max_pair_distance: float = None
    overlap: float = 0.9
    projective_rig: tuple = None

    def __post_init__(self):
        if self.correspondence_mode not in CORRESPONDENCE_MODES:
            raise ValueError("correspondence_mode must be one of {}. It is instead {!r}."
                             .format(CORRESPONDENCE_MODES, self.correspondence_mode))
        if self.error_metric not in ERROR_METRICS:
            raise ValueError("error_metric must be one of {}. It is instead {!r}."
                             .format(ERROR_METRICS, self.error_metric))
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be at least 1. It is instead {}.".format(self.max_iterations))
        if not self.error_tolerance > 0:
            raise ValueError("error_tolerance must be positive. It is instead {}.".format(self.error_tolerance))
        if self.max_pair_distance is not None and not self.max_pair_distance > 0:
            raise ValueError("max_pair_distance must be positive. It is instead {}.".format(self.max_pair_distance))
        if not 0 < self.overlap <= 1:
            raise ValueError("overlap must be in (0, 1]. It is instead {}.".format(self.overlap))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class IcpReport:
    transform: geometry.RigidTransform
    error_trace: tuple
    iterations: int
    converged: bool
    pair_counts: tuple


def icp(source, target, params=IcpParams(), initial=None):
    """Aligns `source` onto `target` by iterative closest point.

    Each iteration pairs the currently transformed source with the target, keeps the shortest pairs (see
    `IcpParams.overlap`), fits the point-point closed form to them, composes it onto the running transform and
    evaluates the chosen metric on those pairs. In closest-point mode the point-point error never grows while the
    number of kept pairs stays fixed. The loop stops once the error is below `params.error_tolerance`, changes by less
    than 1e-10 relatively, or `params.max_iterations` is reached. Only small motions converge reliably.

    Arguments:
        source, target: `PointCloud`s.
        params: `IcpParams`.
        initial: Optional initial `RigidTransform` of the source; identity by default.

    Returns:
        An `IcpReport`; its transform maps source coordinates into target coordinates.

    Raises:
        NoCorrespondences if an iteration pairs nothing. MissingNormals where the mode or metric needs normals.
    """
    if len(source) == 0 or len(target) == 0:
        raise errors.TooFewPoints("ICP needs non-empty clouds.")
    if params.error_metric == 'point-plane' and target.normals is None:
        raise errors.MissingNormals("The point-plane metric needs target normals.")
    max_pair_distance = params.max_pair_distance
    if max_pair_distance is None:
        max_pair_distance = 0.1 * target.bounding_box_diagonal

    keep = math.ceil(params.overlap * len(source))
    transform = geometry.RigidTransform.identity() if initial is None else initial
    trace = []
    counts = []
    converged = False
    previous = None
    iteration = 0
    for iteration in range(1, int(params.max_iterations) + 1):
        moved = source.transform(transform)
        pairs = correspond(moved, target, params.correspondence_mode, max_pair_distance, params.projective_rig)
        pairs = pairs.nearest(keep)
        if len(pairs) == 0:
            raise errors.NoCorrespondences(iteration)
        target_points = target.points[pairs.target]
        step = rigid_from_correspondences(target_points, moved.points[pairs.source])
        transform = geometry.compose(step, transform)
        aligned = step.apply(moved.points[pairs.source])
        if params.error_metric == 'point-point':
            error = error_point_point(aligned, target_points)
        else:
            error = error_point_plane(aligned, target_points, target.normals[pairs.target])
        trace.append(error)
        counts.append(len(pairs))
        logger.debug("ICP iteration %d: %d pairs, error %.6g.", iteration, len(pairs), error)
        if error < params.error_tolerance:
            converged = True
            break
        if previous is not None and abs(previous - error) <= 1e-10 * previous:
            converged = True
            break
        previous = error
    transform = geometry.RigidTransform(geometry.nearest_rotation(transform.R), transform.t)
    logger.info("ICP %s after %d iterations, error %.6g.", 'converged' if converged else 'stopped', iteration,
                trace[-1])
    return IcpReport(transform=transform, error_trace=tuple(trace), iterations=iteration, converged=converged,
                     pair_counts=tuple(counts))


@dataclasses.dataclass(frozen=True, eq=False)
class StitchResult:
    """`cumulative[i]` maps cloud i into the frame of cloud 0; `steps[i]` maps cloud i + 1 into the frame of cloud i."""
    merged: PointCloud
    cumulative: tuple
    steps: tuple
    reports: tuple


def stitch_sequence(clouds, init_guesses=None, params=IcpParams(), step_angle=None, axis=(0., 1., 0.), centre=None,
                    voxel_fraction=0.005):
    """Incrementally registers an ordered sequence of overlapping clouds into the frame of the first.

    Cloud i + 1 is aligned onto cloud i. Without explicit `init_guesses`, each step is seeded with the nominal
    turntable motion: a rotation by -step_angle degrees about `axis` through `centre`.

    Arguments:
        clouds: Sequence of `PointCloud`s.
        init_guesses: Optional sequence of len(clouds) - 1 `RigidTransform`s.
        params: `IcpParams` for every step.
        step_angle: Nominal rotation of the object between consecutive views, in degrees.
        axis: Turntable axis direction, in the clouds' frame.
        centre: A point on the turntable axis, in the clouds' frame. None uses the centroid of each step's target.
        voxel_fraction: Voxel size for deduplicating the merged cloud, as a fraction of its bounding-box diagonal.
            None or 0 disables deduplication.

    Returns:
        A `StitchResult`.

    Raises:
        StepFailed naming the failing step.
    """
    clouds = list(clouds)
    if len(clouds) == 0:
        raise errors.TooFewPoints("Nothing to stitch.")
    if init_guesses is not None and len(init_guesses) != len(clouds) - 1:
        raise ValueError("Need {} initial guesses, got {}.".format(len(clouds) - 1, len(init_guesses)))

    steps = []
    reports = []
    cumulative = [geometry.RigidTransform.identity()]
    for index in range(len(clouds) - 1):
        target = clouds[index]
        source = clouds[index + 1]
        if init_guesses is not None:
            initial = init_guesses[index]
        elif step_angle is not None and len(target) > 0:
            pivot = target.centroid if centre is None else centre
            initial = geometry.RigidTransform.about_axis(axis, -math.radians(step_angle), pivot)
        else:
            initial = None
        try:
            report = icp(source, target, params, initial=initial)
        except errors.SlscanError as e:
            raise errors.StepFailed(index, e) from e
        steps.append(report.transform)
        reports.append(report)
        cumulative.append(geometry.compose(cumulative[-1], report.transform))

    merged = concatenate(cloud.transform(transform) for cloud, transform in zip(clouds, cumulative))
    if voxel_fraction and len(merged) > 0 and merged.bounding_box_diagonal > 0:
        merged = voxel_downsample(merged, voxel_fraction * merged.bounding_box_diagonal)
    logger.info("Stitched %d clouds into %d points.", len(clouds), len(merged))
    return StitchResult(merged=merged, cumulative=tuple(cumulative), steps=tuple(steps), reports=tuple(reports))
