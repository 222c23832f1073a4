"""A synthetic camera/projector scanner.

Scenes are ray traced from the camera: each camera pixel's ray hits the nearest surface, the hit is projected into the
projector, and if the projector sees it unobstructed the pattern is sampled there (nearest neighbour). Lighting is
single bounce; global light is approximated by a constant inter-reflection term added to lit pixels, which is crude
next to the indirect light of real scenes.
"""
import dataclasses
import logging
import math
import torch

from . import calibration
from . import codec
from . import geometry
from . import misc
from . import registration
from . import triangulation


logger = logging.getLogger(__name__)


_T_MIN = 1e-6


def _check_appearance(surface):
    if not 0 <= surface.albedo <= 1:
        raise ValueError("albedo must be in [0, 1]. It is instead {}.".format(surface.albedo))
    if surface.ambient < 0:
        raise ValueError("ambient must be non-negative. It is instead {}.".format(surface.ambient))


@dataclasses.dataclass(frozen=True, eq=False)
class Plane:
    point: torch.Tensor
    normal: torch.Tensor
    albedo: float = 1.
    ambient: float = 0.

    def __post_init__(self):
        normal = misc.as_float64(self.normal, 'normal')
        if normal.shape != (3,) or normal.norm() == 0:
            raise ValueError("normal must be a non-zero 3-vector.")
        object.__setattr__(self, 'point', misc.as_float64(self.point, 'point'))
        object.__setattr__(self, 'normal', normal / normal.norm())
        _check_appearance(self)

    def intersect(self, origins, directions):
        denominator = directions @ self.normal
        parallel = denominator.abs() < 1e-15
        t = ((self.point - origins) @ self.normal) / torch.where(parallel, torch.ones_like(denominator), denominator)
        t = torch.where(parallel | (t <= _T_MIN), torch.full_like(t, math.inf), t)
        return t, self.normal.expand_as(origins)

    def transform(self, transform):
        return dataclasses.replace(self, point=transform.apply(self.point), normal=transform.rotate(self.normal))


@dataclasses.dataclass(frozen=True, eq=False)
class Sphere:
    center: torch.Tensor
    radius: float
    albedo: float = 1.
    ambient: float = 0.

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive. It is instead {}.".format(self.radius))
        object.__setattr__(self, 'center', misc.as_float64(self.center, 'center'))
        _check_appearance(self)

    def intersect(self, origins, directions):
        # directions are unit length
        offset = origins - self.center
        b = (offset * directions).sum(dim=-1)
        c = (offset * offset).sum(dim=-1) - self.radius ** 2
        discriminant = b * b - c
        root = torch.sqrt(discriminant.clamp(min=0))
        near = -b - root
        far = -b + root
        t = torch.where(near > _T_MIN, near, far)
        t = torch.where((discriminant < 0) | (t <= _T_MIN), torch.full_like(t, math.inf), t)
        points = origins + directions * torch.where(torch.isfinite(t), t, torch.zeros_like(t)).unsqueeze(-1)
        return t, (points - self.center) / self.radius

    def transform(self, transform):
        return dataclasses.replace(self, center=transform.apply(self.center))


@dataclasses.dataclass(frozen=True, eq=False)
class Mesh:
    vertices: torch.Tensor
    triangles: torch.Tensor
    albedo: float = 1.
    ambient: float = 0.

    def __post_init__(self):
        vertices = misc.validate_points(self.vertices, 3, 'vertices', allow_empty=False)
        triangles = torch.as_tensor(self.triangles, dtype=torch.int64)
        if triangles.ndimension() != 2 or triangles.size(-1) != 3:
            raise ValueError("triangles must have shape (F, 3). It instead has shape {}."
                             .format(tuple(triangles.shape)))
        if triangles.numel() > 0 and (triangles.min() < 0 or triangles.max() >= vertices.size(0)):
            raise ValueError("triangles index vertices outside [0, {}).".format(vertices.size(0)))
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'triangles', triangles)
        _check_appearance(self)

    def intersect(self, origins, directions, chunk_size=2 ** 19):
        """Moller-Trumbore against every triangle, for the rays that reach the mesh's bounding sphere."""
        corners = self.vertices[self.triangles]
        v0 = corners[:, 0]
        e1 = corners[:, 1] - v0
        e2 = corners[:, 2] - v0
        face_normals = torch.linalg.cross(e1, e2)
        face_normals = face_normals / face_normals.norm(dim=-1, keepdim=True).clamp_min(1e-300)

        t_out = torch.full(origins.shape[:-1], math.inf, dtype=torch.float64)
        normals_out = torch.zeros_like(origins)
        centre = self.vertices.mean(dim=0)
        radius = (self.vertices - centre).norm(dim=-1).max()
        bounds = Sphere(centre, radius.item() * (1 + 1e-9) + 1e-9)
        inside = (origins - centre).norm(dim=-1) <= bounds.radius
        candidates = torch.nonzero(torch.isfinite(bounds.intersect(origins, directions)[0]) | inside).squeeze(-1)

        rays_per_chunk = max(1, chunk_size // max(1, self.triangles.size(0)))
        for start, end in misc.chunks(candidates.size(0), rays_per_chunk):
            index = candidates[start:end]
            o = origins[index].unsqueeze(1)
            d = directions[index].unsqueeze(1)
            pvec = torch.linalg.cross(d.expand(-1, e2.size(0), -1), e2.expand(d.size(0), -1, -1))
            det = (pvec * e1).sum(dim=-1)
            usable = det.abs() > 1e-12
            inv_det = 1 / torch.where(usable, det, torch.ones_like(det))
            tvec = o - v0
            u = (tvec * pvec).sum(dim=-1) * inv_det
            qvec = torch.linalg.cross(tvec, e1.expand_as(tvec))
            v = (d * qvec).sum(dim=-1) * inv_det
            t = (qvec * e2).sum(dim=-1) * inv_det
            hit = usable & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _T_MIN)
            t = torch.where(hit, t, torch.full_like(t, math.inf))
            nearest, face = t.min(dim=-1)
            t_out[index] = nearest
            normals_out[index] = face_normals[face]
        return t_out, normals_out

    def transform(self, transform):
        return dataclasses.replace(self, vertices=transform.apply(self.vertices))


SURFACE_TYPES = {'plane': Plane, 'sphere': Sphere, 'mesh': Mesh}


@dataclasses.dataclass(frozen=True, eq=False)
class Scene:
    """Surfaces, the intensity of pixels that hit nothing, and the inter-reflection constant added to lit pixels."""
    surfaces: tuple
    background: float = 0.
    inter_reflection: float = 0.

    def __post_init__(self):
        object.__setattr__(self, 'surfaces', tuple(self.surfaces))
        if len(self.surfaces) == 0:
            raise ValueError("A scene needs at least one surface.")

    def transform(self, transform):
        return dataclasses.replace(self, surfaces=tuple(surface.transform(transform) for surface in self.surfaces))

    def intersect(self, origins, directions):
        """Nearest hit over every surface: returns distances (inf on a miss), normals and surface indices."""
        t = torch.full(origins.shape[:-1], math.inf, dtype=torch.float64)
        normals = torch.zeros_like(origins)
        index = torch.full(origins.shape[:-1], -1, dtype=torch.int64)
        for i, surface in enumerate(self.surfaces):
            t_surface, n_surface = surface.intersect(origins, directions)
            closer = t_surface < t
            t = torch.where(closer, t_surface, t)
            normals = torch.where(closer.unsqueeze(-1), n_surface, normals)
            index = torch.where(closer, torch.full_like(index, i), index)
        return t, normals, index


@dataclasses.dataclass(frozen=True, eq=False)
class Rig:
    """Camera and projector, each with a pose mapping world coordinates into device coordinates."""
    camera: geometry.CameraModel
    camera_pose: geometry.RigidTransform
    projector: geometry.CameraModel
    projector_pose: geometry.RigidTransform

    def __post_init__(self):
        if self.baseline < 1e-9:
            raise ValueError("Camera and projector must not share a centre.")

    @property
    def camera_centre(self):
        return geometry.invert(self.camera_pose).t

    @property
    def projector_centre(self):
        return geometry.invert(self.projector_pose).t

    @property
    def baseline(self):
        return (self.camera_centre - self.projector_centre).norm().item()

    def stereo(self):
        """The calibrated pair as the triangulation sees it, in the camera frame."""
        transform = geometry.compose(self.projector_pose, geometry.invert(self.camera_pose))
        return triangulation.StereoRig(self.camera, self.projector, transform)


def _device(width, height, hfov):
    focal = (width / 2) / math.tan(math.radians(hfov) / 2)
    return geometry.CameraModel(fx=focal, fy=focal, cx=width / 2, cy=height / 2, width=width, height=height)


def _look_at(centre, target):
    z = target - centre
    z = z / z.norm()
    x = torch.linalg.cross(torch.tensor([0., 1., 0.], dtype=torch.float64), z)
    x = x / x.norm()
    y = torch.linalg.cross(z, x)
    R = torch.stack([x, y, z])
    return geometry.RigidTransform(R, -(R @ centre))


def make_rig(camera_size=(320, 240), projector_size=(320, 240), camera_hfov=48., projector_hfov=48., baseline=150.,
             working_distance=500., camera_dist=geometry.DistortionCoeffs(),
             projector_dist=geometry.DistortionCoeffs()):
    """A camera at the world origin looking down +Z, and a projector `baseline` along +X toed in so that both optical
    axes meet at `working_distance`. Fields of view are horizontal, in degrees."""
    camera = _device(*camera_size, camera_hfov).replace(dist=camera_dist)
    projector = _device(*projector_size, projector_hfov).replace(dist=projector_dist)
    target = torch.tensor([0., 0., working_distance], dtype=torch.float64)
    projector_pose = _look_at(torch.tensor([baseline, 0., 0.], dtype=torch.float64), target)
    return Rig(camera, geometry.RigidTransform.identity(), projector, projector_pose)


def make_quad(centre, normal, size, up=(0., 1., 0.), albedo=1., ambient=0.):
    """A square of side `size` as a two-triangle mesh."""
    centre = misc.as_float64(centre, 'centre')
    normal = misc.as_float64(normal, 'normal')
    normal = normal / normal.norm()
    up = torch.as_tensor(up, dtype=torch.float64)
    u = torch.linalg.cross(up, normal)
    u = u / u.norm()
    v = torch.linalg.cross(normal, u)
    half = size / 2
    vertices = torch.stack([centre - half * u - half * v, centre + half * u - half * v,
                            centre + half * u + half * v, centre - half * u + half * v])
    return Mesh(vertices, torch.tensor([[0, 1, 2], [0, 2, 3]]), albedo=albedo, ambient=ambient)


def make_cup(centre=(0., 0., 500.), radius=40., height=90., wall=4., squash=0.8, handle_radius=25.,
             handle_thickness=8., segments=48, albedo=0.9, ambient=0.):
    """A cup-like mesh standing on the vertical (Y) axis through `centre`, opening towards -Y.

    The body is slightly elliptical (depth `squash` times the width) so that its pose about the vertical axis is
    observable even away from the handle. Wall, rim, floor, base and a handle on the +X side.
    """
    cx, cy, cz = [float(c) for c in centre]
    top = cy - height / 2
    bottom = cy + height / 2
    vertices = []
    triangles = []

    def ring(r, y):
        first = len(vertices)
        for k in range(segments):
            angle = 2 * math.pi * k / segments
            vertices.append([cx + r * math.cos(angle), y, cz + squash * r * math.sin(angle)])
        return first

    def band(a, b):
        for k in range(segments):
            k1 = (k + 1) % segments
            triangles.append([a + k, a + k1, b + k1])
            triangles.append([a + k, b + k1, b + k])

    def disk(a, y):
        centre_index = len(vertices)
        vertices.append([cx, y, cz])
        for k in range(segments):
            triangles.append([centre_index, a + k, a + (k + 1) % segments])

    outer_top = ring(radius, top)
    outer_bottom = ring(radius, bottom)
    inner_top = ring(radius - wall, top)
    inner_bottom = ring(radius - wall, bottom - wall)
    band(outer_top, outer_bottom)
    band(inner_top, inner_bottom)
    band(outer_top, inner_top)
    disk(outer_bottom, bottom)
    disk(inner_bottom, bottom - wall)

    # Handle: a square tube swept along a half circle in the X-Y plane, from the top half to the bottom half.
    sweep = 12
    half = handle_thickness / 2
    loops = []
    for k in range(sweep + 1):
        angle = -math.pi / 2 + math.pi * k / sweep
        px = cx + radius - wall / 2 + handle_radius * math.cos(angle)
        py = cy + handle_radius * math.sin(angle)
        rx, ry = math.cos(angle), math.sin(angle)
        first = len(vertices)
        for sx, sz in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            vertices.append([px + sx * half * rx, py + sx * half * ry, cz + sz * half])
        loops.append(first)
    for a, b in zip(loops[:-1], loops[1:]):
        for k in range(4):
            k1 = (k + 1) % 4
            triangles.append([a + k, a + k1, b + k1])
            triangles.append([a + k, b + k1, b + k])
    for end in (loops[0], loops[-1]):
        triangles.append([end, end + 1, end + 2])
        triangles.append([end, end + 2, end + 3])
    return Mesh(torch.tensor(vertices, dtype=torch.float64), torch.tensor(triangles), albedo=albedo, ambient=ambient)


###################
# Rendering
###################

@dataclasses.dataclass(frozen=True, eq=False)
class _Trace:
    hit: torch.Tensor
    distance: torch.Tensor
    points: torch.Tensor
    projector_pixels: torch.Tensor
    projector_visible: torch.Tensor
    unshadowed: torch.Tensor
    albedo: torch.Tensor
    ambient: torch.Tensor

    @property
    def lit(self):
        return self.hit & self.projector_visible & self.unshadowed


def trace(rig, scene):
    """Casts every camera pixel's ray into the scene and works out what the projector can light."""
    camera = rig.camera
    height, width = camera.height, camera.width
    centres = misc.pixel_centres(width, height).reshape(-1, 2)
    world_from_camera = geometry.invert(rig.camera_pose)
    directions = world_from_camera.rotate(geometry.pixel_rays(camera, centres))
    directions = directions / directions.norm(dim=-1, keepdim=True)
    origins = world_from_camera.t.expand_as(directions)

    distance, normals, index = scene.intersect(origins, directions)
    hit = torch.isfinite(distance)
    safe_distance = torch.where(hit, distance, torch.zeros_like(distance))
    points = origins + directions * safe_distance.unsqueeze(-1)

    projector = rig.projector
    projector_pixels, projector_depth = geometry.project_unchecked(projector, rig.projector_pose, points)
    projector_visible = hit & (projector_depth > 0) & torch.isfinite(projector_pixels).all(dim=-1)
    u, v = projector_pixels.unbind(-1)
    projector_visible &= (u >= 0) & (u < projector.width) & (v >= 0) & (v < projector.height)

    # Occlusion towards the projector centre, for pixels the projector could otherwise light.
    unshadowed = torch.zeros_like(hit)
    candidates = torch.nonzero(projector_visible).squeeze(-1)
    if candidates.numel() > 0:
        start = points[candidates]
        towards = rig.projector_centre - start
        length = towards.norm(dim=-1)
        towards = towards / length.unsqueeze(-1)
        n = normals[candidates]
        to_camera = origins[candidates] - start
        same_side = torch.sign((n * towards).sum(dim=-1)) == torch.sign((n * to_camera).sum(dim=-1))
        blocker, _, _ = scene.intersect(start + towards * (1e-6 * length.unsqueeze(-1)), towards)
        clear = blocker >= length * (1 - 2e-6)
        unshadowed[candidates] = same_side & clear

    albedo = torch.zeros_like(distance)
    ambient = torch.full_like(distance, float(scene.background))
    for i, surface in enumerate(scene.surfaces):
        mask = index == i
        albedo = torch.where(mask, torch.full_like(albedo, surface.albedo), albedo)
        ambient = torch.where(mask, torch.full_like(ambient, surface.ambient), ambient)

    shape = (height, width)
    return _Trace(hit=hit.reshape(shape),
                  distance=torch.where(hit, distance, torch.full_like(distance, math.nan)).reshape(shape),
                  points=points.reshape(height, width, 3),
                  projector_pixels=projector_pixels.reshape(height, width, 2),
                  projector_visible=projector_visible.reshape(shape),
                  unshadowed=unshadowed.reshape(shape),
                  albedo=albedo.reshape(shape),
                  ambient=ambient.reshape(shape))


def _shade(traced, pattern, inter_reflection):
    lit = traced.lit
    u = torch.floor(traced.projector_pixels[..., 0]).clamp(0, pattern.size(1) - 1)
    v = torch.floor(traced.projector_pixels[..., 1]).clamp(0, pattern.size(0) - 1)
    u = torch.where(lit, u, torch.zeros_like(u)).to(torch.int64)
    v = torch.where(lit, v, torch.zeros_like(v)).to(torch.int64)
    sample = pattern[v, u].to(torch.float64)
    intensity = torch.where(lit, traced.albedo * sample + traced.ambient + inter_reflection, traced.ambient)
    return misc.to_uint8(intensity)


def _check_pattern(rig, pattern):
    pattern = misc.validate_image(pattern, 'pattern')
    if pattern.shape != (rig.projector.height, rig.projector.width):
        raise ValueError("pattern has shape {} but the projector is {}x{}."
                         .format(tuple(pattern.shape), rig.projector.width, rig.projector.height))
    return pattern


def render(rig, scene, pattern, traced=None):
    """Renders what the camera sees while the projector shows `pattern`.

    Lit pixels get albedo * pattern sample + ambient + inter-reflection; pixels that hit a surface the projector
    cannot light get the surface's ambient level; pixels that hit nothing get the scene background. Rounded half up.

    Returns:
        A uint8 tensor of shape (camera height, camera width).
    """
    pattern = _check_pattern(rig, pattern)
    if traced is None:
        traced = trace(rig, scene)
    return _shade(traced, pattern, scene.inter_reflection)


def render_stack(rig, scene, stack, traced=None):
    """Renders every pattern of a generated `PatternStack`, reusing one trace; returns the captured stack."""
    if (stack.projector_width, stack.projector_height) != (rig.projector.width, rig.projector.height):
        raise ValueError("The stack is for a {}x{} projector but the rig's is {}x{}."
                         .format(stack.projector_width, stack.projector_height, rig.projector.width,
                                 rig.projector.height))
    if traced is None:
        traced = trace(rig, scene)
    images = torch.stack([_shade(traced, pattern, scene.inter_reflection) for pattern in stack.images])
    return stack.with_images(images)


@dataclasses.dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per camera pixel: range to the hit along the ray (NaN on a miss), the world hit points, the exact continuous
    projector coordinates (valid where lit) and the visibility flags."""
    depth: torch.Tensor
    points: torch.Tensor
    correspondence: codec.CorrespondenceMap
    hit: torch.Tensor
    projector_visible: torch.Tensor
    unshadowed: torch.Tensor

    @property
    def visible(self):
        return self.hit & self.projector_visible & self.unshadowed


def ground_truth(rig, scene, traced=None):
    if traced is None:
        traced = trace(rig, scene)
    lit = traced.lit
    nan = torch.full_like(traced.distance, math.nan)
    corr = codec.CorrespondenceMap(proj_x=torch.where(lit, traced.projector_pixels[..., 0], nan),
                                   proj_y=torch.where(lit, traced.projector_pixels[..., 1], nan),
                                   valid=lit,
                                   reason=torch.where(lit, torch.zeros_like(lit, dtype=torch.uint8),
                                                      torch.full_like(lit, codec.REASON_LOW_DIRECT,
                                                                      dtype=torch.uint8)),
                                   projector_width=rig.projector.width,
                                   projector_height=rig.projector.height)
    return GroundTruth(depth=traced.distance, points=traced.points, correspondence=corr, hit=traced.hit,
                       projector_visible=traced.projector_visible, unshadowed=traced.unshadowed)


def ground_truth_cloud(rig, truth):
    """The lit hit points of a `GroundTruth` as a cloud in the camera frame, with pixel provenance."""
    pixel = torch.nonzero(truth.visible)
    points = rig.camera_pose.apply(truth.points[truth.visible])
    return registration.PointCloud(points, provenance=pixel)


###################
# Calibration boards
###################

def make_board(board_points, pose, margin=20., albedo=0.9, ambient=0.):
    """A flat board as a two-triangle mesh covering `board_points` plus `margin`, placed in the world by `pose`
    (board coordinates to world coordinates). The checker texture is not rendered."""
    board = misc.validate_points(board_points, 2, 'board_points')
    lower = board.min(dim=0).values - margin
    upper = board.max(dim=0).values + margin
    corners = torch.tensor([[lower[0], lower[1], 0.], [upper[0], lower[1], 0.], [upper[0], upper[1], 0.],
                            [lower[0], upper[1], 0.]], dtype=torch.float64)
    return Mesh(pose.apply(corners), torch.tensor([[0, 1, 2], [0, 2, 3]]), albedo=albedo, ambient=ambient)


def board_view(rig, board_points, pose, patterns, corner_noise=0., image_noise=0., seed=0, name=None, margin=20.):
    """Simulates one calibration view: the board is rendered under `patterns` and decoded, and its corners are
    projected into the camera with isotropic Gaussian noise of total RMS `corner_noise` pixels.

    Returns:
        A tuple of a `CalibrationView` carrying the decoded correspondence map, and the exact projector pixels of
        the corners as a tensor of shape (N, 2).
    """
    board = misc.validate_points(board_points, 2, 'board_points')
    scene = Scene([make_board(board, pose, margin=margin)])
    captured = render_stack(rig, scene, patterns)
    if image_noise > 0:
        captured = captured.with_images(add_noise(captured.images, image_noise, seed=seed))
    corr = codec.decode(captured)
    world = pose.apply(torch.cat([board, torch.zeros_like(board[:, :1])], dim=-1))
    image, _ = geometry.project(rig.camera, rig.camera_pose, world)
    if corner_noise > 0:
        generator = torch.Generator().manual_seed(int(seed))
        image = image + torch.randn(image.shape, generator=generator, dtype=torch.float64) * corner_noise / math.sqrt(2)
    projector, _ = geometry.project(rig.projector, rig.projector_pose, world)
    view = calibration.CalibrationView(board_points=board, image_points=image, correspondence=corr, name=name)
    return view, projector


@dataclasses.dataclass(frozen=True, eq=False)
class TurntableView:
    """One turntable view: the rotated scene, its ground truth and ground-truth cloud (camera frame), the captured
    stack if patterns were given, and `transform`, which maps the next view's cloud into this view's frame (the
    last view's maps the first view's)."""
    scene: Scene
    truth: GroundTruth
    cloud: registration.PointCloud
    transform: geometry.RigidTransform
    captured: codec.PatternStack = None


def turntable_views(rig, scene, steps, step_angle, axis=(0., 1., 0.), centre=(0., 0., 0.), patterns=None):
    """Renders a scene rotated step by step about a turntable axis.

    View k shows the scene rotated by k * step_angle degrees about `axis` through `centre` (world coordinates).

    Arguments:
        rig: Simulator `Rig`.
        scene: `Scene` in its pose for view 0.
        steps: Number of views.
        step_angle: Rotation between views, in degrees.
        axis, centre: The turntable axis.
        patterns: Optional generated `PatternStack`, rendered for every view.

    Returns:
        A list of `TurntableView`. The composition of every view's `transform`, in order, is the identity.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1. It is instead {}.".format(steps))
    if steps * abs(step_angle) > 360 + 1e-9:
        raise ValueError("{} steps of {} degrees exceed a full turn.".format(steps, step_angle))
    camera_from_world = rig.camera_pose
    world_from_camera = geometry.invert(camera_from_world)
    step_back = geometry.RigidTransform.about_axis(axis, -math.radians(step_angle), centre)
    closing = geometry.RigidTransform.about_axis(axis, math.radians(step_angle * (steps - 1)), centre)

    views = []
    for k in range(steps):
        rotation = geometry.RigidTransform.about_axis(axis, math.radians(step_angle * k), centre)
        view_scene = scene.transform(rotation)
        traced = trace(rig, view_scene)
        truth = ground_truth(rig, view_scene, traced)
        captured = None if patterns is None else render_stack(rig, view_scene, patterns, traced)
        motion = step_back if k < steps - 1 else closing
        transform = geometry.compose(camera_from_world, geometry.compose(motion, world_from_camera))
        views.append(TurntableView(scene=view_scene, truth=truth, cloud=ground_truth_cloud(rig, truth),
                                   transform=transform, captured=captured))
        logger.debug("Turntable view %d: %d lit pixels.", k, int(truth.visible.sum()))
    return views


###################
# Perturbations
###################

def add_noise(image, sigma, seed=0):
    """Adds Gaussian noise of standard deviation `sigma` to an 8-bit image (or a (count, H, W) stack), clamping to
    [0, 255]. Deterministic for a given seed."""
    image = torch.as_tensor(image)
    if image.dtype != torch.uint8:
        raise ValueError("image must have dtype torch.uint8. It instead has dtype {}.".format(image.dtype))
    if sigma < 0:
        raise ValueError("sigma must be non-negative. It is instead {}.".format(sigma))
    if sigma == 0:
        return image.clone()
    generator = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(image.shape, generator=generator, dtype=torch.float64) * sigma
    return misc.to_uint8(image.to(torch.float64) + noise)


def add_outliers(cloud, fraction, bounds, seed=0):
    """Appends floor(fraction * len(cloud)) points drawn uniformly from the box `bounds` = (lower, upper).

    Outliers get random unit normals if the cloud has normals, and provenance (-1, -1) if it has provenance.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1). It is instead {}.".format(fraction))
    lower, upper = (misc.as_float64(b, 'bounds') for b in bounds)
    count = int(math.floor(fraction * len(cloud)))
    generator = torch.Generator().manual_seed(int(seed))
    points = lower + (upper - lower) * torch.rand(count, 3, generator=generator, dtype=torch.float64)
    extra = {}
    if cloud.normals is not None:
        normals = torch.randn(count, 3, generator=generator, dtype=torch.float64)
        extra['normals'] = torch.cat([cloud.normals, normals / normals.norm(dim=-1, keepdim=True)])
    if cloud.provenance is not None:
        extra['provenance'] = torch.cat([cloud.provenance, torch.full((count, 2), -1, dtype=torch.int64)])
    return dataclasses.replace(cloud, points=torch.cat([cloud.points, points]), **extra)
