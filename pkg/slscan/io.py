"""File formats: PGM images, PLY clouds, and the versioned JSON documents (stack manifests, calibrations,
correspondence maps, calibration views and scenes).

Every JSON document carries "schema_version": 1. Fields a reader does not know are kept in the `extra` dict of what
it returns and written back out unchanged.

Correspondence maps are stored either inline, as JSON arrays with null for invalid pixels, or as a JSON header plus a
companion raw file holding, back to back and row-major: a little-endian float32 plane of proj_x (if decoded), a
little-endian float32 plane of proj_y (if decoded), a uint8 plane of reason codes (0 = valid) and, if present, a
little-endian int32 plane of fringe orders.
"""
import dataclasses
from io import BytesIO
import json
import logging
import math
import numpy as np
import pathlib
import plyfile
import torch

from . import calibration
from . import codec
from . import errors
from . import geometry
from . import misc
from . import registration
from . import simulator
from . import triangulation


logger = logging.getLogger(__name__)


SCHEMA_VERSION = 1


###################
# PGM
###################

def _pgm_tokens(data, count, start):
    # Reads `count` whitespace-separated header tokens, skipping '#' comments; returns them and the offset after the
    # last one.
    tokens = []
    position = start
    while len(tokens) < count:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if position >= len(data):
            raise errors.MalformedHeader("PGM header ends after {} of {} fields.".format(len(tokens), count))
        if data[position:position + 1] == b'#':
            while position < len(data) and data[position:position + 1] not in (b'\n', b'\r'):
                position += 1
            continue
        end = position
        while end < len(data) and not data[end:end + 1].isspace() and data[end:end + 1] != b'#':
            end += 1
        tokens.append(data[position:end])
        position = end
    return tokens, position


def read_pgm(data):
    """Parses a binary (P5) or ASCII (P2) 8-bit PGM.

    Sample values are returned as stored; a maxval below 255 is not rescaled.

    Returns:
        A uint8 tensor of shape (height, width).

    Raises:
        MalformedHeader, UnsupportedMaxval (maxval above 255 or below 1), TruncatedBody.
    """
    data = bytes(data)
    magic = data[:2]
    if magic not in (b'P5', b'P2'):
        raise errors.MalformedHeader("Not a PGM: magic number {!r}.".format(magic))
    tokens, position = _pgm_tokens(data, 3, 2)
    try:
        width, height, maxval = (int(token) for token in tokens)
    except ValueError:
        raise errors.MalformedHeader("PGM header fields must be integers, got {}.".format(tokens))
    if width < 1 or height < 1:
        raise errors.MalformedHeader("PGM size must be positive, got {}x{}.".format(width, height))
    if maxval < 1 or maxval > 255:
        raise errors.UnsupportedMaxval("Only 8-bit PGMs are supported; maxval is {}.".format(maxval))

    count = width * height
    if magic == b'P5':
        body = data[position + 1:position + 1 + count]
        if len(body) < count:
            raise errors.TruncatedBody("PGM body has {} of {} bytes.".format(len(body), count))
        values = np.frombuffer(body, dtype=np.uint8)
    else:
        words = data[position:].split()
        if len(words) < count:
            raise errors.TruncatedBody("PGM body has {} of {} samples.".format(len(words), count))
        values = np.array([int(word) for word in words[:count]], dtype=np.int64)
        if values.min() < 0 or values.max() > maxval:
            raise ValueError("PGM samples must lie in [0, {}].".format(maxval))
        values = values.astype(np.uint8)
    if values.max() > maxval:
        raise ValueError("PGM samples must lie in [0, {}].".format(maxval))
    return torch.from_numpy(values.copy()).reshape(height, width)


def write_pgm(image, ascii=False):
    """Encodes an 8-bit image as P5 (or P2 if `ascii`) with maxval 255."""
    image = misc.validate_image(image)
    height, width = image.shape
    header = "{} {} {}\n255\n".format('P2' if ascii else 'P5', width, height).replace(' ', '\n', 1)
    if not ascii:
        return header.encode('ascii') + image.contiguous().numpy().tobytes()
    rows = [' '.join(str(value) for value in row) for row in image.tolist()]
    return (header + '\n'.join(rows) + '\n').encode('ascii')


###################
# PLY
###################

_VERTEX_PROPERTIES = ('x', 'y', 'z', 'nx', 'ny', 'nz', 'row', 'col')


def write_ply(cloud):
    """Encodes a `PointCloud` as ASCII PLY.

    Coordinates and normals are written as double properties, losslessly. Normals become nx, ny, nz properties and
    provenance becomes integer row, col properties. `cloud.comments` become comment lines.
    """
    blocks = [(('x', 'y', 'z'), 'f8', cloud.points)]
    if cloud.normals is not None:
        blocks.append((('nx', 'ny', 'nz'), 'f8', cloud.normals))
    if cloud.provenance is not None:
        blocks.append((('row', 'col'), 'i4', cloud.provenance))
    vertices = np.empty(len(cloud), dtype=[(name, kind) for names, kind, _ in blocks for name in names])
    for names, _, values in blocks:
        for name, column in zip(names, values.numpy().T):
            vertices[name] = column
    stream = BytesIO()
    plyfile.PlyData([plyfile.PlyElement.describe(vertices, 'vertex')], text=True,
                    comments=list(cloud.comments)).write(stream)
    return stream.getvalue()


def _body_lines(data):
    _, _, body = bytes(data).partition(b'end_header')
    return sum(1 for line in body.splitlines()[1:] if line.strip())


def _ply_columns(element, names, dtype=np.float64):
    return torch.from_numpy(np.stack([np.asarray(element[name], dtype=dtype) for name in names], axis=-1)
                            .reshape(element.count, len(names)))


def read_ply(data):
    """Parses a PLY (ASCII, or binary as written by other tools) into a `PointCloud`.

    The vertex element needs x, y, z; nx, ny, nz and row, col are picked up if present. Other vertex properties are
    skipped with a warning, as are other elements.

    Raises:
        MalformedHeader, CountMismatch.
    """
    try:
        ply = plyfile.PlyData.read(BytesIO(bytes(data)))
    except plyfile.PlyHeaderParseError as e:
        raise errors.MalformedHeader("Bad PLY header: {}".format(e))
    except plyfile.PlyElementParseError as e:
        raise errors.CountMismatch("PLY body does not match its header: {}".format(e))
    if ply.text:
        expected = sum(element.count for element in ply.elements)
        found = _body_lines(data)
        if found != expected:
            raise errors.CountMismatch("PLY header declares {} element lines, body has {}.".format(expected, found))

    cloud = None
    for element in ply.elements:
        if element.name != 'vertex':
            logger.warning("Skipping PLY element %r.", element.name)
            continue
        properties = [prop.name for prop in element.properties]
        if any(isinstance(prop, plyfile.PlyListProperty) for prop in element.properties):
            raise errors.MalformedHeader("List properties on vertices are not supported.")
        for required in ('x', 'y', 'z'):
            if required not in properties:
                raise errors.MalformedHeader("Vertex element lacks property {!r}.".format(required))
        for unknown in [p for p in properties if p not in _VERTEX_PROPERTIES]:
            logger.warning("Skipping unknown vertex property %r.", unknown)

        normals = None
        if all(p in properties for p in ('nx', 'ny', 'nz')):
            normals = _ply_columns(element, ('nx', 'ny', 'nz'))
        provenance = None
        if 'row' in properties and 'col' in properties:
            provenance = _ply_columns(element, ('row', 'col'), dtype=np.int64)
        cloud = registration.PointCloud(_ply_columns(element, ('x', 'y', 'z')), normals, provenance,
                                        tuple(ply.comments))
    if cloud is None:
        raise errors.MalformedHeader("PLY file has no vertex element.")
    return cloud


###################
# JSON helpers
###################

def _field(document, key, path, kinds, default=dataclasses.MISSING):
    if key not in document:
        if default is not dataclasses.MISSING:
            return default
        raise errors.SchemaViolation(path + '.' + key, "missing required field")
    value = document[key]
    if isinstance(value, bool) and bool not in kinds:
        raise errors.SchemaViolation(path + '.' + key, "expected {}, got a boolean".format(
            ' or '.join(kind.__name__ for kind in kinds)))
    if not isinstance(value, kinds):
        raise errors.SchemaViolation(path + '.' + key, "expected {}, got {}".format(
            ' or '.join(kind.__name__ for kind in kinds), type(value).__name__))
    return value


def _number(document, key, path, default=dataclasses.MISSING):
    return float(_field(document, key, path, (int, float), default))


def _matrix(document, key, path, shape):
    value = _field(document, key, path, (list,))
    try:
        tensor = torch.tensor(value, dtype=torch.float64)
    except (TypeError, ValueError):
        raise errors.SchemaViolation(path + '.' + key, "expected a numeric array")
    if tuple(tensor.shape) != shape:
        raise errors.SchemaViolation(path + '.' + key, "expected shape {}, got {}".format(shape, tuple(tensor.shape)))
    return tensor


def _check_version(document, path):
    if not isinstance(document, dict):
        raise errors.SchemaViolation(path, "expected an object")
    version = _field(document, 'schema_version', path, (int,))
    if version != SCHEMA_VERSION:
        raise errors.SchemaViolation(path + '.schema_version', "unsupported version {}".format(version))


def _extra(document, known):
    return {key: value for key, value in document.items() if key not in known}


def dumps(document):
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(document, indent=2, sort_keys=True) + '\n'


def load_json(path):
    path = pathlib.Path(path)
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise errors.SchemaViolation(str(path), "invalid JSON: {}".format(e))


def save_json(document, path):
    with open(path, 'w') as f:
        f.write(dumps(document))


def camera_to_json(model):
    return {'fx': model.fx, 'fy': model.fy, 'cx': model.cx, 'cy': model.cy, 'skew': model.skew,
            'dist': model.dist.as_list(), 'width': model.width, 'height': model.height}


def camera_from_json(document, path='camera'):
    if not isinstance(document, dict):
        raise errors.SchemaViolation(path, "expected an object")
    dist = _field(document, 'dist', path, (list,), [0.] * 5)
    if len(dist) != 5 or not all(isinstance(value, (int, float)) and not isinstance(value, bool) for value in dist):
        raise errors.SchemaViolation(path + '.dist', "expected 5 numbers (k1, k2, p1, p2, k3)")
    try:
        return geometry.CameraModel(fx=_number(document, 'fx', path), fy=_number(document, 'fy', path),
                                    cx=_number(document, 'cx', path), cy=_number(document, 'cy', path),
                                    width=_field(document, 'width', path, (int,)),
                                    height=_field(document, 'height', path, (int,)),
                                    skew=_number(document, 'skew', path, 0.),
                                    dist=geometry.DistortionCoeffs.from_sequence(dist))
    except errors.SchemaViolation:
        raise
    except ValueError as e:
        raise errors.SchemaViolation(path, str(e))


def transform_to_json(transform):
    return {'R': transform.R.tolist(), 't': transform.t.tolist()}


def transform_from_json(document, path='transform'):
    if not isinstance(document, dict):
        raise errors.SchemaViolation(path, "expected an object")
    R = _matrix(document, 'R', path, (3, 3))
    t = _matrix(document, 't', path, (3,))
    try:
        return geometry.RigidTransform(R, t)
    except ValueError as e:
        raise errors.SchemaViolation(path, str(e))


###################
# Stack manifests
###################

@dataclasses.dataclass
class Manifest:
    """A pattern stack on disk: one PGM per image, listed in stack order."""
    files: list
    kinds: list
    indices: list
    projector_width: int
    projector_height: int
    fringe_width: float = None
    extra: dict = dataclasses.field(default_factory=dict)


def manifest_to_json(manifest):
    images = []
    for file, kind, index in zip(manifest.files, manifest.kinds, manifest.indices):
        entry = {'file': file, 'kind': kind, 'index': index}
        if kind.startswith('phase'):
            entry['shift'] = codec.SHIFTS[index]
        images.append(entry)
    document = dict(manifest.extra)
    document.update({'schema_version': SCHEMA_VERSION, 'images': images,
                     'projector_width': manifest.projector_width, 'projector_height': manifest.projector_height})
    if manifest.fringe_width is not None:
        document['fringe_width'] = manifest.fringe_width
    return document


def manifest_from_json(document, path='manifest'):
    _check_version(document, path)
    images = _field(document, 'images', path, (list,))
    files, kinds, indices = [], [], []
    for i, entry in enumerate(images):
        entry_path = '{}.images[{}]'.format(path, i)
        if not isinstance(entry, dict):
            raise errors.SchemaViolation(entry_path, "expected an object")
        kind = _field(entry, 'kind', entry_path, (str,))
        if kind not in codec.KINDS:
            raise errors.SchemaViolation(entry_path + '.kind', "unknown kind {!r}".format(kind))
        files.append(_field(entry, 'file', entry_path, (str,)))
        kinds.append(kind)
        indices.append(_field(entry, 'index', entry_path, (int,)))
    fringe_width = document.get('fringe_width')
    if fringe_width is not None:
        fringe_width = _number(document, 'fringe_width', path)
    return Manifest(files=files, kinds=kinds, indices=indices,
                    projector_width=_field(document, 'projector_width', path, (int,)),
                    projector_height=_field(document, 'projector_height', path, (int,)),
                    fringe_width=fringe_width,
                    extra=_extra(document, {'schema_version', 'images', 'projector_width', 'projector_height',
                                            'fringe_width'}))


def write_manifest(manifest, path):
    save_json(manifest_to_json(manifest), path)


def read_manifest(path):
    return manifest_from_json(load_json(path), str(path))


def save_stack(stack, directory, prefix='pattern'):
    """Writes every image of a stack as a PGM plus manifest.json into `directory`; returns the manifest path."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = len(str(max(len(stack) - 1, 0)))
    files = []
    for i, image in enumerate(stack.images):
        name = '{}_{:0{}d}.pgm'.format(prefix, i, digits)
        (directory / name).write_bytes(write_pgm(image))
        files.append(name)
    manifest = Manifest(files=files, kinds=list(stack.kinds), indices=list(stack.indices),
                        projector_width=stack.projector_width, projector_height=stack.projector_height,
                        fringe_width=stack.fringe_width)
    path = directory / 'manifest.json'
    write_manifest(manifest, path)
    return path


def load_stack(path):
    """Reads a manifest and its images (relative to the manifest) into a `PatternStack`."""
    path = pathlib.Path(path)
    manifest = read_manifest(path)
    images = []
    for file in manifest.files:
        image_path = path.parent / file
        if not image_path.exists():
            raise FileNotFoundError("Missing stack image {}.".format(image_path))
        images.append(read_pgm(image_path.read_bytes()))
    if len(set(image.shape for image in images)) > 1:
        raise errors.StackMismatch("Stack images listed in {} differ in size.".format(path))
    return codec.PatternStack(torch.stack(images), tuple(manifest.kinds), tuple(manifest.indices),
                              manifest.projector_width, manifest.projector_height, manifest.fringe_width)


###################
# Calibration files
###################

@dataclasses.dataclass
class CalibrationFile:
    camera: geometry.CameraModel = None
    projector: geometry.CameraModel = None
    transform: geometry.RigidTransform = None
    camera_poses: list = dataclasses.field(default_factory=list)
    projector_poses: list = dataclasses.field(default_factory=list)
    rms: dict = dataclasses.field(default_factory=dict)
    spread: float = None
    extra: dict = dataclasses.field(default_factory=dict)

    def rig(self):
        if self.camera is None or self.projector is None or self.transform is None:
            raise errors.MissingRig("The calibration lacks the camera, the projector or their transform.")
        return triangulation.StereoRig(self.camera, self.projector, self.transform)

    @classmethod
    def from_stereo(cls, stereo):
        return cls(camera=stereo.camera.model, projector=stereo.projector.model, transform=stereo.transform,
                   camera_poses=list(stereo.camera.poses), projector_poses=list(stereo.projector.poses),
                   rms={'camera': stereo.camera.rms, 'projector': stereo.projector.rms}, spread=stereo.spread)


def calib_to_json(calib):
    document = dict(calib.extra)
    document['schema_version'] = SCHEMA_VERSION
    for key, model in (('camera', calib.camera), ('projector', calib.projector)):
        if model is not None:
            document[key] = camera_to_json(model)
    if calib.transform is not None:
        document['transform'] = transform_to_json(calib.transform)
    poses = {}
    if calib.camera_poses:
        poses['camera'] = [transform_to_json(pose) for pose in calib.camera_poses]
    if calib.projector_poses:
        poses['projector'] = [transform_to_json(pose) for pose in calib.projector_poses]
    if poses:
        document['poses'] = poses
    if calib.rms:
        document['rms'] = dict(calib.rms)
        document['ok'] = {key: value < 1. for key, value in calib.rms.items()}
    if calib.spread is not None:
        document['spread_degrees'] = calib.spread
    return document


def calib_from_json(document, path='calib'):
    _check_version(document, path)
    calib = CalibrationFile()
    for key in ('camera', 'projector'):
        if key in document:
            setattr(calib, key, camera_from_json(document[key], path + '.' + key))
    if 'transform' in document:
        calib.transform = transform_from_json(document['transform'], path + '.transform')
    poses = _field(document, 'poses', path, (dict,), {})
    for key in ('camera', 'projector'):
        entries = _field(poses, key, path + '.poses', (list,), [])
        setattr(calib, key + '_poses', [transform_from_json(entry, '{}.poses.{}[{}]'.format(path, key, i))
                                        for i, entry in enumerate(entries)])
    rms = _field(document, 'rms', path, (dict,), {})
    calib.rms = {key: _number(rms, key, path + '.rms') for key in rms}
    if 'spread_degrees' in document:
        calib.spread = _number(document, 'spread_degrees', path)
    calib.extra = _extra(document, {'schema_version', 'camera', 'projector', 'transform', 'poses', 'rms', 'ok',
                                    'spread_degrees'})
    return calib


def write_calib(calib, path):
    save_json(calib_to_json(calib), path)


def read_calib(path):
    return calib_from_json(load_json(path), str(path))


###################
# Correspondence maps
###################

@dataclasses.dataclass
class CorrFile:
    """A correspondence map read from disk, with the header fields this reader does not know."""
    corr: codec.CorrespondenceMap
    extra: dict = dataclasses.field(default_factory=dict)


_CORR_KEYS = {'schema_version', 'width', 'height', 'projector_width', 'projector_height', 'axes', 'proj_x', 'proj_y',
              'reason', 'fringe_order', 'data', 'layout'}


def _float_plane(values):
    return values.to(torch.float32).numpy().astype('<f4').tobytes()


def write_corr(corr, path, inline=False, extra=None):
    """Writes a `CorrespondenceMap` (or a `CorrFile`, keeping its extra fields) as a JSON header at `path` plus
    `<path stem>.raw`, or fully inline. `extra` fields are written alongside the known ones."""
    path = pathlib.Path(path)
    if isinstance(corr, CorrFile):
        extra = corr.extra if extra is None else extra
        corr = corr.corr
    document = dict(extra or {})
    document.update({'schema_version': SCHEMA_VERSION, 'width': corr.width, 'height': corr.height,
                     'projector_width': corr.projector_width, 'projector_height': corr.projector_height,
                     'axes': list(corr.axes)})
    planes = [('proj_x', corr.proj_x), ('proj_y', corr.proj_y)]
    if inline:
        for name, values in planes:
            if values is not None:
                document[name] = [[None if not math.isfinite(value) else value for value in row]
                                  for row in values.tolist()]
        document['reason'] = corr.reason.tolist()
        if corr.fringe_order is not None:
            document['fringe_order'] = corr.fringe_order.tolist()
    else:
        raw = path.with_suffix('.raw')
        layout = []
        body = []
        for name, values in planes:
            if values is not None:
                layout.append(name + ':float32le')
                body.append(_float_plane(values))
        layout.append('reason:uint8')
        body.append(corr.reason.numpy().tobytes())
        if corr.fringe_order is not None:
            layout.append('fringe_order:int32le')
            body.append(corr.fringe_order.to(torch.int32).numpy().astype('<i4').tobytes())
        raw.write_bytes(b''.join(body))
        document['data'] = raw.name
        document['layout'] = layout
    save_json(document, path)


def _below(values, extent):
    # float32 storage can round a coordinate just below the extent up onto it.
    return torch.where(values >= extent, torch.full_like(values, extent - 1e-6 * extent), values)


def corr_from_json(document, path='corr', directory=None):
    """A `CorrFile` from a JSON header; `directory` locates the raw file of a non-inline map."""
    _check_version(document, path)
    width = _field(document, 'width', path, (int,))
    height = _field(document, 'height', path, (int,))
    projector_width = _field(document, 'projector_width', path, (int,))
    projector_height = _field(document, 'projector_height', path, (int,))
    axes = _field(document, 'axes', path, (list,))
    if any(axis not in ('x', 'y') for axis in axes):
        raise errors.SchemaViolation(path + '.axes', "axes must be 'x' or 'y'")
    planes = {}
    fringe_order = None
    if 'data' in document:
        layout = _field(document, 'layout', path, (list,))
        raw_path = pathlib.Path(directory or '.') / _field(document, 'data', path, (str,))
        data = raw_path.read_bytes()
        offset = 0
        count = width * height
        for entry in layout:
            name, _, kind = entry.partition(':')
            dtype = {'float32le': '<f4', 'uint8': 'u1', 'int32le': '<i4'}.get(kind)
            if dtype is None:
                raise errors.SchemaViolation(path + '.layout', "unknown plane type {!r}".format(kind))
            size = count * np.dtype(dtype).itemsize
            if offset + size > len(data):
                raise errors.TruncatedBody("{} holds {} bytes; its layout needs more.".format(raw_path, len(data)))
            plane = np.frombuffer(data[offset:offset + size], dtype=dtype).reshape(height, width)
            offset += size
            planes[name] = torch.from_numpy(plane.astype(np.float64 if kind == 'float32le' else np.int64))
        if offset != len(data):
            raise errors.SchemaViolation(path + '.layout', "raw file is longer than its layout")
        fringe_order = planes.get('fringe_order')
    else:
        for name in ('proj_x', 'proj_y'):
            if name in document:
                rows = _field(document, name, path, (list,))
                planes[name] = torch.tensor([[math.nan if value is None else value for value in row] for row in rows],
                                            dtype=torch.float64)
        planes['reason'] = torch.tensor(_field(document, 'reason', path, (list,)), dtype=torch.int64)
        if 'fringe_order' in document:
            fringe_order = torch.tensor(document['fringe_order'], dtype=torch.int64)
    if 'reason' not in planes:
        raise errors.SchemaViolation(path, "missing the reason plane")
    for name, values in planes.items():
        if tuple(values.shape) != (height, width):
            raise errors.SchemaViolation(path + '.' + name, "expected shape {}x{}".format(height, width))
    for axis in axes:
        if 'proj_' + axis not in planes:
            raise errors.SchemaViolation(path, "axis {} is listed but has no plane".format(axis))
    reason = planes['reason']
    valid = reason == codec.REASON_VALID
    coords = {}
    for axis, extent in (('x', projector_width), ('y', projector_height)):
        if axis in axes:
            values = planes['proj_' + axis]
            if not torch.isfinite(values[valid]).all():
                raise errors.SchemaViolation(path + '.proj_' + axis, "valid pixels need finite coordinates")
            coords[axis] = torch.where(valid, _below(values, extent), torch.full_like(values, math.nan))
    try:
        corr = codec.CorrespondenceMap(proj_x=coords.get('x'), proj_y=coords.get('y'), valid=valid,
                                       reason=reason.to(torch.uint8), projector_width=projector_width,
                                       projector_height=projector_height, fringe_order=fringe_order)
    except ValueError as e:
        raise errors.SchemaViolation(path, str(e))
    return CorrFile(corr, _extra(document, _CORR_KEYS))


def read_corr(path):
    path = pathlib.Path(path)
    return corr_from_json(load_json(path), str(path), directory=path.parent)


###################
# Views and scenes
###################

def view_from_json(document, path='view', directory=None):
    """A `CalibrationView` from {"board": [[X, Y], ...], "image": [[u, v], ...], "correspondence": "corr.json"}."""
    _check_version(document, path)
    board = _field(document, 'board', path, (list,))
    image = _field(document, 'image', path, (list,))
    correspondence = None
    if 'correspondence' in document:
        corr_path = pathlib.Path(directory or '.') / _field(document, 'correspondence', path, (str,))
        correspondence = read_corr(corr_path).corr
    projector = document.get('projector')
    try:
        return calibration.CalibrationView(board_points=torch.tensor(board, dtype=torch.float64),
                                           image_points=torch.tensor(image, dtype=torch.float64),
                                           projector_points=None if projector is None else
                                           torch.tensor([[math.nan if v is None else v for v in row]
                                                         for row in projector], dtype=torch.float64),
                                           correspondence=correspondence,
                                           name=document.get('name', path))
    except (TypeError, ValueError) as e:
        if isinstance(e, errors.SlscanError):
            raise
        raise errors.SchemaViolation(path, str(e))


def read_view(path):
    path = pathlib.Path(path)
    return view_from_json(load_json(path), str(path), directory=path.parent)


def view_to_json(view, correspondence_file=None):
    document = {'schema_version': SCHEMA_VERSION, 'board': view.board_points.tolist(),
                'image': view.image_points.tolist()}
    if view.name is not None:
        document['name'] = view.name
    if correspondence_file is not None:
        document['correspondence'] = correspondence_file
    if view.projector_points is not None:
        document['projector'] = [[None if not math.isfinite(v) else v for v in row]
                                 for row in view.projector_points.tolist()]
    return document


def _surface_from_json(document, path):
    if not isinstance(document, dict):
        raise errors.SchemaViolation(path, "expected an object")
    kind = _field(document, 'type', path, (str,))
    appearance = {'albedo': _number(document, 'albedo', path, 1.), 'ambient': _number(document, 'ambient', path, 0.)}
    try:
        if kind == 'plane':
            return simulator.Plane(_matrix(document, 'point', path, (3,)), _matrix(document, 'normal', path, (3,)),
                                   **appearance)
        elif kind == 'sphere':
            return simulator.Sphere(_matrix(document, 'center', path, (3,)), _number(document, 'radius', path),
                                    **appearance)
        elif kind == 'mesh':
            vertices = torch.tensor(_field(document, 'vertices', path, (list,)), dtype=torch.float64)
            triangles = torch.tensor(_field(document, 'triangles', path, (list,)), dtype=torch.int64)
            return simulator.Mesh(vertices, triangles, **appearance)
        elif kind == 'quad':
            return simulator.make_quad(_matrix(document, 'center', path, (3,)),
                                       _matrix(document, 'normal', path, (3,)),
                                       _number(document, 'size', path), **appearance)
        elif kind == 'cup':
            options = {key: _number(document, key, path) for key in ('radius', 'height', 'wall', 'squash')
                       if key in document}
            if 'center' in document:
                options['centre'] = _matrix(document, 'center', path, (3,)).tolist()
            return simulator.make_cup(albedo=appearance['albedo'], ambient=appearance['ambient'], **options)
    except (TypeError, ValueError) as e:
        if isinstance(e, errors.SlscanError):
            raise
        raise errors.SchemaViolation(path, str(e))
    raise errors.SchemaViolation(path + '.type', "unknown surface type {!r}".format(kind))


@dataclasses.dataclass
class SceneFile:
    scene: simulator.Scene
    rig: simulator.Rig
    turntable: dict
    extra: dict = dataclasses.field(default_factory=dict)


def scene_from_json(document, path='scene'):
    """Scene description: surfaces, background, inter_reflection, a rig and optional turntable settings.

    The rig is either explicit ({"camera", "camera_pose", "projector", "projector_pose"}) or built by
    `simulator.make_rig` from its keyword arguments under "rig": {"make": {...}}. Without a "rig" entry, `rig` is
    None and the caller supplies one.
    """
    _check_version(document, path)
    surfaces = [_surface_from_json(entry, '{}.surfaces[{}]'.format(path, i))
                for i, entry in enumerate(_field(document, 'surfaces', path, (list,)))]
    if len(surfaces) == 0:
        raise errors.SchemaViolation(path + '.surfaces', "a scene needs at least one surface")
    scene = simulator.Scene(surfaces, background=_number(document, 'background', path, 0.),
                            inter_reflection=_number(document, 'inter_reflection', path, 0.))
    rig_document = _field(document, 'rig', path, (dict,), None)
    rig_path = path + '.rig'
    if rig_document is None:
        rig = None
    elif 'make' in rig_document:
        options = dict(_field(rig_document, 'make', rig_path, (dict,)))
        for key in ('camera_size', 'projector_size'):
            if key in options:
                options[key] = tuple(options[key])
        try:
            rig = simulator.make_rig(**options)
        except TypeError as e:
            raise errors.SchemaViolation(rig_path + '.make', str(e))
    else:
        rig = simulator.Rig(camera_from_json(_field(rig_document, 'camera', rig_path, (dict,)), rig_path + '.camera'),
                            transform_from_json(_field(rig_document, 'camera_pose', rig_path, (dict,)),
                                                rig_path + '.camera_pose'),
                            camera_from_json(_field(rig_document, 'projector', rig_path, (dict,)),
                                             rig_path + '.projector'),
                            transform_from_json(_field(rig_document, 'projector_pose', rig_path, (dict,)),
                                                rig_path + '.projector_pose'))
    turntable = dict(_field(document, 'turntable', path, (dict,), {}))
    return SceneFile(scene=scene, rig=rig, turntable=turntable,
                     extra=_extra(document, {'schema_version', 'surfaces', 'background', 'inter_reflection', 'rig',
                                             'turntable'}))


def read_scene(path):
    return scene_from_json(load_json(path), str(path))


def truth_to_json(views):
    """The exact inter-view transforms of a turntable sequence."""
    return {'schema_version': SCHEMA_VERSION,
            'steps': [transform_to_json(view.transform) for view in views]}
