"""Pipeline configuration: nested frozen dataclasses loaded from JSON, overridden by command-line flags and hashed to
name stage artifacts."""
import dataclasses
import hashlib
import json
import logging
import math
import pathlib

from . import codec
from . import errors
from . import registration


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ResolutionConfig:
    projector_width: int = 640
    projector_height: int = 480
    camera_width: int = 640
    camera_height: int = 480
    camera_hfov: float = 48.
    projector_hfov: float = 48.
    baseline: float = 150.
    working_distance: float = 500.


@dataclasses.dataclass(frozen=True)
class PatternConfig:
    mode: str = 'gray'
    bias: float = 127.
    amplitude: float = 127.
    fringe_width: float = 20.


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    min_direct: float = 5.
    min_modulation: float = 5.


@dataclasses.dataclass(frozen=True)
class CalibrationConfig:
    window_radius: int = 30
    min_support: int = 20
    max_spread: float = 5.
    estimate_distortion: bool = True
    estimate_skew: bool = False
    estimate_k3: bool = True


@dataclasses.dataclass(frozen=True)
class TriangulationConfig:
    max_residual: float = 1.


@dataclasses.dataclass(frozen=True)
class IcpConfig:
    correspondence_mode: str = 'closest-point'
    error_metric: str = 'point-point'
    max_iterations: int = 50
    error_tolerance: float = 1e-10
    max_pair_distance: float = None
    overlap: float = 0.9
    normal_neighbours: int = 10
    voxel_fraction: float = 0.005

    def params(self, projective_rig=None):
        return registration.IcpParams(correspondence_mode=self.correspondence_mode,
                                      max_iterations=self.max_iterations,
                                      error_tolerance=self.error_tolerance,
                                      error_metric=self.error_metric,
                                      max_pair_distance=self.max_pair_distance,
                                      overlap=self.overlap,
                                      projective_rig=projective_rig)


@dataclasses.dataclass(frozen=True)
class SimulationConfig:
    views: int = 10
    step_angle: float = 10.
    noise_sigma: float = 0.
    outlier_fraction: float = 0.


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """Every setting of every stage. `slscan config --dump` prints the defaults."""
    resolution: ResolutionConfig = dataclasses.field(default_factory=ResolutionConfig)
    pattern: PatternConfig = dataclasses.field(default_factory=PatternConfig)
    decode: DecodeConfig = dataclasses.field(default_factory=DecodeConfig)
    calibration: CalibrationConfig = dataclasses.field(default_factory=CalibrationConfig)
    triangulation: TriangulationConfig = dataclasses.field(default_factory=TriangulationConfig)
    icp: IcpConfig = dataclasses.field(default_factory=IcpConfig)
    simulation: SimulationConfig = dataclasses.field(default_factory=SimulationConfig)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, document, path='config'):
        """Builds a config from a (possibly partial) JSON object; missing fields take their defaults.

        Raises:
            SchemaViolation naming the offending field.
        """
        return _from_json(cls, document, path)

    def override(self, changes):
        """Returns a copy with dotted-name changes applied, e.g. {'icp.max_iterations': 20}. None values are
        ignored, so unset command-line flags leave the config alone."""
        document = self.to_json()
        for name, value in changes.items():
            if value is None:
                continue
            section, _, key = name.rpartition('.')
            target = document.get(section) if section else document
            if not isinstance(target, dict) or key not in target:
                raise errors.SchemaViolation('config.' + name, "unknown field")
            target[key] = value
        return PipelineConfig.from_json(document)

    def digest(self, inputs=(), length=12):
        """SHA-256 prefix of the canonical JSON form, followed by the bytes of any `inputs` (input files a stage
        reads). Identical configs and inputs give identical digests."""
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(',', ':'))
        sha = hashlib.sha256(canonical.encode('utf-8'))
        for data in inputs:
            sha.update(hashlib.sha256(data).digest())
        return sha.hexdigest()[:length]

    def stage_dir(self, out, stage, inputs=()):
        return pathlib.Path(out) / '{}-{}'.format(stage, self.digest(inputs))


def _check_type(value, kind, default, path):
    if value is None and default is None:
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise errors.SchemaViolation(path, "expected a boolean, got {}".format(type(value).__name__))
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise errors.SchemaViolation(path, "expected an integer, got {}".format(type(value).__name__))
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise errors.SchemaViolation(path, "expected a number, got {}".format(type(value).__name__))
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise errors.SchemaViolation(path, "expected a string, got {}".format(type(value).__name__))
        return value
    raise TypeError("Unsupported config field type {}.".format(kind))


def _from_json(cls, document, path):
    if not isinstance(document, dict):
        raise errors.SchemaViolation(path, "expected an object")
    fields = {field.name: field for field in dataclasses.fields(cls)}
    for key in document:
        if key not in fields:
            raise errors.SchemaViolation(path + '.' + key, "unknown field")
    values = {}
    for name, field in fields.items():
        if name not in document:
            continue
        field_path = path + '.' + name
        if dataclasses.is_dataclass(field.type):
            values[name] = _from_json(field.type, document[name], field_path)
        else:
            values[name] = _check_type(document[name], field.type, field.default, field_path)
    try:
        return cls(**values)
    except errors.SchemaViolation:
        raise
    except ValueError as e:
        raise errors.SchemaViolation(path, str(e))


def _positive(value, path):
    if not (value > 0 and math.isfinite(value)):
        raise errors.SchemaViolation(path, "must be positive, got {}".format(value))


def validate(config):
    """Checks cross-field constraints; raises SchemaViolation naming the first offending field."""
    resolution = config.resolution
    for name in ('projector_width', 'projector_height', 'camera_width', 'camera_height'):
        if getattr(resolution, name) < 2:
            raise errors.SchemaViolation('config.resolution.' + name, "must be at least 2")
    for name in ('camera_hfov', 'projector_hfov'):
        if not 0 < getattr(resolution, name) < 180:
            raise errors.SchemaViolation('config.resolution.' + name, "must be in (0, 180) degrees")
    _positive(resolution.baseline, 'config.resolution.baseline')
    _positive(resolution.working_distance, 'config.resolution.working_distance')

    if config.pattern.mode not in ('gray', 'phase'):
        raise errors.SchemaViolation('config.pattern.mode', "must be 'gray' or 'phase'")
    try:
        codec.PhasePatternParams(config.pattern.bias, config.pattern.amplitude, config.pattern.fringe_width)
    except ValueError as e:
        raise errors.SchemaViolation('config.pattern', str(e))

    if config.decode.min_direct < 0 or config.decode.min_modulation < 0:
        raise errors.SchemaViolation('config.decode', "thresholds must be non-negative")
    if config.calibration.window_radius < 1 or config.calibration.min_support < 4:
        raise errors.SchemaViolation('config.calibration', "window_radius must be >= 1 and min_support >= 4")
    _positive(config.calibration.max_spread, 'config.calibration.max_spread')
    _positive(config.triangulation.max_residual, 'config.triangulation.max_residual')

    try:
        config.icp.params()
    except ValueError as e:
        raise errors.SchemaViolation('config.icp', str(e))
    if config.icp.normal_neighbours < 3:
        raise errors.SchemaViolation('config.icp.normal_neighbours', "must be at least 3")
    if config.icp.voxel_fraction < 0:
        raise errors.SchemaViolation('config.icp.voxel_fraction', "must be non-negative")

    simulation = config.simulation
    if simulation.views < 1:
        raise errors.SchemaViolation('config.simulation.views', "must be at least 1")
    if simulation.views * abs(simulation.step_angle) > 360:
        raise errors.SchemaViolation('config.simulation.step_angle', "views * step_angle exceeds a full turn")
    if simulation.noise_sigma < 0:
        raise errors.SchemaViolation('config.simulation.noise_sigma', "must be non-negative")
    if not 0 <= simulation.outlier_fraction < 1:
        raise errors.SchemaViolation('config.simulation.outlier_fraction', "must be in [0, 1)")
    if config.seed < 0:
        raise errors.SchemaViolation('config.seed', "must be non-negative")


def load_config(path=None):
    """The default config, or the one in the JSON file at `path`."""
    if path is None:
        return PipelineConfig()
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError("Config file {} does not exist.".format(path))
    with open(path, 'r') as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise errors.SchemaViolation(str(path), "invalid JSON: {}".format(e))
    config = PipelineConfig.from_json(document, str(path))
    logger.debug("Loaded config %s from %s.", config.digest(), path)
    return config
