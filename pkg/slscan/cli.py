"""The `slscan` command line: one subcommand per pipeline stage.

Every stage prints one JSON line summarising what it did to stdout; logs go to stderr. On failure the stage's partial
outputs are removed, a JSON line with the error code is printed and the exit status is nonzero.
"""
import argparse
import json
import logging
import pathlib
import shutil
import sys
import time
import torch

from . import __version__
from . import calibration
from . import codec
from . import config as config_
from . import errors
from . import geometry
from . import io
from . import misc
from . import registration
from . import simulator
from . import triangulation


logger = logging.getLogger(__name__)


STAGES = ('gen-patterns', 'decode', 'calibrate', 'triangulate', 'register', 'simulate', 'reconstruct')

_MODES = {'closest': 'closest-point', 'normal': 'normal-shooting', 'projective': 'projective'}


class _Outputs:
    """Tracks the files and directories a stage creates so that a failing stage can remove them."""

    def __init__(self):
        self.paths = []

    def file(self, path):
        path = pathlib.Path(path)
        self.directory(path.parent)
        self.paths.append(path)
        return path

    def directory(self, path):
        path = pathlib.Path(path)
        missing = []
        for parent in [path] + list(path.parents):
            if parent.exists():
                break
            missing.append(parent)
        path.mkdir(parents=True, exist_ok=True)
        self.paths.extend(reversed(missing))
        return path

    def remove(self):
        for path in reversed(self.paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()
        self.paths = []


def _read_bytes(path):
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError("Input {} does not exist.".format(path))
    return path.read_bytes()


def _require(path):
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError("Input {} does not exist.".format(path))
    return path


def _comment(stage, config):
    return 'slscan {} {} config {}'.format(__version__, stage, config.digest())


def _rig_from_config(config):
    resolution = config.resolution
    return simulator.make_rig(camera_size=(resolution.camera_width, resolution.camera_height),
                              projector_size=(resolution.projector_width, resolution.projector_height),
                              camera_hfov=resolution.camera_hfov, projector_hfov=resolution.projector_hfov,
                              baseline=resolution.baseline, working_distance=resolution.working_distance)


def _patterns(config, projector_width, projector_height):
    pattern = config.pattern
    params = codec.PhasePatternParams(pattern.bias, pattern.amplitude, pattern.fringe_width)
    return codec.generate_patterns(projector_width, projector_height, mode=pattern.mode, params=params)


def _turntable(scene_file, config):
    turntable = scene_file.turntable
    axis = tuple(turntable.get('axis', (0., 1., 0.)))
    centre = tuple(turntable.get('centre', (0., 0., config.resolution.working_distance)))
    step_angle = float(turntable.get('step_angle', config.simulation.step_angle))
    return axis, centre, step_angle


###################
# Stages
###################

def _gen_patterns(args, config, outputs):
    resolution = config.resolution
    stack = _patterns(config, resolution.projector_width, resolution.projector_height)
    directory = outputs.directory(config.stage_dir(args.out, 'gen-patterns'))
    manifest = io.save_stack(stack, directory)
    return {'outputs': [str(manifest)], 'images': len(stack), 'mode': config.pattern.mode,
            'projector_width': stack.projector_width, 'projector_height': stack.projector_height}


def _decode(args, config, outputs):
    stack = io.load_stack(_require(args.manifest))
    corr = codec.decode(stack, min_direct=config.decode.min_direct, min_modulation=config.decode.min_modulation)
    path = outputs.file(args.out)
    if not args.inline:
        outputs.file(path.with_suffix('.raw'))
    io.write_corr(corr, path, inline=args.inline)
    counts = corr.reason_counts()
    return {'outputs': [str(path)], 'axes': list(corr.axes), 'valid': corr.valid_count, 'reasons': counts}


def _calibrate(args, config, outputs):
    directory = _require(args.views)
    paths = sorted(directory.glob('*.json')) if directory.is_dir() else [directory]
    views = []
    for path in paths:
        document = io.load_json(path)
        # Correspondence maps may share the directory.
        if isinstance(document, dict) and 'board' in document:
            views.append(io.view_from_json(document, str(path), directory=path.parent))
    if len(views) == 0:
        raise FileNotFoundError("No view files in {}.".format(directory))
    resolution = config.resolution
    camera_size = (resolution.camera_width, resolution.camera_height)
    projector_size = (resolution.projector_width, resolution.projector_height)
    settings = config.calibration
    options = dict(estimate_distortion=settings.estimate_distortion, estimate_skew=settings.estimate_skew,
                   estimate_k3=settings.estimate_k3)

    if args.target == 'camera':
        result = calibration.calibrate_device(views, camera_size, **options)
        calib = io.CalibrationFile(camera=result.model, camera_poses=list(result.poses), rms={'camera': result.rms})
    elif args.target == 'projector':
        transferred = []
        for view in views:
            if view.projector_points is None:
                transfer = calibration.transfer_corners_local_homography(view, window_radius=settings.window_radius,
                                                                         min_support=settings.min_support)
                view = view.replace(projector_points=transfer.points)
            transferred.append(view)
        result = calibration.calibrate_device(transferred, projector_size, use_projector_points=True, **options)
        calib = io.CalibrationFile(projector=result.model, projector_poses=list(result.poses),
                                   rms={'projector': result.rms})
    else:
        stereo = calibration.calibrate_stereo(views, camera_size, projector_size, window_radius=settings.window_radius,
                                              min_support=settings.min_support, max_spread=settings.max_spread,
                                              **options)
        calib = io.CalibrationFile.from_stereo(stereo)
    path = outputs.file(args.out)
    io.write_calib(calib, path)
    return {'outputs': [str(path)], 'views': len(views), 'target': args.target, 'rms': calib.rms,
            'ok': all(value < 1. for value in calib.rms.values())}


def _triangulate(args, config, outputs):
    corr = io.read_corr(_require(args.corr)).corr
    rig = io.read_calib(_require(args.calib)).rig()
    cloud, report = triangulation.triangulate_map(corr, rig, max_residual=config.triangulation.max_residual)
    if args.normals and len(cloud) > config.icp.normal_neighbours:
        cloud = registration.estimate_normals(cloud, k=config.icp.normal_neighbours)
    cloud = registration.PointCloud(cloud.points, cloud.normals, cloud.provenance,
                                    (_comment('triangulate', config),))
    path = outputs.file(args.out)
    path.write_bytes(io.write_ply(cloud))
    return {'outputs': [str(path)], 'mode': report.mode, 'candidates': report.candidates, 'kept': report.kept,
            'dropped_cheirality': report.dropped_cheirality, 'dropped_residual': report.dropped_residual,
            'dropped_degenerate': report.dropped_degenerate}


def _needs_normals(config):
    return config.icp.correspondence_mode == 'normal-shooting' or config.icp.error_metric == 'point-plane'


def _with_normals(cloud, config):
    if cloud.normals is None and _needs_normals(config):
        return registration.estimate_normals(cloud, k=config.icp.normal_neighbours)
    return cloud


def _stitch_report(result, truth=None):
    steps = []
    for index, (step, report) in enumerate(zip(result.steps, result.reports)):
        entry = {'transform': io.transform_to_json(step), 'error_trace': list(report.error_trace),
                 'iterations': report.iterations, 'converged': report.converged,
                 'pair_counts': list(report.pair_counts)}
        if truth is not None:
            exact = truth[index]
            entry['rotation_error_degrees'] = misc.degrees(geometry.rotation_angle(step.R @ exact.R.T))
            entry['translation_error'] = (step.t - exact.t).norm().item()
        steps.append(entry)
    return {'schema_version': io.SCHEMA_VERSION, 'steps': steps,
            'cumulative': [io.transform_to_json(transform) for transform in result.cumulative],
            'merged_points': len(result.merged)}


def _register(args, config, outputs):
    clouds = [io.read_ply(_read_bytes(path)) for path in args.clouds]
    rig = None
    if config.icp.correspondence_mode == 'projective':
        if args.calib is None:
            raise errors.MissingRig("Projective association needs --calib.")
        rig = (io.read_calib(_require(args.calib)).rig().camera, geometry.RigidTransform.identity())
    clouds = [_with_normals(cloud, config) for cloud in clouds]
    result = registration.stitch_sequence(clouds, params=config.icp.params(projective_rig=rig),
                                          step_angle=args.step_angle, axis=tuple(args.axis),
                                          centre=None if args.centre is None else tuple(args.centre),
                                          voxel_fraction=config.icp.voxel_fraction)
    merged = registration.PointCloud(result.merged.points, result.merged.normals, None,
                                     (_comment('register', config),))
    path = outputs.file(args.out)
    path.write_bytes(io.write_ply(merged))
    written = [str(path)]
    if args.report is not None:
        report_path = outputs.file(args.report)
        io.save_json(_stitch_report(result), report_path)
        written.append(str(report_path))
    return {'outputs': written, 'clouds': len(clouds), 'merged_points': len(merged),
            'final_errors': [report.error_trace[-1] for report in result.reports]}


def _simulate(args, config, outputs):
    scene_bytes = _read_bytes(args.scene)
    scene_file = io.read_scene(args.scene)
    rig = scene_file.rig or _rig_from_config(config)
    if args.patterns is not None:
        manifest = _require(args.patterns)
        patterns = io.load_stack(manifest / 'manifest.json' if manifest.is_dir() else manifest)
    else:
        patterns = _patterns(config, rig.projector.width, rig.projector.height)
    axis, centre, step_angle = _turntable(scene_file, config)
    views = simulator.turntable_views(rig, scene_file.scene, config.simulation.views, step_angle, axis=axis,
                                      centre=centre, patterns=patterns)
    directory = outputs.directory(config.stage_dir(args.out, 'simulate', inputs=(scene_bytes,)))
    for k, view in enumerate(views):
        view_dir = directory / 'view_{:02d}'.format(k)
        captured = view.captured.with_images(simulator.add_noise(view.captured.images, config.simulation.noise_sigma,
                                                                 seed=config.seed + k))
        io.save_stack(captured, view_dir, prefix='capture')
        (view_dir / 'truth.ply').write_bytes(io.write_ply(view.cloud))
        io.write_corr(view.truth.correspondence, view_dir / 'truth_corr.json')
    io.save_json(io.truth_to_json(views), directory / 'truth.json')
    return {'outputs': [str(directory)], 'views': len(views), 'images_per_view': len(patterns),
            'visible_pixels': [int(view.truth.visible.sum()) for view in views]}


def _reconstruct(args, config, outputs):
    scene_bytes = _read_bytes(args.scene)
    scene_file = io.read_scene(args.scene)
    rig = scene_file.rig or _rig_from_config(config)
    axis, centre, step_angle = _turntable(scene_file, config)
    patterns = _patterns(config, rig.projector.width, rig.projector.height)
    views = simulator.turntable_views(rig, scene_file.scene, config.simulation.views, step_angle, axis=axis,
                                      centre=centre, patterns=patterns)
    stereo = rig.stereo()
    directory = outputs.directory(config.stage_dir(args.out, 'reconstruct', inputs=(scene_bytes,)))

    clouds = []
    triangulated = []
    for k, view in enumerate(views):
        captured = view.captured.with_images(simulator.add_noise(view.captured.images, config.simulation.noise_sigma,
                                                                 seed=config.seed + k))
        corr = codec.decode(captured, min_direct=config.decode.min_direct,
                            min_modulation=config.decode.min_modulation)
        cloud, report = triangulation.triangulate_map(corr, stereo, max_residual=config.triangulation.max_residual)
        if config.simulation.outlier_fraction > 0 and len(cloud) > 0:
            lower = cloud.points.min(dim=0).values
            upper = cloud.points.max(dim=0).values
            cloud = simulator.add_outliers(cloud, config.simulation.outlier_fraction, (lower, upper),
                                           seed=config.seed + k)
        cloud = _with_normals(cloud, config)
        (directory / 'view_{:02d}.ply'.format(k)).write_bytes(io.write_ply(cloud))
        clouds.append(cloud)
        triangulated.append({'valid': corr.valid_count, 'kept': report.kept,
                             'dropped_cheirality': report.dropped_cheirality,
                             'dropped_residual': report.dropped_residual})

    projective_rig = (rig.camera, geometry.RigidTransform.identity())
    params = config.icp.params(projective_rig=projective_rig if config.icp.correspondence_mode == 'projective'
                               else None)
    camera_axis = tuple(rig.camera_pose.rotate(misc.as_float64(axis, 'axis')).tolist())
    camera_centre = tuple(rig.camera_pose.apply(misc.as_float64(centre, 'centre')).tolist())
    result = registration.stitch_sequence(clouds, params=params, step_angle=step_angle, axis=camera_axis,
                                          centre=camera_centre,
                                          voxel_fraction=config.icp.voxel_fraction)
    merged = registration.PointCloud(result.merged.points, result.merged.normals, None,
                                     (_comment('reconstruct', config),))
    (directory / 'merged.ply').write_bytes(io.write_ply(merged))

    report = _stitch_report(result, truth=[view.transform for view in views])
    report['views'] = triangulated
    report['config'] = config.to_json()
    io.save_json(report, directory / 'report.json')
    io.save_json(io.truth_to_json(views), directory / 'truth.json')
    rotation_errors = [step['rotation_error_degrees'] for step in report['steps']]
    return {'outputs': [str(directory / 'merged.ply'), str(directory / 'report.json')], 'views': len(views),
            'merged_points': len(merged),
            'max_rotation_error_degrees': max(rotation_errors) if rotation_errors else 0.}


_RUNNERS = {'gen-patterns': _gen_patterns, 'decode': _decode, 'calibrate': _calibrate, 'triangulate': _triangulate,
            'register': _register, 'simulate': _simulate, 'reconstruct': _reconstruct}


def run_stage(stage, config, args, outputs=None):
    """Runs one pipeline stage.

    Arguments:
        stage: One of `STAGES`.
        config: A validated `PipelineConfig`.
        args: The stage's parsed arguments.
        outputs: An `_Outputs` tracking what the stage writes; a fresh one if None.

    Returns:
        The stage's summary, a JSON-serialisable dict.
    """
    if stage not in _RUNNERS:
        raise ValueError("Unknown stage {!r}; expected one of {}.".format(stage, STAGES))
    outputs = _Outputs() if outputs is None else outputs
    start = time.perf_counter()
    summary = _RUNNERS[stage](args, config, outputs)
    summary = dict(summary, stage=stage, status='ok', config_hash=config.digest(),
                   seconds=round(time.perf_counter() - start, 3))
    return summary


###################
# Conversion and config
###################

def _convert(args):
    source = _require(args.input)
    target = pathlib.Path(args.output)
    if source.suffix.lower() == '.pgm':
        if args.to not in (None, 'p2', 'p5'):
            raise ValueError("PGM images convert to p2 or p5, not {}.".format(args.to))
        image = io.read_pgm(source.read_bytes())
        target.write_bytes(io.write_pgm(image, ascii=args.to == 'p2'))
        return {'outputs': [str(target)], 'format': args.to or 'p5'}
    if source.suffix.lower() == '.json':
        if args.to not in (None, 'inline', 'raw'):
            raise ValueError("Correspondence maps convert to inline or raw, not {}.".format(args.to))
        inline = args.to != 'raw'
        io.write_corr(io.read_corr(source), target, inline=inline)
        return {'outputs': [str(target)], 'format': 'inline' if inline else 'raw'}
    raise ValueError("Cannot convert {}: expected a .pgm image or a .json correspondence map.".format(source))


def _version():
    return json.dumps({'name': 'slscan', 'version': __version__, 'schema_version': io.SCHEMA_VERSION,
                       'torch': torch.__version__}, sort_keys=True)


def _config_flags(parser, names):
    flags = {
        'proj-w': ('resolution.projector_width', int, "projector width in pixels"),
        'proj-h': ('resolution.projector_height', int, "projector height in pixels"),
        'camera-w': ('resolution.camera_width', int, "camera width in pixels"),
        'camera-h': ('resolution.camera_height', int, "camera height in pixels"),
        'mode': ('pattern.mode', str, "pattern family: gray or phase"),
        'fringe-width': ('pattern.fringe_width', float, "sinusoid period in projector pixels"),
        'min-direct': ('decode.min_direct', float, "minimum direct light for a reliable bit"),
        'min-modulation': ('decode.min_modulation', float, "minimum phase modulation"),
        'max-residual': ('triangulation.max_residual', float, "reprojection gate in pixels"),
        'metric': ('icp.error_metric', str, "ICP error metric: point-point or point-plane"),
        'max-iterations': ('icp.max_iterations', int, "ICP iteration cap"),
        'max-pair-distance': ('icp.max_pair_distance', float, "ICP pair rejection distance"),
        'overlap': ('icp.overlap', float, "fraction of each cloud expected to overlap its neighbour"),
        'views': ('simulation.views', int, "number of turntable views"),
        'step-angle': ('simulation.step_angle', float, "turntable step in degrees"),
        'noise': ('simulation.noise_sigma', float, "Gaussian image noise standard deviation"),
        'seed': ('seed', int, "random seed"),
    }
    for name in names:
        dest, kind, text = flags[name]
        parser.add_argument('--' + name, dest='set.' + dest, type=kind, default=None, help=text)


def build_parser():
    parser = argparse.ArgumentParser(prog='slscan', description="Structured-light 3D scanning toolkit.")
    parser.add_argument('--version', action='version', version=_version())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=pathlib.Path, default=None, help="pipeline config JSON")
    common.add_argument('-v', '--verbose', action='count', default=0, help="log INFO (-v) or DEBUG (-vv) to stderr")
    subparsers = parser.add_subparsers(dest='command', required=True)

    sub = subparsers.add_parser('gen-patterns', parents=[common], help="generate a pattern stack")
    _config_flags(sub, ['proj-w', 'proj-h', 'mode', 'fringe-width'])
    sub.add_argument('--out', type=pathlib.Path, required=True, help="output directory")

    sub = subparsers.add_parser('decode', parents=[common], help="decode a captured stack")
    sub.add_argument('--manifest', type=pathlib.Path, required=True, help="stack manifest JSON")
    sub.add_argument('--out', type=pathlib.Path, required=True, help="correspondence map JSON")
    sub.add_argument('--inline', action='store_true', help="store the map inline instead of in a raw file")
    _config_flags(sub, ['min-direct', 'min-modulation'])

    sub = subparsers.add_parser('calibrate', parents=[common], help="calibrate the camera, projector or both")
    sub.add_argument('--views', type=pathlib.Path, required=True, help="directory of view JSON files")
    sub.add_argument('--target', choices=('camera', 'projector', 'stereo'), default='stereo')
    sub.add_argument('--out', type=pathlib.Path, required=True, help="calibration JSON")
    _config_flags(sub, ['proj-w', 'proj-h', 'camera-w', 'camera-h'])

    sub = subparsers.add_parser('triangulate', parents=[common], help="triangulate a correspondence map")
    sub.add_argument('--corr', type=pathlib.Path, required=True, help="correspondence map JSON")
    sub.add_argument('--calib', type=pathlib.Path, required=True, help="stereo calibration JSON")
    sub.add_argument('--out', type=pathlib.Path, required=True, help="output PLY")
    sub.add_argument('--normals', action='store_true', help="estimate normals for the cloud")
    _config_flags(sub, ['max-residual'])

    sub = subparsers.add_parser('register', parents=[common], help="stitch a sequence of clouds")
    sub.add_argument('--clouds', type=pathlib.Path, nargs='+', required=True, help="PLY files, in turntable order")
    sub.add_argument('--mode', choices=tuple(_MODES), default=None, help="correspondence search")
    sub.add_argument('--calib', type=pathlib.Path, default=None, help="calibration JSON, for projective mode")
    sub.add_argument('--out', type=pathlib.Path, required=True, help="merged PLY")
    sub.add_argument('--report', type=pathlib.Path, default=None, help="report JSON")
    sub.add_argument('--step-angle', type=float, default=None, help="nominal turntable step in degrees")
    sub.add_argument('--axis', type=float, nargs=3, default=(0., 1., 0.), help="turntable axis in the cloud frame")
    sub.add_argument('--centre', type=float, nargs=3, default=None,
                     help="a point on the turntable axis in the cloud frame; each target's centroid if omitted")
    _config_flags(sub, ['metric', 'max-iterations', 'max-pair-distance', 'overlap'])

    for name, text in (('simulate', "render a scene on a turntable"),
                       ('reconstruct', "simulate, decode, triangulate and register a turntable scan")):
        sub = subparsers.add_parser(name, parents=[common], help=text)
        sub.add_argument('--scene', type=pathlib.Path, required=True, help="scene JSON")
        sub.add_argument('--out', type=pathlib.Path, required=True, help="output directory")
        if name == 'simulate':
            sub.add_argument('--patterns', type=pathlib.Path, default=None, help="pattern manifest or directory")
        else:
            sub.add_argument('--mode', choices=tuple(_MODES), default=None, help="correspondence search")
        _config_flags(sub, ['mode' if name == 'simulate' else 'metric', 'views', 'step-angle', 'noise', 'seed'])

    sub = subparsers.add_parser('convert', parents=[common], help="convert between P2/P5 or inline/raw maps")
    sub.add_argument('input', type=pathlib.Path)
    sub.add_argument('output', type=pathlib.Path)
    sub.add_argument('--to', choices=('p2', 'p5', 'inline', 'raw'), default=None)

    sub = subparsers.add_parser('config', parents=[common], help="validate or print the pipeline config")
    sub.add_argument('--dump', action='store_true', help="print every setting, defaults included")
    return parser


def _overrides(args):
    changes = {key[len('set.'):]: value for key, value in vars(args).items() if key.startswith('set.')}
    mode = getattr(args, 'mode', None)
    if args.command in ('register', 'reconstruct') and mode is not None:
        changes['icp.correspondence_mode'] = _MODES[mode]
    return changes


def _emit(summary):
    sys.stdout.write(json.dumps(summary, sort_keys=True) + '\n')
    sys.stdout.flush()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s')
    logging.captureWarnings(True)

    stage = args.command
    outputs = _Outputs()
    try:
        torch.set_num_threads(misc.worker_count())
        config = config_.load_config(args.config).override(_overrides(args))
        if stage == 'config':
            _emit(config.to_json() if args.dump else {'stage': 'config', 'status': 'ok',
                                                      'config_hash': config.digest()})
            return 0
        if stage == 'convert':
            summary = dict(_convert(args), stage='convert', status='ok')
        else:
            summary = run_stage(stage, config, args, outputs)
    except (errors.SlscanError, OSError, ValueError, RuntimeError) as e:
        outputs.remove()
        code = getattr(e, 'code', 'missing-input' if isinstance(e, FileNotFoundError) else 'invalid-input'
                       if isinstance(e, ValueError) else 'failed')
        logger.error("%s failed (%s): %s", stage, code, e)
        _emit({'stage': stage, 'status': 'error', 'code': code, 'message': str(e)})
        return 1
    _emit(summary)
    return 0
