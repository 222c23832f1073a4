import json
import math
import pathlib
import pytest
import torch
import slscan
from slscan import calibration, cli, geometry, io, simulator


def _run(capsys, *argv):
    status = cli.main([str(arg) for arg in argv])
    lines = capsys.readouterr().out.strip().splitlines()
    return status, json.loads(lines[-1])


def _small_rig():
    return simulator.make_rig(camera_size=(32, 24), projector_size=(32, 24))


def _scene_file(tmp_path, surfaces, size=(32, 24)):
    path = tmp_path / 'scene.json'
    io.save_json({'schema_version': 1, 'surfaces': surfaces,
                  'rig': {'make': {'camera_size': list(size), 'projector_size': list(size)}},
                  'turntable': {'centre': [0., 0., 500.]}}, path)
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(['--version'])
    assert info.value.code == 0
    version = json.loads(capsys.readouterr().out)
    assert version['name'] == 'slscan'
    assert version['version'] == slscan.__version__


def test_config(capsys, tmp_path):
    status, dumped = _run(capsys, 'config', '--dump')
    assert status == 0
    assert slscan.PipelineConfig.from_json(dumped) == slscan.PipelineConfig()

    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'seed': 3}))
    status, dumped = _run(capsys, 'config', '--dump', '--config', path)
    assert dumped['seed'] == 3
    status, summary = _run(capsys, 'config', '--config', path)
    assert summary['config_hash'] == slscan.PipelineConfig(seed=3).digest()

    path.write_text(json.dumps({'icp': {'max_iterations': 0}}))
    status, summary = _run(capsys, 'config', '--config', path)
    assert status == 1
    assert summary['code'] == 'schema-violation'
    status, summary = _run(capsys, 'config', '--config', tmp_path / 'missing.json')
    assert status == 1
    assert summary['code'] == 'missing-input'


def test_gen_patterns(capsys, tmp_path):
    status, summary = _run(capsys, 'gen-patterns', '--out', tmp_path, '--proj-w', 32, '--proj-h', 16)
    assert status == 0
    assert summary['stage'] == 'gen-patterns'
    assert summary['status'] == 'ok'
    assert summary['images'] == 2 * 5 + 2 * 4 + 2
    manifest = pathlib.Path(summary['outputs'][0])
    assert manifest.parent.name == 'gen-patterns-' + summary['config_hash']
    stack = io.load_stack(manifest)
    assert stack.images.equal(slscan.generate_patterns(32, 16).images)

    status, again = _run(capsys, 'gen-patterns', '--out', tmp_path, '--proj-w', 32, '--proj-h', 16)
    assert again['outputs'] == summary['outputs']
    status, phase = _run(capsys, 'gen-patterns', '--out', tmp_path, '--proj-w', 32, '--proj-h', 16, '--mode', 'phase')
    assert phase['images'] == summary['images'] + 6
    assert phase['outputs'] != summary['outputs']


def _captured(tmp_path):
    rig = _small_rig()
    scene = simulator.Scene([simulator.Plane((0., 0., 500.), (0.1, 0., -1.))])
    captured = simulator.render_stack(rig, scene, slscan.generate_patterns(32, 24))
    return rig, io.save_stack(captured, tmp_path / 'capture', prefix='capture')


def test_decode_and_triangulate(capsys, tmp_path):
    rig, manifest = _captured(tmp_path)
    status, summary = _run(capsys, 'decode', '--manifest', manifest, '--out', tmp_path / 'corr.json')
    assert status == 0
    assert summary['axes'] == ['x', 'y']
    assert summary['valid'] > 0
    assert summary['reasons']['valid'] == summary['valid']
    assert (tmp_path / 'corr.raw').exists()
    corr = io.read_corr(tmp_path / 'corr.json').corr
    assert corr.valid_count == summary['valid']

    status, inline = _run(capsys, 'decode', '--manifest', manifest, '--out', tmp_path / 'inline.json', '--inline')
    assert inline['valid'] == summary['valid']
    assert not (tmp_path / 'inline.raw').exists()

    stereo = rig.stereo()
    io.write_calib(io.CalibrationFile(camera=stereo.camera, projector=stereo.projector, transform=stereo.transform),
                   tmp_path / 'calib.json')
    status, summary = _run(capsys, 'triangulate', '--corr', tmp_path / 'corr.json', '--calib',
                           tmp_path / 'calib.json', '--out', tmp_path / 'cloud.ply', '--normals')
    assert status == 0
    assert summary['mode'] == 'points'
    assert summary['kept'] > 0
    cloud = io.read_ply((tmp_path / 'cloud.ply').read_bytes())
    assert len(cloud) == summary['kept']
    assert cloud.normals is not None
    assert cloud.comments[0].startswith('slscan')


def test_missing_input(capsys, tmp_path):
    status, summary = _run(capsys, 'decode', '--manifest', tmp_path / 'none.json', '--out', tmp_path / 'corr.json')
    assert status == 1
    assert summary == {'stage': 'decode', 'status': 'error', 'code': 'missing-input',
                       'message': summary['message']}
    assert not (tmp_path / 'corr.json').exists()

    calib = tmp_path / 'calib.json'
    io.write_calib(io.CalibrationFile(camera=_small_rig().camera), calib)
    _, manifest = _captured(tmp_path)
    _run(capsys, 'decode', '--manifest', manifest, '--out', tmp_path / 'corr.json')
    status, summary = _run(capsys, 'triangulate', '--corr', tmp_path / 'corr.json', '--calib', calib, '--out',
                           tmp_path / 'out' / 'cloud.ply')
    assert status == 1
    assert summary['code'] == 'missing-rig'
    assert not (tmp_path / 'out').exists()


def _board_poses(count):
    poses = []
    for k in range(count):
        angle = 2 * math.pi * k / count
        rotvec = torch.tensor([math.cos(angle), math.sin(angle), 0.1], dtype=torch.float64) * math.radians(25.)
        R = geometry.rotation_from_rotvec(rotvec)
        t = torch.tensor([0., 0., 500.], dtype=torch.float64) - R @ torch.tensor([87.5, 62.5, 0.],
                                                                                 dtype=torch.float64)
        poses.append(geometry.RigidTransform(R, t))
    return poses


def test_calibrate_camera(capsys, tmp_path):
    rig = simulator.make_rig(camera_size=(320, 240), projector_size=(320, 240))
    board = calibration.checkerboard_points(8, 6, 25.)
    board3 = torch.cat([board, torch.zeros(len(board), 1, dtype=torch.float64)], dim=-1)
    views = tmp_path / 'views'
    views.mkdir()
    for k, pose in enumerate(_board_poses(5)):
        image, _ = slscan.project(rig.camera, pose, board3)
        view = calibration.CalibrationView(board, image, name='view {}'.format(k))
        io.save_json(io.view_to_json(view), views / 'view_{}.json'.format(k))
    status, summary = _run(capsys, 'calibrate', '--views', views, '--target', 'camera', '--out',
                           tmp_path / 'calib.json', '--camera-w', 320, '--camera-h', 240)
    assert status == 0
    assert summary['views'] == 5
    assert summary['ok']
    calib = io.read_calib(tmp_path / 'calib.json')
    assert calib.camera.fx == pytest.approx(rig.camera.fx, rel=1e-3)
    assert len(calib.camera_poses) == 5


def _turntable_clouds(tmp_path):
    rig = simulator.make_rig(camera_size=(64, 48), projector_size=(64, 48))
    views = simulator.turntable_views(rig, simulator.Scene([simulator.make_cup()]), steps=2, step_angle=10.,
                                      centre=(0., 0., 500.))
    paths = []
    for k, view in enumerate(views):
        path = tmp_path / 'view_{}.ply'.format(k)
        path.write_bytes(io.write_ply(view.cloud))
        paths.append(path)
    return paths


def test_register(capsys, tmp_path):
    paths = _turntable_clouds(tmp_path)
    status, summary = _run(capsys, 'register', '--clouds', *paths, '--out', tmp_path / 'merged.ply', '--report',
                           tmp_path / 'report.json', '--step-angle', 10, '--centre', 0, 0, 500, '--overlap', 0.8)
    assert status == 0
    assert summary['clouds'] == 2
    assert len(summary['final_errors']) == 1
    report = io.load_json(tmp_path / 'report.json')
    assert len(report['steps']) == 1
    assert len(report['cumulative']) == 2
    merged = io.read_ply((tmp_path / 'merged.ply').read_bytes())
    assert len(merged) == summary['merged_points']

    status, summary = _run(capsys, 'register', '--clouds', *paths, '--out', tmp_path / 'normal.ply', '--mode',
                           'normal', '--step-angle', 10)
    assert status == 0
    status, summary = _run(capsys, 'register', '--clouds', *paths, '--out', tmp_path / 'projective.ply', '--mode',
                           'projective')
    assert status == 1
    assert summary['code'] == 'missing-rig'


def test_register_failure_cleans_up(capsys, tmp_path):
    paths = _turntable_clouds(tmp_path)
    empty = tmp_path / 'empty.ply'
    empty.write_bytes(io.write_ply(slscan.PointCloud(torch.zeros(0, 3))))
    status, summary = _run(capsys, 'register', '--clouds', paths[0], empty, '--out', tmp_path / 'deep' / 'merged.ply')
    assert status == 1
    assert summary['code'] == 'step-failed'
    assert not (tmp_path / 'deep').exists()


def test_simulate(capsys, tmp_path):
    scene = _scene_file(tmp_path, [{'type': 'sphere', 'center': [0, 0, 500], 'radius': 60}])
    argv = ('simulate', '--scene', scene, '--out', tmp_path / 'out', '--views', 2, '--step-angle', 10, '--noise', 1)
    status, summary = _run(capsys, *argv)
    assert status == 0
    assert summary['views'] == 2
    directory = pathlib.Path(summary['outputs'][0])
    assert directory.name.startswith('simulate-')
    for k in range(2):
        view = directory / 'view_{:02d}'.format(k)
        stack = io.load_stack(view / 'manifest.json')
        assert len(stack) == summary['images_per_view']
        assert stack.images.shape[1:] == (24, 32)
        assert (view / 'truth.ply').exists()
        assert io.read_corr(view / 'truth_corr.json').corr.valid_count == summary['visible_pixels'][k]
    assert len(io.load_json(directory / 'truth.json')['steps']) == 2

    first = io.load_stack(directory / 'view_00' / 'manifest.json').images
    status, again = _run(capsys, *argv)
    assert again['outputs'] == summary['outputs']
    assert io.load_stack(directory / 'view_00' / 'manifest.json').images.equal(first)

    status, summary = _run(capsys, 'simulate', '--scene', tmp_path / 'nothing.json', '--out', tmp_path / 'out')
    assert summary['code'] == 'missing-input'


def test_reconstruct(capsys, tmp_path):
    scene = _scene_file(tmp_path, [{'type': 'cup', 'center': [0, 0, 500]}], size=(64, 48))
    status, summary = _run(capsys, 'reconstruct', '--scene', scene, '--out', tmp_path, '--views', 2,
                           '--step-angle', 10)
    assert status == 0
    assert summary['views'] == 2
    merged, report_path = (pathlib.Path(path) for path in summary['outputs'])
    assert merged.name == 'merged.ply'
    directory = merged.parent
    assert directory.name == 'reconstruct-' + slscan.PipelineConfig.from_json(
        {'simulation': {'views': 2, 'step_angle': 10}}).digest([scene.read_bytes()])
    for k in range(2):
        assert (directory / 'view_{:02d}.ply'.format(k)).exists()
    report = io.load_json(report_path)
    assert len(report['steps']) == 1
    assert 'rotation_error_degrees' in report['steps'][0]
    assert len(report['views']) == 2
    assert report['config']['simulation']['views'] == 2
    assert (directory / 'truth.json').exists()
    assert len(io.read_ply(merged.read_bytes())) == summary['merged_points']

    first = merged.read_bytes(), report_path.read_bytes()
    status, again = _run(capsys, 'reconstruct', '--scene', scene, '--out', tmp_path, '--views', 2, '--step-angle', 10)
    assert again['outputs'] == summary['outputs']
    assert (merged.read_bytes(), report_path.read_bytes()) == first


def test_convert(capsys, tmp_path):
    image = torch.arange(12, dtype=torch.uint8).reshape(3, 4)
    (tmp_path / 'a.pgm').write_bytes(io.write_pgm(image))
    status, summary = _run(capsys, 'convert', tmp_path / 'a.pgm', tmp_path / 'b.pgm', '--to', 'p2')
    assert status == 0
    assert summary['format'] == 'p2'
    assert (tmp_path / 'b.pgm').read_bytes().startswith(b'P2')
    assert io.read_pgm((tmp_path / 'b.pgm').read_bytes()).equal(image)

    corr = simulator.ground_truth(_small_rig(), simulator.Scene([simulator.Plane((0., 0., 500.),
                                                                                 (0., 0., -1.))])).correspondence
    io.write_corr(corr, tmp_path / 'raw.json', extra={'note': 'kept'})
    status, summary = _run(capsys, 'convert', tmp_path / 'raw.json', tmp_path / 'inline.json', '--to', 'inline')
    assert summary['format'] == 'inline'
    document = io.load_json(tmp_path / 'inline.json')
    assert 'proj_x' in document
    assert document['note'] == 'kept'
    status, summary = _run(capsys, 'convert', tmp_path / 'inline.json', tmp_path / 'back.json', '--to', 'raw')
    assert (tmp_path / 'back.raw').exists()
    assert io.read_corr(tmp_path / 'back.json').corr.valid.equal(corr.valid)

    (tmp_path / 'notes.txt').write_text('nothing')
    status, summary = _run(capsys, 'convert', tmp_path / 'notes.txt', tmp_path / 'out.txt')
    assert status == 1
    assert summary['code'] == 'invalid-input'
    status, summary = _run(capsys, 'convert', tmp_path / 'a.pgm', tmp_path / 'c.pgm', '--to', 'raw')
    assert status == 1
