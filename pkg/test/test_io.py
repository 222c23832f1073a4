from io import BytesIO
import json
import logging
import math
import numpy as np
import plyfile
import pytest
import torch
import slscan
from slscan import calibration, codec, errors, geometry, io, simulator


def test_pgm_binary():
    gen = torch.Generator().manual_seed(0)
    image = torch.randint(0, 256, (5, 7), generator=gen, dtype=torch.int64).to(torch.uint8)
    data = io.write_pgm(image)
    assert data.startswith(b'P5\n7 5\n255\n')
    assert len(data) == len(b'P5\n7 5\n255\n') + 35
    assert io.read_pgm(data).equal(image)


def test_pgm_ascii():
    image = torch.tensor([[0, 1, 2], [3, 4, 255]], dtype=torch.uint8)
    assert io.read_pgm(io.write_pgm(image, ascii=True)).equal(image)
    commented = b'P2\n# made by hand\n3 2\n# maxval next\n255\n0 1 2\n3 4 255\n'
    assert io.read_pgm(commented).equal(image)
    # Values below 255 are returned as stored.
    assert io.read_pgm(b'P2 2 1 15\n3 15\n').tolist() == [[3, 15]]


def test_pgm_errors():
    with pytest.raises(errors.MalformedHeader):
        io.read_pgm(b'P6\n1 1\n255\n\x00\x00\x00')
    with pytest.raises(errors.MalformedHeader):
        io.read_pgm(b'P5\n4 4\n')
    with pytest.raises(errors.MalformedHeader):
        io.read_pgm(b'P5\n4 x\n255\n')
    with pytest.raises(errors.UnsupportedMaxval):
        io.read_pgm(b'P5\n1 1\n65535\n\x00\x00')
    with pytest.raises(errors.UnsupportedMaxval):
        io.read_pgm(b'P2\n1 1\n0\n0\n')
    with pytest.raises(errors.TruncatedBody):
        io.read_pgm(b'P5\n4 4\n255\n' + bytes(15))
    with pytest.raises(errors.TruncatedBody):
        io.read_pgm(b'P2\n2 2\n255\n1 2 3\n')
    with pytest.raises(ValueError):
        io.read_pgm(b'P2\n2 1\n100\n1 200\n')


def _cloud():
    gen = torch.Generator().manual_seed(1)
    return slscan.PointCloud(torch.randn(6, 3, generator=gen, dtype=torch.float64) * 100,
                             normals=torch.randn(6, 3, generator=gen, dtype=torch.float64),
                             provenance=torch.randint(0, 50, (6, 2), generator=gen),
                             comments=('view 3', 'units mm'))


def test_ply_round_trip():
    cloud = _cloud()
    data = io.write_ply(cloud)
    text = data.decode('ascii')
    assert text.startswith('ply\nformat ascii 1.0\ncomment view 3\ncomment units mm\nelement vertex 6\n')
    assert 'property double nx\n' in text
    assert 'property int row\nproperty int col\nend_header\n' in text
    loaded = io.read_ply(data)
    assert loaded.points.equal(cloud.points)
    assert loaded.normals.equal(cloud.normals)
    assert loaded.provenance.equal(cloud.provenance)
    assert loaded.comments == cloud.comments

    bare = io.read_ply(io.write_ply(slscan.PointCloud(cloud.points)))
    assert bare.normals is None
    assert bare.provenance is None
    assert len(io.read_ply(io.write_ply(slscan.PointCloud(torch.zeros(0, 3))))) == 0


def test_ply_interop():
    cloud = _cloud()
    # Another PLY reader sees the same vertices.
    ply = plyfile.PlyData.read(BytesIO(io.write_ply(cloud)))
    assert ply.text
    assert torch.from_numpy(ply['vertex']['z'].copy()).equal(cloud.points[:, 2])

    vertices = np.array([(1., 2., 3.), (4., 5., 6.)], dtype=[('x', 'f4'), ('y', 'f4'), ('z', 'f4')])
    stream = BytesIO()
    plyfile.PlyData([plyfile.PlyElement.describe(vertices, 'vertex')], byte_order='<').write(stream)
    assert io.read_ply(stream.getvalue()).points.tolist() == [[1., 2., 3.], [4., 5., 6.]]


def test_ply_skips_unknown(caplog):
    data = (b'ply\nformat ascii 1.0\nobj_info scanner\nelement vertex 2\nproperty float x\nproperty float y\n'
            b'property float z\nproperty uchar intensity\nelement face 1\nproperty list uchar int vertex_indices\n'
            b'end_header\n1 2 3 200\n4 5 6 100\n3 0 1 0\n')
    with caplog.at_level(logging.WARNING, logger='slscan.io'):
        cloud = io.read_ply(data)
    assert cloud.points.tolist() == [[1., 2., 3.], [4., 5., 6.]]
    assert 'intensity' in caplog.text
    assert 'face' in caplog.text


def test_ply_errors():
    header = b'ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n'
    with pytest.raises(errors.MalformedHeader):
        io.read_ply(b'plx\n')
    with pytest.raises(errors.CountMismatch):
        io.read_ply(header.replace(b'ascii', b'binary_little_endian') + b'end_header\n')
    with pytest.raises(errors.MalformedHeader):
        io.read_ply(header + b'1 2 3\n')
    with pytest.raises(errors.MalformedHeader):
        io.read_ply(header + b'property list uchar int neighbours\nend_header\n1 2 3 0\n')
    with pytest.raises(errors.MalformedHeader):
        io.read_ply(header.replace(b'property float z\n', b'') + b'end_header\n1 2\n')
    with pytest.raises(errors.MalformedHeader):
        io.read_ply(header + b'texture none\nend_header\n1 2 3\n')
    with pytest.raises(errors.CountMismatch):
        io.read_ply(header + b'end_header\n1 2 3\n4 5 6\n')
    with pytest.raises(errors.CountMismatch):
        io.read_ply(header + b'end_header\n1 2\n')


def test_json_helpers(tmp_path):
    text = io.dumps({'b': 1, 'a': [1, 2]})
    assert text.endswith('\n')
    assert text.index('"a"') < text.index('"b"')
    path = tmp_path / 'doc.json'
    io.save_json({'x': 1.5}, path)
    assert io.load_json(path) == {'x': 1.5}
    path.write_text('{"x": ')
    with pytest.raises(errors.SchemaViolation):
        io.load_json(path)
    with pytest.raises(FileNotFoundError):
        io.load_json(tmp_path / 'missing.json')


def test_camera_json():
    model = geometry.CameraModel(fx=800., fy=790., cx=320., cy=240., width=640, height=480,
                                 dist=geometry.DistortionCoeffs(k1=-0.1, p2=0.001))
    document = json.loads(io.dumps(io.camera_to_json(model)))
    loaded = io.camera_from_json(document)
    assert loaded.K.equal(model.K)
    assert loaded.dist.as_list() == model.dist.as_list()
    del document['dist']
    assert io.camera_from_json(document).dist.is_zero

    with pytest.raises(errors.SchemaViolation) as info:
        io.camera_from_json(dict(document, dist=[0., 0.]))
    assert info.value.path == 'camera.dist'
    with pytest.raises(errors.SchemaViolation) as info:
        io.camera_from_json(dict(document, width=True))
    assert info.value.path == 'camera.width'
    with pytest.raises(errors.SchemaViolation) as info:
        io.camera_from_json(dict(document, fx=-1.))
    assert info.value.path == 'camera'
    with pytest.raises(errors.SchemaViolation) as info:
        io.transform_from_json({'R': [[2., 0., 0.], [0., 1., 0.], [0., 0., 1.]], 't': [0., 0., 0.]})
    assert info.value.path == 'transform'
    with pytest.raises(errors.SchemaViolation) as info:
        io.transform_from_json({'R': [[1., 0., 0.]], 't': [0., 0., 0.]})
    assert info.value.path == 'transform.R'


def _calibration_file():
    rig = simulator.make_rig(camera_size=(64, 48), projector_size=(80, 60))
    stereo = rig.stereo()
    pose = geometry.RigidTransform.from_rotvec(torch.tensor([0.1, -0.2, 0.3], dtype=torch.float64),
                                               torch.tensor([1., 2., 500.], dtype=torch.float64))
    return io.CalibrationFile(camera=stereo.camera, projector=stereo.projector, transform=stereo.transform,
                              camera_poses=[pose], projector_poses=[slscan.compose(stereo.transform, pose)],
                              rms={'camera': 0.12, 'projector': 1.5}, spread=0.3, extra={'operator': 'bench 2'})


def test_calibration_file(tmp_path):
    calib = _calibration_file()
    document = io.calib_to_json(calib)
    assert document['schema_version'] == io.SCHEMA_VERSION
    assert document['ok'] == {'camera': True, 'projector': False}
    assert document['spread_degrees'] == 0.3
    assert document['operator'] == 'bench 2'

    path = tmp_path / 'calib.json'
    io.write_calib(calib, path)
    loaded = io.read_calib(path)
    assert loaded.camera.K.allclose(calib.camera.K)
    assert loaded.projector.width == 80
    assert loaded.transform.allclose(calib.transform, atol=1e-12)
    assert loaded.projector_poses[0].allclose(calib.projector_poses[0], atol=1e-12)
    assert loaded.rms == calib.rms
    assert loaded.spread == 0.3
    assert loaded.extra == {'operator': 'bench 2'}
    assert loaded.rig().baseline == pytest.approx(150.)
    with pytest.raises(errors.MissingRig):
        io.CalibrationFile(camera=calib.camera).rig()


def test_schema_version():
    with pytest.raises(errors.SchemaViolation) as info:
        io.calib_from_json({'schema_version': 2})
    assert info.value.path == 'calib.schema_version'
    with pytest.raises(errors.SchemaViolation) as info:
        io.calib_from_json({})
    assert info.value.path == 'calib.schema_version'
    with pytest.raises(errors.SchemaViolation):
        io.manifest_from_json([])


def _corr():
    nan = math.nan
    proj_x = torch.tensor([[1.5, nan, 10.25], [0.5, 63.75, nan]], dtype=torch.float64)
    proj_y = torch.tensor([[2.5, nan, 0.], [47.5, 12.125, nan]], dtype=torch.float64)
    valid = torch.isfinite(proj_x)
    reason = torch.tensor([[0, 1, 0], [0, 0, 3]], dtype=torch.uint8)
    fringe_order = torch.tensor([[0, -1, 0], [0, 3, -1]], dtype=torch.int64)
    return codec.CorrespondenceMap(proj_x=proj_x, proj_y=proj_y, valid=valid, reason=reason, projector_width=64,
                                   projector_height=48, fringe_order=fringe_order)


def _assert_same_corr(loaded, corr):
    assert loaded.valid.equal(corr.valid)
    assert loaded.reason.equal(corr.reason)
    assert loaded.axes == corr.axes
    for name in ('proj_x', 'proj_y'):
        values, expected = getattr(loaded, name), getattr(corr, name)
        assert values[corr.valid].equal(expected[corr.valid])
        assert torch.isnan(values[~corr.valid]).all()


def test_corr_raw(tmp_path):
    corr = _corr()
    path = tmp_path / 'corr.json'
    io.write_corr(corr, path, extra={'source': 'bench'})
    document = io.load_json(path)
    assert document['data'] == 'corr.raw'
    assert document['layout'] == ['proj_x:float32le', 'proj_y:float32le', 'reason:uint8', 'fringe_order:int32le']
    assert document['source'] == 'bench'
    raw = tmp_path / 'corr.raw'
    assert raw.stat().st_size == 6 * 4 * 2 + 6 + 6 * 4
    loaded = io.read_corr(path).corr
    _assert_same_corr(loaded, corr)
    assert loaded.fringe_order.equal(corr.fringe_order)

    data = raw.read_bytes()
    raw.write_bytes(data[:-5])
    with pytest.raises(errors.TruncatedBody):
        io.read_corr(path)
    raw.write_bytes(data + b'\x00')
    with pytest.raises(errors.SchemaViolation):
        io.read_corr(path)


def test_corr_inline(tmp_path):
    corr = _corr()
    path = tmp_path / 'corr.json'
    io.write_corr(corr, path, inline=True)
    document = io.load_json(path)
    assert document['proj_x'][0] == [1.5, None, 10.25]
    assert 'data' not in document
    assert not (tmp_path / 'corr.raw').exists()
    _assert_same_corr(io.read_corr(path).corr, corr)

    columns = codec.CorrespondenceMap(proj_x=corr.proj_x, proj_y=None, valid=corr.valid, reason=corr.reason,
                                      projector_width=64, projector_height=48)
    io.write_corr(columns, path, inline=True)
    loaded = io.read_corr(path).corr
    assert loaded.axes == ('x',)
    assert loaded.fringe_order is None

    document = io.load_json(path)
    with pytest.raises(errors.SchemaViolation) as info:
        io.corr_from_json(dict(document, axes=['x', 'y']))
    assert info.value.path == 'corr'
    broken = dict(document)
    broken['proj_x'] = [[None, None, 10.25], [0.5, 63.75, None]]
    with pytest.raises(errors.SchemaViolation) as info:
        io.corr_from_json(broken)
    assert info.value.path == 'corr.proj_x'
    with pytest.raises(errors.SchemaViolation):
        io.corr_from_json(dict(document, reason=[[0, 0]]))


def test_corr_extra_round_trip(tmp_path):
    corr = _corr()
    io.write_corr(corr, tmp_path / 'corr.json', extra={'rig': {'serial': 'A7'}, 'note': 'bench'})
    loaded = io.read_corr(tmp_path / 'corr.json')
    assert loaded.extra == {'rig': {'serial': 'A7'}, 'note': 'bench'}
    io.write_corr(loaded, tmp_path / 'copy.json', inline=True)
    document = io.load_json(tmp_path / 'copy.json')
    assert document['rig'] == {'serial': 'A7'}
    assert document['note'] == 'bench'
    copy = io.read_corr(tmp_path / 'copy.json')
    assert copy.extra == loaded.extra
    _assert_same_corr(copy.corr, corr)


def test_stack_round_trip(tmp_path):
    stack = slscan.generate_patterns(16, 8, mode='phase')
    path = io.save_stack(stack, tmp_path / 'patterns')
    assert path.name == 'manifest.json'
    assert (tmp_path / 'patterns' / 'pattern_00.pgm').exists()
    document = io.load_json(path)
    phase = [entry for entry in document['images'] if entry['kind'] == 'phase-x']
    assert [entry['shift'] for entry in phase] == list(codec.SHIFTS)
    loaded = io.load_stack(path)
    assert loaded.images.equal(stack.images)
    assert loaded.kinds == stack.kinds
    assert loaded.indices == stack.indices
    assert loaded.fringe_width == stack.fringe_width
    assert (loaded.projector_width, loaded.projector_height) == (16, 8)

    document['projector'] = 'bench'
    io.save_json(document, path)
    manifest = io.read_manifest(path)
    assert manifest.extra == {'projector': 'bench'}
    io.write_manifest(manifest, tmp_path / 'copy.json')
    assert io.load_json(tmp_path / 'copy.json') == document


def test_stack_errors(tmp_path):
    stack = slscan.generate_patterns(16, 8)
    path = io.save_stack(stack, tmp_path)
    (tmp_path / 'pattern_01.pgm').write_bytes(io.write_pgm(torch.zeros(4, 4, dtype=torch.uint8)))
    with pytest.raises(errors.StackMismatch):
        io.load_stack(path)
    (tmp_path / 'pattern_01.pgm').unlink()
    with pytest.raises(FileNotFoundError):
        io.load_stack(path)

    document = io.load_json(path)
    document['images'][0]['kind'] = 'checkerboard'
    with pytest.raises(errors.SchemaViolation) as info:
        io.manifest_from_json(document)
    assert info.value.path == 'manifest.images[0].kind'


def test_view_round_trip(tmp_path):
    board = calibration.checkerboard_points(3, 2, 10.)
    projector = board * 2
    projector[4] = math.nan
    view = calibration.CalibrationView(board, board + 100, projector_points=projector, name='left')
    io.write_corr(_corr(), tmp_path / 'corr.json')
    io.save_json(io.view_to_json(view, correspondence_file='corr.json'), tmp_path / 'view.json')
    loaded = io.read_view(tmp_path / 'view.json')
    assert loaded.name == 'left'
    assert loaded.board_points.equal(view.board_points)
    assert loaded.image_points.equal(view.image_points)
    assert torch.isnan(loaded.projector_points[4]).all()
    assert loaded.correspondence.valid_count == 4
    with pytest.raises(errors.SchemaViolation):
        io.view_from_json({'schema_version': 1, 'board': [[0., 0.]], 'image': [[0., 0.]]})


def test_scene_from_json():
    document = {
        'schema_version': 1,
        'surfaces': [{'type': 'plane', 'point': [0, 0, 600], 'normal': [0, 0, -1], 'albedo': 0.5},
                     {'type': 'sphere', 'center': [0, 0, 450], 'radius': 30},
                     {'type': 'quad', 'center': [50, 0, 550], 'normal': [0, 0, -1], 'size': 40},
                     {'type': 'cup', 'center': [0, 0, 500], 'radius': 35},
                     {'type': 'mesh', 'vertices': [[0, 0, 700], [10, 0, 700], [0, 10, 700]],
                      'triangles': [[0, 1, 2]]}],
        'background': 2,
        'rig': {'make': {'camera_size': [32, 24], 'baseline': 100}},
        'turntable': {'steps': 4, 'step_angle': 15},
        'lab': 'west',
    }
    loaded = io.scene_from_json(document)
    assert len(loaded.scene.surfaces) == 5
    assert loaded.scene.surfaces[0].albedo == 0.5
    assert loaded.scene.background == 2.
    assert loaded.rig.camera.width == 32
    assert loaded.rig.baseline == pytest.approx(100.)
    assert loaded.turntable == {'steps': 4, 'step_angle': 15}
    assert loaded.extra == {'lab': 'west'}

    del document['rig']
    assert io.scene_from_json(document).rig is None
    rig = simulator.make_rig(camera_size=(32, 24), projector_size=(32, 24))
    document['rig'] = {'camera': io.camera_to_json(rig.camera), 'camera_pose': io.transform_to_json(rig.camera_pose),
                       'projector': io.camera_to_json(rig.projector),
                       'projector_pose': io.transform_to_json(rig.projector_pose)}
    assert io.scene_from_json(document).rig.projector_pose.allclose(rig.projector_pose, atol=1e-12)

    with pytest.raises(errors.SchemaViolation) as info:
        io.scene_from_json(dict(document, surfaces=[{'type': 'torus'}]))
    assert info.value.path == 'scene.surfaces[0].type'
    with pytest.raises(errors.SchemaViolation) as info:
        io.scene_from_json(dict(document, surfaces=[{'type': 'sphere', 'center': [0, 0, 1], 'radius': -1}]))
    assert info.value.path == 'scene.surfaces[0]'
    with pytest.raises(errors.SchemaViolation) as info:
        io.scene_from_json(dict(document, rig={'make': {'focal': 3}}))
    assert info.value.path == 'scene.rig.make'
    with pytest.raises(errors.SchemaViolation):
        io.scene_from_json(dict(document, surfaces=[]))


def test_truth_to_json():
    rig = simulator.make_rig(camera_size=(16, 12), projector_size=(16, 12))
    scene = simulator.Scene([simulator.Sphere((0., 0., 500.), 40.)])
    views = simulator.turntable_views(rig, scene, steps=2, step_angle=30., centre=(0., 0., 500.))
    document = json.loads(io.dumps(io.truth_to_json(views)))
    assert len(document['steps']) == 2
    assert io.transform_from_json(document['steps'][0]).allclose(views[0].transform, atol=1e-12)
