import math
import pytest
import torch
import warnings
import slscan
from slscan import calibration, codec, errors, geometry, simulator


def _board_poses(count, distance=500., tilt=25.):
    # Every board is tilted in a different direction; parallel boards leave the focal lengths undetermined.
    poses = []
    centre = torch.tensor([87.5, 62.5, 0.], dtype=torch.float64)
    for k in range(count):
        angle = 2 * math.pi * k / count
        rotvec = torch.tensor([math.cos(angle), math.sin(angle), 0.1], dtype=torch.float64) * math.radians(tilt)
        R = geometry.rotation_from_rotvec(rotvec)
        t = torch.tensor([0., 0., distance], dtype=torch.float64) - R @ centre
        poses.append(geometry.RigidTransform(R, t))
    return poses


def _views(model, poses, noise=0., seed=0):
    board = calibration.checkerboard_points(8, 6, 25.)
    board3 = torch.cat([board, torch.zeros_like(board[:, :1])], dim=-1)
    gen = torch.Generator().manual_seed(seed)
    views = []
    for k, pose in enumerate(poses):
        image, _ = geometry.project(model, pose, board3)
        if noise > 0:
            image = image + torch.randn(image.shape, generator=gen, dtype=torch.float64) * noise / math.sqrt(2)
        views.append(calibration.CalibrationView(board, image, name='view {}'.format(k)))
    return views


def _camera(dist=geometry.DistortionCoeffs()):
    return geometry.CameraModel(fx=800., fy=790., cx=322., cy=238., width=640, height=480, dist=dist)


def test_checkerboard_points():
    points = calibration.checkerboard_points(3, 2, 10.)
    assert points.tolist() == [[0., 0.], [10., 0.], [20., 0.], [0., 10.], [10., 10.], [20., 10.]]
    with pytest.raises(ValueError):
        calibration.checkerboard_points(1, 2, 10.)


def test_calibration_view_validation():
    board = calibration.checkerboard_points(2, 2, 10.)
    with pytest.raises(ValueError):
        calibration.CalibrationView(board[:3], board[:3])
    with pytest.raises(ValueError):
        calibration.CalibrationView(board, board[:3])
    with pytest.raises(ValueError):
        calibration.CalibrationView(torch.tensor([[0., 0., 1.]] * 4), board)
    view = calibration.CalibrationView(board, board)
    with pytest.raises(ValueError):
        view.observations(use_projector_points=True)
    projector = board.clone()
    projector[1] = math.nan
    _, pixels = view.replace(projector_points=projector).observations(use_projector_points=True)
    assert pixels.shape == (3, 2)


def test_estimate_homography():
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        H = torch.eye(3, dtype=torch.float64) + 0.1 * torch.randn(3, 3, generator=gen, dtype=torch.float64)
        H[0, 2] = 30.
        H[1, 2] = -20.
        H[2, :2] = H[2, :2] * 0.01
        H = H / H[2, 2]
        src = torch.rand(20, 2, generator=gen, dtype=torch.float64) * 200
        dst = calibration.apply_homography(H, src)
        estimate = slscan.estimate_homography(src, dst)
        assert estimate[2, 2].item() == pytest.approx(1.)
        assert estimate.allclose(H, rtol=1e-7, atol=1e-9)
        assert calibration.apply_homography(estimate, src).allclose(dst, rtol=0, atol=1e-8)


def test_estimate_homography_degenerate():
    collinear = torch.stack([torch.arange(6, dtype=torch.float64)] * 2, dim=-1)
    with pytest.raises(errors.Degenerate):
        slscan.estimate_homography(collinear, collinear * 2)
    square = torch.tensor([[0., 0.], [1., 0.], [1., 1.]], dtype=torch.float64)
    with pytest.raises(errors.Degenerate):
        slscan.estimate_homography(square, square)


def test_zhang_closed_form_exact():
    model = _camera()
    poses = _board_poses(5)
    views = _views(model, poses)
    homographies = [slscan.estimate_homography(*view.observations()) for view in views]
    for zero_skew in (False, True):
        estimate = slscan.zhang_intrinsics(homographies, model.size, zero_skew=zero_skew)
        assert estimate.K.allclose(model.K, rtol=1e-6, atol=1e-6)
    for H, pose in zip(homographies, poses):
        recovered = slscan.zhang_extrinsics(model, H)
        assert recovered.allclose(pose, atol=1e-6)
    result = calibration.CalibrationResult(model, poses, 0.)
    report = slscan.reprojection_error(views, result)
    assert report.rms < 1e-9
    assert report.ok
    assert len(report.per_view) == 5


def test_zhang_degenerate_motion():
    model = _camera()
    views = _views(model, _board_poses(3)[:2])
    homographies = [slscan.estimate_homography(*view.observations()) for view in views]
    with pytest.raises(errors.DegenerateMotion):
        slscan.zhang_intrinsics(homographies, model.size)
    slscan.zhang_intrinsics(homographies, model.size, zero_skew=True)

    # Boards that only translate give the same constraints in every view.
    R = torch.eye(3, dtype=torch.float64)
    parallel = [geometry.RigidTransform(R, torch.tensor([x, y, 500.], dtype=torch.float64))
                for x, y in ((-90., -60.), (-60., -70.), (-100., -40.), (-80., -65.))]
    views = _views(model, parallel)
    homographies = [slscan.estimate_homography(*view.observations()) for view in views]
    with pytest.raises(errors.DegenerateMotion):
        slscan.zhang_intrinsics(homographies, model.size)


def test_calibrate_device_with_distortion():
    model = _camera(geometry.DistortionCoeffs(k1=-0.05, k2=0.01, p1=0.0005, p2=-0.0003))
    views = _views(model, _board_poses(6))
    result = slscan.calibrate_device(views, model.size, estimate_k3=False)
    assert result.rms < 1e-4
    assert result.model.fx == pytest.approx(model.fx, rel=1e-4)
    assert result.model.fy == pytest.approx(model.fy, rel=1e-4)
    assert result.model.cx == pytest.approx(model.cx, abs=0.05)
    assert result.model.cy == pytest.approx(model.cy, abs=0.05)
    assert result.model.dist.k1 == pytest.approx(-0.05, abs=1e-4)
    assert result.model.dist.k3 == 0.
    assert all(later <= earlier for earlier, later in zip(result.cost_trace, result.cost_trace[1:]))
    for pose in result.poses:
        assert pose.is_valid()


def test_refine_lowers_cost():
    model = _camera()
    poses = _board_poses(6)
    views = _views(model, poses, noise=0.2, seed=1)
    start = model.replace(fx=820., fy=770., cx=310., cy=250.)
    initial = calibration.CalibrationResult(start, poses, 0.)
    initial_rms = slscan.reprojection_error(views, initial).rms
    result = slscan.refine_calibration(views, initial)
    assert result.rms < initial_rms
    assert result.rms < 0.3
    trace = result.cost_trace
    assert len(trace) >= 2
    assert all(later <= earlier for earlier, later in zip(trace, trace[1:]))


def test_refine_without_improvement():
    model = _camera()
    poses = _board_poses(4)
    views = _views(model, poses)
    initial = calibration.CalibrationResult(model, poses, 0.)
    with pytest.warns(errors.NoImprovement):
        result = slscan.refine_calibration(views, initial, estimate_distortion=False)
    assert result is initial


def test_calibration_noise_rms():
    model = _camera()
    poses = _board_poses(8)
    for seed in range(20):
        views = _views(model, poses, noise=0.5, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', errors.NoImprovement)
            result = slscan.calibrate_device(views, model.size)
        assert 0.35 <= result.rms <= 0.65, seed
        assert result.model.fx == pytest.approx(model.fx, rel=0.01)


def _rig():
    return simulator.make_rig(camera_size=(320, 240), projector_size=(320, 240))


def test_transfer_corners():
    rig = _rig()
    board = calibration.checkerboard_points(8, 6, 25.)
    patterns = slscan.generate_patterns(320, 240)
    pose = _board_poses(6)[1]
    view, exact = simulator.board_view(rig, board, pose, patterns)
    transfer = slscan.transfer_corners_local_homography(view)
    assert transfer.dropped == ()
    assert min(transfer.support) >= 20
    assert (transfer.points - exact).norm(dim=-1).max() < 0.25

    nothing = slscan.transfer_corners_local_homography(view, min_support=10 ** 6)
    assert len(nothing.dropped) == len(view)
    assert torch.isnan(nothing.points).all()
    with pytest.raises(errors.InsufficientSupport):
        slscan.transfer_corners_local_homography(view, min_support=10 ** 6, strict=True)

    columns_only = codec.CorrespondenceMap.invalid(240, 320, 320, 240, axes=('x',))
    with pytest.raises(errors.MissingAxis):
        slscan.transfer_corners_local_homography(view.replace(correspondence=columns_only))


def test_stereo_extrinsics():
    gen = torch.Generator().manual_seed(3)
    relative = geometry.RigidTransform.from_rotvec(torch.tensor([0., -0.3, 0.02], dtype=torch.float64),
                                                   torch.tensor([-150., 2., 40.], dtype=torch.float64))
    cam_poses = [geometry.RigidTransform.from_rotvec(0.3 * torch.randn(3, generator=gen, dtype=torch.float64),
                                                     torch.tensor([0., 0., 500.], dtype=torch.float64))
                 for _ in range(6)]
    proj_poses = [slscan.compose(relative, pose) for pose in cam_poses]
    transform, spread = slscan.stereo_extrinsics(cam_poses, proj_poses)
    assert transform.allclose(relative, atol=1e-9)
    assert spread < 1e-6

    twisted = list(proj_poses)
    twisted[0] = slscan.compose(geometry.RigidTransform.about_axis((0., 0., 1.), math.radians(10.)), twisted[0])
    with pytest.raises(errors.InconsistentViews):
        slscan.stereo_extrinsics(cam_poses, twisted, max_spread=5.)
    with pytest.raises(ValueError):
        slscan.stereo_extrinsics(cam_poses, proj_poses[:2])


def test_calibrate_stereo():
    rig = _rig()
    board = calibration.checkerboard_points(8, 6, 25.)
    patterns = slscan.generate_patterns(320, 240)
    views = [simulator.board_view(rig, board, pose, patterns, corner_noise=0.05, seed=k)[0]
             for k, pose in enumerate(_board_poses(6))]
    result = slscan.calibrate_stereo(views, (320, 240), (320, 240), estimate_distortion=False)
    assert result.camera.rms < 0.1
    assert result.projector.rms < 0.5
    assert result.projector_views == tuple(range(6))
    assert result.camera.model.fx == pytest.approx(rig.camera.fx, rel=0.01)
    assert result.projector.model.fx == pytest.approx(rig.projector.fx, rel=0.02)
    exact = rig.stereo().transform
    assert math.degrees(geometry.rotation_angle(result.transform.R @ exact.R.T)) < 0.5
    assert (result.transform.t - exact.t).norm() < 5.
    assert result.spread < 1.
