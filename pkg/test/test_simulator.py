import functools
import math
import pytest
import torch
import slscan
from slscan import geometry, simulator


def _ray(direction):
    direction = torch.tensor([direction], dtype=torch.float64)
    return torch.zeros(1, 3, dtype=torch.float64), direction / direction.norm(dim=-1, keepdim=True)


def test_plane_intersect():
    plane = simulator.Plane((0., 0., 500.), (0., 0., -2.))
    assert plane.normal.tolist() == [0., 0., -1.]
    t, normal = plane.intersect(*_ray([0., 0., 1.]))
    assert t.tolist() == [500.]
    assert normal.tolist() == [[0., 0., -1.]]
    assert math.isinf(plane.intersect(*_ray([1., 0., 0.]))[0].item())
    assert math.isinf(plane.intersect(*_ray([0., 0., -1.]))[0].item())
    with pytest.raises(ValueError):
        simulator.Plane((0., 0., 0.), (0., 0., 0.))
    with pytest.raises(ValueError):
        simulator.Plane((0., 0., 0.), (0., 0., 1.), albedo=1.5)


def test_sphere_intersect():
    sphere = simulator.Sphere((0., 0., 500.), 50.)
    t, normal = sphere.intersect(*_ray([0., 0., 1.]))
    assert t.tolist() == [450.]
    assert normal.allclose(torch.tensor([[0., 0., -1.]], dtype=torch.float64))
    assert math.isinf(sphere.intersect(*_ray([1., 0., 0.]))[0].item())
    # From inside, the far side.
    inside = simulator.Sphere((0., 0., 0.), 10.)
    assert inside.intersect(*_ray([0., 1., 0.]))[0].item() == pytest.approx(10.)
    with pytest.raises(ValueError):
        simulator.Sphere((0., 0., 0.), 0.)


def test_mesh_intersect():
    quad = simulator.make_quad((0., 0., 500.), (0., 0., -1.), 100.)
    t, normal = quad.intersect(*_ray([10., 5., 500.]))
    assert t.item() == pytest.approx(math.sqrt(10. ** 2 + 5. ** 2 + 500. ** 2))
    assert normal.abs().allclose(torch.tensor([[0., 0., 1.]], dtype=torch.float64))
    assert math.isinf(quad.intersect(*_ray([80., 0., 500.]))[0].item())
    with pytest.raises(ValueError):
        simulator.Mesh(quad.vertices, torch.tensor([[0, 1, 4]]))

    cup = simulator.make_cup()
    t, _ = cup.intersect(*_ray([3., 2., 468.]))
    # Through the front of the body, whose depth is squashed.
    assert t.item() == pytest.approx(math.sqrt(3. ** 2 + 2. ** 2 + (500. - 0.8 * 40.) ** 2), rel=1e-3)


def test_make_rig():
    rig = simulator.make_rig(camera_size=(64, 48), projector_size=(80, 60))
    assert rig.baseline == pytest.approx(150.)
    assert rig.camera_pose.allclose(geometry.RigidTransform.identity())
    assert rig.camera.fx == pytest.approx(32 / math.tan(math.radians(24.)))
    pixel, depth = slscan.project(rig.projector, rig.projector_pose,
                                  torch.tensor([[0., 0., 500.]], dtype=torch.float64))
    assert pixel.allclose(torch.tensor([[40., 30.]], dtype=torch.float64))
    assert depth.item() == pytest.approx(math.hypot(150., 500.))
    with pytest.raises(ValueError):
        simulator.make_rig(baseline=0.)


def _wall_rig():
    rig = simulator.make_rig(camera_size=(32, 24), projector_size=(32, 24))
    scene = simulator.Scene([simulator.Plane((0., 0., 500.), (0., 0., -1.), albedo=0.5, ambient=7.)],
                            inter_reflection=10.)
    return rig, scene


def test_render():
    rig, scene = _wall_rig()
    truth = simulator.ground_truth(rig, scene)
    lit = truth.visible
    assert lit.any() and (~lit).any()
    white = simulator.render(rig, scene, torch.full((24, 32), 255, dtype=torch.uint8))
    assert white.dtype == torch.uint8
    assert white.shape == (24, 32)
    assert (white[lit] == 145).all()
    assert (white[~lit] == 7).all()
    black = simulator.render(rig, scene, torch.zeros(24, 32, dtype=torch.uint8))
    assert (black[lit] == 17).all()
    with pytest.raises(ValueError):
        simulator.render(rig, scene, torch.zeros(24, 31, dtype=torch.uint8))
    with pytest.raises(ValueError):
        simulator.render_stack(rig, scene, slscan.generate_patterns(64, 48))


def test_render_background():
    rig = simulator.make_rig(camera_size=(32, 24), projector_size=(32, 24))
    scene = simulator.Scene([simulator.Sphere((0., 0., 500.), 30.)], background=3.)
    truth = simulator.ground_truth(rig, scene)
    image = simulator.render(rig, scene, torch.full((24, 32), 200, dtype=torch.uint8))
    assert (image[~truth.hit] == 3).all()
    assert (image[truth.visible] == 200).all()


def test_ground_truth():
    rig, scene = _wall_rig()
    truth = simulator.ground_truth(rig, scene)
    assert truth.hit.all()
    assert truth.points[..., 2].allclose(torch.full((24, 32), 500., dtype=torch.float64))
    assert truth.depth.allclose(truth.points.norm(dim=-1))
    corr = truth.correspondence
    assert corr.valid.equal(truth.visible)
    assert torch.isnan(corr.proj_x[~corr.valid]).all()
    # The projector sees every lit point at its recorded pixel.
    pixels, _ = slscan.project(rig.projector, rig.projector_pose, truth.points[corr.valid])
    assert pixels[:, 0].allclose(corr.proj_x[corr.valid])
    assert pixels[:, 1].allclose(corr.proj_y[corr.valid])

    cloud = simulator.ground_truth_cloud(rig, truth)
    assert len(cloud) == corr.valid_count
    assert cloud.provenance.tolist() == torch.nonzero(truth.visible).tolist()


def test_shadows():
    rig = simulator.make_rig(camera_size=(64, 48), projector_size=(64, 48))
    scene = simulator.Scene([simulator.Plane((0., 0., 600.), (0., 0., -1.)), simulator.Sphere((0., 0., 450.), 60.)])
    truth = simulator.ground_truth(rig, scene)
    shadowed = truth.hit & truth.projector_visible & ~truth.unshadowed
    assert shadowed.any()
    assert not truth.correspondence.valid[shadowed].any()


def test_turntable_views():
    rig = simulator.make_rig(camera_size=(48, 36), projector_size=(48, 36))
    scene = simulator.Scene([simulator.Sphere((30., 0., 500.), 40.)])
    patterns = slscan.generate_patterns(48, 36)
    views = simulator.turntable_views(rig, scene, steps=3, step_angle=20., centre=(0., 0., 500.),
                                      patterns=patterns)
    assert len(views) == 3
    closure = functools.reduce(slscan.compose, [view.transform for view in views])
    assert closure.allclose(geometry.RigidTransform.identity(), atol=1e-9)
    for view in views:
        assert len(view.captured) == len(patterns)
    # The next view's points land on this view's sphere.
    for view, following in zip(views, views[1:] + views[:1]):
        moved = view.transform.apply(following.cloud.points)
        centre = view.scene.surfaces[0].center
        assert (moved - centre).norm(dim=-1).allclose(torch.full((len(moved),), 40., dtype=torch.float64))

    with pytest.raises(ValueError):
        simulator.turntable_views(rig, scene, steps=0, step_angle=10.)
    with pytest.raises(ValueError):
        simulator.turntable_views(rig, scene, steps=4, step_angle=100.)


def test_add_noise():
    image = torch.full((10, 12), 128, dtype=torch.uint8)
    noisy = simulator.add_noise(image, 5., seed=1)
    assert noisy.equal(simulator.add_noise(image, 5., seed=1))
    assert not noisy.equal(simulator.add_noise(image, 5., seed=2))
    assert not noisy.equal(image)
    assert simulator.add_noise(image, 0.).equal(image)
    assert simulator.add_noise(torch.full((4,), 255, dtype=torch.uint8), 50., seed=3).max() <= 255
    with pytest.raises(ValueError):
        simulator.add_noise(image.to(torch.float32), 1.)
    with pytest.raises(ValueError):
        simulator.add_noise(image, -1.)


def test_add_outliers():
    gen = torch.Generator().manual_seed(0)
    cloud = slscan.PointCloud(torch.randn(20, 3, generator=gen, dtype=torch.float64),
                              normals=torch.randn(20, 3, generator=gen, dtype=torch.float64),
                              provenance=torch.zeros(20, 2, dtype=torch.int64))
    bounds = ((-1., -1., -1.), (1., 2., 3.))
    noisy = simulator.add_outliers(cloud, 0.25, bounds, seed=4)
    assert len(noisy) == 25
    assert noisy.points[:20].equal(cloud.points)
    extra = noisy.points[20:]
    assert (extra >= torch.tensor(bounds[0], dtype=torch.float64)).all()
    assert (extra <= torch.tensor(bounds[1], dtype=torch.float64)).all()
    assert noisy.normals[20:].norm(dim=-1).allclose(torch.ones(5, dtype=torch.float64))
    assert (noisy.provenance[20:] == -1).all()
    assert len(simulator.add_outliers(cloud, 0.04, bounds)) == 20
    for fraction in (1., -0.1):
        with pytest.raises(ValueError):
            simulator.add_outliers(cloud, fraction, bounds)


def test_board_view():
    rig = simulator.make_rig(camera_size=(160, 120), projector_size=(160, 120))
    board = slscan.calibration.checkerboard_points(8, 6, 25.)
    R = geometry.rotation_from_rotvec(torch.tensor([0.1, 0.2, 0.], dtype=torch.float64))
    pose = geometry.RigidTransform(R, torch.tensor([0., 0., 500.], dtype=torch.float64)
                                   - R @ torch.tensor([87.5, 62.5, 0.], dtype=torch.float64))
    patterns = slscan.generate_patterns(160, 120)
    view, exact = simulator.board_view(rig, board, pose, patterns, name='tilted')
    assert view.name == 'tilted'
    assert exact.shape == (48, 2)
    assert torch.isfinite(exact).all()
    assert view.correspondence.valid_count > 0
    world = pose.apply(torch.cat([board, torch.zeros(48, 1, dtype=torch.float64)], dim=-1))
    assert view.image_points.allclose(slscan.project(rig.camera, rig.camera_pose, world)[0])

    noisy, _ = simulator.board_view(rig, board, pose, patterns, corner_noise=0.5, seed=7)
    again, _ = simulator.board_view(rig, board, pose, patterns, corner_noise=0.5, seed=7)
    assert noisy.image_points.equal(again.image_points)
    assert not noisy.image_points.equal(view.image_points)
