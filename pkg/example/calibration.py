######################
# Before a scanner can measure anything, both of its devices need calibrating: their intrinsics (focal lengths,
# principal point, lens distortion) and the rigid transform between them.
# The projector cannot see, so we treat it as a "reverse camera": the camera sees a checkerboard, the decoded
# structured light tells us which projector pixel lit each camera pixel, and local homographies transfer every
# board corner into projector coordinates.
######################

import math
import torch
import slscan
from slscan import calibration, geometry, simulator


######################
# Board poses: the board is tilted differently in every view. Parallel views would leave the focal lengths
# undetermined.
######################
def board_poses(count, distance=500., tilt=25., generator=None):
    poses = []
    for k in range(count):
        angle = 2 * math.pi * k / count
        rotvec = torch.tensor([math.cos(angle), math.sin(angle), 0.], dtype=torch.float64) * math.radians(tilt)
        rotvec = rotvec + 0.05 * torch.randn(3, generator=generator, dtype=torch.float64)
        R = geometry.rotation_from_rotvec(rotvec)
        # Centre the board (175mm x 125mm) on the optical axis.
        centre = torch.tensor([87.5, 62.5, 0.], dtype=torch.float64)
        t = torch.tensor([0., 0., distance], dtype=torch.float64) - R @ centre
        poses.append(geometry.RigidTransform(R, t))
    return poses


def main(camera_size=(320, 240), projector_size=(320, 240), count=6, corner_noise=0.1, seed=0):
    generator = torch.Generator().manual_seed(seed)
    rig = simulator.make_rig(camera_size=camera_size, projector_size=projector_size)
    board = calibration.checkerboard_points(8, 6, 25.)
    patterns = slscan.generate_patterns(projector_size[0], projector_size[1], mode='gray')

    ######################
    # Every view: render the board under the structured light, decode it, and find the corners in the camera image.
    # (Here the corners are projected exactly and perturbed, standing in for a corner detector.)
    ######################
    views = []
    for k, pose in enumerate(board_poses(count, generator=generator)):
        view, _ = simulator.board_view(rig, board, pose, patterns, corner_noise=corner_noise, seed=seed + k,
                                       name='view {}'.format(k))
        views.append(view)

    ######################
    # Calibrate the camera, transfer the corners, calibrate the projector, and fuse the per-view extrinsics.
    ######################
    result = slscan.calibrate_stereo(views, camera_size, projector_size)
    for name, device, exact in (('camera', result.camera, rig.camera), ('projector', result.projector, rig.projector)):
        print("{}: fx {:.2f} (exact {:.2f}), fy {:.2f} (exact {:.2f}), rms {:.3f}px {}"
              .format(name, device.model.fx, exact.fx, device.model.fy, exact.fy, device.rms,
                      "(ok)" if device.rms < 1 else "(too large)"))
    exact = rig.stereo().transform
    print("Camera-to-projector rotation error: {:.4f} degrees; translation error: {:.3f}mm; views agree to within "
          "{:.4f} degrees.".format(math.degrees(geometry.rotation_angle(result.transform.R @ exact.R.T)),
                                  (result.transform.t - exact.t).norm().item(), result.spread))
    return result


if __name__ == '__main__':
    main()
