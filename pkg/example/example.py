######################
# So you want to scan an object with structured light?
# Let's get started!
######################

import math
import torch
import slscan
from slscan import geometry, registration, simulator, triangulation


######################
# A scanner is a camera and a projector looking at the same object from slightly different places. Here we build a
# virtual one: the camera sits at the origin looking down +Z, and the projector sits 150mm to its right, toed in so
# that both look at a point 500mm away.
# Small resolutions keep this example fast; real scanners use e.g. a 1920x1080 projector.
######################
def make_scanner(camera_size, projector_size):
    return simulator.make_rig(camera_size=camera_size, projector_size=projector_size, baseline=150.,
                              working_distance=500.)


def main(camera_size=(320, 240), projector_size=(320, 240), views=6, step_angle=10., noise=0.):
    rig = make_scanner(camera_size, projector_size)
    ######################
    # The object is a cup standing on a turntable whose axis is vertical (the Y axis) and passes through the cup.
    ######################
    scene = simulator.Scene([simulator.make_cup(centre=(0., 0., 500.))])

    ######################
    # The projector shows a sequence of gray-code stripe patterns (and their inverses), first for columns and then for
    # rows. Every projector column gets a unique on/off sequence over time, so each camera pixel can work out which
    # column lit it.
    ######################
    patterns = slscan.generate_patterns(projector_size[0], projector_size[1], mode='gray')
    print("Projecting {} patterns.".format(len(patterns)))

    ######################
    # Render what the camera sees, for every turntable position. The simulator also hands back the exact answer, which
    # we use to check our work.
    ######################
    turntable = simulator.turntable_views(rig, scene, steps=views, step_angle=step_angle, centre=(0., 0., 500.),
                                          patterns=patterns)

    stereo = rig.stereo()
    clouds = []
    for k, view in enumerate(turntable):
        captured = view.captured
        if noise > 0:
            captured = captured.with_images(simulator.add_noise(captured.images, noise, seed=k))
        ######################
        # Decode: for every camera pixel, which projector pixel lit it? Pixels where the decision is unsafe (too little
        # direct light, an ambiguous bit) are marked invalid rather than guessed.
        ######################
        corr = slscan.decode(captured)
        ######################
        # Triangulate: intersect each camera ray with the matching projector ray.
        ######################
        cloud, report = triangulation.triangulate_map(corr, stereo)
        ######################
        # Compare against the exact surface points for the same pixels.
        ######################
        exact = view.truth.points[cloud.provenance[:, 0], cloud.provenance[:, 1]]
        error = (cloud.points - exact).norm(dim=-1)
        print("View {}: {} of {} pixels decoded, {} points, median error {:.3f}mm."
              .format(k, corr.valid_count, corr.height * corr.width, report.kept, error.median().item()))
        clouds.append(cloud)

    ######################
    # Each cloud is in the camera's frame, but the cup turned between views. ICP brings every cloud into the frame of
    # the first, starting from the nominal turntable step about the turntable axis.
    ######################
    result = registration.stitch_sequence(clouds, step_angle=step_angle, centre=(0., 0., 500.))
    for k, (step, view) in enumerate(zip(result.steps, turntable)):
        rotation_error = math.degrees(geometry.rotation_angle(step.R @ view.transform.R.T))
        print("Step {}: rotation error {:.4f} degrees, translation error {:.4f}mm."
              .format(k, rotation_error, (step.t - view.transform.t).norm().item()))
    print("Merged cloud: {} points.".format(len(result.merged)))
    return result


if __name__ == '__main__':
    torch.set_num_threads(slscan.misc.worker_count())
    main()
