from .calibration import (CalibrationView, calibrate_device, calibrate_stereo, estimate_homography,
                          refine_calibration, reprojection_error, stereo_extrinsics, transfer_corners_local_homography,
                          zhang_extrinsics, zhang_intrinsics)
from .codec import (CorrespondenceMap, PatternStack, PhasePatternParams, classify_bit, decode, decode_gray,
                    decode_hybrid, decode_phase, generate_patterns, gray_decode, gray_encode, separate_direct_global,
                    unwrap_phase)
from .config import PipelineConfig
from .errors import SlscanError
from .geometry import CameraModel, DistortionCoeffs, RigidTransform, back_project, compose, distort, invert, project, \
    undistort
from .io import read_pgm, read_ply, write_pgm, write_ply
from .registration import (IcpParams, PointCloud, correspond, error_point_plane, error_point_point, estimate_normals,
                           icp, rigid_from_correspondences, stitch_sequence)
from .triangulation import StereoRig, triangulate_map, triangulate_point

__version__ = "0.1.0"
