"""Point and line feature matching with stereo visual odometry on synthetic worlds."""

__version__ = "0.1.0"

from .core_types import (CameraRig, FrameFeatures, Keypoint, LineSegment, SE3Pose,  # noqa: F401
                         default_camera, project, se3_compose, triangulate_from_disparity)
from .errors import PlvoError  # noqa: F401
