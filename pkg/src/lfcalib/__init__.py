"""Light-field camera calibration toolkit.

Core pieces: the two-plane projection model (`model`), raw-image and
micro-lens-grid handling (`raw`), a synthetic ray-tracing oracle
(`render`), the 4D-template corner detector (`detect`), the two-step
calibration (`calib`), evaluation metrics (`metrics`), and the batch
pipeline/CLI (`pipeline`, `cli`).
"""

from .errors import (
    DetectionError,
    EstimationError,
    GeometryError,
    InputError,
    LfcalibError,
)
from .model import (
    LFPoint,
    LightFieldIntrinsics,
    PhysicalCameraParams,
    PixelIndex4,
    PixelPhysical4,
    Pose,
    ProjectionMatrix,
    Ray4,
    ScenePoint,
    center_view_project,
    depth_from_disparity,
    disparity_from_depth,
    intrinsics_from_physical,
    lf_point_slice,
    pixel_index_to_physical,
    pixel_to_inner_ray,
    projection_matrix,
    refract_main_lens,
    scene_to_pixel,
)

__version__ = "0.1.0"
