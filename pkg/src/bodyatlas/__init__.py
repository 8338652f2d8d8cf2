"""bodyatlas: volumetric registration, population atlases, and voxel-based
morphometry for whole-body style imaging studies."""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    ImageGrid,
    LabelVolume,
    Mask,
    ScalarVolume,
    center_of_mass,
    downsample2,
    sample_nearest,
    sample_trilinear,
)
from .transforms import (  # noqa: F401
    AffineTransform,
    BSplineLattice,
    DisplacementField,
    VelocityField,
    compose,
    exp_velocity,
    folding_ratio,
    invert_displacement,
    jacobian_det,
    warp_labels,
    warp_scalar,
)
from .nifti import load_volume, save_volume  # noqa: F401
