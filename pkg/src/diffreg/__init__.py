"""Differentiable single-view 2D/3D rigid registration on synthetic radiographs.

The library renders DRRs from voxel volumes with an exact ray-driven
projector, scores image dissimilarity with either a learned spherical
similarity or a multiscale NCC baseline, and refines six-DoF poses with a
damped least-squares loop. See the README and ``demos/`` for walkthroughs.
"""

__version__ = "0.1.0"

from .augment import RandomizationConfig, random_erase, randomize
from .errors import (
    BadEnergy,
    BadFocal,
    ConfigError,
    DegenerateRay,
    DiffregError,
    Diverged,
    EmptyInput,
    EmptySpec,
    NoLandmarks,
    NotARotation,
    NotUnit,
    ShapeMismatch,
    SolveFailed,
)
from .lie import (
    Transform3,
    compose,
    compose_twists,
    geodesic_se3,
    geodesic_so4,
    invert,
    map_so4,
    sample_pose,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
)
from .lm import LMConfig, RegistrationResult, lm_refine, lm_step
from .phantom import (
    MetricsReport,
    Phantom,
    generate_phantom,
    metrics_report,
    mtre,
    reference_phantom,
    reference_phantom_spec,
)
from .pipeline import (
    PipelineConfig,
    benchmark,
    initialize_pose,
    landscape,
    optimizer_comparison,
    register,
)
from .render import (
    Camera,
    Volume,
    enhance_volume,
    invert_intensity,
    render_drr,
    render_pose_gradient,
    siddon_raycast,
)
from .similarity import (
    EncoderParams,
    TrainConfig,
    double_backward_loss,
    encoder_forward,
    encoder_param_gradient,
    grad_similarity_pose,
    init_encoder_params,
    learned_similarity,
    mncc_similarity,
    train_similarity,
)
from .sphere import (
    embed_feature_map,
    residual_field,
    spherical_distance,
    spherical_exp,
    spherical_similarity,
)
