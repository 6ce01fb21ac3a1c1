"""strider: terrain mapping, footstep planning, and preview-control walking."""

from .errors import (
    ConfigError,
    EmptyCloud,
    EmptyScene,
    InsufficientSteps,
    InvalidEvent,
    InvalidPose,
    NoFeasiblePath,
    NumericalFailure,
    ReplanOutOfRange,
    RetargetTooLate,
    RevisionConflict,
    StriderError,
)
from .mapping import (
    MappingConfig,
    Plane,
    PointCloud,
    RegionOfInterest,
    SteppableGrid,
    TerrainBox,
    build_steppable_grid,
    crop_and_downsample,
    generate_synthetic_cloud,
    map_cloud,
    segment_planes,
    transform_to_base,
    uniform_grid,
)
from .pattern import (
    ComState,
    GaitEngine,
    LipmParams,
    PreviewController,
    StepData,
    StepDataBuffer,
    SwingTrajectory,
    preview_gains,
    retarget_swing,
    swing_trajectory,
    update_sdb,
    zmp_reference,
)
from .planner import (
    Footstep,
    FootstepPath,
    FootstepTree,
    PlannerConfig,
    PlanResult,
    ReachabilityModel,
    SafetyScorer,
    Side,
    best_footstep_path,
    footstep_path_candidates,
    plan,
    random_footstep,
    random_support_footstep,
    safety_score,
    validity_test,
)
from .sim import (
    Disturbance,
    LatencyModel,
    RunReport,
    Scenario,
    WalkParams,
    World,
    apply_disturbance,
    check_touchdown,
    run,
)
from .stabilize import (
    CapturePointFeedback,
    CompliantLipm,
    DampingController,
    compliant_step,
    czmp,
    damping_feedback,
    foot_weight_distribution,
)

__version__ = "0.1.0"
