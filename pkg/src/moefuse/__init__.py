"""Uncertainty-aware LiDAR/camera late fusion on synthetic degraded scenes.

The pipeline: simulate per-proposal Monte-Carlo detector outputs under a
degradation profile (simgen), summarize each proposal's class and box
uncertainty against clear-validation statistics (uncertainty), pair
LiDAR candidates with overlapping camera candidates (pairing, geometry),
fuse each pair's channels into a recalibrated confidence with a small
residual network trained end-to-end (fusion, nn), and score the result
with a 40-point 3D AP evaluator (evaluation). The cli module strings the
stages into reproducible experiments.
"""

from .geometry import (
    BehindCamera,
    Box2D,
    Box3D,
    Calibration,
    OutsideImage,
    ProjectionError,
    diagonal,
    iou_2d,
    iou_3d,
    nms,
    project_box3d,
)
from .uncertainty import (
    McProposal,
    McSample,
    ModalityStats,
    ScoredProposal,
    ScoringConfig,
    ValidationStats,
    compute_validation_stats,
    deviation_ratio,
    entropy_score,
    fallback_stats,
    load_stats,
    regression_score,
    save_stats,
    score_frame,
    score_proposal,
)
from .pairing import NULL_CAMERA, PairingConfig, ProposalPair, ProposalPairSet, build_pairs
from .fusion import (
    Detection,
    EmptyDataset,
    ExpertGateNetwork,
    FrameBatch,
    FusionConfig,
    FusionModel,
    PairFusionHead,
    TrainingDiverged,
    assign_targets,
    fuse_pairs,
    infer,
    infer_dataset,
    load_model,
    prepare_dataset,
    prepare_frame,
    recalibrate_scores,
    save_model,
    substitute_scores,
    train,
)
from .simgen import (
    DegradationProfile,
    Frame,
    GeneratorConfig,
    InvalidProfile,
    PROFILE_NAMES,
    default_profiles,
    generate_dataset,
    generate_frame,
    load_dataset,
    population_stats,
    save_dataset,
)
from .evaluation import (
    ApResult,
    DegenerateVariance,
    NoGroundTruth,
    ap_3d,
    difficulty_bin,
    paired_significance,
)

__version__ = "0.1.0"
