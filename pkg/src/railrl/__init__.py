"""Rail network multi-train simulator, tree observations, and PPO training."""

from .env import RailAction, RailEnv, StepInfo, TrainPhase
from .errors import DomainError, FormatError, GenerationError, IntegrityError
from .grid import Direction, RailGrid, RoadType
from .mapgen import MapConfig, generate_map, generate_scenario, horizon_for
from .nn import (
    NetConfig,
    PolicyNet,
    build_policy,
    load_checkpoint,
    policy_from_checkpoint,
    save_checkpoint,
)
from .obs import (
    ATTR_DIM,
    NODE_FEATURE_DIM,
    FlatObsBatch,
    ObsBuilder,
    ObsTree,
    build_all,
    flatten,
    load_flat,
    save_flat,
    scale_node_features,
    unflatten,
)
from .replay import Replay, ReplayRecorder, verify_replay
from .scenario import MalfunctionParams, Scenario, TrainSpec
from .trainer import (
    PHASE_PRESETS,
    PhaseConfig,
    ShapingWeights,
    evaluate,
    run_phase,
    sample_actions,
    shaped_reward,
)

__version__ = "0.1.0"

__all__ = [
    "ATTR_DIM",
    "Direction",
    "DomainError",
    "FlatObsBatch",
    "FormatError",
    "GenerationError",
    "IntegrityError",
    "MalfunctionParams",
    "MapConfig",
    "NODE_FEATURE_DIM",
    "NetConfig",
    "ObsBuilder",
    "ObsTree",
    "PHASE_PRESETS",
    "PhaseConfig",
    "PolicyNet",
    "RailAction",
    "RailEnv",
    "RailGrid",
    "Replay",
    "ReplayRecorder",
    "RoadType",
    "Scenario",
    "ShapingWeights",
    "StepInfo",
    "TrainPhase",
    "TrainSpec",
    "build_all",
    "build_policy",
    "evaluate",
    "flatten",
    "generate_map",
    "generate_scenario",
    "horizon_for",
    "load_checkpoint",
    "load_flat",
    "policy_from_checkpoint",
    "run_phase",
    "sample_actions",
    "save_checkpoint",
    "save_flat",
    "scale_node_features",
    "shaped_reward",
    "unflatten",
    "verify_replay",
]
