"""Deterministic multi-demand indoor navigation stack."""

from .bench import (
    EpisodeResult,
    MetricsReport,
    SubtaskResult,
    Task,
    compute_metrics,
    generate_tasks,
    shortest_path_length,
)
from .decision import OracleBackend, RemoteBackend, Subtask
from .episode import EpisodeConfig, fast_tempo_specialist, replay_trace, run_episode
from .mapping import MemoryBank, ObjectPointCloud
from .planner import AffordanceMap, GridMap, astar, build_affordance
from .scenegen import SceneGenConfig, generate_scene
from .sim import Action, AgentPose, NoiseConfig, Scene, load_scene, save_scene, step

__version__ = "0.1.0"

__all__ = [
    "Action",
    "AffordanceMap",
    "AgentPose",
    "EpisodeConfig",
    "EpisodeResult",
    "GridMap",
    "MemoryBank",
    "MetricsReport",
    "NoiseConfig",
    "ObjectPointCloud",
    "OracleBackend",
    "RemoteBackend",
    "Scene",
    "SceneGenConfig",
    "Subtask",
    "SubtaskResult",
    "Task",
    "astar",
    "build_affordance",
    "compute_metrics",
    "fast_tempo_specialist",
    "generate_scene",
    "generate_tasks",
    "load_scene",
    "replay_trace",
    "run_episode",
    "save_scene",
    "shortest_path_length",
    "step",
    "__version__",
]
