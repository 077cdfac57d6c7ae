"""Answer visual queries by generating and running small programs over perception modules."""

__version__ = "0.1.0"

from .backends import BackendRegistry, Role
from .config import RunConfig, config_from_dict, load_config
from .engine import ExecutionEngine, ExecutionResult
from .harness import iou, run_benchmark, run_intervention, score_qa
from .scene import Scene, VideoScene, generate_scenes, oracle_answer
from .synthesis import PRESETS, build_prompt, get_preset
from .tasks import TaskInstance, load_tasks
from .validator import validate

__all__ = [
    "BackendRegistry", "ExecutionEngine", "ExecutionResult", "PRESETS", "Role", "RunConfig", "Scene",
    "TaskInstance", "VideoScene", "build_prompt", "config_from_dict", "generate_scenes", "get_preset", "iou",
    "load_config", "load_tasks", "oracle_answer", "run_benchmark", "run_intervention", "score_qa", "validate",
]
