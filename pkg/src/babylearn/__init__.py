"""Self-paced concept learning from unlabeled video on a synthetic world.

Exemplar detectors bootstrapped from two seeds per concept mine new instances
from videos through graph mode seeking, retrain on them, and repeat.
"""

from .config import RunConfig, load_config
from .core import BoundingBox, GroundTruthBox, ScoredBox, average_precision, iou, nms
from .graphshift import graph_shift_mode
from .pipeline import PipelineState, bootstrap, evaluate, load_state, run_iteration, save_state
from .simulator import WorldConfig, generate_world

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "GroundTruthBox", "PipelineState", "RunConfig", "ScoredBox", "WorldConfig",
    "average_precision", "bootstrap", "evaluate", "generate_world", "graph_shift_mode", "iou",
    "load_config", "load_state", "nms", "run_iteration", "save_state",
]
