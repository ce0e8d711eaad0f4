"""Policy-aware dynamics-model learning via transition occupancy matching.

Subpackages are plain modules; the most used entry points are re-exported here.
"""

__version__ = "0.1.0"

from .buffers import ReplayBuffer, Transition, load_buffer, save_buffer  # noqa: E402
from .envs import GridChain, PointMassReach, RoadAndRocks, make_offline_dataset  # noqa: E402
from .fdiv import CHI_SQUARED, KL, FDivergence  # noqa: E402
from .loop import LoopConfig, run_offline, run_online, run_weight_progression  # noqa: E402
from .occupancy import TabularMDP, exact_occupancy, primal_tom_solve  # noqa: E402

__all__ = [
    "CHI_SQUARED", "KL", "FDivergence", "GridChain", "LoopConfig", "PointMassReach", "ReplayBuffer",
    "RoadAndRocks", "TabularMDP", "Transition", "exact_occupancy", "load_buffer", "make_offline_dataset",
    "primal_tom_solve", "run_offline", "run_online", "run_weight_progression", "save_buffer",
]
