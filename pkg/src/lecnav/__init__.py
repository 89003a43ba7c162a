"""Multi-UE navigation over a shadowed uplink: emergent communication (EC)
and its language-guided variant (LEC) that distills refined teacher
trajectories into the EC learners."""
from .channel import LinkBudget, synth_map
from .ec import TrainConfig, evaluate, train_ec
from .env import ConfigError, GridWorld, Scenario
from .lec import KdConfig, train_lec
from .teacher import TeacherKnowledge, generate_planner_episodes, select_top_l

__all__ = ["ConfigError", "GridWorld", "KdConfig", "LinkBudget", "Scenario", "TeacherKnowledge",
           "TrainConfig", "evaluate", "generate_planner_episodes", "select_top_l", "synth_map",
           "train_ec", "train_lec"]
