"""Light-source placement by a mobile robot that maps unknown light with a factor graph."""

from .belief import BeliefField, BeliefParams, FactorGraphBelief
from .environment import Measurement, Scenario, Simulator, generate_scenario, measure
from .gp_baseline import GPParams, ResidualGPBelief, gp_fit, gp_predict
from .grid import GridMap, ObstacleSet, Rect
from .harness import EpisodeConfig, RunLog, rmse, run_episode, run_study
from .lighting import EmitterConfig, LightField, LightingParams, render_field, render_source_field
from .placement import PlacementProblem, optimize_placement, placement_objective
from .planner import PlannerParams, actions_to_execute, entropy_reward, plan
from .trigger import TriggerState, should_reconfigure

__version__ = "0.1.0"
