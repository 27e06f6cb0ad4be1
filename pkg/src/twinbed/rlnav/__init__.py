"""Grid-world navigation: environment, Double Q-learning agents, training and evaluation."""
from .agent import DoubleQLearner, TabularDoubleQ, TrainDiverged, linear_epsilon
from .env import (Action, EnvConfig, EpisodeDone, GridMap, MapError, NavEnv, Observation,
                  PlacementError, RadiationZone, RewardParams, load_map, parse_map, reference_map)
from .train import EvalReport, Policy, RandomPolicy, TrainConfig, evaluate, train
