"""Two-busbar grid topology control: environment, agents, training, metrics."""

__version__ = "0.1.0"

from .grid import GridSpec, TopologyState, Observation, load_grid_spec, load_ieee14
from .actions import ActionCatalog, enumerate_catalog
from .engine import EpisodeConfig, EpisodeEngine, run_episode

__all__ = [
    "GridSpec", "TopologyState", "Observation", "load_grid_spec", "load_ieee14",
    "ActionCatalog", "enumerate_catalog",
    "EpisodeConfig", "EpisodeEngine", "run_episode",
]
