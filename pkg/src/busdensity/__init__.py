"""Conditional travel-time densities for bus trips and their use in
estimating secondary delays along vehicle schedules."""

__version__ = "0.1.0"

from .data import DataError, DatasetSplit, SplitConfig, TripRecord, chronological_split, load_split, read_trips
from .density import DensityModel, from_dict as density_from_dict
from .estimators import ModelConfig, make_predictor

__all__ = ["DataError", "DatasetSplit", "DensityModel", "ModelConfig", "SplitConfig", "TripRecord",
           "__version__", "chronological_split", "density_from_dict", "load_split", "make_predictor", "read_trips"]
