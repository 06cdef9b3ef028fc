"""Molecular property prediction with many-body axial attention."""

from .errors import (
    ConfigError,
    ConfigMismatchError,
    DegenerateSliceError,
    DivergenceError,
    FeatureError,
    Gem2Error,
    InputError,
    NumericError,
    ShapeError,
    TapeError,
)
from .featurize import Atom, Bond, FeatureSet, FeaturizerConfig, MoleculeRecord, RbfSpec, featurize
from .model import GEM2, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, train

__version__ = "0.1.0"
