"""DiffNet: social-influence diffusion for top-N recommendation, in numpy.

The main entry points are re-exported here; see the submodules for the
full API.
"""

from .baselines import BPRMF, SVDPP
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    DataFormatError,
    Dataset,
    SplitSpec,
    SynthConfig,
    load_dataset,
    save_dataset,
    split,
    synthesize,
)
from .evaluation import EvalConfig, RankingResult, evaluate
from .model import DiffNet, DiffNetConfig, RankingModel
from .training import TrainConfig, TrainingDiverged, train

__all__ = [
    "BPRMF",
    "SVDPP",
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "ConfigError",
    "RunConfig",
    "DataFormatError",
    "Dataset",
    "SplitSpec",
    "SynthConfig",
    "load_dataset",
    "save_dataset",
    "split",
    "synthesize",
    "EvalConfig",
    "RankingResult",
    "evaluate",
    "DiffNet",
    "DiffNetConfig",
    "RankingModel",
    "TrainConfig",
    "TrainingDiverged",
    "train",
]
__version__ = "0.1.0"
