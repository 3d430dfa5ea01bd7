"""Prompt tuning for continuous-time dynamic graphs on a small numpy autodiff kernel."""

from .graphstore import EventLog, NeighborIndex, build_index, recent_neighbors
from .model import Checkpoint, ModelConfig, TemporalEncoder
from .pretrain import PretrainConfig, pretrain_run
from .finetune import FinetuneConfig, finetune_run, finetune_seeds
from .protocol import SplitPlan, SyntheticSpec, generate_synthetic, make_splits

__version__ = "0.1.0"
