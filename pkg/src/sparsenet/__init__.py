"""Correlation-guided connection pruning for small numpy networks."""
from .analysis import compression_ratio, complementarity, magnitude_rank_histogram, selected_corr_mean
from .architectures import desk_spec, face_baseline_spec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .data import Dataset, read_idx, synthetic_shapes, write_idx
from .layers import LayerSpec, Network, NetworkSpec, backward, evaluate, forward
from .masks import DroppingMask, apply_masks, densify_equivalent
from .pipeline import SparsityPlan, Stage, run_from_scratch_control, run_pipeline, run_stage, train_baseline
from .pruners import SelectionPolicy, prune_layer
from .stats import correlation_table
from .training import TrainConfig, train_steps

__version__ = "0.1.0"
