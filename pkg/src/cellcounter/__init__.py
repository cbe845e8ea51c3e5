"""Cell segmentation and counting on a self-contained CPU autodiff core."""

from .estimators import CellCounter, FpnSegmenter
from .interpret import SaliencyMap, export_panels, saliency
from .models import (
    CountConfig,
    FpnConfig,
    aleatoric_loss,
    build_counter,
    build_fpn,
    ci95,
    format_count_ci,
    fpn_loss,
    tv_loss,
)
from .nn import CheckpointError, ParamRegistry, init_params, load_checkpoint, save_checkpoint
from .optim import Adam, TrainReport, metrics, split_dataset, train_counter, train_fpn
from .simdata import (
    GenConfig,
    SyntheticSample,
    generate_dataset,
    generate_sample,
    load_dataset,
    read_manifest,
    read_pgm,
    write_manifest,
    write_pgm,
)
from .tensor import (
    Tape,
    Tensor,
    backward,
    release_graph,
    default_dtype,
    finite_diff_check,
    set_default_dtype,
    set_num_threads,
    using_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "release_graph",
    "finite_diff_check",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "set_num_threads",
    "ParamRegistry",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "FpnConfig",
    "CountConfig",
    "build_fpn",
    "build_counter",
    "aleatoric_loss",
    "fpn_loss",
    "tv_loss",
    "ci95",
    "format_count_ci",
    "Adam",
    "TrainReport",
    "split_dataset",
    "train_fpn",
    "train_counter",
    "metrics",
    "GenConfig",
    "SyntheticSample",
    "generate_sample",
    "generate_dataset",
    "load_dataset",
    "read_pgm",
    "write_pgm",
    "read_manifest",
    "write_manifest",
    "SaliencyMap",
    "saliency",
    "export_panels",
    "FpnSegmenter",
    "CellCounter",
    "__version__",
]
