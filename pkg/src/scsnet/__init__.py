"""scsnet: sharpened cosine similarity networks for hyperspectral imagery."""

from .autograd import Tensor, backward, elementwise, finite_difference_check, reduce
from .config import ExperimentConfig, load_experiment_config
from .conv import ConvLayer
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    FormatError,
    ScsNetError,
    ShapeError,
    TrainingError,
)
from .hsio import (
    HsiCube,
    LabelGrid,
    SplitAssignment,
    load_cube,
    load_labels,
    load_split,
    save_cube,
    save_labels,
    save_split,
)
from .metrics import (
    MetricReport,
    average_accuracy,
    confusion,
    evaluate,
    kappa,
    overall_accuracy,
    render_map,
)
from .model import (
    LayerSpec,
    Model,
    ModelConfig,
    build_model,
    count_parameters,
    reference_config,
)
from .pipeline import extract_patches, normalize, pca_fit, pca_reduce, split
from .scs import PoolSpec, ScsLayer, cosine_similarity, pool, scs_unit
from .train import (
    TrainConfig,
    evaluate_model,
    load_checkpoint,
    restore_training,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
