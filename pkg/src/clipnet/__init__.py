"""Spatio-temporal video clip classifier.

Per-frame residual CNN features feed a dilated causal temporal
convolutional network; training uses class-weighted cross-entropy and a
stratified batch sampler, all on a small reverse-mode autograd core.
"""

from . import functional
from .data import (
    ClipDataset,
    ClipRecord,
    Manifest,
    ManifestEntry,
    SynthConfig,
    class_weights,
    preprocess_clip,
    read_fseq,
    spatial_resize_normalize,
    stratified_batches,
    synth_generate,
    temporal_downsample,
    uniform_batches,
    write_fseq,
)
from .errors import (
    ClipnetError,
    ConfigurationError,
    ContractError,
    DegenerateStatisticsError,
    DimensionError,
    FormatError,
    GeometryError,
    NumericError,
    ParameterError,
    UsageError,
)
from .gradcheck import gradcheck, run_op_check, standard_suite
from .model import (
    EncoderConfig,
    EngagementModel,
    ModelConfig,
    TcnConfig,
    config_from_text,
    config_to_text,
    preset_config,
    receptive_field,
)
from .nn import ParamStore, TemporalBlockSpec, basic_block2d, he_init, temporal_block
from .rng import DropoutRng, SeedStream
from .tensor import Tape, Tensor, backward, read_tensor, write_tensor
from .train import (
    ConfusionMatrix,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
    weighted_cross_entropy,
)

__version__ = "0.1.0"
