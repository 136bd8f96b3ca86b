"""Desk-scale gradient-projection influence tracing.

Trains a tiny byte-level decoder with low-rank adapters, checkpoints it, and
traces relative influence (RelInf) of probe examples onto evaluation examples
across the checkpoints.
"""

from .errors import (
    CorruptionError,
    DegenerateGradientError,
    DimensionError,
    DivergedError,
    GradTraceError,
    LengthError,
    NumericError,
    ProvenanceError,
    SizeError,
    TapeStateError,
    VersionError,
)
from .influence import (
    GradientCache,
    InfluenceTrace,
    dot,
    influence_matrix,
    rel_inf,
    s_cross,
    s_in,
    step_influence,
    trace,
    tracin_approx,
    tracin_measured,
)
from .model import (
    Example,
    GradientVector,
    ModelConfig,
    ModelState,
    completion_loss,
    decode,
    encode,
    example_gradient,
    init_state,
)
from .oracle import mini_retrain_check, taylor_check
from .study import PairedSets, StrategyKind, build_paired_sets, gen_base_dataset, make_variant
from .swift import StudyConfig, run_swift_study, train_run
from .tensor import Tape, Tensor, forward_op
from .trainer import CheckpointSeries, LinearSchedule, TrainConfig, lr_at, single_sgd_step, train

__version__ = "0.1.0"
