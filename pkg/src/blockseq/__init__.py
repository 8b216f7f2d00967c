"""Online block-synchronous sequence transduction.

An encoder RNN consumes input frames in fixed-width blocks while a transducer
RNN emits a token segment per block, carrying its recurrent state across
blocks. Training aligns the target sequence to blocks with an approximate DP
search; decoding is beam search, offline or committed block-by-block online.
"""

from .alignment import (
    Alignment,
    AlignmentCache,
    EnumerationLimitError,
    Hypothesis,
    InfeasibleAlignmentError,
    dp_best_alignment,
    exact_best_alignment,
    extend_hypotheses,
    marginal_log_prob,
)
from .checkpoint import CheckpointVersionError, load_model, save_model
from .inference import (
    BeamConfig,
    DecodeResult,
    StreamEvent,
    beam_decode,
    exhaustive_decode,
    streaming_decode,
    streaming_decode_result,
)
from .model import (
    AttentionKind,
    BlockConfig,
    FeatureSequence,
    ModelConfig,
    Transducer,
    TransducerState,
    Vocab,
)
from .tensor import (
    InvariantError,
    ParamStore,
    Tape,
    Tensor,
    backward,
    finite_diff_grad,
    recording,
    sgd_momentum_step,
)
from .training import (
    NonFiniteLossError,
    SequenceExample,
    TrainConfig,
    TrainState,
    loss,
    refresh_alignments,
    train,
    train_step,
)

__version__ = "0.1.0"
