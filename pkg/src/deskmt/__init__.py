"""deskmt: a desk-scale transformer translation stack and ablation harness."""

from .autodiff import Rng, Tensor, backward, grad_check
from .data import (
    Batch,
    EncodedPair,
    ParallelCorpus,
    Vocab,
    build_vocab,
    encode_pair,
    load_corpus,
    make_batches,
    normalize,
    split_corpus,
)
from .errors import (
    CheckError,
    ConfigError,
    ContractError,
    CorruptionError,
    DataError,
    DegenerateBatchError,
    DeskmtError,
    IntegrityError,
    ShapeError,
)
from .model import (
    ModelConfig,
    ModelParams,
    count_params,
    forward,
    greedy_decode,
    init_params,
    sinusoidal_pe,
)
from .report import emit_curves, emit_table, select_best
from .sweep import (
    Budget,
    RunRecord,
    SweepGrid,
    SweepSpec,
    execute_sweep,
    expand_grid,
    resume_sweep,
)
from .training import (
    AdamState,
    EpochMetrics,
    TrainState,
    adam_step,
    detect_divergence,
    evaluate,
    init_train_state,
    masked_accuracy,
    perplexity,
    restore_train_state,
    run_epoch,
    save_train_state,
)

__version__ = "0.1.0"
