"""Sequence labeling for named entity recognition.

Exact linear-chain CRF training and decoding over pluggable token
embeddings, with three heads (linear projection, BiLSTM, FC softmax),
BIO tag handling, and entity-level evaluation.
"""

from .conll_io import (
    Corpus,
    EmbeddingSet,
    Sentence,
    TokenVocabulary,
    build_token_vocabulary,
    load_embeddings,
    parse_conll,
    write_conll,
    write_embeddings,
)
from .crf import (
    Marginals,
    TransitionMatrix,
    forward_backward,
    log_likelihood,
    log_partition,
    nll_gradients,
    sequence_score,
    viterbi_decode,
)
from .encoders import (
    EmbeddingSource,
    bilstm_backward,
    bilstm_forward,
    cross_entropy_and_grads,
    embed,
    fc_head_forward,
    init_params,
    project,
)
from .metrics import MetricsReport, error_breakdown, f1, score
from .tagscheme import (
    DEFAULT_ENTITY_TYPES,
    EntitySpan,
    EntityTypeSet,
    TagVocabulary,
    expand_bio,
    extract_spans,
    is_valid_transition,
    repair_bio,
    spans_to_tags,
    transition_mask,
)
from .training import (
    AdamState,
    Checkpoint,
    LrSchedule,
    TrainConfig,
    adam_step,
    init_adam,
    load_checkpoint,
    lr_at,
    predict_with_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
