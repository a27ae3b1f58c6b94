"""Training loop, Adam with a triangular cyclic learning rate, checkpoints.

Sentences are processed one at a time (batch size 1); every epoch shuffles
with the run's seeded generator, applies exact per-sentence gradients with
global-norm clipping at 5.0, and evaluates entity macro-F1 on the dev set.
The checkpoint of the best dev epoch is returned. Given the same seed,
config and data, training is bit-for-bit reproducible.

Checkpoint container format (little endian): magic b"NERCHKP" + one version
byte, a UTF-8 metadata block of key=value lines, then named float64 arrays
with explicit dimension headers.
"""

import logging
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .conll_io import Corpus, EmbeddingSet, TokenVocabulary, build_token_vocabulary
from .crf import TransitionMatrix, log_likelihood, nll_gradients, pin_boundary, viterbi_decode
from .encoders import (
    ARCHITECTURES,
    EmbeddingSource,
    cross_entropy_and_grads,
    embed,
    embed_backward,
    emissions_backward,
    emissions_forward,
    fc_head_forward,
    init_params,
)
from .metrics import score
from .tagscheme import EntityTypeSet, TagVocabulary, transition_mask

logger = logging.getLogger(__name__)

GRAD_CLIP_NORM = 5.0

CHECKPOINT_MAGIC = b"NERCHKP"
CHECKPOINT_VERSION = 1


class TrainingError(ValueError):
    pass


class NonFiniteError(TrainingError):
    """A loss or gradient stopped being finite."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place over every parameter array."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key in sorted(params):
        if key not in grads:
            raise TrainingError(f"missing gradient for parameter {key!r}")
        g = grads[key]
        p = params[key]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {key!r}")
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# learning rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Triangular wave from lr_min up to lr_max and back, period cycle_length."""

    lr_min: float = 1e-6
    lr_max: float = 1e-4
    cycle_length: int = 2

    def __post_init__(self):
        if not 0.0 < self.lr_min <= self.lr_max:
            raise TrainingError(f"need 0 < lr_min <= lr_max, got ({self.lr_min}, {self.lr_max})")
        if self.cycle_length < 2:
            raise TrainingError(f"cycle_length must be >= 2, got {self.cycle_length}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise TrainingError(f"step must be >= 0, got {step}")
    half = schedule.cycle_length / 2.0
    pos = step % schedule.cycle_length
    span = schedule.lr_max - schedule.lr_min
    if pos <= half:
        return schedule.lr_min + span * (pos / half)
    return schedule.lr_max - span * ((pos - half) / half)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "crf"
    epochs: int = 10
    dropout: float = 0.3
    hidden: int = 256
    fc_size: int = 512
    lr_min: float = 1e-6
    lr_max: float = 1e-4
    cycle_length: int | None = None  # default: two epochs' worth of steps
    seed: int = 0
    min_count: int = 1
    dim: int = 64  # trainable-embedding width when no embedding file is given

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise TrainingError(f"unknown architecture {self.arch!r}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("hidden", "fc_size", "dim", "min_count"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be >= 1")
        LrSchedule(self.lr_min, self.lr_max, self.cycle_length or 2)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_nll: float
    dev_precision: float
    dev_recall: float
    dev_f1: float


# ---------------------------------------------------------------------------
# per-sentence forward/backward and decoding


def _loss_and_grads(arch, params, voc, x, gold, embed_cache, dropout, rng):
    if arch == "linear":
        _, log_probs, cache = fc_head_forward(x, params, dropout=dropout, rng=rng, train=True)
        loss, grads = cross_entropy_and_grads(log_probs, gold, cache)
        dx = grads.pop("x")
    else:
        emissions, cache = emissions_forward(arch, params, x, dropout=dropout, rng=rng, train=True)
        trans = TransitionMatrix(params["crf.trans"], voc.start_index, voc.stop_index)
        loss = -log_likelihood(emissions, trans, gold)
        d_emissions, d_trans = nll_gradients(emissions, trans, gold)
        dx, grads = emissions_backward(params, cache, d_emissions)
        grads["crf.trans"] = d_trans
    grads.update(embed_backward(embed_cache, dx))
    return loss, grads


def default_constrained(arch: str) -> bool:
    """CRF heads learn transitions and decode freely; the softmax head cannot,
    so it gets the hard BIO mask by default."""
    return arch == "linear"


def decode_sentence(arch, params, voc: TagVocabulary, x, constrained: bool):
    """Predicted tag indices for one encoded sentence (evaluation mode)."""
    mask = transition_mask(voc) if constrained else None
    if arch == "linear":
        _, log_probs, _ = fc_head_forward(x, params, train=False)
        trans = TransitionMatrix.zeros(voc)
        path, _ = viterbi_decode(log_probs, trans, mask)
    else:
        emissions, _ = emissions_forward(arch, params, x, train=False)
        trans = TransitionMatrix(params["crf.trans"], voc.start_index, voc.stop_index)
        path, _ = viterbi_decode(emissions, trans, mask)
    return path


def predict_corpus(arch, params, voc, corpus: Corpus, source: EmbeddingSource,
                   constrained: bool) -> list[list[int]]:
    predictions = []
    for sent in corpus:
        x, _ = embed(sent, source, train=False)
        predictions.append(decode_sentence(arch, params, voc, x, constrained))
    return predictions


def evaluate_corpus(arch, params, voc, corpus, source, constrained, repair="convert"):
    predictions = predict_corpus(arch, params, voc, corpus, source, constrained)
    return score(corpus, predictions, repair=repair), predictions


# ---------------------------------------------------------------------------
# checkpoint


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    entity_types: tuple[str, ...]
    dim: int
    params: dict[str, np.ndarray]
    token_vocab: TokenVocabulary | None = None
    best_f1: float = 0.0
    best_epoch: int = 0
    version: int = CHECKPOINT_VERSION

    def tag_vocabulary(self) -> TagVocabulary:
        return TagVocabulary(EntityTypeSet(self.entity_types))

    def embedding_source(self, embeddings: EmbeddingSet | None) -> EmbeddingSource:
        """Rebuild the embedding source this model was trained with."""
        if self.token_vocab is not None:
            return EmbeddingSource("trainable", self.dim, table=self.params["embed.table"],
                                   token_vocab=self.token_vocab)
        if embeddings is None:
            raise CheckpointError("model was trained on ingested embeddings; none provided")
        if embeddings.dim != self.dim:
            raise CheckpointError(
                f"embedding dimension {embeddings.dim} != checkpoint dimension {self.dim}")
        return EmbeddingSource.ingested(embeddings)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.config, self.entity_types, self.dim, self.best_epoch,
                self.version) != (other.config, other.entity_types, other.dim,
                                  other.best_epoch, other.version):
            return False
        if repr(self.best_f1) != repr(other.best_f1):
            return False
        if (self.token_vocab is None) != (other.token_vocab is None):
            return False
        if self.token_vocab is not None and self.token_vocab.tokens != other.token_vocab.tokens:
            return False
        if sorted(self.params) != sorted(other.params):
            return False
        return all(
            self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )


def ensure_compatible(checkpoint: Checkpoint, voc: TagVocabulary) -> None:
    """Reject a checkpoint whose label space differs from the given vocabulary."""
    if tuple(checkpoint.entity_types) != tuple(voc.entity_types.types):
        raise CheckpointError(
            f"checkpoint label space has {1 + 2 * len(checkpoint.entity_types)} tags "
            f"({','.join(checkpoint.entity_types)}), vocabulary has {voc.k} "
            f"({','.join(voc.entity_types.types)})"
        )


def _expected_shapes(cfg: TrainConfig, k: int, dim: int, vocab_len: int | None) -> dict:
    shapes: dict[str, tuple] = {}
    if vocab_len is not None:
        shapes["embed.table"] = (vocab_len, dim)
    if cfg.arch == "crf":
        shapes["proj.w"] = (k, dim)
        shapes["proj.b"] = (k,)
    elif cfg.arch == "bilstm-crf":
        h = cfg.hidden
        for d in ("fw", "bw"):
            shapes[f"lstm.{d}.wx"] = (4 * h, dim)
            shapes[f"lstm.{d}.wh"] = (4 * h, h)
            shapes[f"lstm.{d}.b"] = (4 * h,)
        shapes["proj.w"] = (k, 2 * h)
        shapes["proj.b"] = (k,)
    else:
        shapes["fc.w1"] = (cfg.fc_size, dim)
        shapes["fc.b1"] = (cfg.fc_size,)
        shapes["fc.w2"] = (k, cfg.fc_size)
        shapes["fc.b2"] = (k,)
    if cfg.arch in ("crf", "bilstm-crf"):
        shapes["crf.trans"] = (k + 2, k + 2)
    return shapes


def _validate_arrays(checkpoint: Checkpoint) -> None:
    k = 1 + 2 * len(checkpoint.entity_types)
    vocab_len = len(checkpoint.token_vocab) if checkpoint.token_vocab is not None else None
    expected = _expected_shapes(checkpoint.config, k, checkpoint.dim, vocab_len)
    if sorted(expected) != sorted(checkpoint.params):
        raise CheckpointError(
            f"checkpoint arrays {sorted(checkpoint.params)} do not match "
            f"architecture {checkpoint.config.arch!r} (expected {sorted(expected)})"
        )
    for key, shape in expected.items():
        if checkpoint.params[key].shape != shape:
            raise CheckpointError(
                f"array {key!r} has shape {checkpoint.params[key].shape}, expected {shape}"
            )


_CONFIG_FIELDS = (
    ("arch", str), ("epochs", int), ("dropout", float), ("hidden", int),
    ("fc_size", int), ("lr_min", float), ("lr_max", float), ("seed", int),
    ("min_count", int), ("dim", int),
)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Serialize; atomic on the destination (no partial file is left behind)."""
    meta: dict[str, str] = {}
    for name, _ in _CONFIG_FIELDS:
        value = getattr(checkpoint.config, name)
        meta[name] = repr(value) if isinstance(value, float) else str(value)
    meta["cycle_length"] = str(checkpoint.config.cycle_length or "")
    meta["entity_types"] = " ".join(checkpoint.entity_types)
    meta["activation"] = "relu"
    meta["selection"] = "dev-macro-f1"
    meta["best_f1"] = repr(float(checkpoint.best_f1))
    meta["best_epoch"] = str(checkpoint.best_epoch)
    if checkpoint.token_vocab is not None:
        meta["tokens"] = " ".join(checkpoint.token_vocab.tokens)

    blob = bytearray()
    blob += CHECKPOINT_MAGIC + bytes([checkpoint.version])
    meta_bytes = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8")
    blob += struct.pack("<Q", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(checkpoint.params))
    for key in sorted(checkpoint.params):
        array = np.ascontiguousarray(checkpoint.params[key], dtype="<f8")
        name = key.encode("utf-8")
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<B", array.ndim)
        for extent in array.shape:
            blob += struct.pack("<Q", extent)
        blob += array.tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()

    offset = 0

    def take(count, what):
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
        piece = blob[offset:offset + count]
        offset += count
        return piece

    header = take(len(CHECKPOINT_MAGIC) + 1, "header")
    if header[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version = header[-1]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )

    (meta_len,) = struct.unpack("<Q", take(8, "metadata length"))
    meta_bytes = take(meta_len, "metadata")
    meta: dict[str, str] = {}
    for line in meta_bytes.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value

    try:
        kwargs = {name: cast(meta[name]) for name, cast in _CONFIG_FIELDS}
        kwargs["cycle_length"] = int(meta["cycle_length"]) if meta.get("cycle_length") else None
        config = TrainConfig(**kwargs)
        entity_types = tuple(meta["entity_types"].split())
        best_f1 = float(meta["best_f1"])
        best_epoch = int(meta["best_epoch"])
    except (KeyError, ValueError, TrainingError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    token_vocab = TokenVocabulary(meta["tokens"].split()) if "tokens" in meta else None

    (n_arrays,) = struct.unpack("<I", take(4, "array count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2, "array name length"))
        name = take(name_len, "array name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "array rank"))
        shape = tuple(struct.unpack("<Q", take(8, "array dimension"))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = take(8 * count, f"array {name!r} data")
        params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if offset != len(blob):
        raise CheckpointError("corrupt checkpoint: trailing bytes")

    checkpoint = Checkpoint(config, entity_types, config.dim if token_vocab else _infer_dim(
        config, params), params, token_vocab, best_f1, best_epoch, version)
    _validate_arrays(checkpoint)
    return checkpoint


def _infer_dim(config: TrainConfig, params: dict) -> int:
    if config.arch == "crf":
        return params["proj.w"].shape[1]
    if config.arch == "bilstm-crf":
        return params["lstm.fw.wx"].shape[1]
    return params["fc.w1"].shape[1]


# ---------------------------------------------------------------------------
# training loop


def _check_labeled(corpus: Corpus, name: str) -> None:
    for sent in corpus:
        if sent.gold_tags is None:
            raise TrainingError(f"{name} sentence {sent.id!r} has no gold tags")


def _check_coverage(source: EmbeddingSource, corpus: Corpus, name: str) -> None:
    if source.kind != "ingested":
        return
    for sent in corpus:
        if sent.id not in source.embeddings:
            raise TrainingError(f"no embeddings for {name} sentence {sent.id!r}")


def train(train_corpus: Corpus, dev_corpus: Corpus, config: TrainConfig,
          embeddings: EmbeddingSet | None = None):
    """Train one architecture; returns (best checkpoint, per-epoch stats).

    embeddings: precomputed vectors covering both corpora, or None to learn
    a token embedding table (built from the train corpus, UNK for the rest).
    """
    voc = train_corpus.tag_vocabulary
    if dev_corpus.tag_vocabulary.tags != voc.tags:
        raise TrainingError("train and dev corpora use different tag vocabularies")
    _check_labeled(train_corpus, "train")
    _check_labeled(dev_corpus, "dev")

    rng = np.random.default_rng(config.seed)
    if embeddings is None:
        token_vocab = build_token_vocabulary(train_corpus, config.min_count)
        dim = config.dim
        params = init_params(config.arch, dim, voc.k, config.hidden, config.fc_size,
                             vocab_size=len(token_vocab), rng=rng)
        source = EmbeddingSource("trainable", dim, table=params["embed.table"],
                                 token_vocab=token_vocab)
    else:
        token_vocab = None
        dim = embeddings.dim
        params = init_params(config.arch, dim, voc.k, config.hidden, config.fc_size, rng=rng)
        source = EmbeddingSource.ingested(embeddings)
        _check_coverage(source, train_corpus, "train")
        _check_coverage(source, dev_corpus, "dev")

    steps_per_epoch = len(train_corpus)
    cycle = config.cycle_length or max(2, 2 * steps_per_epoch)
    schedule = LrSchedule(config.lr_min, config.lr_max, cycle)
    state = init_adam(params)
    constrained = default_constrained(config.arch)

    best_f1 = -1.0
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    history: list[EpochStats] = []
    step = 0
    sentences = list(train_corpus.sentences)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(sentences))
        total_nll = 0.0
        for idx in order:
            sent = sentences[idx]
            x, embed_cache = embed(sent, source, dropout=config.dropout, rng=rng, train=True)
            loss, grads = _loss_and_grads(config.arch, params, voc, x, sent.gold_tags,
                                          embed_cache, config.dropout, rng)
            if not np.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss {loss!r} at epoch {epoch}, sentence {sent.id!r}"
                )
            clip_global_norm(grads)
            adam_step(params, grads, state, lr_at(schedule, step))
            if "crf.trans" in params:
                pin_boundary(params["crf.trans"], voc.start_index, voc.stop_index)
            step += 1
            total_nll += loss
        mean_nll = total_nll / steps_per_epoch

        report, _ = evaluate_corpus(config.arch, params, voc, dev_corpus, source, constrained)
        stats = EpochStats(epoch, mean_nll, report.macro_precision, report.macro_recall,
                           report.macro_f1)
        history.append(stats)
        logger.info(
            "epoch %d nll %.6f dev P %.4f R %.4f F1 %.4f",
            epoch, mean_nll, stats.dev_precision, stats.dev_recall, stats.dev_f1,
        )
        if stats.dev_f1 > best_f1:
            best_f1 = stats.dev_f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    best_vocab = token_vocab if embeddings is None else None
    checkpoint = Checkpoint(config, tuple(voc.entity_types.types), dim, best_params,
                            best_vocab, best_f1, best_epoch)
    return checkpoint, history


def predict_with_checkpoint(checkpoint: Checkpoint, corpus: Corpus,
                            embeddings: EmbeddingSet | None = None,
                            constrained: bool | None = None) -> list[list[int]]:
    """Decode a corpus with a trained model."""
    voc = checkpoint.tag_vocabulary()
    ensure_compatible(checkpoint, corpus.tag_vocabulary)
    source = checkpoint.embedding_source(embeddings)
    if constrained is None:
        constrained = default_constrained(checkpoint.config.arch)
    return predict_corpus(checkpoint.config.arch, checkpoint.params, voc, corpus,
                          source, constrained)
