"""The contextual dialogue-act classifier: utterance-level network assembly,
training with teacher-forced context, causal conversation-level prediction,
transfer fine-tuning, checkpoint I/O, and a streaming session wrapper.

Per-utterance forward pass:

    word ids  -> embedding -> 3 conv branches (k = 1, 2, 3) -> concat
    POS ids   -> embedding -> 3 conv branches              -> concat
    [word | POS | z-scored lexical | SSI | context] -> FC -> ReLU
    -> dropout -> output layer -> softmax

The context block holds the DA vectors of the previous `context_window`
eligible turns: gold one-hots during training (teacher forcing), the
model's own predictions at inference (one-hot argmax by default, full
distributions with `soft_context`). Inference is strictly causal; turns are
processed in order and only already-classified turns feed the context.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import network, resources
from .corpus import Conversation, ConversationSet, DATagSet, Splits
from .errors import (
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
    DataError,
)
from .features import (
    Embeddings,
    EmbeddingTable,
    FeatureNormalizer,
    LexicalFeatures,
    PTB_TAGS,
    PassThroughTagger,
    PosTagger,
    Vocabulary,
    extract_lexical,
    extract_ssi,
    fit_normalizer,
    pos_tag,
    tokenize,
    vectorize,
)
from .util import stable_hash

CHECKPOINT_MAGIC = b"CDACCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    topic_vocab_size: int
    context_window: int = 3
    hidden_size: int = 100
    dropout: float = 0.5
    word_embedding_dim: int = 300
    pos_embedding_dim: int = 50
    max_len: int = 60
    lexical_dim: int = 6
    filters: int = 100
    kernel_sizes: tuple[int, ...] = (1, 2, 3)
    bn_momentum: float = 0.997
    bn_eps: float = 1e-5
    soft_context: bool = False
    use_lexical_features: bool = True
    use_syntactic_features: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if self.context_window < 0:
            raise DataError("context_window must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")
        if not 0.0 < self.bn_momentum < 1.0:
            raise DataError("batch-norm momentum must be in (0, 1)")

    @property
    def pipeline_out_dim(self) -> int:
        return self.filters * len(self.kernel_sizes)

    @property
    def ssi_dim(self) -> int:
        t = self.topic_vocab_size
        return t + (t + 1) + self.word_embedding_dim + 2

    @property
    def context_dim(self) -> int:
        return self.context_window * self.num_classes

    @property
    def fc_input_dim(self) -> int:
        return (
            2 * self.pipeline_out_dim
            + self.lexical_dim
            + self.ssi_dim
            + self.context_dim
        )


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2 (batch-norm train mode)")


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2 (batch-norm train mode)")
        if self.learning_rate >= 1e-3:
            warnings.warn(
                "fine-tuning learning rate should be below the pretraining "
                f"rate (1e-3); got {self.learning_rate}",
                stacklevel=2,
            )

    def as_training_config(self) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            teacher_forcing=self.teacher_forcing,
        )


class ContextState:
    """Ring buffer of the DA vectors of the last `window` eligible turns."""

    def __init__(self, window: int, num_classes: int):
        self.window = window
        self.num_classes = num_classes
        self._buffer: list[np.ndarray] = []

    def push(self, vector: np.ndarray) -> None:
        if self.window == 0:
            return
        self._buffer.append(np.asarray(vector, dtype=np.float64))
        if len(self._buffer) > self.window:
            self._buffer.pop(0)

    def push_label(self, class_index: int | None) -> None:
        vec = np.zeros(self.num_classes, dtype=np.float64)
        if class_index is not None:
            vec[class_index] = 1.0
        self.push(vec)

    def vector(self) -> np.ndarray:
        """Concatenation of the buffered vectors, oldest first, left-padded
        with zero vectors while the conversation is shorter than the window."""
        slots = [np.zeros(self.num_classes, dtype=np.float64)] * (
            self.window - len(self._buffer)
        ) + self._buffer
        if not slots:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate(slots)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

_BN_SUFFIXES = ("gamma", "beta", "rmean", "rvar")


def init_parameters(
    config: ModelConfig,
    vocab_size: int,
    pos_vocab_size: int,
    rng: np.random.Generator,
    word_matrix: np.ndarray | None = None,
    dtype=np.float32,
) -> dict[str, np.ndarray]:
    """All trainable arrays plus batch-norm running stats and the frozen
    item-embedding table, keyed by name."""
    params: dict[str, np.ndarray] = {}
    if word_matrix is not None:
        if word_matrix.shape != (vocab_size, config.word_embedding_dim):
            raise DataError(
                f"word matrix shape {word_matrix.shape} != "
                f"({vocab_size}, {config.word_embedding_dim})"
            )
        params["word_emb"] = word_matrix.astype(dtype).copy()
    else:
        params["word_emb"] = network.uniform_init(
            (vocab_size, config.word_embedding_dim), 0.05, rng, dtype
        )
        params["word_emb"][0] = 0.0
    params["pos_emb"] = network.uniform_init(
        (pos_vocab_size, config.pos_embedding_dim), 0.05, rng, dtype
    )
    params["pos_emb"][0] = 0.0

    for pipe, dim in (("word", config.word_embedding_dim), ("pos", config.pos_embedding_dim)):
        for k in config.kernel_sizes:
            fan_in = k * dim
            params[f"{pipe}_conv{k}_w"] = network.glorot_uniform(
                (fan_in, config.filters), fan_in, config.filters, rng, dtype
            )
            params[f"{pipe}_conv{k}_b"] = np.zeros(config.filters, dtype=dtype)
            params[f"{pipe}_bn{k}_gamma"] = np.ones(config.filters, dtype=dtype)
            params[f"{pipe}_bn{k}_beta"] = np.zeros(config.filters, dtype=dtype)
            params[f"{pipe}_bn{k}_rmean"] = np.zeros(config.filters, dtype=dtype)
            params[f"{pipe}_bn{k}_rvar"] = np.ones(config.filters, dtype=dtype)

    d_in = config.fc_input_dim
    params["fc_w"] = network.glorot_uniform(
        (d_in, config.hidden_size), d_in, config.hidden_size, rng, dtype
    )
    params["fc_b"] = np.zeros(config.hidden_size, dtype=dtype)
    params["out_w"] = network.glorot_uniform(
        (config.hidden_size, config.num_classes),
        config.hidden_size,
        config.num_classes,
        rng,
        dtype,
    )
    params["out_b"] = np.zeros(config.num_classes, dtype=dtype)

    # Frozen copy used for the suggested-item feature; never trained.
    params["item_emb"] = params["word_emb"].copy()
    return params


def trainable_names(params: dict) -> list[str]:
    out = []
    for name in sorted(params):
        if name == "item_emb" or name.endswith("_rmean") or name.endswith("_rvar"):
            continue
        out.append(name)
    return out


def count_parameters(params: dict) -> int:
    return sum(params[name].size for name in trainable_names(params))


def embedding_matrix_from_pretrained(
    vocabulary: Vocabulary,
    embeddings: Embeddings,
    dim: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> np.ndarray:
    """Rows from the pretrained vectors where available, uniform(+-0.05)
    otherwise; the padding row stays zero. Rows remain trainable."""
    if embeddings.dim != dim:
        raise DataError(f"embedding dim {embeddings.dim} != configured {dim}")
    matrix = network.uniform_init((len(vocabulary), dim), 0.05, rng, dtype)
    matrix[0] = 0.0
    id_to_token = vocabulary.id_to_token()
    for idx in range(2, len(id_to_token)):
        vec = embeddings.get(id_to_token[idx])
        if vec is not None:
            matrix[idx] = np.asarray(vec, dtype=dtype)
    return matrix


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureBundle:
    """Fixed-shape numeric inputs for one utterance."""

    token_ids: np.ndarray
    length: int
    pos_ids: np.ndarray
    lexical: np.ndarray
    ssi: np.ndarray


class FeatureExtractor:
    """Turns conversations into FeatureBundles using the fitted vocabulary,
    normalizer, topic vocabulary, tagger, and frozen item embeddings."""

    def __init__(
        self,
        config: ModelConfig,
        vocabulary: Vocabulary,
        pos_vocabulary: Vocabulary,
        normalizer: FeatureNormalizer,
        topic_vocab: list[str],
        tagger: PosTagger,
        item_embeddings,
    ):
        self.config = config
        self.vocabulary = vocabulary
        self.pos_vocabulary = pos_vocabulary
        self.normalizer = normalizer
        self.topic_vocab = list(topic_vocab)
        self.tagger = tagger
        self.item_embeddings = item_embeddings

    def bundle(self, utterance, lexical_history, state) -> FeatureBundle:
        tokens = tokenize(utterance.text)
        token_ids, length = vectorize(tokens, self.vocabulary, self.config.max_len)
        tags = pos_tag(tokens, self.tagger, record_tags=utterance.pos_tags)
        pos_ids, _ = vectorize(tags, self.pos_vocabulary, self.config.max_len)
        lex = extract_lexical(utterance.text, lexical_history)
        ssi = extract_ssi(
            state, self.topic_vocab, self.item_embeddings, utterance.speaker
        ).to_vector()
        return FeatureBundle(
            token_ids=token_ids,
            length=length,
            pos_ids=pos_ids,
            lexical=self.normalizer.apply(lex.to_vector()),
            ssi=ssi,
        )

    def conversation_bundles(self, conversation: Conversation):
        """(turn_index, FeatureBundle) for each eligible turn, with running
        per-speaker lexical histories over the whole conversation."""
        histories: dict[str, list[LexicalFeatures]] = {}
        eligible = set(conversation.eligible_turn_indices())
        out = []
        for i, turn in enumerate(conversation.turns):
            history = histories.setdefault(turn.speaker, [])
            if i in eligible:
                state = conversation.states[i] if conversation.states else None
                out.append((i, self.bundle(turn, history, state)))
            history.append(extract_lexical(turn.text, history))
        return out


def collect_lexical_rows(conversation_set: ConversationSet) -> list[np.ndarray]:
    rows = []
    for conv in conversation_set:
        histories: dict[str, list[LexicalFeatures]] = {}
        eligible = set(conv.eligible_turn_indices())
        for i, turn in enumerate(conv.turns):
            history = histories.setdefault(turn.speaker, [])
            lex = extract_lexical(turn.text, history)
            if i in eligible:
                rows.append(lex.to_vector())
            history.append(lex)
    return rows


def collect_token_sequences(conversation_set: ConversationSet):
    for conv in conversation_set:
        eligible = set(conv.eligible_turn_indices())
        for i, turn in enumerate(conv.turns):
            if i in eligible:
                yield tokenize(turn.text)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


class Model:
    """Bundle of everything needed to classify: config, parameters,
    vocabularies, tagset, topic vocabulary, normalizer, optional evaluation
    label mask, and provenance."""

    def __init__(
        self,
        config: ModelConfig,
        params: dict,
        vocabulary: Vocabulary,
        tagset: DATagSet,
        topic_vocab: list[str],
        normalizer: FeatureNormalizer,
        tagger: PosTagger | None = None,
        label_mask: list[int] | None = None,
        provenance: dict | None = None,
    ):
        self.config = config
        self.params = params
        self.vocabulary = vocabulary
        self.pos_vocabulary = Vocabulary.from_tokens(PTB_TAGS)
        self.tagset = tagset
        self.topic_vocab = list(topic_vocab)
        self.normalizer = normalizer
        self.tagger = tagger if tagger is not None else resources.default_pos_tagger()
        self.label_mask = sorted(label_mask) if label_mask else None
        self.provenance = provenance or {}

    @property
    def extractor(self) -> FeatureExtractor:
        return FeatureExtractor(
            config=self.config,
            vocabulary=self.vocabulary,
            pos_vocabulary=self.pos_vocabulary,
            normalizer=self.normalizer,
            topic_vocab=self.topic_vocab,
            tagger=self.tagger,
            item_embeddings=EmbeddingTable(self.vocabulary, self.params["item_emb"]),
        )

    def copy_params(self) -> dict:
        return {name: arr.copy() for name, arr in self.params.items()}

    def fingerprint(self) -> str:
        return stable_hash(
            {
                "config": asdict(self.config),
                "vocab_size": len(self.vocabulary),
                "tagset": list(self.tagset.labels),
                "topics": self.topic_vocab,
                "label_mask": self.label_mask,
            }
        )


def build_model(
    train_set: ConversationSet,
    tagset: DATagSet,
    topic_vocab: list[str],
    embeddings: Embeddings | None,
    config: ModelConfig | None = None,
    seed: int = 0,
    tagger: PosTagger | None = None,
    min_count: int = 2,
) -> Model:
    """Fit vocabulary and normalizer on the training conversations and
    initialize parameters (word rows from `embeddings` when given)."""
    if config is None:
        config = ModelConfig(
            num_classes=len(tagset), topic_vocab_size=len(topic_vocab)
        )
    if config.num_classes != len(tagset):
        raise DataError(
            f"config num_classes {config.num_classes} != tagset size {len(tagset)}"
        )
    if config.topic_vocab_size != len(topic_vocab):
        raise DataError(
            f"config topic_vocab_size {config.topic_vocab_size} != "
            f"topic vocabulary size {len(topic_vocab)}"
        )
    vocabulary = Vocabulary.build(collect_token_sequences(train_set), min_count=min_count)
    normalizer = fit_normalizer(collect_lexical_rows(train_set))
    rng = np.random.default_rng(seed)
    word_matrix = None
    if embeddings is not None:
        word_matrix = embedding_matrix_from_pretrained(
            vocabulary, embeddings, config.word_embedding_dim, rng
        )
    params = init_parameters(
        config,
        vocab_size=len(vocabulary),
        pos_vocab_size=len(PTB_TAGS) + 2,
        rng=rng,
        word_matrix=word_matrix,
    )
    return Model(
        config=config,
        params=params,
        vocabulary=vocabulary,
        tagset=tagset,
        topic_vocab=topic_vocab,
        normalizer=normalizer,
        tagger=tagger,
        provenance={"init_seed": seed},
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _stack_batch(bundles, contexts, config: ModelConfig, dtype):
    token_ids = np.stack([b.token_ids for b in bundles])
    pos_ids = np.stack([b.pos_ids for b in bundles])
    lengths = np.array([b.length for b in bundles], dtype=np.int64)
    lexical = np.stack([b.lexical for b in bundles]).astype(dtype)
    ssi = np.stack([b.ssi for b in bundles]).astype(dtype)
    if config.context_dim:
        context = np.stack(contexts).astype(dtype)
    else:
        context = np.zeros((len(bundles), 0), dtype=dtype)
    return {
        "token_ids": token_ids,
        "pos_ids": pos_ids,
        "lengths": lengths,
        "lexical": lexical,
        "ssi": ssi,
        "context": context,
    }


def _pipeline_forward(params, config, prefix, ids, lengths, mode):
    emb, emb_cache = network.embedding_forward(ids, params[f"{prefix}_emb"])
    outs, caches = [], []
    for k in config.kernel_sizes:
        out, cache = network.conv_branch_batch_forward(
            emb,
            lengths,
            params[f"{prefix}_conv{k}_w"],
            params[f"{prefix}_conv{k}_b"],
            params[f"{prefix}_bn{k}_gamma"],
            params[f"{prefix}_bn{k}_beta"],
            params[f"{prefix}_bn{k}_rmean"],
            params[f"{prefix}_bn{k}_rvar"],
            config.bn_momentum,
            config.bn_eps,
            mode,
        )
        outs.append(out)
        caches.append(cache)
    return np.concatenate(outs, axis=1), (emb_cache, caches)


def _pipeline_backward(d_out, pipeline_cache, params, config, prefix, grads):
    emb_cache, caches = pipeline_cache
    filters = config.filters
    d_emb = None
    for i, k in enumerate(config.kernel_sizes):
        seg = d_out[:, i * filters : (i + 1) * filters]
        d_x, d_w, d_b, d_gamma, d_beta = network.conv_branch_batch_backward(
            seg, caches[i]
        )
        grads[f"{prefix}_conv{k}_w"] = d_w
        grads[f"{prefix}_conv{k}_b"] = d_b
        grads[f"{prefix}_bn{k}_gamma"] = d_gamma
        grads[f"{prefix}_bn{k}_beta"] = d_beta
        d_emb = d_x if d_emb is None else d_emb + d_x
    grads[f"{prefix}_emb"] = network.embedding_backward(d_emb, emb_cache)


def forward_batch(params, config: ModelConfig, batch, mode="eval", rng=None):
    """Class probabilities for a stacked batch; returns (probs, cache)."""
    dtype = params["fc_w"].dtype
    batch_size = batch["token_ids"].shape[0]
    word_out, word_cache = _pipeline_forward(
        params, config, "word", batch["token_ids"], batch["lengths"], mode
    )
    if config.use_syntactic_features:
        pos_out, pos_cache = _pipeline_forward(
            params, config, "pos", batch["pos_ids"], batch["lengths"], mode
        )
    else:
        pos_out = np.zeros((batch_size, config.pipeline_out_dim), dtype=dtype)
        pos_cache = None
    lexical = (
        batch["lexical"]
        if config.use_lexical_features
        else np.zeros_like(batch["lexical"])
    )
    features = np.concatenate(
        [word_out, pos_out, lexical.astype(dtype), batch["ssi"].astype(dtype), batch["context"].astype(dtype)],
        axis=1,
    )
    hidden_pre, fc_cache = network.fc_forward(features, params["fc_w"], params["fc_b"])
    hidden, relu_cache = network.relu_forward(hidden_pre)
    dropped, drop_cache = network.dropout_forward(hidden, config.dropout, mode, rng)
    logits, out_cache = network.fc_forward(dropped, params["out_w"], params["out_b"])
    probs = network.softmax(logits)
    cache = (word_cache, pos_cache, fc_cache, relu_cache, drop_cache, out_cache, logits)
    return probs, cache


def loss_and_grads(params, config: ModelConfig, batch, gold, mode="train", rng=None):
    """Mean cross-entropy over the batch plus gradients for every trainable
    array; also returns the predicted probabilities."""
    _, cache = forward_batch(params, config, batch, mode, rng)
    word_cache, pos_cache, fc_cache, relu_cache, drop_cache, out_cache, logits = cache
    loss, probs, xent_cache = network.softmax_xent_forward(logits, gold)

    grads: dict[str, np.ndarray] = {}
    d_logits = network.softmax_xent_backward(xent_cache)
    d_dropped, grads["out_w"], grads["out_b"] = network.fc_backward(d_logits, out_cache)
    d_hidden = network.dropout_backward(d_dropped, drop_cache)
    d_hidden_pre = network.relu_backward(d_hidden, relu_cache)
    d_features, grads["fc_w"], grads["fc_b"] = network.fc_backward(
        d_hidden_pre, fc_cache
    )

    p = config.pipeline_out_dim
    _pipeline_backward(d_features[:, :p], word_cache, params, config, "word", grads)
    if config.use_syntactic_features and pos_cache is not None:
        _pipeline_backward(
            d_features[:, p : 2 * p], pos_cache, params, config, "pos", grads
        )
    return loss, probs, grads


# ---------------------------------------------------------------------------
# Causal prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TurnPrediction:
    conversation_id: str
    turn_index: int
    label: str
    probabilities: np.ndarray


def _masked_argmax(probs: np.ndarray, mask: list[int] | None) -> np.ndarray:
    if mask is None:
        return probs.argmax(axis=1)
    sub = probs[:, mask]
    return np.asarray(mask)[sub.argmax(axis=1)]


def predict_conversations(
    model: Model, conversations, label_mask: list[int] | None = None
) -> dict[str, list[TurnPrediction]]:
    """Causally classify every eligible turn of every conversation.

    Conversations advance in lockstep (one wave per eligible-turn rank) so
    the per-wave forward passes are batched; each conversation owns a
    private context buffer updated with its own predictions only.
    """
    mask = label_mask if label_mask is not None else model.label_mask
    extractor = model.extractor
    config = model.config
    sessions = []
    for conv in conversations:
        bundles = extractor.conversation_bundles(conv)
        sessions.append(
            {
                "conv": conv,
                "bundles": bundles,
                "context": ContextState(config.context_window, config.num_classes),
                "results": [],
            }
        )
    max_rank = max((len(s["bundles"]) for s in sessions), default=0)
    dtype = model.params["fc_w"].dtype
    for rank in range(max_rank):
        active = [s for s in sessions if len(s["bundles"]) > rank]
        bundles = [s["bundles"][rank][1] for s in active]
        contexts = [s["context"].vector() for s in active]
        batch = _stack_batch(bundles, contexts, config, dtype)
        probs, _ = forward_batch(model.params, config, batch, mode="eval")
        picks = _masked_argmax(probs, mask)
        for s, row, pick in zip(active, probs, picks):
            turn_index = s["bundles"][rank][0]
            s["results"].append(
                TurnPrediction(
                    conversation_id=s["conv"].conversation_id,
                    turn_index=turn_index,
                    label=model.tagset.labels[int(pick)],
                    probabilities=row.astype(np.float64),
                )
            )
            if config.soft_context:
                s["context"].push(row)
            else:
                s["context"].push_label(int(pick))
    return {s["conv"].conversation_id: s["results"] for s in sessions}


def predict_conversation(model: Model, conversation: Conversation, label_mask=None):
    """Per-labeled-turn predictions for a single conversation."""
    return predict_conversations(model, [conversation], label_mask)[
        conversation.conversation_id
    ]


def predictions_and_gold(model: Model, conversation_set, label_mask=None):
    """Aligned (predicted_label, gold_label) pairs over gold-labeled
    eligible turns, plus the flat prediction list."""
    results = predict_conversations(model, conversation_set, label_mask)
    pred, gold = [], []
    for conv in conversation_set:
        by_turn = {p.turn_index: p for p in results[conv.conversation_id]}
        for i in conv.eligible_turn_indices():
            turn = conv.turns[i]
            if turn.da_label is not None and i in by_turn:
                pred.append(by_turn[i].label)
                gold.append(turn.da_label)
    return pred, gold


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def build_training_examples(conversation_set, model: Model):
    """Feature bundles plus teacher-forced context vectors for every
    gold-labeled eligible turn."""
    extractor = model.extractor
    config = model.config
    tagset = model.tagset
    bundles_out, contexts_out, gold_out = [], [], []
    for conv in conversation_set:
        context = ContextState(config.context_window, config.num_classes)
        for turn_index, bundle in extractor.conversation_bundles(conv):
            label = conv.turns[turn_index].da_label
            if label is not None:
                bundles_out.append(bundle)
                contexts_out.append(context.vector())
                gold_out.append(tagset.index(label))
            context.push_label(tagset.index(label) if label is not None else None)
    return bundles_out, contexts_out, gold_out


def micro_accuracy_pairs(pred, gold) -> float:
    if not gold:
        return float("nan")
    return sum(1 for p, g in zip(pred, gold) if p == g) / len(gold)


def train(splits: Splits, model: Model, training_config: TrainingConfig):
    """Mini-batch Adam with per-epoch shuffling, teacher-forced context, and
    early stopping on causal validation micro-accuracy. Returns (model,
    history); the model keeps the best-validation parameters."""
    bundles, contexts, gold = build_training_examples(splits.train, model)
    if not bundles:
        raise DataError("training set has no gold-labeled eligible turns")
    if not training_config.teacher_forcing:
        return _train_scheduled(splits, model, training_config, bundles, contexts, gold)

    config = model.config
    rng = np.random.default_rng(training_config.seed)
    adam = network.AdamState(learning_rate=training_config.learning_rate)
    trainable = set(trainable_names(model.params))
    gold_arr = np.asarray(gold, dtype=np.int64)
    dtype = model.params["fc_w"].dtype

    history = []
    best = {"val": -np.inf, "epoch": 0, "params": model.copy_params()}
    bad_epochs = 0
    n = len(bundles)
    for epoch in range(1, training_config.max_epochs + 1):
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for start in range(0, n, training_config.batch_size):
            idx = order[start : start + training_config.batch_size]
            if idx.size < 2:
                continue  # batch-norm train mode needs >= 2 rows
            batch = _stack_batch(
                [bundles[i] for i in idx], [contexts[i] for i in idx], config, dtype
            )
            batch_gold = gold_arr[idx]
            loss, probs, grads = loss_and_grads(
                model.params, config, batch, batch_gold, mode="train", rng=rng
            )
            if not np.isfinite(loss):
                raise network.NumericError(f"non-finite loss at epoch {epoch}")
            network.adam_step(
                model.params, {k: v for k, v in grads.items() if k in trainable}, adam
            )
            losses.append(loss)
            correct += int((probs.argmax(axis=1) == batch_gold).sum())
            seen += idx.size

        val_pred, val_gold = predictions_and_gold(model, splits.validation)
        val_acc = micro_accuracy_pairs(val_pred, val_gold)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "train_accuracy": correct / seen if seen else float("nan"),
                "val_accuracy": val_acc,
            }
        )
        if np.isnan(val_acc):
            best = {"val": val_acc, "epoch": epoch, "params": model.copy_params()}
            continue
        if val_acc > best["val"]:
            best = {"val": val_acc, "epoch": epoch, "params": model.copy_params()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= training_config.patience:
                break

    model.params = best["params"]
    model.provenance = dict(model.provenance)
    model.provenance.update(
        {
            "training_seed": training_config.seed,
            "best_epoch": best["epoch"],
            "epochs_run": len(history),
        }
    )
    return model, history


def _train_scheduled(splits, model, training_config, bundles, contexts, gold):
    """Non-teacher-forced variant: before each epoch the context vectors are
    rebuilt from the model's own causal predictions on the training set."""
    config = model.config
    rng = np.random.default_rng(training_config.seed)
    adam = network.AdamState(learning_rate=training_config.learning_rate)
    trainable = set(trainable_names(model.params))
    dtype = model.params["fc_w"].dtype
    gold_arr = np.asarray(gold, dtype=np.int64)

    history = []
    best = {"val": -np.inf, "epoch": 0, "params": model.copy_params()}
    bad_epochs = 0
    n = len(bundles)
    for epoch in range(1, training_config.max_epochs + 1):
        contexts = _model_contexts(splits.train, model)
        order = rng.permutation(n)
        losses, correct, seen = [], 0, 0
        for start in range(0, n, training_config.batch_size):
            idx = order[start : start + training_config.batch_size]
            if idx.size < 2:
                continue
            batch = _stack_batch(
                [bundles[i] for i in idx], [contexts[i] for i in idx], config, dtype
            )
            loss, probs, grads = loss_and_grads(
                model.params, config, batch, gold_arr[idx], mode="train", rng=rng
            )
            network.adam_step(
                model.params, {k: v for k, v in grads.items() if k in trainable}, adam
            )
            losses.append(loss)
            correct += int((probs.argmax(axis=1) == gold_arr[idx]).sum())
            seen += idx.size
        val_pred, val_gold = predictions_and_gold(model, splits.validation)
        val_acc = micro_accuracy_pairs(val_pred, val_gold)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "train_accuracy": correct / seen if seen else float("nan"),
                "val_accuracy": val_acc,
            }
        )
        if np.isnan(val_acc):
            best = {"val": val_acc, "epoch": epoch, "params": model.copy_params()}
            continue
        if val_acc > best["val"]:
            best = {"val": val_acc, "epoch": epoch, "params": model.copy_params()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= training_config.patience:
                break
    model.params = best["params"]
    return model, history


def _model_contexts(conversation_set, model):
    """Context vectors aligned with build_training_examples order, taken
    from the model's own causal predictions."""
    results = predict_conversations(model, conversation_set)
    contexts = []
    config = model.config
    for conv in conversation_set:
        by_turn = {p.turn_index: p for p in results[conv.conversation_id]}
        context = ContextState(config.context_window, config.num_classes)
        for i in conv.eligible_turn_indices():
            turn = conv.turns[i]
            if turn.da_label is not None:
                contexts.append(context.vector())
            pred = by_turn.get(i)
            if pred is None:
                context.push_label(None)
            elif config.soft_context:
                context.push(pred.probabilities)
            else:
                context.push_label(model.tagset.index(pred.label))
    return contexts


def observed_label_indices(conversation_set, tagset: DATagSet) -> list[int]:
    seen = set()
    for conv in conversation_set:
        for turn in conv.turns:
            if turn.da_label is not None:
                seen.add(tagset.index(turn.da_label))
    return sorted(seen)


def finetune(model: Model, hm_splits: Splits, finetune_config: FinetuneConfig):
    """Resume training from a pretrained model on human-machine data.

    All weights stay trainable at the reduced learning rate; evaluation is
    masked to the label subset observed in the human-machine training data.
    Labels outside the pretrained tagset are an error.
    """
    for split in (hm_splits.train, hm_splits.validation, hm_splits.test):
        for conv in split:
            for turn in conv.turns:
                if turn.da_label is not None and turn.da_label not in model.tagset:
                    raise DataError(
                        f"human-machine label {turn.da_label!r} not in the "
                        f"pretrained tagset"
                    )
    mask = observed_label_indices(hm_splits.train, model.tagset)
    model.label_mask = mask or None
    if finetune_config.max_epochs == 0:
        return model, []
    return train(hm_splits, model, finetune_config.as_training_config())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, extra_provenance: dict | None = None) -> None:
    """Single-file container: magic, format version, manifest length,
    JSON manifest, then contiguous little-endian float32 tensor payloads in
    manifest directory order."""
    tensor_names = sorted(model.params)
    directory = []
    offset = 0
    for name in tensor_names:
        arr = model.params[name]
        nbytes = arr.size * 4
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        offset += nbytes
    manifest = {
        "format": CHECKPOINT_MAGIC.decode("ascii"),
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocabulary": model.vocabulary.id_to_token(),
        "vocab_min_count": model.vocabulary.min_count,
        "tagset": {
            "labels": list(model.tagset.labels),
            "collapse_map": model.tagset.collapse_map,
        },
        "topic_vocab": model.topic_vocab,
        "normalizer": {
            "mean": model.normalizer.mean.tolist(),
            "std": model.normalizer.std.tolist(),
        },
        "label_mask": model.label_mask,
        "tagger": "passthrough" if isinstance(model.tagger, PassThroughTagger) else "lexicon",
        "provenance": {**model.provenance, **(extra_provenance or {})},
        "fingerprint": model.fingerprint(),
        "tensors": directory,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in tensor_names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)
    magic = view.read(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format version {version} (supported: {CHECKPOINT_VERSION})"
        )
    (manifest_len,) = struct.unpack("<Q", view.read(8))
    blob = view.read(manifest_len)
    if len(blob) != manifest_len:
        raise CheckpointCorruptError(f"truncated manifest in {path}")
    try:
        manifest = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest in {path}: {exc}") from exc

    cfg = dict(manifest["config"])
    cfg["kernel_sizes"] = tuple(cfg["kernel_sizes"])
    config = ModelConfig(**cfg)
    payload = data[8 + 4 + 8 + manifest_len :]
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise CheckpointCorruptError(
                f"truncated tensor payload for {entry['name']} in {path}"
            )
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        params[entry["name"]] = arr

    vocabulary = Vocabulary(
        token_to_id={tok: i for i, tok in enumerate(manifest["vocabulary"])},
        min_count=manifest.get("vocab_min_count", 2),
    )
    tagset = DATagSet(
        labels=tuple(manifest["tagset"]["labels"]),
        collapse_map=dict(manifest["tagset"]["collapse_map"]),
    )
    normalizer = FeatureNormalizer(
        mean=np.array(manifest["normalizer"]["mean"], dtype=np.float64),
        std=np.array(manifest["normalizer"]["std"], dtype=np.float64),
    )
    _validate_shapes(config, params, len(vocabulary), path)
    tagger = (
        PassThroughTagger()
        if manifest.get("tagger") == "passthrough"
        else resources.default_pos_tagger()
    )
    return Model(
        config=config,
        params=params,
        vocabulary=vocabulary,
        tagset=tagset,
        topic_vocab=list(manifest["topic_vocab"]),
        normalizer=normalizer,
        tagger=tagger,
        label_mask=manifest.get("label_mask"),
        provenance=dict(manifest.get("provenance", {})),
    )


def _validate_shapes(config: ModelConfig, params: dict, vocab_size: int, path):
    expected = {
        "word_emb": (vocab_size, config.word_embedding_dim),
        "fc_w": (config.fc_input_dim, config.hidden_size),
        "out_w": (config.hidden_size, config.num_classes),
    }
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointShapeError(f"{path}: tensor {name} missing from payload")
        if params[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name} has shape {params[name].shape}, "
                f"manifest config implies {shape}"
            )


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


class StreamingClassifier:
    """Per-conversation causal classification over a stream of turn records.

    Records must arrive in turn order within each conversation (index 0, 1,
    2, ...); conversations may interleave. Eligible turns (user turns of
    human-machine streams, every turn otherwise) yield one prediction each.
    """

    def __init__(self, model: Model):
        self.model = model
        self._sessions: dict[str, dict] = {}

    def feed(self, conversation_id: str, turn_index: int, turn: dict):
        from .corpus import SystemState, Utterance  # lightweight record assembly

        session = self._sessions.setdefault(
            conversation_id,
            {
                "next": 0,
                "context": ContextState(
                    self.model.config.context_window, self.model.config.num_classes
                ),
                "histories": {},
            },
        )
        if turn_index != session["next"]:
            raise DataError(
                f"conversation {conversation_id}: turn {turn_index} arrived "
                f"out of order (expected {session['next']})"
            )
        session["next"] += 1

        speaker = turn.get("speaker")
        utterance = Utterance(
            turn_index=turn_index,
            speaker=speaker,
            text=turn.get("text", ""),
            da_label=turn.get("da"),
            pos_tags=tuple(turn["pos"]) if turn.get("pos") else None,
        )
        state = None
        if turn.get("state"):
            s = turn["state"]
            state = SystemState(
                current_topic=s["topic"],
                previous_topic=s.get("previous_topic"),
                suggested_topic=s.get("suggested_topic"),
                suggested_item=s.get("suggested_item"),
                user_id=s.get("user_id", ""),
            )
        history = session["histories"].setdefault(speaker, [])
        eligible = speaker != "system"
        prediction = None
        if eligible:
            extractor = self.model.extractor
            bundle = extractor.bundle(utterance, history, state)
            batch = _stack_batch(
                [bundle],
                [session["context"].vector()],
                self.model.config,
                self.model.params["fc_w"].dtype,
            )
            probs, _ = forward_batch(self.model.params, self.model.config, batch)
            pick = int(_masked_argmax(probs, self.model.label_mask)[0])
            prediction = TurnPrediction(
                conversation_id=conversation_id,
                turn_index=turn_index,
                label=self.model.tagset.labels[pick],
                probabilities=probs[0].astype(np.float64),
            )
            if self.model.config.soft_context:
                session["context"].push(probs[0])
            else:
                session["context"].push_label(pick)
        history.append(extract_lexical(utterance.text, history))
        return prediction
