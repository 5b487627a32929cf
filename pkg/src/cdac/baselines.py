"""Classical baselines: tf-idf bag-of-words with Multinomial Naive Bayes or
a one-vs-rest linear SVM, optional context augmentation (pooled previous
utterances + one-hot system-state blocks), evaluated by conversation-level
5-fold cross-validation.

Pinned formulas:
    tf          raw term count
    idf(t)      ln((1 + N) / (1 + df(t))) + 1
    vectors     L2-normalized; unseen terms dropped
    MNB         additive smoothing over class-conditional feature *means*
                (per-document normalized), smoothing vocabulary = number of
                features with nonzero total in training. This variant keeps
                posteriors exactly invariant under duplication of the full
                training set and under appended all-zero feature blocks.
    SVM         L2-regularized hinge loss, full-batch gradient descent,
                one-vs-rest; deterministic given the seed.

The item-embedding SSI block is omitted here: it is signed, and MNB
requires nonnegative features. The one-hot blocks (topic, suggested topic,
speaker role) are used for both classifiers so the comparison is symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .corpus import Conversation, ConversationSet
from .errors import DataError
from .features import tokenize

# ---------------------------------------------------------------------------
# tf-idf
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TfidfModel:
    term_index: dict[str, int]
    idf: np.ndarray
    n_documents: int

    @property
    def dim(self) -> int:
        return len(self.term_index)


def tfidf_fit(training_docs: list[list[str]]) -> TfidfModel:
    """Fit term index and idf weights on tokenized training documents."""
    if not training_docs:
        raise DataError("tf-idf needs at least one training document")
    df: dict[str, int] = {}
    for doc in training_docs:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    terms = sorted(df)
    index = {t: i for i, t in enumerate(terms)}
    n = len(training_docs)
    idf = np.array(
        [np.log((1.0 + n) / (1.0 + df[t])) + 1.0 for t in terms], dtype=np.float64
    )
    return TfidfModel(term_index=index, idf=idf, n_documents=n)


def tfidf_transform(model: TfidfModel, doc: list[str]) -> sp.csr_matrix:
    """L2-normalized tf-idf row vector; unseen terms are dropped."""
    counts: dict[int, float] = {}
    for term in doc:
        idx = model.term_index.get(term)
        if idx is not None:
            counts[idx] = counts.get(idx, 0.0) + 1.0
    if not counts:
        return sp.csr_matrix((1, model.dim))
    cols = sorted(counts)
    vals = np.array([counts[c] * model.idf[c] for c in cols], dtype=np.float64)
    norm = np.linalg.norm(vals)
    if norm > 0:
        vals = vals / norm
    return sp.csr_matrix((vals, ([0] * len(cols), cols)), shape=(1, model.dim))


def tfidf_transform_many(model: TfidfModel, docs: list[list[str]]) -> sp.csr_matrix:
    if not docs:
        return sp.csr_matrix((0, model.dim))
    return sp.vstack([tfidf_transform(model, d) for d in docs], format="csr")


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------


@dataclass
class MultinomialNB:
    classes: list[str]
    log_prior: np.ndarray
    log_likelihood: np.ndarray  # (n_classes, n_features)

    def predict(self, vectors: sp.csr_matrix) -> list[str]:
        scores = vectors @ self.log_likelihood.T + self.log_prior
        return [self.classes[i] for i in np.asarray(scores).argmax(axis=1)]


def train_mnb(vectors: sp.csr_matrix, labels: list[str], alpha_smooth: float = 1.0) -> MultinomialNB:
    """Multinomial NB over nonnegative features (see module docstring for
    the pinned smoothing variant)."""
    if vectors.min() < 0:
        raise DataError("Multinomial NB requires nonnegative features")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DataError("need at least 2 classes to train")
    y = np.array([classes.index(l) for l in labels])
    n_features = vectors.shape[1]

    # Smoothing vocabulary: features observed anywhere in training, so
    # appended all-zero blocks cannot shift per-class normalizers.
    totals = np.asarray(vectors.sum(axis=0)).ravel()
    v_observed = max(1, int((totals > 0).sum()))

    log_prior = np.zeros(len(classes))
    log_likelihood = np.zeros((len(classes), n_features))
    n_docs = len(labels)
    for ci in range(len(classes)):
        rows = vectors[y == ci]
        n_c = rows.shape[0]
        log_prior[ci] = np.log(n_c / n_docs)
        mean_counts = np.asarray(rows.sum(axis=0)).ravel() / n_c
        denom = mean_counts.sum() + alpha_smooth * v_observed
        log_likelihood[ci] = np.log((mean_counts + alpha_smooth) / denom)
    return MultinomialNB(classes=classes, log_prior=log_prior, log_likelihood=log_likelihood)


@dataclass
class LinearSVM:
    classes: list[str]
    weights: np.ndarray  # (n_classes, n_features)
    bias: np.ndarray

    def decision(self, vectors: sp.csr_matrix) -> np.ndarray:
        return np.asarray(vectors @ self.weights.T) + self.bias

    def predict(self, vectors: sp.csr_matrix) -> list[str]:
        return [self.classes[i] for i in self.decision(vectors).argmax(axis=1)]


def train_svm(
    vectors: sp.csr_matrix,
    labels: list[str],
    reg: float = 1e-4,
    epochs: int = 20,
    learning_rate: float = 1.0,
    seed: int = 0,
) -> LinearSVM:
    """One-vs-rest maximum-margin linear classifiers by full-batch gradient
    descent on L2-regularized hinge loss. Deterministic under the seed."""
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DataError("need at least 2 classes to train")
    y = np.array([classes.index(l) for l in labels])
    n_docs, n_features = vectors.shape
    rng = np.random.default_rng(seed)
    del rng  # weights start at zero; the seed is kept in the signature for API stability
    weights = np.zeros((len(classes), n_features))
    bias = np.zeros(len(classes))
    x_t = vectors.T.tocsr()
    for ci in range(len(classes)):
        target = np.where(y == ci, 1.0, -1.0)
        w = weights[ci]
        b = 0.0
        for epoch in range(epochs):
            margins = target * (np.asarray(vectors @ w).ravel() + b)
            active = margins < 1.0
            coeff = np.where(active, -target, 0.0) / n_docs
            grad_w = reg * w + np.asarray(x_t @ coeff).ravel()
            grad_b = coeff.sum()
            lr = learning_rate / (1.0 + 0.1 * epoch)
            w = w - lr * grad_w
            b = b - lr * grad_b
        weights[ci] = w
        bias[ci] = b
    return LinearSVM(classes=classes, weights=weights, bias=bias)


# ---------------------------------------------------------------------------
# Context augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextAugmentation:
    window: int = 3
    include_previous: bool = True
    include_ssi: bool = True
    ssi_dim: int = 0

    def __post_init__(self):
        if self.window < 0:
            raise DataError("context window must be >= 0")


def augment_context(
    doc_vector: sp.csr_matrix,
    previous_docs: list[sp.csr_matrix],
    ssi: np.ndarray | None,
    cfg: ContextAugmentation,
) -> sp.csr_matrix:
    """[current | pooled previous-window tf-idf | SSI one-hots].

    The previous block is the re-normalized sum of the last `window`
    previous-utterance vectors (order-independent); missing context and
    disabled switches become zero blocks of the declared width.
    """
    dim = doc_vector.shape[1]
    pooled = sp.csr_matrix((1, dim))
    if cfg.include_previous and cfg.window > 0 and previous_docs:
        recent = previous_docs[-cfg.window :]
        summed = recent[0].copy()
        for v in recent[1:]:
            summed = summed + v
        norm = float(np.sqrt(summed.multiply(summed).sum()))
        if norm > 0:
            summed = summed / norm
        pooled = summed
    ssi_block = sp.csr_matrix((1, cfg.ssi_dim))
    if cfg.include_ssi and ssi is not None:
        ssi = np.asarray(ssi, dtype=np.float64).reshape(1, -1)
        if ssi.shape[1] != cfg.ssi_dim:
            raise DataError(f"SSI width {ssi.shape[1]} != declared {cfg.ssi_dim}")
        ssi_block = sp.csr_matrix(ssi)
    return sp.hstack([doc_vector, pooled, ssi_block], format="csr")


def baseline_ssi_vector(state, topic_vocab: list[str], speaker: str) -> np.ndarray:
    """Nonnegative SSI blocks for the bag-of-words models: current-topic
    one-hot, suggested-topic one-hot with a trailing none slot, 2-d role."""
    n = len(topic_vocab)
    index = {t: i for i, t in enumerate(topic_vocab)}
    vec = np.zeros(n + (n + 1) + 2, dtype=np.float64)
    if state is not None:
        if state.current_topic not in index:
            raise DataError(f"unknown topic: {state.current_topic!r}")
        vec[index[state.current_topic]] = 1.0
        if state.suggested_topic is None:
            vec[n + n] = 1.0
        else:
            if state.suggested_topic not in index:
                raise DataError(f"unknown topic: {state.suggested_topic!r}")
            vec[n + index[state.suggested_topic]] = 1.0
    else:
        vec[n + n] = 1.0
    role = 0 if speaker in ("caller_a", "user") else 1
    vec[n + (n + 1) + role] = 1.0
    return vec


def baseline_ssi_dim(topic_vocab: list[str]) -> int:
    n = len(topic_vocab)
    return n + (n + 1) + 2


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        all_ids = [cid for fold in self.folds for cid in fold]
        if len(all_ids) != len(set(all_ids)):
            raise DataError("fold plan assigns a conversation to multiple folds")


def make_fold_plan(conversation_set: ConversationSet, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded conversation-level partition into `n_folds` folds."""
    ids = sorted(c.conversation_id for c in conversation_set)
    if len(ids) < n_folds:
        raise DataError(f"need at least {n_folds} conversations, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = [tuple(shuffled[i::n_folds]) for i in range(n_folds)]
    return FoldPlan(folds=tuple(folds))


def _conversation_documents(conv: Conversation, topic_vocab):
    """(tokens, label, ssi) per eligible turn, in order; label may be None."""
    out = []
    for i in conv.eligible_turn_indices():
        turn = conv.turns[i]
        state = conv.states[i] if conv.states else None
        out.append(
            (
                tokenize(turn.text),
                turn.da_label,
                baseline_ssi_vector(state, topic_vocab, turn.speaker),
            )
        )
    return out


def _vectorize_split(conversations, tfidf, cfg: ContextAugmentation, topic_vocab):
    rows, labels = [], []
    for conv in conversations:
        docs = _conversation_documents(conv, topic_vocab)
        previous: list[sp.csr_matrix] = []
        for tokens, label, ssi in docs:
            vec = tfidf_transform(tfidf, tokens)
            augmented = augment_context(vec, previous, ssi, cfg)
            previous.append(vec)
            if label is not None:
                rows.append(augmented)
                labels.append(label)
    if not rows:
        raise DataError("no gold-labeled eligible turns to vectorize")
    return sp.vstack(rows, format="csr"), labels


def cross_validate(
    corpus: ConversationSet,
    model_kind: str,
    cfg: ContextAugmentation | None = None,
    topic_vocab: list[str] | None = None,
    n_folds: int = 5,
    seed: int = 0,
    svm_params: dict | None = None,
    mnb_alpha: float = 1.0,
):
    """Conversation-level k-fold cross-validation of a baseline classifier.

    Returns {"per_fold": [...], "mean_accuracy": float, "fold_plan": FoldPlan}.
    """
    if model_kind not in ("svm", "mnb"):
        raise DataError(f"unknown baseline kind {model_kind!r}")
    topic_vocab = topic_vocab or []
    if cfg is None:
        cfg = ContextAugmentation(
            window=0,
            include_previous=False,
            include_ssi=False,
            ssi_dim=baseline_ssi_dim(topic_vocab),
        )
    plan = make_fold_plan(corpus, n_folds=n_folds, seed=seed)
    by_id = {c.conversation_id: c for c in corpus}
    accuracies = []
    for held_out in plan.folds:
        test_convs = [by_id[cid] for cid in held_out]
        train_convs = [
            by_id[cid]
            for fold in plan.folds
            if fold is not held_out
            for cid in fold
        ]
        train_docs = [
            tokens
            for conv in train_convs
            for tokens, label, _ in _conversation_documents(conv, topic_vocab)
            if label is not None
        ]
        tfidf = tfidf_fit(train_docs)
        x_train, y_train = _vectorize_split(train_convs, tfidf, cfg, topic_vocab)
        x_test, y_test = _vectorize_split(test_convs, tfidf, cfg, topic_vocab)
        if model_kind == "mnb":
            clf = train_mnb(x_train, y_train, alpha_smooth=mnb_alpha)
        else:
            clf = train_svm(x_train, y_train, seed=seed, **(svm_params or {}))
        pred = clf.predict(x_test)
        accuracies.append(sum(p == g for p, g in zip(pred, y_test)) / len(y_test))
    return {
        "per_fold": accuracies,
        "mean_accuracy": float(np.mean(accuracies)),
        "fold_plan": plan,
        "model_kind": model_kind,
        "seed": seed,
    }
