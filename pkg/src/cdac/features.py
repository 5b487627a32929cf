"""Utterance featurization: tokens, lexical surface features, POS tags,
system-state (SSI) vectors, vocabularies, and embedding I/O.

Everything here is a pure function of its inputs so feature extraction can
run concurrently; fitted objects (Vocabulary, FeatureNormalizer) are frozen
after construction.

Feature layout conventions used by the classifier:
    lexical  -- 6 values: word count, char count, sentence count, running
                per-speaker mean word count, running mean char count, and a
                binary is-question flag ("?" in the raw text).
    SSI      -- current-topic one-hot | suggested-topic one-hot with an extra
                trailing "none" slot | mean embedding of the suggested item's
                words | 2-d speaker-role indicator.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Penn Treebank tag inventory (fixed ids so checkpoints stay stable).
PTB_TAGS = [
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD",
    "NN", "NNS", "NNP", "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR",
    "RBS", "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG", "VBN", "VBP",
    "VBZ", "WDT", "WP", "WP$", "WRB", ".", ",", ":", "``", "''", "$", "#",
]

_SENTENCE_END_RE = re.compile(r"[.!?]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split `text` into word tokens and standalone punctuation.

    A word token is a maximal run of non-space, non-punctuation characters;
    every punctuation character (anything neither alphanumeric nor
    whitespace) becomes its own token. Idempotent on its own space-joined
    output.
    """
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                tokens.append("".join(current))
                current = []
        elif ch.isalnum():
            current.append(ch)
        else:
            if current:
                tokens.append("".join(current))
                current = []
            tokens.append(ch)
    if current:
        tokens.append("".join(current))
    return tokens


def word_tokens(tokens: list[str]) -> list[str]:
    """Tokens containing at least one alphanumeric character."""
    return [t for t in tokens if any(c.isalnum() for c in t)]


@dataclass(frozen=True)
class LexicalFeatures:
    """Surface statistics of one utterance (see module docstring)."""

    f1_word_count: int
    f2_char_count: int
    f3_sentence_count: int
    f4_avg_word_count: float
    f5_avg_char_count: float
    f6_is_question: int

    def to_vector(self) -> np.ndarray:
        return np.array(
            [
                self.f1_word_count,
                self.f2_char_count,
                self.f3_sentence_count,
                self.f4_avg_word_count,
                self.f5_avg_char_count,
                self.f6_is_question,
            ],
            dtype=np.float64,
        )


def extract_lexical(
    text: str, speaker_history: list[LexicalFeatures] | None = None
) -> LexicalFeatures:
    """Compute lexical features for `text`.

    `speaker_history` holds this speaker's previous utterances in the same
    conversation; the running averages (f4/f5) include the current utterance.
    """
    history = speaker_history or []
    toks = tokenize(text)
    f1 = len(word_tokens(toks))
    f2 = len(text)
    if text.strip():
        f3 = max(1, len(_SENTENCE_END_RE.findall(text)))
    else:
        f3 = 0
    past_f1 = [h.f1_word_count for h in history]
    past_f2 = [h.f2_char_count for h in history]
    f4 = (sum(past_f1) + f1) / (len(past_f1) + 1)
    f5 = (sum(past_f2) + f2) / (len(past_f2) + 1)
    f6 = 1 if "?" in text else 0
    return LexicalFeatures(f1, f2, f3, f4, f5, f6)


@dataclass(frozen=True)
class Vocabulary:
    """Dense token->id map with reserved PAD=0 and UNK=1 slots."""

    token_to_id: dict[str, int]
    min_count: int = 2

    @classmethod
    def build(cls, token_sequences, min_count: int = 2) -> "Vocabulary":
        """Count tokens across sequences and keep those seen >= min_count
        times. Ids are assigned by (count desc, token asc) so builds are
        deterministic regardless of input order."""
        counts: dict[str, int] = {}
        for seq in token_sequences:
            for tok in seq:
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count),
            key=lambda t: (-counts[t], t),
        )
        mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in kept:
            if tok in mapping:
                continue
            mapping[tok] = len(mapping)
        return cls(token_to_id=mapping, min_count=min_count)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        """Vocabulary over an explicit token list (no count threshold)."""
        mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for tok in tokens:
            if tok not in mapping:
                mapping[tok] = len(mapping)
        return cls(token_to_id=mapping, min_count=1)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for tok, idx in self.token_to_id.items():
            out[idx] = tok
        return out


def vectorize(
    tokens: list[str], vocabulary: Vocabulary, max_len: int
) -> tuple[np.ndarray, int]:
    """Map tokens to ids, truncate/pad to exactly `max_len`.

    Returns (id array of shape (max_len,), true length after truncation).
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    length = min(len(tokens), max_len)
    for i in range(length):
        ids[i] = vocabulary.lookup(tokens[i])
    return ids, length


class PosTagger:
    """Interface for pluggable POS taggers."""

    def tag(self, tokens: list[str], record_tags: list[str] | None = None) -> list[str]:
        raise NotImplementedError


class PassThroughTagger(PosTagger):
    """Returns tags precomputed on the input record; errors when absent."""

    def tag(self, tokens, record_tags=None):
        if record_tags is None:
            raise DataError("pass-through tagger selected but record carries no POS tags")
        if len(record_tags) != len(tokens):
            raise DataError(
                f"record POS tags ({len(record_tags)}) do not align with tokens ({len(tokens)})"
            )
        return list(record_tags)


# Ordered suffix fallback rules for tokens missing from the lexicon.
_SUFFIX_RULES = [
    ("ing", "VBG"),
    ("ed", "VBD"),
    ("ly", "RB"),
    ("ness", "NN"),
    ("ment", "NN"),
    ("tion", "NN"),
    ("ity", "NN"),
    ("est", "JJS"),
    ("ful", "JJ"),
    ("ous", "JJ"),
    ("ive", "JJ"),
    ("able", "JJ"),
    ("s", "NNS"),
]


class LexiconTagger(PosTagger):
    """Greedy unigram tagger: lexicon lookup, then suffix rules, then NN.

    Punctuation tokens get their conventional treebank tags; pure digit
    strings get CD. The lexicon maps lowercase word -> most frequent tag.
    """

    def __init__(self, lexicon: dict[str, str]):
        self.lexicon = dict(lexicon)

    @classmethod
    def from_tsv(cls, path) -> "LexiconTagger":
        lexicon: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                word, tag = line.split("\t")
                lexicon[word] = tag
        return cls(lexicon)

    def tag(self, tokens, record_tags=None):
        tags = []
        for tok in tokens:
            tags.append(self._tag_one(tok))
        return tags

    def _tag_one(self, tok: str) -> str:
        if tok in self.lexicon:
            return self.lexicon[tok]
        if not any(c.isalnum() for c in tok):
            if tok in (".", "!", "?"):
                return "."
            if tok == ",":
                return ","
            if tok in (":", ";"):
                return ":"
            return "SYM"
        if tok.isdigit():
            return "CD"
        for suffix, tag in _SUFFIX_RULES:
            if len(tok) > len(suffix) + 1 and tok.endswith(suffix):
                return tag
        return "NN"


def pos_tag(tokens: list[str], tagger: PosTagger, record_tags=None) -> list[str]:
    """One tag per token via the supplied tagger implementation."""
    return tagger.tag(tokens, record_tags=record_tags)


@dataclass(frozen=True)
class SSIFeatures:
    """System-state feature blocks for one turn."""

    topic_one_hot: np.ndarray
    suggested_topic_one_hot: np.ndarray
    suggested_item_embedding: np.ndarray
    speaker_indicator: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.topic_one_hot,
                self.suggested_topic_one_hot,
                self.suggested_item_embedding,
                self.speaker_indicator,
            ]
        )


def ssi_dim(n_topics: int, embedding_dim: int) -> int:
    return n_topics + (n_topics + 1) + embedding_dim + 2


def speaker_role_index(speaker: str) -> int:
    """0 for the conversation-initiating side (caller_a / user), 1 otherwise."""
    if speaker in ("caller_a", "user"):
        return 0
    if speaker in ("caller_b", "system"):
        return 1
    raise DataError(f"unknown speaker role: {speaker!r}")


def extract_ssi(system_state, topic_vocab: list[str], embeddings, speaker: str) -> SSIFeatures:
    """Encode system state into fixed-width numeric blocks.

    `system_state` may be None (human-human mode): topic one-hots stay
    all-zero, the suggested-topic "none" slot is set, and the item embedding
    is the zero vector. `embeddings` is any object with `.dim` and
    `.get(token) -> vector | None` (see Embeddings / EmbeddingTable).
    """
    n = len(topic_vocab)
    topic = np.zeros(n, dtype=np.float64)
    suggested = np.zeros(n + 1, dtype=np.float64)
    item_vec = np.zeros(embeddings.dim, dtype=np.float64)
    speaker_vec = np.zeros(2, dtype=np.float64)
    speaker_vec[speaker_role_index(speaker)] = 1.0

    if system_state is None:
        suggested[n] = 1.0
        return SSIFeatures(topic, suggested, item_vec, speaker_vec)

    index = {t: i for i, t in enumerate(topic_vocab)}
    if system_state.current_topic not in index:
        raise DataError(f"unknown topic: {system_state.current_topic!r}")
    topic[index[system_state.current_topic]] = 1.0

    if system_state.suggested_topic is None:
        suggested[n] = 1.0
    else:
        if system_state.suggested_topic not in index:
            raise DataError(f"unknown topic: {system_state.suggested_topic!r}")
        suggested[index[system_state.suggested_topic]] = 1.0

    if system_state.suggested_item:
        vecs = []
        for tok in word_tokens(tokenize(system_state.suggested_item)):
            v = embeddings.get(tok)
            if v is not None:
                vecs.append(v)
        if vecs:
            item_vec = np.mean(np.stack(vecs), axis=0).astype(np.float64)
    if not np.all(np.isfinite(item_vec)):
        raise DataError("suggested-item embedding is not finite")
    return SSIFeatures(topic, suggested, item_vec, speaker_vec)


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-dimension z-scoring statistics for the 6 lexical features."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, vector: np.ndarray) -> np.ndarray:
        return (np.asarray(vector, dtype=np.float64) - self.mean) / self.std


def fit_normalizer(rows) -> FeatureNormalizer:
    """Population mean/std over training rows; std floored at 1e-8."""
    data = np.asarray(
        [r.to_vector() if isinstance(r, LexicalFeatures) else r for r in rows],
        dtype=np.float64,
    )
    if data.ndim != 2 or data.shape[0] < 2:
        raise DataError("normalizer needs at least 2 training rows")
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), 1e-8)
    return FeatureNormalizer(mean=mean, std=std)


class Embeddings:
    """Token -> vector map (read-only after construction)."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim

    def get(self, token: str):
        return self.vectors.get(token)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def load_embeddings(path, expected_dim: int = 300) -> Embeddings:
    """Read a text embeddings file: one line per token, space-separated
    decimals, with an optional leading "count dim" header (auto-detected).

    The vector width must equal `expected_dim`.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DataError(f"empty embeddings file: {path}")
        parts = first.rstrip("\n").split(" ")
        header = len(parts) == 2 and all(_is_int(p) for p in parts)
        if not header:
            tok, vec = _parse_embedding_line(first, path, 1)
            vectors[tok] = vec
            dim = len(vec)
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            tok, vec = _parse_embedding_line(raw, path, lineno)
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(
                    f"{path}:{lineno}: vector width {len(vec)} != {dim}"
                )
            vectors[tok] = vec
    if dim is None:
        raise DataError(f"no vectors found in embeddings file: {path}")
    if dim != expected_dim:
        raise DataError(
            f"embeddings are {dim}-dimensional; configuration requires {expected_dim}"
        )
    return Embeddings(vectors, dim)


def random_embeddings(tokens, dim: int, seed: int, scale: float = 0.1) -> Embeddings:
    """Seeded stand-in vectors for when no pretrained file is available."""
    rng = np.random.default_rng(seed)
    vectors = {}
    for tok in sorted(set(tokens)):
        vectors[tok] = rng.normal(0.0, scale, size=dim).astype(np.float32)
    return Embeddings(vectors, dim)


def write_embeddings(embeddings: Embeddings, path, header: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"{len(embeddings.vectors)} {embeddings.dim}\n")
        for tok in sorted(embeddings.vectors):
            vals = " ".join(repr(float(v)) for v in embeddings.vectors[tok])
            fh.write(f"{tok} {vals}\n")


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def _parse_embedding_line(raw: str, path, lineno: int):
    parts = raw.rstrip("\n").split(" ")
    if len(parts) < 2:
        raise DataError(f"{path}:{lineno}: malformed embedding line")
    try:
        vec = np.array([float(x) for x in parts[1:] if x != ""], dtype=np.float32)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: {exc}") from exc
    return parts[0], vec


class EmbeddingTable:
    """Matrix-backed embedding lookup keyed through a Vocabulary.

    Used for the suggested-item feature at inference time, where vectors
    live in a checkpointed array rather than a token->vector dict.
    """

    def __init__(self, vocabulary: Vocabulary, matrix: np.ndarray):
        self.vocabulary = vocabulary
        self.matrix = matrix
        self.dim = matrix.shape[1]

    def get(self, token: str):
        idx = self.vocabulary.lookup(token)
        if idx == UNK_ID and token not in self.vocabulary.token_to_id:
            return None
        return self.matrix[idx]
