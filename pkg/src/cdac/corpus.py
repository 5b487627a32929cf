"""Conversation corpora: Switchboard-style human-human transcripts,
human-machine transcripts with system state, annotations, and splits.

All parsers emit one canonical in-memory form (`Conversation` /
`ConversationSet`) and one canonical on-disk form (UTF-8 JSON lines, one
conversation object per line) so both kinds of data flow through a single
pipeline. Parsed sets are immutable by convention and safe to share.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

HH_SPEAKERS = ("caller_a", "caller_b")
HM_SPEAKERS = ("user", "system")

CONTINUATION_TAG = "+"


@dataclass(frozen=True)
class SystemState:
    """Machine-side context at one turn of a human-machine conversation."""

    current_topic: str
    previous_topic: str | None = None
    suggested_topic: str | None = None
    suggested_item: str | None = None
    user_id: str = ""


@dataclass(frozen=True)
class Utterance:
    turn_index: int
    speaker: str
    text: str
    da_label: str | None = None
    pos_tags: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    turns: tuple[Utterance, ...]
    states: tuple[SystemState, ...] | None = None
    partition: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.turns:
            raise DataError(f"conversation {self.conversation_id} is empty")
        if self.states is not None and len(self.states) != len(self.turns):
            raise DataError(
                f"conversation {self.conversation_id}: states ({len(self.states)}) "
                f"do not align with turns ({len(self.turns)})"
            )
        for i, turn in enumerate(self.turns):
            if turn.turn_index != i:
                raise DataError(
                    f"conversation {self.conversation_id}: turn_index {turn.turn_index} "
                    f"at position {i}"
                )

    @property
    def is_human_machine(self) -> bool:
        return self.states is not None or any(t.speaker in HM_SPEAKERS for t in self.turns)

    def eligible_turn_indices(self) -> list[int]:
        """Turns that get classified and pushed into the context window:
        every turn for human-human data, user turns for human-machine."""
        if self.is_human_machine:
            return [i for i, t in enumerate(self.turns) if t.speaker == "user"]
        return list(range(len(self.turns)))


@dataclass(frozen=True)
class ConversationSet:
    conversations: tuple[Conversation, ...]

    def __len__(self) -> int:
        return len(self.conversations)

    def __iter__(self):
        return iter(self.conversations)

    def utterance_count(self) -> int:
        return sum(len(c.turns) for c in self.conversations)

    def labeled_utterance_count(self) -> int:
        return sum(
            1 for c in self.conversations for t in c.turns if t.da_label is not None
        )

    def subset(self, conversation_ids) -> "ConversationSet":
        wanted = set(conversation_ids)
        return ConversationSet(
            tuple(c for c in self.conversations if c.conversation_id in wanted)
        )


@dataclass(frozen=True)
class DATagSet:
    """Ordered label inventory plus the raw-tag collapse table."""

    labels: tuple[str, ...]
    collapse_map: dict[str, str]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise DataError("tagset labels are not unique")
        bad = sorted(set(self.collapse_map.values()) - set(self.labels))
        if bad:
            raise DataError(f"collapse targets missing from label list: {bad}")
        object.__setattr__(
            self, "_index", {label: i for i, label in enumerate(self.labels)}
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise DataError(f"label {label!r} not in tagset") from None

    def collapse(self, raw_tag: str) -> str:
        """Collapse a raw transcript act tag to a working label.

        Raw tags carry decorations (secondary carets, parenthesised
        sub-codes, '@'/'*' markers, multi-tag lists). Normalization keeps
        the first tag of a list, strips decoration characters, preserves
        the caret-bearing labels that are labels in their own right, and
        otherwise cuts at the first caret before the table lookup.
        """
        tag = _normalize_raw_tag(raw_tag)
        if tag == CONTINUATION_TAG:
            return CONTINUATION_TAG
        if tag in self.collapse_map:
            return self.collapse_map[tag]
        if "^" in tag and not tag.startswith("^"):
            base = tag.split("^", 1)[0]
            if base in self.collapse_map:
                return self.collapse_map[base]
        raise DataError(f"raw act tag with no collapse entry: {raw_tag!r}")


def _normalize_raw_tag(raw_tag: str) -> str:
    tag = raw_tag.strip()
    tag = re.split(r"\s*[,;]\s*", tag)[0]
    tag = re.sub(r"[()@*]", "", tag)
    return tag


@dataclass(frozen=True)
class AnnotationSet:
    """One annotator's label per (conversation_id, turn_index) key."""

    labels: dict[tuple[str, int], str]
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AgreementResult:
    raw_agreement: float
    cohen_kappa: float


@dataclass(frozen=True)
class Splits:
    train: ConversationSet
    validation: ConversationSet
    test: ConversationSet

    def manifest(self) -> dict:
        return {
            "train": [c.conversation_id for c in self.train],
            "validation": [c.conversation_id for c in self.validation],
            "test": [c.conversation_id for c in self.test],
        }


# --------------------------------------------------------------------------
# Switchboard-style release parsing
# --------------------------------------------------------------------------

# Transcript markup: sound/aside annotations, brace-delimited coding
# (e.g. "{F uh, }"), disfluency brackets, slash-unit terminators. The
# cleanup keeps the spoken words and is a no-op on plain text.
_MARKUP_PATTERNS = [
    (re.compile(r"<<[^>]*>>"), " "),
    (re.compile(r"<[^>]*>"), " "),
    (re.compile(r"\{[A-Z]\s"), " "),
    (re.compile(r"[{}\[\]+/#]"), " "),
    (re.compile(r"\(\("), " "),
    (re.compile(r"\)\)"), " "),
    (re.compile(r"--"), " "),
]


def clean_transcript_text(text: str) -> str:
    out = text
    for pattern, repl in _MARKUP_PATTERNS:
        out = pattern.sub(repl, out)
    return re.sub(r"\s+", " ", out).strip()


_CALLER_MAP = {"A": "caller_a", "B": "caller_b"}

# Conversation numbers at or above this value form the held-out test
# partition of the release (40 conversations); everything below is the
# 1,115-conversation training partition.
TEST_PARTITION_THRESHOLD = 4000


def parse_swda(source_path, tagset: DATagSet, test_conversation_ids=None) -> ConversationSet:
    """Parse a Switchboard DA release directory into canonical conversations.

    Expects per-conversation CSV transcript tables (columns including
    conversation_no, act_tag, caller, text). Raw act tags are collapsed via
    the tagset; segment-continuation rows (raw tag "+") are merged into the
    preceding utterance by the same speaker (text joined with one space,
    label from the first segment). Each conversation is labeled with its
    train/test partition.
    """
    root = Path(source_path)
    if not root.exists():
        raise DataError(f"no such corpus directory: {root}")
    files = sorted(p for p in root.rglob("*.csv") if p.is_file())
    if not files:
        raise DataError(f"no transcript CSV files under {root}")

    explicit_test = set(test_conversation_ids) if test_conversation_ids else None
    by_conversation: dict[str, list[dict]] = {}
    for path in files:
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or "act_tag" not in reader.fieldnames:
                    raise DataError(f"{path}: not a transcript table (no act_tag column)")
                for row in reader:
                    conv_no = row["conversation_no"].strip()
                    by_conversation.setdefault(conv_no, []).append(row)
        except OSError as exc:
            raise DataError(f"cannot read transcript file {path}: {exc}") from exc
        except csv.Error as exc:
            raise DataError(f"{path}: malformed CSV: {exc}") from exc

    conversations = []
    for conv_no in sorted(by_conversation, key=_conversation_sort_key):
        rows = by_conversation[conv_no]
        rows.sort(key=_row_sort_key)
        turns = _merge_rows(conv_no, rows, tagset)
        if not turns:
            continue
        if explicit_test is not None:
            partition = "test" if conv_no in explicit_test else "train"
        else:
            partition = (
                "test"
                if _conversation_sort_key(conv_no) >= TEST_PARTITION_THRESHOLD
                else "train"
            )
        conversations.append(
            Conversation(
                conversation_id=f"sw{conv_no}",
                turns=tuple(turns),
                states=None,
                partition=partition,
            )
        )
    return ConversationSet(tuple(conversations))


def _conversation_sort_key(conv_no: str):
    try:
        return int(conv_no)
    except ValueError:
        return 10**9


def _row_sort_key(row: dict):
    def as_int(name):
        val = row.get(name, "")
        try:
            return int(val)
        except (TypeError, ValueError):
            return 0

    return (as_int("transcript_index"), as_int("utterance_index"), as_int("subutterance_index"))


def _merge_rows(conv_no: str, rows: list[dict], tagset: DATagSet) -> list[Utterance]:
    from .features import tokenize  # local import: avoid cycle at module load

    merged: list[dict] = []
    for row in rows:
        caller = row.get("caller", "").strip().upper()[:1]
        speaker = _CALLER_MAP.get(caller)
        if speaker is None:
            raise DataError(f"conversation {conv_no}: unknown caller {row.get('caller')!r}")
        text = clean_transcript_text(row.get("text", ""))
        label = tagset.collapse(row["act_tag"])
        if label == CONTINUATION_TAG:
            for prev in reversed(merged):
                if prev["speaker"] == speaker:
                    if text:
                        prev["text"] = (prev["text"] + " " + text).strip()
                    prev["pos"] = None
                    break
            # Orphan continuations (no same-speaker antecedent) are dropped.
            continue
        merged.append(
            {"speaker": speaker, "text": text, "label": label, "pos": row.get("pos")}
        )

    turns = []
    for i, item in enumerate(merged):
        pos_tags = None
        if item["pos"]:
            tags = _extract_pos_tags(item["pos"])
            if tags is not None and len(tags) == len(tokenize(item["text"])):
                pos_tags = tuple(tags)
        turns.append(
            Utterance(
                turn_index=i,
                speaker=item["speaker"],
                text=item["text"],
                da_label=item["label"],
                pos_tags=pos_tags,
            )
        )
    return turns


def _extract_pos_tags(pos_field: str):
    tags = []
    for chunk in pos_field.split():
        if "/" not in chunk:
            return None
        tags.append(chunk.rsplit("/", 1)[1])
    return tags or None


def make_official_splits(conversation_set: ConversationSet, seed: int) -> Splits:
    """Fixed test partition; seeded 1,000 / 115 shuffle of the training
    partition (proportional for smaller fixtures)."""
    if any(c.partition is None for c in conversation_set):
        raise DataError("partition labels absent; parse the official release first")
    test = sorted(
        (c for c in conversation_set if c.partition == "test"),
        key=lambda c: c.conversation_id,
    )
    pool = sorted(
        (c for c in conversation_set if c.partition == "train"),
        key=lambda c: c.conversation_id,
    )
    if not pool:
        raise DataError("no training-partition conversations to split")
    n_val = 115 if len(pool) == 1115 else max(1, round(len(pool) * 115 / 1115))
    if n_val >= len(pool):
        raise DataError(f"training partition too small to split: {len(pool)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return Splits(
        train=ConversationSet(tuple(shuffled[: len(pool) - n_val])),
        validation=ConversationSet(tuple(shuffled[len(pool) - n_val:])),
        test=ConversationSet(tuple(test)),
    )


def proportional_splits(
    conversation_set: ConversationSet, seed: int, val_fraction=0.1, test_fraction=0.2
) -> Splits:
    """Seeded conversation-level split for corpora without an official
    partition (synthetic and human-machine data)."""
    convs = sorted(conversation_set, key=lambda c: c.conversation_id)
    if len(convs) < 3:
        raise DataError("need at least 3 conversations to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(convs))
    shuffled = [convs[i] for i in order]
    n_test = max(1, round(len(convs) * test_fraction))
    n_val = max(1, round(len(convs) * val_fraction))
    if n_test + n_val >= len(convs):
        raise DataError("not enough conversations for the requested split")
    test = shuffled[:n_test]
    val = shuffled[n_test : n_test + n_val]
    train = shuffled[n_test + n_val :]
    return Splits(
        train=ConversationSet(tuple(train)),
        validation=ConversationSet(tuple(val)),
        test=ConversationSet(tuple(test)),
    )


# --------------------------------------------------------------------------
# Canonical JSON-lines conversation files
# --------------------------------------------------------------------------


def write_canonical(conversation_set: ConversationSet, path) -> None:
    """One conversation object per line, UTF-8, stable key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for conv in conversation_set:
            fh.write(json.dumps(_conversation_to_obj(conv), sort_keys=True))
            fh.write("\n")


def _conversation_to_obj(conv: Conversation) -> dict:
    turns = []
    for i, turn in enumerate(conv.turns):
        obj: dict = {"speaker": turn.speaker, "text": turn.text}
        if turn.da_label is not None:
            obj["da"] = turn.da_label
        if turn.pos_tags is not None:
            obj["pos"] = list(turn.pos_tags)
        if conv.states is not None:
            state = conv.states[i]
            obj["state"] = {
                "topic": state.current_topic,
                "previous_topic": state.previous_topic,
                "suggested_topic": state.suggested_topic,
                "suggested_item": state.suggested_item,
                "user_id": state.user_id,
            }
        turns.append(obj)
    return {"conversation_id": conv.conversation_id, "turns": turns}


def read_canonical(path, tagset: DATagSet | None = None) -> ConversationSet:
    """Parse a canonical conversation file. Labels are validated against
    `tagset` when one is given. States must be present on all turns of a
    conversation or on none of them."""
    conversations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            conversations.append(_conversation_from_obj(obj, path, lineno, tagset))
    return ConversationSet(tuple(conversations))


def _conversation_from_obj(obj, path, lineno, tagset) -> Conversation:
    try:
        conv_id = obj["conversation_id"]
        raw_turns = obj["turns"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}:{lineno}: malformed conversation record: {exc}") from exc
    if not isinstance(raw_turns, list) or not raw_turns:
        raise DataError(f"{path}:{lineno}: conversation {conv_id} has no turns")

    turns, states = [], []
    for i, t in enumerate(raw_turns):
        try:
            speaker = t["speaker"]
            text = t["text"]
        except (KeyError, TypeError) as exc:
            raise DataError(
                f"{path}:{lineno}: turn {i} of {conv_id} malformed: {exc}"
            ) from exc
        if speaker not in HH_SPEAKERS + HM_SPEAKERS:
            raise DataError(f"{path}:{lineno}: turn {i}: unknown speaker {speaker!r}")
        label = t.get("da")
        if label is not None and tagset is not None and label not in tagset:
            raise DataError(f"{path}:{lineno}: turn {i}: label {label!r} not in tagset")
        pos = t.get("pos")
        turns.append(
            Utterance(
                turn_index=i,
                speaker=speaker,
                text=text,
                da_label=label,
                pos_tags=tuple(pos) if pos is not None else None,
            )
        )
        if "state" in t and t["state"] is not None:
            s = t["state"]
            try:
                states.append(
                    SystemState(
                        current_topic=s["topic"],
                        previous_topic=s.get("previous_topic"),
                        suggested_topic=s.get("suggested_topic"),
                        suggested_item=s.get("suggested_item"),
                        user_id=s.get("user_id", ""),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise DataError(
                    f"{path}:{lineno}: turn {i}: malformed state: {exc}"
                ) from exc
        else:
            states.append(None)

    have_states = [s is not None for s in states]
    if any(have_states) and not all(have_states):
        missing = have_states.index(False)
        raise DataError(
            f"{path}:{lineno}: conversation {conv_id}: state missing for turn {missing}"
        )
    return Conversation(
        conversation_id=conv_id,
        turns=tuple(turns),
        states=tuple(states) if all(have_states) else None,
    )


def parse_hm_corpus(source_path, tagset: DATagSet, topic_vocab: list[str]) -> ConversationSet:
    """Parse a human-machine conversation file (canonical JSON lines).

    Every turn must carry a system state with a known topic; speakers are
    user/system; only user turns may carry a DA label.
    """
    conversation_set = read_canonical(source_path, tagset=tagset)
    topics = set(topic_vocab)
    for conv in conversation_set:
        if conv.states is None:
            raise DataError(
                f"{source_path}: conversation {conv.conversation_id}: "
                f"states missing (human-machine corpora require per-turn state)"
            )
        for turn, state in zip(conv.turns, conv.states):
            if turn.speaker not in HM_SPEAKERS:
                raise DataError(
                    f"conversation {conv.conversation_id} turn {turn.turn_index}: "
                    f"speaker {turn.speaker!r} is not a human-machine role"
                )
            if turn.speaker != "user" and turn.da_label is not None:
                raise DataError(
                    f"conversation {conv.conversation_id} turn {turn.turn_index}: "
                    f"only user turns may carry a DA label"
                )
            for topic in (state.current_topic, state.previous_topic, state.suggested_topic):
                if topic is not None and topic not in topics:
                    raise DataError(
                        f"conversation {conv.conversation_id} turn {turn.turn_index}: "
                        f"unknown topic {topic!r}"
                    )
    return conversation_set


def read_topics(path) -> list[str]:
    topics = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                topics.append(line)
    if not topics:
        raise DataError(f"no topics in {path}")
    return topics


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------


def read_annotations(path) -> AnnotationSet:
    """JSON-lines records: {"conversation_id", "turn_index", "label"}."""
    labels: dict[tuple[str, int], str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                key = (obj["conversation_id"], int(obj["turn_index"]))
                labels[key] = obj["label"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed annotation: {exc}") from exc
    return AnnotationSet(labels=labels)


def write_annotations(annotations: AnnotationSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (conv_id, turn_index) in sorted(annotations.labels):
            fh.write(
                json.dumps(
                    {
                        "conversation_id": conv_id,
                        "turn_index": turn_index,
                        "label": annotations.labels[(conv_id, turn_index)],
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def merge_annotations(a: AnnotationSet, b: AnnotationSet, seed: int) -> AnnotationSet:
    """Resolve two annotators into one set: agreement stands, disagreements
    are a seeded uniform choice between the two labels."""
    if set(a.labels) != set(b.labels):
        diff = sorted(set(a.labels) ^ set(b.labels))
        raise DataError(f"annotation key sets differ: {diff[:10]}{'...' if len(diff) > 10 else ''}")
    rng = np.random.default_rng(seed)
    merged = {}
    for key in sorted(a.labels):
        la, lb = a.labels[key], b.labels[key]
        if la == lb:
            merged[key] = la
        else:
            merged[key] = la if rng.integers(2) == 0 else lb
    return AnnotationSet(labels=merged, meta={"tie_break_seed": seed})


def compute_agreement(a: AnnotationSet, b: AnnotationSet) -> AgreementResult:
    """Raw agreement and Cohen's kappa with chance from per-annotator
    marginal label distributions."""
    if set(a.labels) != set(b.labels):
        diff = sorted(set(a.labels) ^ set(b.labels))
        raise DataError(f"annotation key sets differ: {diff[:10]}{'...' if len(diff) > 10 else ''}")
    n = len(a.labels)
    if n == 0:
        raise DataError("cannot compute agreement over an empty key set")
    matches = sum(1 for k in a.labels if a.labels[k] == b.labels[k])
    p_o = matches / n

    label_set = sorted(set(a.labels.values()) | set(b.labels.values()))
    pa = {l: 0 for l in label_set}
    pb = {l: 0 for l in label_set}
    for k in a.labels:
        pa[a.labels[k]] += 1
        pb[b.labels[k]] += 1
    p_e = sum((pa[l] / n) * (pb[l] / n) for l in label_set)

    if p_e >= 1.0 - 1e-15:
        if p_o >= 1.0 - 1e-15:
            return AgreementResult(raw_agreement=p_o, cohen_kappa=1.0)
        raise DataError("degenerate marginals: expected agreement is 1 but observed is not")
    kappa = (p_o - p_e) / (1.0 - p_e)
    return AgreementResult(raw_agreement=p_o, cohen_kappa=kappa)


def label_frequency(conversation_set: ConversationSet, tagset: DATagSet):
    """(label, count, percentage) rows over labeled utterances, most
    frequent first."""
    counts: dict[str, int] = {}
    for conv in conversation_set:
        for turn in conv.turns:
            if turn.da_label is not None:
                if turn.da_label not in tagset:
                    raise DataError(f"label {turn.da_label!r} not in tagset")
                counts[turn.da_label] = counts.get(turn.da_label, 0) + 1
    total = sum(counts.values())
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(label, count, 100.0 * count / total) for label, count in rows]
