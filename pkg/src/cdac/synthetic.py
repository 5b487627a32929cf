"""Synthetic conversation generators.

Real open-domain human-machine transcripts cannot be redistributed, so the
human-machine generator produces a distribution-matched stand-in: templated
user utterances per DA class, interleaved system turns, and system-state
transitions (topic persistence, suggestion-driven switches).

The DA sequence of each conversation is drawn from a Metropolis-style
kernel: with probability `independent_mix` the next act is a fresh draw
from the target distribution; otherwise a uniformly proposed act is
accepted with probability min(1, p(new)/p(current)), else the act repeats.
Both components leave the target distribution invariant and the first act
is drawn from it directly, so every turn's marginal label distribution
equals the target exactly while consecutive acts stay correlated (the
context signal a conversation-aware classifier can exploit).

States are generated conditioned on the accompanying act: pending
suggestions co-occur mostly with accept/reject turns, and accepted topic
suggestions switch the current topic. That makes the system-state features
genuinely predictive without disturbing the label marginals.
"""

from __future__ import annotations

import numpy as np

from .corpus import Conversation, ConversationSet, DATagSet, SystemState, Utterance
from .errors import DataError
from . import resources

INDEPENDENT_MIX = 0.35

_ACCEPT_REJECT = ("aa", "ar", "no")
_QUESTIONS = ("qo", "qw", "qy", "qy^d")


def _check_distribution(dist: dict[str, float], tagset: DATagSet) -> tuple[list[str], np.ndarray]:
    labels = list(dist.keys())
    probs = np.array([dist[l] for l in labels], dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise DataError(f"label distribution sums to {probs.sum():.12f}, not 1")
    if np.any(probs < 0):
        raise DataError("label distribution has negative entries")
    for label in labels:
        if label not in tagset:
            raise DataError(f"distribution label {label!r} not in tagset")
    return labels, probs


class _ActChain:
    def __init__(self, labels, probs, rng):
        self.labels = labels
        self.probs = probs
        self.rng = rng

    def start(self) -> int:
        return int(self.rng.choice(len(self.labels), p=self.probs))

    def step(self, current: int) -> int:
        if self.rng.random() < INDEPENDENT_MIX:
            return int(self.rng.choice(len(self.labels), p=self.probs))
        proposal = int(self.rng.integers(len(self.labels)))
        ratio = self.probs[proposal] / max(self.probs[current], 1e-300)
        if self.rng.random() < min(1.0, ratio):
            return proposal
        return current

    def sequence(self, length: int) -> list[str]:
        state = self.start()
        out = [self.labels[state]]
        for _ in range(length - 1):
            state = self.step(state)
            out.append(self.labels[state])
        return out


def _fill(template: str, rng, fillers, topic: str) -> str:
    out = template
    if "{item}" in out:
        items = fillers["items_by_topic"].get(topic) or fillers["items_by_topic"]["Music"]
        out = out.replace("{item}", str(rng.choice(items)))
    if "{animal}" in out:
        out = out.replace("{animal}", str(rng.choice(fillers["animal"])))
    if "{adj}" in out:
        out = out.replace("{adj}", str(rng.choice(fillers["adj"])))
    if "{topic}" in out:
        out = out.replace("{topic}", topic.lower())
    return out


def _render_user_text(label: str, rng, bank, topic: str, human_human: bool) -> str:
    if human_human:
        templates = bank["human_human_extra"].get(label) or bank["user"].get(label)
    else:
        templates = bank["user"].get(label)
    if not templates:
        raise DataError(f"no templates for label {label!r}")
    text = _fill(str(rng.choice(templates)), rng, bank["fillers"], topic)
    if rng.random() < 0.3:
        text = f"{rng.choice(bank['prefixes'])} {text}"
    if label in _QUESTIONS:
        if rng.random() < 0.5:
            text = text + "?"
    elif rng.random() < 0.15:
        text = text + "."
    return text


def generate_synthetic_hm(
    n_conversations: int,
    target_distribution: dict[str, float] | None = None,
    topic_vocab: list[str] | None = None,
    seed: int = 0,
    tagset: DATagSet | None = None,
) -> ConversationSet:
    """Generate a synthetic human-machine corpus.

    User turns carry DA labels drawn so that their marginal distribution is
    exactly `target_distribution`; system turns are unlabeled. Every turn
    carries a SystemState. Deterministic under `seed`.
    """
    tagset = tagset if tagset is not None else resources.default_tagset()
    dist = target_distribution if target_distribution is not None else resources.hm_label_distribution()
    topics = list(topic_vocab) if topic_vocab is not None else resources.default_topics()
    labels, probs = _check_distribution(dist, tagset)
    bank = resources.template_bank()
    rng = np.random.default_rng(seed)
    chain = _ActChain(labels, probs, rng)

    conversations = []
    for idx in range(n_conversations):
        user_id = f"user{idx:04d}"
        n_user_turns = int(rng.integers(8, 17))
        das = chain.sequence(n_user_turns)

        # Outstanding suggestion at each user turn, conditioned on its act.
        pending: list[tuple[str, str] | None] = []
        cur = str(rng.choice([t for t in topics if t != "Phatic"] or topics))
        for t, da in enumerate(das):
            if t == 0:
                pending.append(None)
                continue
            p = 0.8 if da in _ACCEPT_REJECT else (0.05 if da in _QUESTIONS else 0.15)
            if rng.random() < p:
                if rng.random() < 0.5:
                    choices = [x for x in topics if x != cur]
                    pending.append(("topic", str(rng.choice(choices))))
                else:
                    items = bank["fillers"]["items_by_topic"].get(cur) or ["something new"]
                    pending.append(("item", str(rng.choice(items))))
            else:
                pending.append(None)

        turns: list[Utterance] = []
        states: list[SystemState] = []
        prev: str | None = None
        for t, da in enumerate(das):
            sugg = pending[t]
            user_state = SystemState(
                current_topic=cur,
                previous_topic=prev,
                suggested_topic=sugg[1] if sugg and sugg[0] == "topic" else None,
                suggested_item=sugg[1] if sugg and sugg[0] == "item" else None,
                user_id=user_id,
            )
            text = _render_user_text(da, rng, bank, cur, human_human=False)
            turns.append(
                Utterance(turn_index=len(turns), speaker="user", text=text, da_label=da)
            )
            states.append(user_state)

            # Topic effects of this user turn.
            if sugg and sugg[0] == "topic" and da == "aa":
                prev, cur = cur, sugg[1]
            elif da in ("qo", "qw", "sd", "sv") and rng.random() < 0.2:
                choices = [x for x in topics if x != cur]
                prev, cur = cur, str(rng.choice(choices))

            next_sugg = pending[t + 1] if t + 1 < len(das) else None
            if next_sugg is not None:
                kind = "suggest_topic" if next_sugg[0] == "topic" else "suggest_item"
                sys_text = str(rng.choice(bank["system"][kind]))
                sys_text = sys_text.replace("{stopic}", next_sugg[1]).replace(
                    "{sitem}", next_sugg[1]
                )
            elif t == len(das) - 1:
                sys_text = "nice to talk to you, good bye!"
            else:
                sys_text = _fill(
                    str(rng.choice(bank["system"]["plain"])), rng, bank["fillers"], cur
                )
            turns.append(
                Utterance(turn_index=len(turns), speaker="system", text=sys_text)
            )
            states.append(
                SystemState(
                    current_topic=cur,
                    previous_topic=prev,
                    suggested_topic=next_sugg[1] if next_sugg and next_sugg[0] == "topic" else None,
                    suggested_item=next_sugg[1] if next_sugg and next_sugg[0] == "item" else None,
                    user_id=user_id,
                )
            )

        conversations.append(
            Conversation(
                conversation_id=f"synth_hm_{idx:04d}",
                turns=tuple(turns),
                states=tuple(states),
            )
        )
    return ConversationSet(tuple(conversations))


def generate_synthetic_hh(
    n_conversations: int,
    target_distribution: dict[str, float] | None = None,
    seed: int = 0,
    tagset: DATagSet | None = None,
) -> ConversationSet:
    """Generate a synthetic human-human corpus (both speakers labeled, no
    system state). Shares the template bank with the human-machine
    generator so the two domains overlap the way pretraining needs."""
    tagset = tagset if tagset is not None else resources.default_tagset()
    dist = target_distribution if target_distribution is not None else resources.hh_label_distribution()
    labels, probs = _check_distribution(dist, tagset)
    bank = resources.template_bank()
    topics = resources.default_topics()
    rng = np.random.default_rng(seed)
    chain = _ActChain(labels, probs, rng)

    conversations = []
    for idx in range(n_conversations):
        n_turns = int(rng.integers(12, 25))
        das = chain.sequence(n_turns)
        topic = str(rng.choice(topics))
        speaker = "caller_a"
        turns = []
        for t, da in enumerate(das):
            if t > 0:
                if rng.random() < 0.75:
                    speaker = "caller_b" if speaker == "caller_a" else "caller_a"
                if rng.random() < 0.1:
                    topic = str(rng.choice(topics))
            text = _render_user_text(da, rng, bank, topic, human_human=True)
            turns.append(
                Utterance(turn_index=t, speaker=speaker, text=text, da_label=da)
            )
        conversations.append(
            Conversation(conversation_id=f"synth_hh_{idx:04d}", turns=tuple(turns))
        )
    return ConversationSet(tuple(conversations))
