"""Metrics, paired significance testing, the feature-ablation harness, the
context-window sweep, and report assembly.

Significance is McNemar's test on paired per-utterance correctness with the
continuity correction, falling back to an exact two-sided binomial test
when the discordant count is small (< 10). Each report embeds the seed,
split hashes, and configuration fingerprint needed to reproduce it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import ConversationSet, Splits
from .errors import DataError
from .util import stable_hash

CHI2_CRITICAL_05 = 3.841


def micro_accuracy(predictions, gold) -> float:
    """Pooled accuracy: matches / total."""
    if len(predictions) != len(gold):
        raise DataError(
            f"prediction/gold length mismatch: {len(predictions)} vs {len(gold)}"
        )
    if not gold:
        raise DataError("cannot compute accuracy over an empty sequence")
    return sum(1 for p, g in zip(predictions, gold) if p == g) / len(gold)


@dataclass(frozen=True)
class EvalReport:
    micro_accuracy: float
    n: int
    labels: tuple[str, ...]
    confusion: np.ndarray = field(compare=False)
    per_class: dict = field(compare=False)
    fingerprint: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        return json.dumps(
            {
                "micro_accuracy": self.micro_accuracy,
                "n": self.n,
                "labels": list(self.labels),
                "confusion": self.confusion.tolist(),
                "per_class": self.per_class,
                "fingerprint": self.fingerprint,
            },
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = [
            f"n = {self.n}",
            f"micro accuracy = {self.micro_accuracy:.4f}",
            "",
            f"{'label':<18}{'precision':>10}{'recall':>10}{'support':>9}",
        ]
        for label in self.labels:
            stats = self.per_class[label]
            lines.append(
                f"{label:<18}{stats['precision']:>10.3f}{stats['recall']:>10.3f}"
                f"{stats['support']:>9d}"
            )
        return "\n".join(lines)


def build_report(predictions, gold, labels, fingerprint: dict | None = None) -> EvalReport:
    """Confusion matrix, per-class precision/recall diagnostics, and the
    pooled accuracy (trace / n by construction)."""
    acc = micro_accuracy(predictions, gold)
    label_list = [l for l in labels if l in set(gold) | set(predictions)]
    index = {l: i for i, l in enumerate(label_list)}
    confusion = np.zeros((len(label_list), len(label_list)), dtype=np.int64)
    for p, g in zip(predictions, gold):
        confusion[index[g], index[p]] += 1
    per_class = {}
    for label, i in index.items():
        tp = int(confusion[i, i])
        support = int(confusion[i].sum())
        predicted = int(confusion[:, i].sum())
        per_class[label] = {
            "precision": tp / predicted if predicted else 0.0,
            "recall": tp / support if support else 0.0,
            "support": support,
        }
    return EvalReport(
        micro_accuracy=acc,
        n=len(gold),
        labels=tuple(label_list),
        confusion=confusion,
        per_class=per_class,
        fingerprint=fingerprint or {},
    )


def evaluate_model(model, conversation_set: ConversationSet, label_mask=None) -> EvalReport:
    """Causal predictions over a conversation set, scored on gold-labeled
    eligible turns."""
    from .model import predictions_and_gold  # local import: avoid cycle

    pred, gold = predictions_and_gold(model, conversation_set, label_mask)
    fingerprint = {
        "model": model.fingerprint(),
        "corpus": corpus_hash(conversation_set),
        "label_mask": model.label_mask if label_mask is None else sorted(label_mask),
    }
    return build_report(pred, gold, model.tagset.labels, fingerprint)


def corpus_hash(conversation_set: ConversationSet) -> str:
    return stable_hash([c.conversation_id for c in conversation_set])


def splits_hash(splits: Splits) -> dict:
    return {
        "train": corpus_hash(splits.train),
        "validation": corpus_hash(splits.validation),
        "test": corpus_hash(splits.test),
    }


# ---------------------------------------------------------------------------
# McNemar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    significant_at_0_05: bool
    method: str
    b: int
    c: int
    p_value: float | None = None


def mcnemar(preds_a, preds_b, gold) -> McNemarResult:
    """Paired test on the discordant correctness counts of two classifiers.

    b = A correct & B wrong, c = A wrong & B correct. Continuity-corrected
    chi-squared for b + c >= 10, exact two-sided binomial below that.
    """
    if not (len(preds_a) == len(preds_b) == len(gold)):
        raise DataError("McNemar inputs must be aligned")
    b = sum(1 for a, bb, g in zip(preds_a, preds_b, gold) if a == g and bb != g)
    c = sum(1 for a, bb, g in zip(preds_a, preds_b, gold) if a != g and bb == g)
    n = b + c
    if n == 0:
        return McNemarResult(0.0, False, "degenerate", b, c)
    if n < 10:
        k = min(b, c)
        p = 2.0 * sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
        p = min(1.0, p)
        return McNemarResult(float(n), p < 0.05, "exact_binomial", b, c, p_value=p)
    statistic = (abs(b - c) - 1.0) ** 2 / n
    return McNemarResult(statistic, statistic > CHI2_CRITICAL_05, "chi_squared", b, c)


# ---------------------------------------------------------------------------
# Ablation and context sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationPlan:
    """The four lexical x syntactic masking cells, fixed context window."""

    context_window: int = 1

    @property
    def cells(self):
        return (
            {"use_lexical_features": False, "use_syntactic_features": False},
            {"use_lexical_features": True, "use_syntactic_features": False},
            {"use_lexical_features": False, "use_syntactic_features": True},
            {"use_lexical_features": True, "use_syntactic_features": True},
        )


def run_ablation(trainer, splits: Splits, plan: AblationPlan, seed: int = 0):
    """Train one model per masking cell with identical schedule/seed/splits,
    differing only in which feature blocks are zeroed (the architecture and
    parameter count stay constant). `trainer(config_overrides, splits,
    seed)` must return (test_accuracy, parameter_count).

    Returns rows ordered as the plan's cells, with deltas vs the full cell.
    """
    from .model import ModelConfig  # noqa: F401  (documentation of the contract)

    rows = []
    for cell in plan.cells:
        overrides = dict(cell)
        overrides["context_window"] = plan.context_window
        accuracy, n_params = trainer(overrides, splits, seed)
        rows.append(
            {
                "lexical": cell["use_lexical_features"],
                "syntactic": cell["use_syntactic_features"],
                "accuracy": accuracy,
                "parameters": n_params,
            }
        )
    full = rows[-1]["accuracy"]
    for row in rows:
        row["delta_vs_full"] = row["accuracy"] - full
    return {
        "rows": rows,
        "context_window": plan.context_window,
        "seed": seed,
        "splits": splits_hash(splits),
    }


def context_sweep(trainer, splits: Splits, windows=(2, 3, 4), seed: int = 0):
    """One training per window size, shared seed and splits.

    `trainer(config_overrides, splits, seed)` as in run_ablation.
    """
    rows = []
    for window in windows:
        accuracy, _ = trainer({"context_window": int(window)}, splits, seed)
        rows.append({"context_window": int(window), "accuracy": accuracy})
    return {"rows": rows, "seed": seed, "splits": splits_hash(splits)}


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table for report output."""
    widths = {
        col: max(len(col), *(len(_fmt(r.get(col))) for r in rows)) if rows else len(col)
        for col in columns
    }
    header = "  ".join(col.ljust(widths[col]) for col in columns)
    sep = "  ".join("-" * widths[col] for col in columns)
    body = [
        "  ".join(_fmt(r.get(col)).ljust(widths[col]) for col in columns) for r in rows
    ]
    return "\n".join([header, sep] + body)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
