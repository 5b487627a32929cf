"""Command-line entry point.

Subcommands: prepare, prepare-hm, synth, train, finetune, evaluate,
predict (with --stream), baseline, ablate, sweep, agreement.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/numeric
error. Diagnostics go to stderr only; reports and predictions go to
stdout. Tunables resolve flag > config file > default, and every emitted
report embeds the effective configuration. The CDAC_DATA_DIR environment
variable supplies a default root for relative input paths; flags always
override.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation, resources, synthetic
from .corpus import (
    ConversationSet,
    Splits,
    compute_agreement,
    make_official_splits,
    parse_hm_corpus,
    parse_swda,
    proportional_splits,
    read_annotations,
    read_canonical,
    read_topics,
    write_canonical,
)
from .errors import CdacError, DataError, UsageError
from .features import Embeddings, load_embeddings, random_embeddings, tokenize
from .model import (
    FinetuneConfig,
    Model,
    ModelConfig,
    StreamingClassifier,
    TrainingConfig,
    build_model,
    count_parameters,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
)


@dataclasses.dataclass
class RunConfig:
    """All tunables with their defaults; loadable from a JSON config file
    and overridable by flags."""

    context_window: int = 3
    learning_rate: float = 1e-3
    finetune_learning_rate: float = 1e-4
    batch_size: int = 64
    dropout: float = 0.5
    word_embedding_dim: int = 300
    pos_embedding_dim: int = 50
    max_len: int = 60
    hidden_size: int = 100
    filters: int = 100
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    min_count: int = 2
    soft_context: bool = False
    teacher_forcing: bool = True

    @classmethod
    def resolve(cls, config_path, flag_values: dict) -> "RunConfig":
        values = dataclasses.asdict(cls())
        if config_path:
            with open(_resolve_input(config_path), encoding="utf-8") as fh:
                try:
                    loaded = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise DataError(f"config file {config_path}: {exc}") from exc
            unknown = sorted(set(loaded) - set(values))
            if unknown:
                raise DataError(f"config file {config_path}: unknown keys {unknown}")
            values.update(loaded)
        for key, val in flag_values.items():
            if val is not None:
                values[key] = val
        return cls(**values)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_input(path: str) -> str:
    """Relative input paths fall back to CDAC_DATA_DIR when not found."""
    p = Path(path)
    if p.exists() or p.is_absolute():
        return str(p)
    root = os.environ.get("CDAC_DATA_DIR")
    if root and (Path(root) / p).exists():
        return str(Path(root) / p)
    return str(p)


def _eprint(*args):
    print(*args, file=sys.stderr)


def _load_topics(path: str | None) -> list[str]:
    if path:
        return read_topics(_resolve_input(path))
    return resources.default_topics()


def _load_corpus(path: str, tagset) -> ConversationSet:
    return read_canonical(_resolve_input(path), tagset=tagset)


def _load_splits(corpus: ConversationSet, splits_path: str | None, corpus_path: str, seed: int) -> Splits:
    """Split manifest beside the corpus when present, otherwise a seeded
    proportional conversation split."""
    candidate = splits_path or (corpus_path + ".splits.json")
    candidate = _resolve_input(candidate)
    if Path(candidate).exists():
        with open(candidate, encoding="utf-8") as fh:
            manifest = json.load(fh)
        return Splits(
            train=corpus.subset(manifest["train"]),
            validation=corpus.subset(manifest["validation"]),
            test=corpus.subset(manifest["test"]),
        )
    return proportional_splits(corpus, seed=seed)


def _embeddings_for(corpus: ConversationSet, args, run_cfg: RunConfig) -> Embeddings:
    if getattr(args, "embeddings", None):
        return load_embeddings(
            _resolve_input(args.embeddings), expected_dim=run_cfg.word_embedding_dim
        )
    _eprint(
        "note: no --embeddings file given; using seeded random vectors "
        f"(dim={run_cfg.word_embedding_dim})"
    )
    tokens = set()
    for conv in corpus:
        for turn in conv.turns:
            tokens.update(tokenize(turn.text))
    return random_embeddings(tokens, run_cfg.word_embedding_dim, seed=run_cfg.seed)


def _model_config(run_cfg: RunConfig, tagset, topics, overrides: dict | None = None) -> ModelConfig:
    values = {
        "num_classes": len(tagset),
        "topic_vocab_size": len(topics),
        "context_window": run_cfg.context_window,
        "hidden_size": run_cfg.hidden_size,
        "dropout": run_cfg.dropout,
        "word_embedding_dim": run_cfg.word_embedding_dim,
        "pos_embedding_dim": run_cfg.pos_embedding_dim,
        "max_len": run_cfg.max_len,
        "filters": run_cfg.filters,
        "soft_context": run_cfg.soft_context,
    }
    values.update(overrides or {})
    return ModelConfig(**values)


def _training_config(run_cfg: RunConfig, seed=None) -> TrainingConfig:
    return TrainingConfig(
        learning_rate=run_cfg.learning_rate,
        batch_size=run_cfg.batch_size,
        max_epochs=run_cfg.max_epochs,
        patience=run_cfg.patience,
        seed=run_cfg.seed if seed is None else seed,
        teacher_forcing=run_cfg.teacher_forcing,
    )


def _train_once(run_cfg, splits, tagset, topics, embeddings, overrides=None, seed=None):
    """Shared trainer for train/ablate/sweep: returns (test_accuracy,
    parameter_count, model, history)."""
    config = _model_config(run_cfg, tagset, topics, overrides)
    seed = run_cfg.seed if seed is None else seed
    model = build_model(
        splits.train, tagset, topics, embeddings, config, seed=seed,
        min_count=run_cfg.min_count,
    )
    model, history = train(splits, model, _training_config(run_cfg, seed))
    report = evaluation.evaluate_model(model, splits.test)
    return report.micro_accuracy, count_parameters(model.params), model, history


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_prepare(args) -> int:
    tagset = resources.default_tagset(
        _resolve_input(args.collapse_map) if args.collapse_map else None
    )
    corpus = parse_swda(_resolve_input(args.swda), tagset)
    write_canonical(corpus, args.out)
    splits = make_official_splits(corpus, seed=args.seed)
    with open(args.out + ".splits.json", "w", encoding="utf-8") as fh:
        json.dump(splits.manifest(), fh, sort_keys=True, indent=2)
    print(
        json.dumps(
            {
                "conversations": len(corpus),
                "utterances": corpus.utterance_count(),
                "train": len(splits.train),
                "validation": len(splits.validation),
                "test": len(splits.test),
                "out": args.out,
                "seed": args.seed,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_prepare_hm(args) -> int:
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    corpus = parse_hm_corpus(_resolve_input(args.infile), tagset, topics)
    write_canonical(corpus, args.out)
    print(
        json.dumps(
            {
                "conversations": len(corpus),
                "utterances": corpus.utterance_count(),
                "labeled_user_turns": corpus.labeled_utterance_count(),
                "out": args.out,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_synth(args) -> int:
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    if args.dist:
        with open(_resolve_input(args.dist), encoding="utf-8") as fh:
            dist = json.load(fh)
    else:
        dist = None
    if args.kind == "hh":
        corpus = synthetic.generate_synthetic_hh(
            args.n, dist, seed=args.seed, tagset=tagset
        )
    else:
        corpus = synthetic.generate_synthetic_hm(
            args.n, dist, topics, seed=args.seed, tagset=tagset
        )
    write_canonical(corpus, args.out)
    print(
        json.dumps(
            {
                "conversations": len(corpus),
                "utterances": corpus.utterance_count(),
                "labeled": corpus.labeled_utterance_count(),
                "kind": args.kind,
                "seed": args.seed,
                "out": args.out,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_train(args) -> int:
    run_cfg = RunConfig.resolve(args.config, _flag_overrides(args))
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    corpus = _load_corpus(args.corpus, tagset)
    splits = _load_splits(corpus, args.splits, args.corpus, run_cfg.seed)
    embeddings = _embeddings_for(splits.train, args, run_cfg)
    accuracy, n_params, model, history = _train_once(
        run_cfg, splits, tagset, topics, embeddings
    )
    save_checkpoint(
        model,
        args.out,
        extra_provenance={
            "run_config": dataclasses.asdict(run_cfg),
            "splits": evaluation.splits_hash(splits),
            "history": history,
        },
    )
    print(
        json.dumps(
            {
                "checkpoint": args.out,
                "epochs_run": len(history),
                "test_accuracy": accuracy,
                "parameters": n_params,
                "config": dataclasses.asdict(run_cfg),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_finetune(args) -> int:
    run_cfg = RunConfig.resolve(args.config, _flag_overrides(args))
    model = load_checkpoint(_resolve_input(args.ckpt))
    corpus = read_canonical(_resolve_input(args.corpus), tagset=model.tagset)
    splits = _load_splits(corpus, args.splits, args.corpus, run_cfg.seed)
    fcfg = FinetuneConfig(
        learning_rate=run_cfg.finetune_learning_rate,
        batch_size=run_cfg.batch_size,
        max_epochs=run_cfg.max_epochs,
        patience=run_cfg.patience,
        seed=run_cfg.seed,
        teacher_forcing=run_cfg.teacher_forcing,
    )
    model, history = finetune(model, splits, fcfg)
    report = evaluation.evaluate_model(model, splits.test)
    save_checkpoint(
        model,
        args.out,
        extra_provenance={
            "finetuned_from": args.ckpt,
            "run_config": dataclasses.asdict(run_cfg),
            "history": history,
        },
    )
    print(
        json.dumps(
            {
                "checkpoint": args.out,
                "epochs_run": len(history),
                "test_accuracy": report.micro_accuracy,
                "config": dataclasses.asdict(run_cfg),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_evaluate(args) -> int:
    model = load_checkpoint(_resolve_input(args.ckpt))
    corpus = read_canonical(_resolve_input(args.corpus), tagset=model.tagset)
    if args.split == "all":
        subset = corpus
    else:
        splits = _load_splits(corpus, args.splits, args.corpus, args.seed)
        subset = getattr(splits, args.split)
    report = evaluation.evaluate_model(model, subset)
    print(report.to_json())
    _eprint(report.to_text())
    return 0


def _cmd_predict(args) -> int:
    model = load_checkpoint(_resolve_input(args.ckpt))
    if args.stream:
        return _predict_stream(model)
    if not args.corpus:
        raise UsageError("predict needs --corpus FILE unless --stream is given")
    corpus = read_canonical(_resolve_input(args.corpus), tagset=model.tagset)
    from .model import predict_conversations

    results = predict_conversations(model, corpus)
    for conv in corpus:
        for pred in results[conv.conversation_id]:
            print(_prediction_json(model, pred))
    return 0


def _predict_stream(model: Model) -> int:
    session = StreamingClassifier(model)
    for raw in sys.stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"stream record is not valid JSON: {exc}") from exc
        try:
            conv_id = record["conversation_id"]
            turn_index = int(record["turn_index"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"stream record missing conversation_id/turn_index: {exc}") from exc
        prediction = session.feed(conv_id, turn_index, record)
        if prediction is not None:
            print(_prediction_json(model, prediction), flush=True)
    return 0


def _prediction_json(model: Model, pred) -> str:
    return json.dumps(
        {
            "conversation_id": pred.conversation_id,
            "turn_index": pred.turn_index,
            "label": pred.label,
            "probabilities": {
                label: float(p)
                for label, p in zip(model.tagset.labels, pred.probabilities)
            },
        },
        sort_keys=True,
    )


def _cmd_baseline(args) -> int:
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    corpus = _load_corpus(args.corpus, tagset)
    cfg = baselines.ContextAugmentation(
        window=args.window,
        include_previous=args.context,
        include_ssi=args.context,
        ssi_dim=baselines.baseline_ssi_dim(topics),
    )
    result = baselines.cross_validate(
        corpus, args.kind, cfg, topic_vocab=topics, seed=args.seed
    )
    payload = {
        "model_kind": args.kind,
        "context": args.context,
        "window": args.window,
        "per_fold": result["per_fold"],
        "mean_accuracy": result["mean_accuracy"],
        "seed": args.seed,
        "corpus": evaluation.corpus_hash(corpus),
    }
    print(json.dumps(payload, sort_keys=True))
    _eprint(
        evaluation.format_table(
            [{"fold": i, "accuracy": a} for i, a in enumerate(result["per_fold"])]
            + [{"fold": "mean", "accuracy": result["mean_accuracy"]}],
            ["fold", "accuracy"],
        )
    )
    return 0


def _cmd_ablate(args) -> int:
    run_cfg = RunConfig.resolve(args.config, _flag_overrides(args))
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    corpus = _load_corpus(args.corpus, tagset)
    splits = _load_splits(corpus, args.splits, args.corpus, run_cfg.seed)
    embeddings = _embeddings_for(splits.train, args, run_cfg)

    def trainer(overrides, splits_, seed):
        accuracy, n_params, _, _ = _train_once(
            run_cfg, splits_, tagset, topics, embeddings, overrides, seed
        )
        return accuracy, n_params

    plan = evaluation.AblationPlan(context_window=args.window)
    result = evaluation.run_ablation(trainer, splits, plan, seed=run_cfg.seed)
    result["config"] = dataclasses.asdict(run_cfg)
    print(json.dumps(result, sort_keys=True))
    _eprint(
        evaluation.format_table(
            result["rows"], ["lexical", "syntactic", "accuracy", "delta_vs_full", "parameters"]
        )
    )
    return 0


def _cmd_sweep(args) -> int:
    run_cfg = RunConfig.resolve(args.config, _flag_overrides(args))
    tagset = resources.default_tagset()
    topics = _load_topics(args.topics)
    corpus = _load_corpus(args.corpus, tagset)
    splits = _load_splits(corpus, args.splits, args.corpus, run_cfg.seed)
    embeddings = _embeddings_for(splits.train, args, run_cfg)
    try:
        windows = [int(w) for w in args.windows.split(",") if w != ""]
    except ValueError as exc:
        raise UsageError(f"--windows must be comma-separated integers: {exc}") from exc
    if not windows or any(w < 0 for w in windows):
        raise UsageError("--windows must list context sizes >= 0")

    def trainer(overrides, splits_, seed):
        accuracy, n_params, _, _ = _train_once(
            run_cfg, splits_, tagset, topics, embeddings, overrides, seed
        )
        return accuracy, n_params

    result = evaluation.context_sweep(trainer, splits, windows, seed=run_cfg.seed)
    result["config"] = dataclasses.asdict(run_cfg)
    print(json.dumps(result, sort_keys=True))
    _eprint(evaluation.format_table(result["rows"], ["context_window", "accuracy"]))
    return 0


def _cmd_agreement(args) -> int:
    a = read_annotations(_resolve_input(args.a))
    b = read_annotations(_resolve_input(args.b))
    result = compute_agreement(a, b)
    print(
        json.dumps(
            {
                "raw_agreement": result.raw_agreement,
                "cohen_kappa": result.cohen_kappa,
                "n": len(a),
            },
            sort_keys=True,
        )
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TUNABLE_FLAGS = (
    ("--context-window", "context_window", int),
    ("--learning-rate", "learning_rate", float),
    ("--finetune-learning-rate", "finetune_learning_rate", float),
    ("--batch-size", "batch_size", int),
    ("--dropout", "dropout", float),
    ("--word-embedding-dim", "word_embedding_dim", int),
    ("--pos-embedding-dim", "pos_embedding_dim", int),
    ("--max-len", "max_len", int),
    ("--hidden-size", "hidden_size", int),
    ("--filters", "filters", int),
    ("--max-epochs", "max_epochs", int),
    ("--patience", "patience", int),
    ("--seed", "seed", int),
    ("--min-count", "min_count", int),
)


def _add_tunables(sub):
    sub.add_argument("--config", help="JSON config file (flags override it)")
    for flag, dest, typ in _TUNABLE_FLAGS:
        sub.add_argument(flag, dest=dest, type=typ, default=None)


def _flag_overrides(args) -> dict:
    return {dest: getattr(args, dest, None) for _, dest, _ in _TUNABLE_FLAGS}


def build_parser() -> _Parser:
    parser = _Parser(prog="cdac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a Switchboard-style release")
    p.add_argument("--swda", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--collapse-map", dest="collapse_map")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(handler=_cmd_prepare)

    p = sub.add_parser("prepare-hm", help="validate a human-machine corpus")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topics", required=True)
    p.set_defaults(handler=_cmd_prepare_hm)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dist")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--topics")
    p.add_argument("--kind", choices=("hm", "hh"), default="hm")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--splits")
    p.add_argument("--topics")
    _add_tunables(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits")
    _add_tunables(p)
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--splits")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("predict", help="classify conversations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stream", action="store_true",
                   help="read line-delimited turn records from stdin")
    p.add_argument("--corpus")
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("baseline", help="5-fold CV of a classical baseline")
    p.add_argument("--kind", choices=("svm", "mnb"), required=True)
    p.add_argument("--context", action="store_true")
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_baseline)

    p = sub.add_parser("ablate", help="lexical/syntactic feature ablation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--splits")
    p.add_argument("--topics")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--ckpt-config", dest="config_alias",
                   help="alias for --config")
    _add_tunables(p)
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("sweep", help="context-window sweep")
    p.add_argument("--windows", default="2,3,4")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--splits")
    p.add_argument("--topics")
    _add_tunables(p)
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("agreement", help="inter-annotator agreement")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(handler=_cmd_agreement)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config_alias", None) and not getattr(args, "config", None):
            args.config = args.config_alias
        return args.handler(args)
    except UsageError as exc:
        _eprint(f"usage error: {exc}")
        return 1
    except (DataError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        _eprint(f"data error: {exc}")
        return 2
    except BrokenPipeError:
        return 0
    except CdacError as exc:
        _eprint(f"error: {exc}")
        return 3
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        _eprint(f"unexpected error: {type(exc).__name__}: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
