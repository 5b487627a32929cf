"""Loaders for the data files shipped inside the package (tag inventory,
collapse map, topic list, label distributions, template bank, POS lexicon)."""

from __future__ import annotations

import json
from importlib import resources as _importlib_resources

from .corpus import DATagSet, read_topics
from .errors import DataError
from .features import LexiconTagger


def _data_path(name: str):
    return _importlib_resources.files("cdac.data").joinpath(name)


def load_collapse_map(path=None) -> dict[str, str]:
    """Two-column TSV raw_tag<TAB>collapsed_tag; '#' lines are comments."""
    source = path if path is not None else _data_path("swda_collapse_map.tsv")
    mapping: dict[str, str] = {}
    with open(source, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{source}:{lineno}: expected two tab-separated columns")
            mapping[parts[0]] = parts[1]
    if not mapping:
        raise DataError(f"empty collapse map: {source}")
    return mapping


def default_tagset(collapse_map_path=None) -> DATagSet:
    """The 42-label working tagset with the shipped collapse table."""
    with open(_data_path("swda_labels.txt"), encoding="utf-8") as fh:
        labels = [line.strip() for line in fh if line.strip()]
    return DATagSet(labels=tuple(labels), collapse_map=load_collapse_map(collapse_map_path))


def default_topics() -> list[str]:
    return read_topics(_data_path("topics.txt"))


def _load_distribution(name: str) -> dict[str, float]:
    with open(_data_path(name), encoding="utf-8") as fh:
        return json.load(fh)


def hm_label_distribution() -> dict[str, float]:
    """Target DA distribution for synthetic human-machine corpora."""
    return _load_distribution("hm_label_distribution.json")


def hh_label_distribution() -> dict[str, float]:
    """Target DA distribution for synthetic human-human corpora."""
    return _load_distribution("hh_label_distribution.json")


def template_bank() -> dict:
    with open(_data_path("templates.json"), encoding="utf-8") as fh:
        return json.load(fh)


def default_pos_tagger() -> LexiconTagger:
    return LexiconTagger.from_tsv(_data_path("pos_lexicon.tsv"))
