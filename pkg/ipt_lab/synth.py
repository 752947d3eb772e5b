"""Desk-scale synthetic corpora.

The category corpus plants marker words of one category into shared
background text; the trigger task labels each text by the single trigger
word it carries. Both are separable by a lookup rule, so their Bayes
accuracy is 100%.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from .taxonomy import CATEGORIES, CategoryExample
from .text import TaskSpec, tokenize

log = logging.getLogger("ipt-lab")

LABEL_WORDS = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")


def _background(size: int) -> Tuple[List[str], np.ndarray]:
    words = [f"w{i}" for i in range(size)]
    weights = 1.0 / np.arange(1, size + 1)
    return words, weights / weights.sum()


def default_markers(per_category: int) -> Dict[str, List[str]]:
    return {c: [f"{tokenize(c)[0]}{j}" for j in range(per_category)] for c in CATEGORIES}


@dataclass
class SynthCategoryConfig:
    texts_per_category: int = 200
    markers_per_category: int = 8
    background_size: int = 200
    min_len: int = 8
    max_len: int = 16
    min_markers: int = 1
    max_markers: int = 2
    markers: Optional[Dict[str, List[str]]] = None

    def resolved_markers(self) -> Dict[str, List[str]]:
        markers = self.markers or default_markers(self.markers_per_category)
        if set(markers) != set(CATEGORIES):
            raise ValueError("marker sets must be given for exactly the 13 categories")
        owner: Dict[str, str] = {}
        for cat, words in markers.items():
            if not words:
                raise ValueError(f"category {cat!r} has no marker words")
            for w in words:
                if w in owner and owner[w] != cat:
                    raise ValueError(f"marker {w!r} is shared by {owner[w]!r} and {cat!r}")
                owner[w] = cat
        background, _ = _background(self.background_size)
        clash = sorted(set(owner) & set(background))
        if clash:
            raise ValueError(f"marker words overlap the background vocabulary: {', '.join(clash[:5])}")
        return markers


def gen_synth_category_corpus(cfg: SynthCategoryConfig, seed: int) -> List[CategoryExample]:
    markers = cfg.resolved_markers()
    background, weights = _background(cfg.background_size)
    rng = np.random.default_rng(seed)
    out: List[CategoryExample] = []
    for cat in CATEGORIES:
        for _ in range(cfg.texts_per_category):
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            words = list(rng.choice(background, size=n, p=weights))
            for _ in range(int(rng.integers(cfg.min_markers, cfg.max_markers + 1))):
                pos = int(rng.integers(0, len(words) + 1))
                words.insert(pos, str(rng.choice(markers[cat])))
            out.append(CategoryExample(text=" ".join(words), category=cat))
    log.info(f"Generated category corpus: {len(out)} texts over {len(CATEGORIES)} categories")
    return out


def marker_oracle(text: str, markers: Dict[str, List[str]]) -> Optional[str]:
    """Category whose marker appears in ``text`` (first hit), or None."""
    owner = {w: c for c, ws in markers.items() for w in ws}
    for tok in tokenize(text):
        if tok in owner:
            return owner[tok]
    return None


@dataclass
class SynthTaskConfig:
    n_classes: int = 2
    n_triggers: int = 128
    per_class: int = 500
    background_size: int = 200
    min_len: int = 10
    max_len: int = 20
    trigger_window: int = 3
    max_len_tokens: int = 32
    label_words: Tuple[str, ...] = field(default=LABEL_WORDS)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_classes > len(self.label_words):
            raise ValueError(f"at most {len(self.label_words)} classes supported")
        if self.n_triggers < self.n_classes:
            raise ValueError("need at least one trigger per class")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")

    def triggers(self) -> Dict[str, int]:
        return {f"t{i}": i % self.n_classes for i in range(self.n_triggers)}

    def task_spec(self, name: str = "trigger") -> TaskSpec:
        verbalizer = {f"c{y}": self.label_words[y] for y in range(self.n_classes)}
        return TaskSpec(name=name, template="{text} . it is [MASK] .", verbalizer=verbalizer,
                        max_len=self.max_len_tokens)


def gen_synth_task(cfg: SynthTaskConfig, seed: int) -> List[Dict[str, str]]:
    """Balanced records ``{"id", "text", "label"}``; each text carries exactly
    one trigger word within its first ``trigger_window`` positions."""
    cfg.validate()
    background, weights = _background(cfg.background_size)
    triggers = cfg.triggers()
    by_class: Dict[int, List[str]] = {y: [t for t, c in triggers.items() if c == y] for y in range(cfg.n_classes)}
    rng = np.random.default_rng(seed)
    records = []
    for y in range(cfg.n_classes):
        for j in range(cfg.per_class):
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            words = list(rng.choice(background, size=n, p=weights))
            pos = int(rng.integers(0, min(cfg.trigger_window, n) + 1))
            words.insert(pos, str(rng.choice(by_class[y])))
            records.append({"id": f"c{y}-{j}", "text": " ".join(words), "label": f"c{y}"})
    order = rng.permutation(len(records))
    log.info(f"Generated trigger task: {len(records)} instances, {cfg.n_triggers} triggers, {cfg.n_classes} classes")
    return [records[i] for i in order]


def trigger_oracle(text: str, cfg: SynthTaskConfig) -> Optional[str]:
    triggers = cfg.triggers()
    for tok in tokenize(text):
        if tok in triggers:
            return f"c{triggers[tok]}"
    return None


def train_dev_test(records: Sequence[Dict[str, str]], seed: int,
                   fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)):
    """Label-stratified three-way split."""
    labels = [r["label"] for r in records]
    rest_frac = fractions[1] + fractions[2]
    train, rest = train_test_split(list(records), test_size=rest_frac, random_state=seed, stratify=labels)
    dev, test = train_test_split(rest, test_size=fractions[2] / rest_frac, random_state=seed,
                                 stratify=[r["label"] for r in rest])
    return train, dev, test
