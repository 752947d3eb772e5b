"""Few-shot sampling and cross-validation folds."""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import KFold, StratifiedKFold

log = logging.getLogger("ipt-lab")

Fold = Tuple[List[int], List[int]]


@dataclass
class FewShotSplit:
    """Indices into the source dataset."""

    train: List[int]
    dev: List[int]
    pool: List[int]
    folds: List[Fold] = field(default_factory=list)

    @property
    def sampled(self) -> List[int]:
        return self.train + self.dev


def kfold_split(n_items: int, folds: int = 4, seed: int = 0,
                labels: Optional[Sequence[int]] = None) -> List[Fold]:
    """Shuffled k-fold partition of ``range(n_items)``, label-stratified when
    ``labels`` is given. Validation folds are disjoint and cover every item."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if n_items < folds:
        raise ValueError(f"cannot split {n_items} items into {folds} folds")
    index = np.arange(n_items)
    # stratify only when every label can appear in every fold
    counts = np.unique(np.asarray(labels), return_counts=True)[1] if labels is not None else np.array([0])
    if labels is not None and len(counts) > 1 and counts.min() >= folds:
        parts = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed).split(index, np.asarray(labels))
    else:
        parts = KFold(n_splits=folds, shuffle=True, random_state=seed).split(index)
    return [(sorted(int(i) for i in tr), sorted(int(i) for i in va)) for tr, va in parts]


def sample_few_shot(labels: Sequence[int], k: int, seed: int, folds: int = 4,
                    label_names: Optional[Sequence[str]] = None) -> FewShotSplit:
    """Draw 2K examples per label without replacement: the first K of each
    label train, the second K early-stop. ``folds`` cross-validation folds
    are computed over the 2K-per-label sample."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    by_label: Dict[int, List[int]] = defaultdict(list)
    for i, y in enumerate(labels):
        by_label[int(y)].append(i)
    expected = range(len(label_names)) if label_names else sorted(by_label)
    stray = sorted(set(by_label) - set(expected))
    if stray:
        raise ValueError(f"label ids {stray} have no name among {len(expected)} labels")
    rng = np.random.default_rng(seed)
    train: List[int] = []
    dev: List[int] = []
    for y in expected:
        members = by_label[y]
        if len(members) < 2 * k:
            name = label_names[y] if label_names else str(y)
            raise ValueError(f"label {name!r} has {len(members)} examples, needs {2 * k} for K={k}")
        drawn = rng.choice(members, size=2 * k, replace=False)
        train.extend(int(i) for i in drawn[:k])
        dev.extend(int(i) for i in drawn[k:])
    chosen = set(train) | set(dev)
    pool = [i for i in range(len(labels)) if i not in chosen]
    sampled = train + dev
    split = FewShotSplit(train=train, dev=dev, pool=pool)
    if folds:
        sampled_labels = [int(labels[i]) for i in sampled]
        split.folds = [([sampled[i] for i in tr], [sampled[i] for i in va])
                       for tr, va in kfold_split(len(sampled), folds, seed, sampled_labels)]
    log.info(f"Few-shot split K={k}: {len(train)} train, {len(dev)} dev, {len(pool)} pool")
    return split
