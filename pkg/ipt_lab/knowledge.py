"""Knowledge pretraining: label corpora by source description, train a
13-way category classifier, and hand its embedding layer to the prompt
strategies."""

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from . import ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn import LSTM, Conv1d, Linear, Module, normal, param
from .optim import Adam
from .prompts import PromptTable
from .taxonomy import CATEGORIES, CategoryExample, category_index
from .tensor import Tape, Tensor
from .text import UNK_ID, Vocabulary, load_jsonl

log = logging.getLogger("ipt-lab")

CLASSIFIER_VARIANTS = ("cnn", "lstm", "mlp")


def label_corpus_by_description(manifest: Dict[str, str], base_dir: str = "") -> List[CategoryExample]:
    """Every text of a source file inherits the category its manifest entry names."""
    out: List[CategoryExample] = []
    for path, category in manifest.items():
        canonical = CATEGORIES[category_index(category)]
        full = path if os.path.isabs(path) or not base_dir else os.path.join(base_dir, path)
        records = load_jsonl(full)
        out.extend(CategoryExample(text=str(r["text"]), category=canonical) for r in records if "text" in r)
        log.info(f"Labeled {len(records)} texts from {path} as {canonical!r}")
    return out


def load_manifest(path: str) -> Tuple[Dict[str, str], str]:
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    if not isinstance(manifest, dict):
        raise ValueError(f"{path}: manifest must map file paths to category names")
    return manifest, os.path.dirname(os.path.abspath(path))


@dataclass
class ClassifierConfig:
    variant: str = "cnn"
    emb_dim: int = 64
    channels: int = 16
    kernel_sizes: Tuple[int, ...] = (2, 3, 4)
    hidden: int = 32
    epochs: int = 6
    batch_size: int = 32
    lr: float = 5e-3
    heldout: float = 0.1
    max_len: int = 64
    emb_std: float = 0.1

    def __post_init__(self):
        if self.variant not in CLASSIFIER_VARIANTS:
            raise ValueError(f"unknown classifier variant {self.variant!r}; allowed: {', '.join(CLASSIFIER_VARIANTS)}")
        self.kernel_sizes = tuple(self.kernel_sizes)


class TextClassifier(Module):
    """Embedding layer, a TextCNN / LSTM / MLP encoder, and a 13-way head."""

    def __init__(self, vocab_size: int, cfg: ClassifierConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.embedding = param("embedding", normal(rng, (vocab_size, cfg.emb_dim), cfg.emb_std))
        self._variant = cfg.variant
        n_out = len(CATEGORIES)
        if cfg.variant == "cnn":
            self.convs = [Conv1d(f"convs.{i}", cfg.emb_dim, cfg.channels, k, rng, padding=k - 1)
                          for i, k in enumerate(cfg.kernel_sizes)]
            feat = cfg.channels * len(cfg.kernel_sizes)
        elif cfg.variant == "lstm":
            self.rnn = LSTM("rnn", cfg.emb_dim, cfg.hidden, rng)
            feat = cfg.hidden
        else:
            self.mlp = Linear("mlp", cfg.emb_dim, cfg.hidden, rng)
            feat = cfg.hidden
        self.head = Linear("head", feat, n_out, rng, std=1e-3)

    def logits(self, ids: Sequence[int]) -> Tensor:
        x = ops.embedding(self.embedding.tensor, ids)
        if self._variant == "cnn":
            pooled = [ops.reshape(ops.adaptive_max_pool1d(ops.relu(conv(x)), 1), (-1,)) for conv in self.convs]
            feat = ops.concat(pooled, axis=0)
        elif self._variant == "lstm":
            feat = ops.take(self.rnn(x), -1)
        else:
            feat = ops.relu(self.mlp(ops.mean(x, axis=0)))
        return self.head(feat)


@dataclass
class TrainedClassifier:
    model: TextClassifier
    vocab: Vocabulary
    config: ClassifierConfig
    accuracy: float = 0.0
    history: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def embedding(self) -> np.ndarray:
        return self.model.embedding.data


def _encode(vocab: Vocabulary, text: str, max_len: int) -> List[int]:
    return vocab.encode(text)[:max_len] or [UNK_ID]


def classifier_loss(model: TextClassifier, batch: Sequence[Tuple[List[int], int]]) -> float:
    """Mean cross-entropy over ``batch`` without recording a tape."""
    return float(np.mean([ops.cross_entropy(model.logits(ids), np.asarray([y])).data for ids, y in batch]))


def classifier_accuracy(model: TextClassifier, batch: Sequence[Tuple[List[int], int]]) -> float:
    if not batch:
        return 0.0
    return float(np.mean([int(np.argmax(model.logits(ids).data)) == y for ids, y in batch]))


def train_classifier(examples: Sequence[CategoryExample], vocab: Vocabulary, cfg: Optional[ClassifierConfig] = None,
                     seed: int = 0) -> TrainedClassifier:
    """Minimise the category cross-entropy with mini-batch Adam; report
    accuracy on a stratified held-out split."""
    cfg = cfg or ClassifierConfig()
    labels = [category_index(e.category) for e in examples]
    if len(set(labels)) < 2:
        raise ValueError("classifier training needs at least 2 categories")
    data = [(_encode(vocab, e.text, cfg.max_len), y) for e, y in zip(examples, labels)]
    counts = Counter(labels)
    n_test = int(np.ceil(cfg.heldout * len(data)))
    # stratified splits need every class on both sides
    fits = min(n_test, len(data) - n_test) >= len(counts)
    stratify = labels if min(counts.values()) >= 2 and fits else None
    train, heldout = train_test_split(data, test_size=cfg.heldout, random_state=seed, stratify=stratify)

    model = TextClassifier(len(vocab), cfg, seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    history: Dict[str, List[float]] = {"loss": [], "heldout_accuracy": []}
    history["init_loss"] = [classifier_loss(model, train[: cfg.batch_size])]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[int(i)] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            for ids, y in batch:
                with Tape() as tape:
                    loss = ops.mul(ops.cross_entropy(model.logits(ids), np.asarray([y])), 1.0 / len(batch))
                tape.backward(loss)
                epoch_loss += float(loss.data) * len(batch)
            opt.step()
        history["loss"].append(epoch_loss / len(train))
        acc = classifier_accuracy(model, heldout)
        history["heldout_accuracy"].append(acc)
        log.info(f"classifier epoch {epoch}/{cfg.epochs} loss={history['loss'][-1]:.4f} heldout_acc={acc:.3f}")
    return TrainedClassifier(model=model, vocab=vocab, config=cfg, accuracy=history["heldout_accuracy"][-1]
                             if history["heldout_accuracy"] else classifier_accuracy(model, heldout), history=history)


def predict_category(clf: TrainedClassifier, text: str) -> str:
    return CATEGORIES[int(np.argmax(clf.model.logits(_encode(clf.vocab, text, clf.config.max_len)).data))]


def extract_embedding(clf: TrainedClassifier, d_model: Optional[int] = None, frozen: bool = False) -> PromptTable:
    """A copy of the classifier's embedding layer as a prompt table."""
    table = clf.model.embedding.data.copy()
    return PromptTable(table, d_model or table.shape[1], frozen=frozen)


def save_classifier(path: str, clf: TrainedClassifier) -> str:
    extra = {"vocab": list(clf.vocab.tokens), "accuracy": clf.accuracy, "categories": list(CATEGORIES)}
    return save_checkpoint(path, Checkpoint(kind="classifier", config=asdict(clf.config),
                                            params=clf.model.state_dict(), extra=extra))


def load_classifier(path: str) -> TrainedClassifier:
    ckpt = load_checkpoint(path, kind="classifier")
    cfg = ClassifierConfig(**ckpt.config)
    vocab = Vocabulary(tuple(ckpt.extra["vocab"]))
    model = TextClassifier(len(vocab), cfg)
    model.load_state_dict(ckpt.params)
    return TrainedClassifier(model=model, vocab=vocab, config=cfg, accuracy=float(ckpt.extra.get("accuracy", 0.0)))
