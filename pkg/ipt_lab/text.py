"""Vocabulary, tokenization, cloze templates and JSONL ingestion."""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

log = logging.getLogger("ipt-lab")

PAD, UNK, MASK, BOS = "[PAD]", "[UNK]", "[MASK]", "[BOS]"
SPECIALS: Tuple[str, ...] = (PAD, UNK, MASK, BOS)
PAD_ID, UNK_ID, MASK_ID, BOS_ID = 0, 1, 2, 3

_WORD = re.compile(r"\w+|[^\w\s]")
_SEGMENT = re.compile(r"(\{\w+\}|\[MASK\])")


def tokenize(text: str) -> List[str]:
    """Lowercased words and single punctuation marks."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("ids 0..3 are reserved for [PAD], [UNK], [MASK], [BOS]")
        if len(self.tokens) < 5:
            raise ValueError(f"vocabulary needs at least 5 entries, got {len(self.tokens)}")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(corpus: Sequence[str], min_count: int = 1, extra_tokens: Sequence[str] = ()) -> Vocabulary:
    """Frequency-ordered word vocabulary (ties broken lexicographically).

    ``extra_tokens`` (verbalizer words, template words) are appended when the
    corpus did not already keep them.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    seen = set(kept)
    for tok in extra_tokens:
        for piece in tokenize(tok):
            if piece not in seen and piece not in SPECIALS:
                kept.append(piece)
                seen.add(piece)
    log.info(f"Built vocabulary: {len(kept)} tokens from {len(corpus)} texts (min_count={min_count})")
    return Vocabulary(SPECIALS + tuple(kept))


@dataclass(frozen=True)
class TaskSpec:
    """A cloze task: template with ``{field}`` placeholders and one [MASK]."""

    name: str
    template: str
    verbalizer: Dict[str, str]
    max_len: int = 128
    label_field: str = "label"
    fields: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.template.count(MASK) != 1:
            raise ValueError(f"template must contain exactly one {MASK}, got {self.template.count(MASK)}")
        if not self.verbalizer:
            raise ValueError("verbalizer must map at least one label")
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        found = tuple(m[1:-1] for m in _SEGMENT.findall(self.template) if m != MASK)
        object.__setattr__(self, "fields", found)
        for label, word in self.verbalizer.items():
            if len(tokenize(word)) != 1:
                raise ValueError(f"verbalizer word for {label!r} must be a single token, got {word!r}")

    @property
    def labels(self) -> List[str]:
        return list(self.verbalizer)

    def verbalizer_ids(self, vocab: Vocabulary) -> List[int]:
        missing = [w for w in self.verbalizer.values() if tokenize(w)[0] not in vocab]
        if missing:
            raise ValueError(f"verbalizer tokens not in vocabulary: {', '.join(missing)}")
        return [vocab.id(tokenize(w)[0]) for w in self.verbalizer.values()]

    def literal_words(self) -> List[str]:
        return tokenize(_SEGMENT.sub(" ", self.template)) + [tokenize(w)[0] for w in self.verbalizer.values()]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSpec":
        return cls(name=data.get("name", "task"), template=data["template"], verbalizer=dict(data["verbalizer"]),
                   max_len=int(data.get("max_len", 128)), label_field=data.get("label_field", "label"))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "template": self.template, "verbalizer": self.verbalizer,
                "max_len": self.max_len, "label_field": self.label_field}


def load_task_spec(path: str) -> TaskSpec:
    with open(path, encoding="utf-8") as f:
        return TaskSpec.from_dict(json.load(f))


@dataclass(frozen=True)
class LabeledInstance:
    id: str
    raw_fields: Dict[str, str]
    token_ids: Tuple[int, ...]
    label_id: int
    mask_position: int
    content_ids: Tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return len(self.token_ids)

    @property
    def input_ids(self) -> Tuple[int, ...]:
        """Field tokens only, without [BOS], template words or [MASK]. Without
        recorded field tokens, every non-special token of the sequence."""
        if self.content_ids:
            return self.content_ids
        return tuple(t for t in self.token_ids if t not in (PAD_ID, BOS_ID, MASK_ID))


def _label_key(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def verbalize_and_encode(raw: Dict[str, Any], spec: TaskSpec, vocab: Vocabulary,
                         instance_id: Optional[str] = None) -> LabeledInstance:
    """Fill the template, tokenize, and truncate to ``spec.max_len``.

    Truncation drops tail tokens from whichever field is currently longest,
    so short fields (questions, hypotheses) stay intact. Literal template
    words, [BOS] and [MASK] are never removed.
    """
    missing = [f for f in spec.fields if f not in raw]
    if missing:
        raise ValueError(f"instance is missing template fields: {', '.join(missing)}")
    if spec.label_field not in raw:
        raise ValueError(f"instance has no label field {spec.label_field!r}")
    key = _label_key(raw[spec.label_field])
    if key not in spec.verbalizer:
        raise ValueError(f"label {key!r} not in verbalizer labels {spec.labels}")
    spec.verbalizer_ids(vocab)

    segments: List[Tuple[str, List[int]]] = []
    for part in _SEGMENT.split(spec.template):
        if not part:
            continue
        if part == MASK:
            segments.append((MASK, [MASK_ID]))
        elif part.startswith("{") and part.endswith("}"):
            name = part[1:-1]
            segments.append((name, vocab.encode(str(raw[name]))))
        else:
            segments.append(("", vocab.encode(part)))

    total = 1 + sum(len(ids) for _, ids in segments)
    field_slots = [i for i, (name, _) in enumerate(segments) if name not in ("", MASK)]
    while total > spec.max_len:
        slot = max(field_slots, key=lambda i: (len(segments[i][1]), i), default=None)
        if slot is None or not segments[slot][1]:
            raise ValueError(f"{MASK} would be lost by truncation to max_len={spec.max_len}")
        segments[slot][1].pop()
        total -= 1

    token_ids = [BOS_ID]
    content: List[int] = []
    for name, ids in segments:
        token_ids.extend(ids)
        if name not in ("", MASK):
            content.extend(ids)
    mask_position = token_ids.index(MASK_ID)
    fields = {name: str(raw[name]) for name in spec.fields}
    return LabeledInstance(id=instance_id or "", raw_fields=fields, token_ids=tuple(token_ids),
                           label_id=spec.labels.index(key), mask_position=mask_position,
                           content_ids=tuple(content))


def load_jsonl(path: str) -> List[Dict[str, Any]]:
    """One JSON object per line; blank lines skipped."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e})") from e
    return records


def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def encode_dataset(records: Sequence[Dict[str, Any]], spec: TaskSpec, vocab: Vocabulary,
                   prefix: str = "") -> List[LabeledInstance]:
    out = []
    for i, r in enumerate(records):
        iid = str(r.get("id", f"{prefix or spec.name}-{i}"))
        out.append(verbalize_and_encode(r, spec, vocab, instance_id=iid))
    return out
