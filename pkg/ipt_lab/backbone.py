"""The frozen backbone: a small pre-LN transformer encoder with a tied cloze head.

Forward passes accept two kinds of soft prompt. An input-layer soft prefix
(k × d rows) is concatenated in front of the token embeddings before
position embeddings are added, so its rows occupy output positions
0..k-1. Per-layer prefixes (one k × d block per layer) act as extra
key/value positions inside each attention layer and produce no outputs.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn import LayerNorm, Linear, Module, normal, param
from .optim import Adam
from .tensor import Tape, Tensor
from .text import BOS_ID, MASK_ID, PAD_ID, TaskSpec, Vocabulary

log = logging.getLogger("ipt-lab")


@dataclass
class TransformerConfig:
    vocab_size: int = 2000
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 256
    max_context: int = 256
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.ff_dim, self.max_context) < 1:
            raise ValueError("transformer sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class PromptedInput:
    token_ids: Tuple[int, ...]
    mask_position: int
    input_soft_prefix: Optional[Tensor] = None
    per_layer_prefixes: Optional[List[Tensor]] = None

    @property
    def soft_len(self) -> int:
        return 0 if self.input_soft_prefix is None else self.input_soft_prefix.shape[0]

    @property
    def prefix_len(self) -> int:
        return 0 if not self.per_layer_prefixes else self.per_layer_prefixes[0].shape[0]


class Block(Module):
    def __init__(self, name: str, cfg: TransformerConfig, rng: np.random.Generator):
        d, std = cfg.d_model, cfg.init_std
        self.ln1 = LayerNorm(f"{name}.ln1", d)
        self.wq = Linear(f"{name}.wq", d, d, rng, std=std)
        self.wk = Linear(f"{name}.wk", d, d, rng, std=std)
        self.wv = Linear(f"{name}.wv", d, d, rng, std=std)
        self.wo = Linear(f"{name}.wo", d, d, rng, std=std)
        self.ln2 = LayerNorm(f"{name}.ln2", d)
        self.ff1 = Linear(f"{name}.ff1", d, cfg.ff_dim, rng, std=std)
        self.ff2 = Linear(f"{name}.ff2", cfg.ff_dim, d, rng, std=std)
        self._cfg = cfg

    def _heads(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        return ops.transpose(ops.reshape(x, (t, self._cfg.n_heads, self._cfg.head_dim)), (1, 0, 2))

    def __call__(self, x: Tensor, prefix: Optional[Tensor] = None,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self._cfg
        h = self.ln1(x)
        kv = h if prefix is None else ops.concat([prefix, h], axis=0)
        q, k, v = self._heads(self.wq(h)), self._heads(self.wk(kv)), self._heads(self.wv(kv))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(cfg.head_dim))
        attn = ops.dropout(ops.softmax(scores, axis=-1), cfg.dropout, rng)
        out = ops.transpose(ops.matmul(attn, v), (1, 0, 2))
        out = ops.reshape(out, (x.shape[0], cfg.d_model))
        x = ops.add(x, ops.dropout(self.wo(out), cfg.dropout, rng))
        ff = self.ff2(ops.gelu(self.ff1(self.ln2(x))))
        return ops.add(x, ops.dropout(ff, cfg.dropout, rng))


class Transformer(Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.tok_emb = param("tok_emb", normal(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std))
        self.pos_emb = param("pos_emb", normal(rng, (cfg.max_context, cfg.d_model), cfg.init_std))
        self.blocks = [Block(f"blocks.{i}", cfg, rng) for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm("ln_f", cfg.d_model)
        self.out_bias = param("out_bias", np.zeros(cfg.vocab_size))

    def token_embeddings(self, ids: Sequence[int]) -> Tensor:
        return ops.embedding(self.tok_emb.tensor, ids)

    def hidden_states(self, inp: PromptedInput, rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if inp.input_soft_prefix is not None and inp.per_layer_prefixes:
            raise ValueError("use either an input-layer soft prefix or per-layer prefixes, not both")
        n, k = len(inp.token_ids), max(inp.soft_len, inp.prefix_len)
        if k + n > cfg.max_context:
            raise ValueError(f"context overflow: {k} prompt + {n} input tokens > max_context {cfg.max_context}")
        if inp.per_layer_prefixes is not None and len(inp.per_layer_prefixes) != cfg.n_layers:
            raise ValueError(f"expected {cfg.n_layers} per-layer prefixes, got {len(inp.per_layer_prefixes)}")
        x = self.token_embeddings(inp.token_ids)
        if inp.input_soft_prefix is not None:
            x = ops.concat([inp.input_soft_prefix, x], axis=0)
        t = x.shape[0]
        x = ops.add(x, ops.take(self.pos_emb.tensor, slice(0, t)))
        for i, block in enumerate(self.blocks):
            prefix = inp.per_layer_prefixes[i] if inp.per_layer_prefixes else None
            x = block(x, prefix=prefix, rng=rng)
        return self.ln_f(x)

    def encode(self, token_ids: Sequence[int]) -> np.ndarray:
        """Mean-pooled final-layer states of a plain input."""
        h = self.hidden_states(PromptedInput(tuple(token_ids), 0))
        return h.data.mean(axis=0)

    def cloze_logits(self, inp: PromptedInput, candidate_ids: Optional[Sequence[int]] = None,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits at the [MASK] position, restricted to ``candidate_ids`` when given."""
        h = self.hidden_states(inp, rng)
        row = ops.take(h, inp.soft_len + inp.mask_position)
        if candidate_ids is None:
            return ops.add(ops.matmul(self.tok_emb.tensor, row), self.out_bias.tensor)
        ids = list(candidate_ids)
        return ops.add(ops.matmul(self.token_embeddings(ids), row), ops.take(self.out_bias.tensor, np.asarray(ids)))


def forward_logits(model: Transformer, inp: PromptedInput) -> Tensor:
    """Vocabulary logits for every output position, ``[(k + n) × |V|]``."""
    h = model.hidden_states(inp)
    return ops.add(ops.matmul(h, ops.transpose(model.tok_emb.tensor)), model.out_bias.tensor)


def classify(model: Transformer, inp: PromptedInput, spec: TaskSpec, vocab: Vocabulary) -> Tensor:
    """p(y | t, x): softmax over the verbalizer tokens' logits at the mask position."""
    return ops.softmax(model.cloze_logits(inp, spec.verbalizer_ids(vocab)))


# pretraining

def _mask_positions(ids: Sequence[int], rate: float, rng: np.random.Generator) -> List[int]:
    candidates = [i for i, t in enumerate(ids) if t not in (PAD_ID, BOS_ID, MASK_ID)]
    if not candidates:
        return []
    chosen = [i for i in candidates if rng.random() < rate]
    return chosen or [candidates[int(rng.integers(len(candidates)))]]


def _mlm_loss(model: Transformer, ids: Sequence[int], positions: List[int]) -> Tensor:
    masked = list(ids)
    for p in positions:
        masked[p] = MASK_ID
    h = model.hidden_states(PromptedInput(tuple(masked), positions[0]))
    rows = ops.take(h, np.asarray(positions))
    logits = ops.add(ops.matmul(rows, ops.transpose(model.tok_emb.tensor)), model.out_bias.tensor)
    return ops.cross_entropy(logits, np.asarray([ids[p] for p in positions]))


def mlm_pretrain(model: Transformer, corpus: Sequence[Sequence[int]], mask_rate: float = 0.15, steps: int = 2000,
                 seed: int = 0, lr: float = 1e-3, batch_size: int = 8, warmup_steps: int = 100,
                 log_every: int = 100) -> Dict[str, List[float]]:
    """Masked-token pretraining in place; returns the per-step loss history."""
    usable = [list(s)[: model.config.max_context] for s in corpus if len(s) > 1]
    if not usable:
        raise ValueError("pretraining corpus has no usable sentences")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr, warmup_steps=min(warmup_steps, steps))
    losses: List[float] = []
    for step in range(1, steps + 1):
        batch = [usable[int(i)] for i in rng.integers(0, len(usable), size=batch_size)]
        opt.zero_grad()
        total = 0.0
        for ids in batch:
            positions = _mask_positions(ids, mask_rate, rng)
            if not positions:
                continue
            with Tape() as tape:
                loss = ops.mul(_mlm_loss(model, ids, positions), 1.0 / len(batch))
            tape.backward(loss)
            total += float(loss.data)
        opt.step()
        losses.append(total)
        if step % log_every == 0 or step == steps:
            log.info(f"mlm step {step}/{steps} loss={np.mean(losses[-log_every:]):.4f}")
    return {"loss": losses}


def masked_accuracy(model: Transformer, corpus: Sequence[Sequence[int]], mask_rate: float = 0.15,
                    seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    hits = total = 0
    for ids in corpus:
        ids = list(ids)[: model.config.max_context]
        positions = _mask_positions(ids, mask_rate, rng)
        if not positions:
            continue
        masked = list(ids)
        for p in positions:
            masked[p] = MASK_ID
        h = model.hidden_states(PromptedInput(tuple(masked), positions[0]))
        logits = h.data[positions] @ model.tok_emb.data.T + model.out_bias.data
        hits += int(np.sum(logits.argmax(axis=1) == np.asarray([ids[p] for p in positions])))
        total += len(positions)
    return hits / total if total else 0.0


# accounting

def param_count(obj) -> int:
    """All parameters of a model, or only the trainable ones of a strategy."""
    if isinstance(obj, Transformer):
        return obj.num_parameters()
    return obj.num_parameters(trainable_only=True)


def flop_count(cfg: TransformerConfig, seq_len: int, prefix_len: int = 0, head_positions: Optional[int] = None) -> int:
    """Matmul FLOPs of one forward pass (2·m·n·p per [m×n]@[n×p]).

    Per layer, with T = seq_len and S = T + prefix_len attendable positions:
    query and output projections 2·(2·T·d·d), key and value projections
    2·(2·S·d·d), attention scores and weighted sum 2·(2·T·S·d), feed-forward
    2·(2·T·d·ff). The cloze head adds 2·P·d·|V| for P scored positions
    (default: every position). Layer norm, softmax and activations are not
    counted.
    """
    d, ff, v = cfg.d_model, cfg.ff_dim, cfg.vocab_size
    t, s = seq_len, seq_len + prefix_len
    per_layer = 2 * (2 * t * d * d) + 2 * (2 * s * d * d) + 2 * (2 * t * s * d) + 2 * (2 * t * d * ff)
    positions = t if head_positions is None else head_positions
    return cfg.n_layers * per_layer + 2 * positions * d * v


# checkpoints

def save_backbone(path: str, model: Transformer, vocab: Vocabulary, step: int = 0,
                  extra: Optional[Dict] = None) -> str:
    meta = {"vocab": list(vocab.tokens)}
    meta.update(extra or {})
    return save_checkpoint(path, Checkpoint(kind="backbone", config=asdict(model.config),
                                            params=model.state_dict(), step=step, extra=meta))


def load_backbone(path: str) -> Tuple[Transformer, Vocabulary, Checkpoint]:
    ckpt = load_checkpoint(path, kind="backbone")
    model = Transformer(TransformerConfig(**ckpt.config))
    model.load_state_dict(ckpt.params)
    vocab = Vocabulary(tuple(ckpt.extra["vocab"]))
    if len(vocab) != model.config.vocab_size:
        raise ValueError(f"{path}: vocabulary has {len(vocab)} tokens but config says {model.config.vocab_size}")
    return model, vocab, ckpt
