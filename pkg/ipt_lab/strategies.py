"""Prompt generators: task-level Prompt/Prefix Tuning and the three
instance-wise strategies (Random, Pretrained, Encoder).

Every strategy turns a ``LabeledInstance`` into a ``PromptedInput`` for the
frozen backbone. In the input family the prompt rows are prepended at the
embedding layer; in the prefix family they become per-layer key/value
prefixes.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .backbone import PromptedInput, Transformer
from .config import ConfigError, allowed
from .nn import LSTM, Conv1d, Linear, Module, normal, param
from .prompts import PromptTable, PromptVectors
from .taxonomy import CATEGORIES, category_index
from .tensor import Parameter, Tensor
from .text import LabeledInstance, Vocabulary, tokenize

log = logging.getLogger("ipt-lab")

STRATEGIES = ("task-prompt", "prefix", "random-ipt", "pretrained-ipt", "encoder-ipt", "fine-tune")
ENCODERS = ("cnn", "rnn", "mlp")
FAMILIES = ("input", "prefix")
IPT_STRATEGIES = ("random-ipt", "pretrained-ipt", "encoder-ipt")

ENCODER_BUDGET = 0.005


@dataclass
class StrategyConfig:
    strategy: str = "random-ipt"
    encoder: str = "cnn"
    prompt_len: int = 20
    utilization_rate: float = 1.0
    hard_prefix: Optional[str] = None
    table_dim: Optional[int] = None
    family: str = "input"
    prefix_reparam_hidden: int = 0
    pretrained_table: str = ""
    encoder_hidden: Optional[int] = None
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise allowed("strategy", self.strategy, STRATEGIES)
        if self.encoder not in ENCODERS:
            raise allowed("encoder", self.encoder, ENCODERS)
        if self.family not in FAMILIES:
            raise allowed("prompt family", self.family, FAMILIES)
        if self.prompt_len < 1:
            raise ConfigError(f"prompt_len must be >= 1, got {self.prompt_len}")
        if not 0.0 < self.utilization_rate <= 1.0:
            raise ConfigError(f"utilization_rate must be in (0, 1], got {self.utilization_rate}")
        if self.hard_prefix is not None:
            try:
                self.hard_prefix = CATEGORIES[category_index(self.hard_prefix)]
            except ValueError as e:
                raise ConfigError(str(e)) from e
            if self.strategy not in ("random-ipt", "pretrained-ipt"):
                raise ConfigError(f"hard_prefix applies to random-ipt and pretrained-ipt, not {self.strategy}")
        if self.family == "prefix" and self.strategy not in IPT_STRATEGIES:
            raise ConfigError(f"family 'prefix' composes an IPT strategy; got {self.strategy}")
        if self.table_dim is not None and self.table_dim < 1:
            raise ConfigError(f"table_dim must be >= 1, got {self.table_dim}")
        if self.prefix_reparam_hidden < 0:
            raise ConfigError("prefix_reparam_hidden must be >= 0")
        if self.encoder_hidden is not None and self.encoder_hidden < 1:
            raise ConfigError("encoder_hidden must be >= 1")


# ids and lengths

def random_ipt_ids(token_ids: Sequence[int], length: int) -> List[int]:
    """First ``length`` ids of the instance, cycling from the start when it is shorter."""
    if not token_ids:
        raise ValueError("cannot build an instance prompt from an empty input")
    n = len(token_ids)
    return [int(token_ids[i % n]) for i in range(length)]


def utilized_length(n: int, rate: float) -> int:
    """m = clamp(ceil(r·n), 1, n)."""
    if n < 1:
        raise ValueError("instance has no tokens")
    return min(max(math.ceil(round(rate * n, 9)), 1), n)


# strategies

class PromptStrategy(Module):
    """Base class; subclasses set ``name`` and implement ``generate``."""

    name = ""

    def __init__(self, backbone: Transformer, prompt_len: int):
        self._backbone = backbone
        self._prompt_len = prompt_len
        self._hard_prefix: Optional["HardTypePrefix"] = None
        self.compose: Optional["PrefixIPTCompose"] = None

    @property
    def prompt_len(self) -> int:
        return self._prompt_len

    @property
    def backbone(self) -> Transformer:
        return self._backbone

    def generate(self, instance: LabeledInstance) -> PromptVectors:
        raise NotImplementedError

    def prompts(self, instance: LabeledInstance) -> PromptVectors:
        """Generated rows, with the hard type phrase in front when configured."""
        pv = self.generate(instance)
        if self._hard_prefix is not None:
            pv = hard_prefix_apply(self._hard_prefix, pv, self._backbone, len(instance.token_ids))
        return pv

    def prompted_input(self, instance: LabeledInstance) -> PromptedInput:
        pv = self.prompts(instance)
        if self.compose is not None:
            return PromptedInput(tuple(instance.token_ids), instance.mask_position,
                                 per_layer_prefixes=self.compose(pv))
        return PromptedInput(tuple(instance.token_ids), instance.mask_position, input_soft_prefix=pv.matrix)

    def frozen_parameters(self) -> List[Tuple[str, Parameter]]:
        """Backbone parameters plus any frozen strategy parameters."""
        out = [(f"backbone.{n}", p) for n, p in self._backbone.named_parameters() if p.frozen]
        out += [(n, p) for n, p in self.named_parameters() if p.frozen]
        return out


class TaskPromptTuning(PromptStrategy):
    """One shared L×d prompt per task."""

    name = "task-prompt"

    def __init__(self, backbone: Transformer, prompt_len: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__(backbone, prompt_len)
        self.prompt = param("prompt", normal(rng, (prompt_len, backbone.config.d_model), std))

    def generate(self, instance: LabeledInstance) -> PromptVectors:
        return PromptVectors(self.prompt.tensor, self.name, instance.id)


class PrefixTuning(PromptStrategy):
    """k×d key/value prefixes at every layer, optionally produced by a
    reparameterization MLP over a shared k×d seed."""

    name = "prefix"

    def __init__(self, backbone: Transformer, prompt_len: int, rng: np.random.Generator, std: float = 0.02,
                 reparam_hidden: int = 0):
        super().__init__(backbone, prompt_len)
        cfg = backbone.config
        self._reparam = reparam_hidden > 0
        if self._reparam:
            self.seed = param("seed", normal(rng, (prompt_len, cfg.d_model), std))
            self.reparam_in = Linear("reparam_in", cfg.d_model, reparam_hidden, rng)
            self.reparam_out = Linear("reparam_out", reparam_hidden, cfg.n_layers * cfg.d_model, rng, std=std)
        else:
            self.prefixes = [param(f"prefixes.{i}", normal(rng, (prompt_len, cfg.d_model), std))
                             for i in range(cfg.n_layers)]

    def layer_prefixes(self) -> List[Tensor]:
        if not self._reparam:
            return [p.tensor for p in self.prefixes]
        d = self._backbone.config.d_model
        flat = self.reparam_out(ops.tanh(self.reparam_in(self.seed.tensor)))
        return [ops.take(flat, np.s_[:, i * d:(i + 1) * d]) for i in range(self._backbone.config.n_layers)]

    def generate(self, instance: LabeledInstance) -> PromptVectors:
        return PromptVectors(self.layer_prefixes()[0], self.name, instance.id)

    def prompted_input(self, instance: LabeledInstance) -> PromptedInput:
        return PromptedInput(tuple(instance.token_ids), instance.mask_position,
                             per_layer_prefixes=self.layer_prefixes())


class RandomIPT(PromptStrategy):
    """Instance prompt = table rows of the first L tokens of the instance's input fields."""

    name = "random-ipt"

    def __init__(self, backbone: Transformer, prompt_len: int, table: PromptTable):
        super().__init__(backbone, prompt_len)
        self.table = table

    def generate(self, instance: LabeledInstance) -> PromptVectors:
        return PromptVectors(self.table.lookup(random_ipt_ids(instance.input_ids, self._prompt_len)),
                             self.name, instance.id)


class PretrainedIPT(RandomIPT):
    name = "pretrained-ipt"


def pretrained_ipt_init(classifier, vocab: Vocabulary, d_model: Optional[int] = None) -> PromptTable:
    """Copy the classifier's embedding layer into a trainable prompt table
    laid out by ``vocab``."""
    source = classifier.vocab
    table = classifier.model.embedding.data
    if tuple(source.tokens) != tuple(vocab.tokens):
        index = {tok: i for i, tok in enumerate(source.tokens)}
        missing = [tok for tok in vocab.tokens if tok not in index]
        if missing:
            shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
            raise ValueError(f"classifier vocabulary lacks {len(missing)} task tokens: {shown}")
        table = table[[index[tok] for tok in vocab.tokens]]
    return PromptTable(table.copy(), d_model or table.shape[1])


# encoder heads

class CNNEncoder(Module):
    """Three conv layers, each followed by a pool; the last pool is adaptive
    so the output has exactly k rows."""

    def __init__(self, d_in: int, hidden: int, d_out: int, k: int, rng: np.random.Generator):
        self.conv1 = Conv1d("conv1", d_in, hidden, 3, rng, padding=1)
        self.conv2 = Conv1d("conv2", hidden, hidden, 3, rng, padding=1)
        self.conv3 = Conv1d("conv3", hidden, hidden, 3, rng, padding=1)
        self.out = Linear("out", hidden, d_out, rng)
        self._k = k

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.max_pool1d(ops.relu(self.conv1(x)), 2)
        x = ops.max_pool1d(ops.relu(self.conv2(x)), 2)
        x = ops.adaptive_max_pool1d(ops.relu(self.conv3(x)), self._k)
        return self.out(x)


class RNNEncoder(Module):
    """Three stacked LSTM layers and three linear layers over the last k states."""

    def __init__(self, d_in: int, hidden: int, d_out: int, k: int, rng: np.random.Generator):
        self.rnn = [LSTM(f"rnn.{i}", d_in if i == 0 else hidden, hidden, rng) for i in range(3)]
        self.lin1 = Linear("lin1", hidden, hidden, rng)
        self.lin2 = Linear("lin2", hidden, hidden, rng)
        self.out = Linear("out", hidden, d_out, rng)
        self._k = k
        self._hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.rnn:
            x = layer(x)
        m = x.shape[0]
        if m >= self._k:
            x = ops.take(x, np.s_[m - self._k:])
        else:
            x = ops.concat([Tensor(np.zeros((self._k - m, self._hidden))), x], axis=0)
        return self.out(ops.tanh(self.lin2(ops.tanh(self.lin1(x)))))


class MLPEncoder(Module):
    """Mean-pool, then d_p→h, h→(k·h) reshaped to k×h, then a shared h→d."""

    def __init__(self, d_in: int, hidden: int, d_out: int, k: int, rng: np.random.Generator):
        self.lin1 = Linear("lin1", d_in, hidden, rng)
        self.lin2 = Linear("lin2", hidden, k * hidden, rng)
        self.out = Linear("out", hidden, d_out, rng)
        self._k = k
        self._hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.relu(self.lin1(ops.mean(x, axis=0)))
        h = ops.relu(ops.reshape(self.lin2(h), (self._k, self._hidden)))
        return self.out(h)


ENCODER_TYPES = {"cnn": CNNEncoder, "rnn": RNNEncoder, "mlp": MLPEncoder}


def encoder_param_count(variant: str, hidden: int, d_in: int, d_out: int, k: int) -> int:
    """Closed-form trainable parameter count of an encoder head."""
    h = hidden
    if variant == "cnn":
        return (3 * d_in * h + h) + 2 * (3 * h * h + h) + (h * d_out + d_out)
    if variant == "rnn":
        lstm = ((d_in + h) * 4 * h + 4 * h) + 2 * (2 * h * 4 * h + 4 * h)
        return lstm + 2 * (h * h + h) + (h * d_out + d_out)
    if variant == "mlp":
        return (d_in * h + h) + (h * k * h + k * h) + (h * d_out + d_out)
    raise allowed("encoder", variant, ENCODERS)


def size_encoder(variant: str, backbone_params: int, d_in: int, d_out: int, k: int,
                 budget: float = ENCODER_BUDGET) -> int:
    """Largest hidden width whose head stays within ``budget`` of the backbone size."""
    limit = budget * backbone_params
    hidden = 1
    while encoder_param_count(variant, hidden + 1, d_in, d_out, k) <= limit:
        hidden += 1
    count = encoder_param_count(variant, hidden, d_in, d_out, k)
    if count > limit:
        log.warning(f"{variant} encoder with hidden=1 has {count} parameters, over the {limit:.0f} budget")
    return hidden


class EncoderIPT(PromptStrategy):
    """Frozen prompt table; a trainable encoder maps the first m table rows to k prompt rows."""

    name = "encoder-ipt"

    def __init__(self, backbone: Transformer, prompt_len: int, table: PromptTable, variant: str,
                 utilization_rate: float, rng: np.random.Generator, hidden: Optional[int] = None):
        super().__init__(backbone, prompt_len)
        table.freeze()
        self.table = table
        d_in, d_out = table.shape[1], backbone.config.d_model
        if hidden is None:
            hidden = size_encoder(variant, backbone.num_parameters(), d_in, d_out, prompt_len)
        self.encoder = ENCODER_TYPES[variant](d_in, hidden, d_out, prompt_len, rng)
        self._variant = variant
        self._rate = utilization_rate
        self._hidden = hidden

    @property
    def hidden(self) -> int:
        return self._hidden

    @property
    def variant(self) -> str:
        return self._variant

    def generate(self, instance: LabeledInstance) -> PromptVectors:
        source = instance.input_ids
        ids = source[: utilized_length(len(source), self._rate)]
        rows = ops.embedding(self.table.table.tensor, ids)
        return PromptVectors(self.encoder(rows), self.name, instance.id)


class FineTune(PromptStrategy):
    """Reference point: no prompt, every backbone parameter trainable."""

    name = "fine-tune"

    def __init__(self, backbone: Transformer):
        super().__init__(backbone, 0)

    def named_parameters(self, prefix: str = ""):
        for n, p in self._backbone.named_parameters():
            yield f"{prefix}backbone.{n}", p

    def frozen_parameters(self) -> List[Tuple[str, Parameter]]:
        return []

    def prompted_input(self, instance: LabeledInstance) -> PromptedInput:
        return PromptedInput(tuple(instance.token_ids), instance.mask_position)


# hard prefix and prefix composition

@dataclass(frozen=True)
class HardTypePrefix:
    category: str
    token_ids: Tuple[int, ...]

    @classmethod
    def from_category(cls, category: str, vocab: Vocabulary) -> "HardTypePrefix":
        canonical = CATEGORIES[category_index(category)]
        words = tokenize(canonical)
        missing = [w for w in words if w not in vocab]
        if missing:
            raise ValueError(f"hard prefix words not in vocabulary: {', '.join(missing)}")
        return cls(canonical, tuple(vocab.id(w) for w in words))


def hard_prefix_apply(prefix: HardTypePrefix, prompts: PromptVectors, backbone: Transformer,
                      input_len: int = 0) -> PromptVectors:
    """Prepend the backbone's embeddings of the category phrase to the soft rows."""
    total = len(prefix.token_ids) + prompts.k
    if total + input_len > backbone.config.max_context:
        raise ValueError(f"context overflow: {total} prompt rows + {input_len} input tokens "
                         f"> max_context {backbone.config.max_context}")
    phrase = backbone.token_embeddings(prefix.token_ids)
    return PromptVectors(ops.concat([phrase, prompts.matrix], axis=0), prompts.strategy, prompts.instance_id)


class PrefixIPTCompose(Module):
    """One d×d projection per layer, identity at init, mapping instance prompts to layer prefixes."""

    def __init__(self, d_model: int, n_layers: int):
        self.projections = [param(f"projections.{i}", np.eye(d_model)) for i in range(n_layers)]

    def __call__(self, prompts: PromptVectors) -> List[Tensor]:
        return prefix_ipt_compose(prompts, [p.tensor for p in self.projections])


def prefix_ipt_compose(prompts: PromptVectors, projections: Sequence[Tensor]) -> List[Tensor]:
    return [ops.matmul(prompts.matrix, w) for w in projections]


# factory

def trainable_params(strategy: PromptStrategy) -> List[Tuple[str, Parameter]]:
    return [(n, p) for n, p in strategy.named_parameters() if not p.frozen]


def build_strategy(cfg: StrategyConfig, backbone: Transformer, vocab: Vocabulary, seed: int = 0,
                   classifier=None) -> PromptStrategy:
    """Construct the configured strategy over ``backbone``.

    Freezes the backbone for every prompt strategy and unfreezes it for
    fine-tuning. Pretrained and (optionally) Encoder IPT take their table
    from ``classifier`` or from the checkpoint named by ``cfg.pretrained_table``.
    """
    rng = np.random.default_rng(seed)
    d = backbone.config.d_model
    if cfg.strategy == "fine-tune":
        backbone.unfreeze()
        return FineTune(backbone)
    backbone.freeze()

    if classifier is None and cfg.pretrained_table and cfg.strategy in ("pretrained-ipt", "encoder-ipt"):
        from .knowledge import load_classifier
        classifier = load_classifier(cfg.pretrained_table)

    if cfg.strategy == "task-prompt":
        strategy: PromptStrategy = TaskPromptTuning(backbone, cfg.prompt_len, rng, cfg.init_std)
    elif cfg.strategy == "prefix":
        strategy = PrefixTuning(backbone, cfg.prompt_len, rng, cfg.init_std, cfg.prefix_reparam_hidden)
    elif cfg.strategy == "random-ipt":
        table = PromptTable.random(len(vocab), d, rng, dim=cfg.table_dim, std=cfg.init_std)
        strategy = RandomIPT(backbone, cfg.prompt_len, table)
    elif cfg.strategy == "pretrained-ipt":
        if classifier is None:
            raise ConfigError("pretrained-ipt needs a trained classifier (set pretrained_table)")
        strategy = PretrainedIPT(backbone, cfg.prompt_len, pretrained_ipt_init(classifier, vocab, d))
    else:
        if classifier is not None:
            table = pretrained_ipt_init(classifier, vocab)
        else:
            table = PromptTable.random(len(vocab), cfg.table_dim or d, rng, dim=cfg.table_dim or d,
                                       std=cfg.init_std)
        strategy = EncoderIPT(backbone, cfg.prompt_len, table, cfg.encoder, cfg.utilization_rate, rng,
                              hidden=cfg.encoder_hidden)

    if cfg.hard_prefix:
        strategy._hard_prefix = HardTypePrefix.from_category(cfg.hard_prefix, vocab)
    if cfg.family == "prefix":
        strategy.compose = PrefixIPTCompose(d, backbone.config.n_layers)
    n_train = sum(p.size for _, p in trainable_params(strategy))
    log.info(f"Built {strategy.name} strategy (family={cfg.family}, k={cfg.prompt_len}, trainable={n_train})")
    return strategy
