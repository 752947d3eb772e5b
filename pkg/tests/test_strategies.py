from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipt_lab.backbone import Transformer, TransformerConfig
from ipt_lab.config import ConfigError
from ipt_lab.gradcheck import finite_diff_check
from ipt_lab.harness import expected_trainable_count, instance_loss
from ipt_lab.prompts import PromptVectors
from ipt_lab.strategies import (EncoderIPT, HardTypePrefix, PrefixIPTCompose, StrategyConfig, build_strategy,
                                encoder_param_count, hard_prefix_apply, pretrained_ipt_init, random_ipt_ids,
                                size_encoder, trainable_params, utilized_length)
from ipt_lab.tensor import Tape, Tensor
from ipt_lab.text import TaskSpec, Vocabulary, build_vocab, verbalize_and_encode

from conftest import tiny_config

DEFAULT_BACKBONE_PARAMS = 346448
PREFIX_TUNING_DEFAULT = 4 * 20 * 64


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 99), min_size=1, max_size=30), st.integers(1, 80))
def test_random_ipt_ids_cycle_through_the_input(ids, length):
    out = random_ipt_ids(ids, length)
    assert len(out) == length
    assert out == [ids[i % len(ids)] for i in range(length)]


def test_random_ipt_ids_examples():
    assert random_ipt_ids([7, 8, 9], 7) == [7, 8, 9, 7, 8, 9, 7]
    assert random_ipt_ids([1, 2, 3, 4, 5], 2) == [1, 2]
    with pytest.raises(ValueError):
        random_ipt_ids([], 3)


@pytest.mark.parametrize("n,rate,m", [(10, 0.21, 3), (10, 0.3, 3), (100, 0.002, 1), (10, 1.0, 10), (7, 0.5, 4),
                                      (1, 0.01, 1), (500, 0.013, 7)])
def test_utilized_length(n, rate, m):
    assert utilized_length(n, rate) == m


def test_strategy_config_validation():
    with pytest.raises(ConfigError, match="allowed: task-prompt"):
        StrategyConfig(strategy="lora")
    with pytest.raises(ConfigError):
        StrategyConfig(encoder="gru")
    with pytest.raises(ConfigError):
        StrategyConfig(utilization_rate=0.0)
    with pytest.raises(ConfigError):
        StrategyConfig(prompt_len=0)
    with pytest.raises(ConfigError, match="unknown category"):
        StrategyConfig(hard_prefix="Sports")
    with pytest.raises(ConfigError, match="hard_prefix"):
        StrategyConfig(strategy="encoder-ipt", hard_prefix="Human activities")
    with pytest.raises(ConfigError):
        StrategyConfig(strategy="task-prompt", family="prefix")
    assert StrategyConfig(hard_prefix="human activities").hard_prefix == "Human activities"


@pytest.mark.parametrize("variant,formula", [
    ("cnn", lambda h: 6 * h * h + 259 * h + 64),
    ("rnn", lambda h: 22 * h * h + 334 * h + 64),
    ("mlp", lambda h: 20 * h * h + 149 * h + 64),
])
def test_encoder_closed_forms(variant, formula):
    for h in (1, 3, 8):
        assert encoder_param_count(variant, h, 64, 64, 20) == formula(h)


@pytest.mark.parametrize("variant,hidden", [("cnn", 5), ("rnn", 3), ("mlp", 6)])
def test_encoder_sizing_on_the_default_backbone(variant, hidden):
    h = size_encoder(variant, DEFAULT_BACKBONE_PARAMS, 64, 64, 20)
    assert h == hidden
    count = encoder_param_count(variant, h, 64, 64, 20)
    assert count <= 0.005 * DEFAULT_BACKBONE_PARAMS
    assert count <= PREFIX_TUNING_DEFAULT / 3
    assert encoder_param_count(variant, h + 1, 64, 64, 20) > 0.005 * DEFAULT_BACKBONE_PARAMS


@pytest.mark.parametrize("name", ["task-prompt", "prefix", "random-ipt", "encoder-ipt", "fine-tune"])
def test_built_strategies_match_their_closed_form(name, backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(strategy=name, prompt_len=4), backbone, vocab, seed=0)
    count = sum(p.size for _, p in trainable_params(strategy))
    assert count == expected_trainable_count(strategy)
    pi = strategy.prompted_input(instances[0])
    if name in ("task-prompt", "random-ipt", "encoder-ipt"):
        assert pi.input_soft_prefix.shape == (4, 8)
    if name == "prefix":
        assert [p.shape for p in pi.per_layer_prefixes] == [(4, 8), (4, 8)]
    frozen_backbone = all(p.frozen for p in backbone.parameters())
    assert frozen_backbone == (name != "fine-tune")


def test_prefix_reparameterization_count(backbone, vocab):
    strategy = build_strategy(StrategyConfig(strategy="prefix", prompt_len=3, prefix_reparam_hidden=5),
                              backbone, vocab)
    assert sum(p.size for _, p in trainable_params(strategy)) == expected_trainable_count(strategy)
    assert [t.shape for t in strategy.layer_prefixes()] == [(3, 8), (3, 8)]


def test_random_ipt_prompts_are_table_rows(backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(strategy="random-ipt", prompt_len=20), backbone, vocab)
    inst = instances[0]
    rows = strategy.prompts(inst).matrix.data
    np.testing.assert_array_equal(rows, strategy.table.table.data[random_ipt_ids(inst.input_ids, 20)])


@pytest.mark.parametrize("name", ["random-ipt", "encoder-ipt"])
def test_instance_prompts_ignore_template_tokens(name, backbone, vocab, spec, task_records):
    text = " ".join(task_records[0]["text"].split()[:2])
    reordered = TaskSpec(name="t", template="it is {text} [MASK] .", verbalizer=spec.verbalizer, max_len=spec.max_len)
    a = verbalize_and_encode({"text": text, "label": task_records[0]["label"]}, spec, vocab)
    b = verbalize_and_encode({"text": text, "label": task_records[0]["label"]}, reordered, vocab)
    assert a.token_ids != b.token_ids and a.input_ids == b.input_ids
    strategy = build_strategy(StrategyConfig(strategy=name, prompt_len=5, encoder_hidden=2), backbone, vocab)
    np.testing.assert_array_equal(strategy.prompts(a).matrix.data, strategy.prompts(b).matrix.data)
    if name == "random-ipt":
        first, second = a.input_ids
        np.testing.assert_array_equal(strategy.prompts(a).matrix.data,
                                      strategy.table.table.data[[first, second, first, second, first]])


def test_table_projection_when_widths_differ(backbone, vocab):
    strategy = build_strategy(StrategyConfig(strategy="random-ipt", prompt_len=2, table_dim=5), backbone, vocab)
    assert strategy.table.projection is not None
    assert sum(p.size for _, p in trainable_params(strategy)) == len(vocab) * 5 + 5 * 8


@pytest.mark.parametrize("variant", ["cnn", "rnn", "mlp"])
def test_encoder_ipt_keeps_the_table_frozen(variant, backbone, vocab, instances):
    cfg = StrategyConfig(strategy="encoder-ipt", encoder=variant, prompt_len=4, utilization_rate=0.5,
                         encoder_hidden=3)
    strategy = build_strategy(cfg, backbone, vocab)
    cand = [vocab.id("alpha"), vocab.id("beta")]
    with Tape() as tape:
        loss = instance_loss(strategy, instances[0], cand)
    tape.backward(loss)
    assert strategy.table.table.grad is None
    assert all(p.grad is not None for _, p in trainable_params(strategy))
    assert all(name.startswith("encoder.") for name, _ in trainable_params(strategy))


@pytest.mark.parametrize("variant", ["cnn", "rnn", "mlp"])
def test_encoder_handles_inputs_shorter_than_the_prompt(variant, backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(strategy="encoder-ipt", encoder=variant, prompt_len=6,
                                             utilization_rate=0.05, encoder_hidden=2), backbone, vocab)
    assert strategy.prompts(instances[0]).k == 6


@pytest.mark.parametrize("cfg,param_name", [
    (dict(strategy="task-prompt"), "prompt"),
    (dict(strategy="prefix"), "prefixes.1"),
    (dict(strategy="random-ipt"), "table.table"),
    (dict(strategy="encoder-ipt", encoder="rnn", encoder_hidden=3), "encoder.out.weight"),
    (dict(strategy="random-ipt", family="prefix"), "compose.projections.1"),
])
def test_end_to_end_gradients(cfg, param_name, backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(prompt_len=3, **cfg), backbone, vocab, seed=2)
    inst = instances[1]
    cand = [vocab.id("alpha"), vocab.id("beta")]
    p = dict(strategy.named_parameters())[param_name]
    if param_name == "table.table":
        row = inst.token_ids[1]
        coords = list(range(row * 8, row * 8 + 8))
    else:
        coords = list(range(min(p.size, 12)))
    err = finite_diff_check(lambda _: instance_loss(strategy, inst, cand), p.tensor, coords=coords, floor=1e-6)
    assert err < 1e-4


def test_fine_tune_gradient_reaches_the_backbone(vocab, instances):
    model = Transformer(tiny_config(len(vocab)), seed=3)
    strategy = build_strategy(StrategyConfig(strategy="fine-tune"), model, vocab)
    inst = instances[2]
    cand = [vocab.id("alpha"), vocab.id("beta")]
    err = finite_diff_check(lambda _: instance_loss(strategy, inst, cand), model.blocks[0].ff1.weight.tensor,
                            coords=list(range(10)), floor=1e-6)
    assert err < 1e-4
    assert strategy.frozen_parameters() == []


def test_identity_compose_reproduces_the_prompts(rng):
    pv = PromptVectors(Tensor(rng.normal(size=(4, 8))), "random-ipt")
    layers = PrefixIPTCompose(8, 3)(pv)
    assert len(layers) == 3
    for t in layers:
        np.testing.assert_array_equal(t.data, pv.matrix.data)


def test_hard_prefix_prepends_the_category_phrase(backbone, vocab, instances):
    strategy = build_strategy(StrategyConfig(strategy="random-ipt", prompt_len=5, hard_prefix="Human activities"),
                              backbone, vocab)
    phrase = [vocab.id("human"), vocab.id("activities")]
    pv = strategy.prompts(instances[0])
    assert pv.k == 7
    np.testing.assert_array_equal(pv.matrix.data[:2], backbone.tok_emb.data[phrase])


def test_hard_prefix_errors(backbone, vocab, rng):
    with pytest.raises(ValueError, match="not in vocabulary"):
        HardTypePrefix.from_category("Human activities", build_vocab(["cat dog mouse"]))
    prefix = HardTypePrefix.from_category("General reference", vocab)
    pv = PromptVectors(Tensor(rng.normal(size=(40, 8))), "random-ipt")
    with pytest.raises(ValueError, match="context overflow"):
        hard_prefix_apply(prefix, pv, backbone, input_len=10)


def test_pretrained_init_reorders_by_vocabulary(vocab):
    shuffled = list(vocab.tokens[:4]) + list(reversed(vocab.tokens[4:]))
    src = Vocabulary(tuple(shuffled))
    emb = np.arange(len(src) * 3, dtype=float).reshape(len(src), 3)
    clf = SimpleNamespace(vocab=src, model=SimpleNamespace(embedding=SimpleNamespace(data=emb)))
    table = pretrained_ipt_init(clf, vocab)
    for tok in ("alpha", "human", "w0"):
        np.testing.assert_array_equal(table.table.data[vocab.id(tok)], emb[src.id(tok)])
    table.table.tensor.data[0, 0] = -1.0
    assert emb[0, 0] == 0.0


def test_pretrained_init_reports_missing_tokens(vocab):
    src = build_vocab(["alpha beta"])
    clf = SimpleNamespace(vocab=src, model=SimpleNamespace(embedding=SimpleNamespace(data=np.zeros((len(src), 3)))))
    with pytest.raises(ValueError, match="lacks"):
        pretrained_ipt_init(clf, vocab)


def test_pretrained_ipt_needs_a_classifier(backbone, vocab):
    with pytest.raises(ConfigError):
        build_strategy(StrategyConfig(strategy="pretrained-ipt"), backbone, vocab)


def test_prompt_vectors_validation():
    with pytest.raises(ValueError):
        PromptVectors(Tensor(np.zeros(3)), "x")
    with pytest.raises(ValueError):
        PromptVectors(Tensor([[np.nan]]), "x")


def test_default_encoder_ipt_on_the_default_backbone(vocab):
    model = Transformer(TransformerConfig(vocab_size=len(vocab)))
    strategy = build_strategy(StrategyConfig(strategy="encoder-ipt", encoder="cnn"), model, vocab)
    assert isinstance(strategy, EncoderIPT)
    count = sum(p.size for _, p in trainable_params(strategy))
    assert count <= 0.01 * model.num_parameters()
    assert count == encoder_param_count("cnn", strategy.hidden, 64, 64, 20)
