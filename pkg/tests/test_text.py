import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipt_lab.text import (BOS_ID, MASK_ID, SPECIALS, UNK_ID, TaskSpec, Vocabulary, build_vocab, encode_dataset,
                          load_jsonl, load_task_spec, tokenize, verbalize_and_encode, write_jsonl)

BOOLQ = TaskSpec(name="boolq", template="{passage} . question : {question} ? answer : [MASK] .",
                 verbalizer={"false": "no", "true": "yes"}, max_len=16)


@pytest.fixture
def qa_vocab():
    corpus = ["the cat sat on the mat", "is the cat on the mat"]
    return build_vocab(corpus, extra_tokens=BOOLQ.literal_words())


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Hello, World!") == ["hello", ",", "world", "!"]


def test_vocab_reserves_specials_and_orders_by_frequency():
    vocab = build_vocab(["b a a", "c b a"])
    assert vocab.tokens[:4] == SPECIALS
    assert vocab.tokens[4:] == ("a", "b", "c")
    assert vocab.id("zzz") == UNK_ID
    assert "a" in vocab and "zzz" not in vocab


def test_vocab_validation():
    with pytest.raises(ValueError):
        build_vocab([])
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "c", "d", "e"))
    with pytest.raises(ValueError):
        Vocabulary(SPECIALS + ("x", "x"))


def test_task_spec_needs_exactly_one_mask():
    with pytest.raises(ValueError):
        TaskSpec(name="t", template="{text} [MASK] [MASK]", verbalizer={"a": "x"})
    with pytest.raises(ValueError):
        TaskSpec(name="t", template="{text}", verbalizer={"a": "x"})
    with pytest.raises(ValueError):
        TaskSpec(name="t", template="{text} [MASK]", verbalizer={"a": "two words"})


def test_task_spec_fields_and_round_trip(tmp_path):
    assert BOOLQ.fields == ("passage", "question")
    path = tmp_path / "task.json"
    path.write_text(json.dumps(BOOLQ.to_dict()))
    assert load_task_spec(str(path)) == BOOLQ


def test_verbalize_and_encode_places_the_mask(qa_vocab):
    inst = verbalize_and_encode({"passage": "the cat sat", "question": "is the cat on", "label": True},
                                BOOLQ, qa_vocab, instance_id="q1")
    assert inst.token_ids[0] == BOS_ID
    assert inst.token_ids[inst.mask_position] == MASK_ID
    assert inst.label_id == 1
    assert qa_vocab.decode(inst.token_ids[-5:]) == ["?", "answer", ":", "[MASK]", "."]
    assert inst.raw_fields == {"passage": "the cat sat", "question": "is the cat on"}


def test_truncation_drops_from_the_longest_field(qa_vocab):
    long_passage = " ".join(["the cat sat on the mat"] * 5)
    inst = verbalize_and_encode({"passage": long_passage, "question": "is the cat", "label": "false"},
                                BOOLQ, qa_vocab)
    assert inst.n == BOOLQ.max_len
    assert MASK_ID in inst.token_ids
    words = qa_vocab.decode(inst.token_ids)
    assert words[words.index("question") + 2: words.index("question") + 5] == ["is", "the", "cat"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 60), st.integers(0, 20), st.integers(12, 40))
def test_truncation_always_keeps_mask(n_passage, n_question, max_len):
    spec = TaskSpec(name="t", template=BOOLQ.template, verbalizer=BOOLQ.verbalizer, max_len=max_len)
    vocab = build_vocab(["cat"], extra_tokens=spec.literal_words())
    raw = {"passage": " ".join(["cat"] * n_passage), "question": " ".join(["cat"] * n_question), "label": "true"}
    inst = verbalize_and_encode(raw, spec, vocab)
    assert inst.n <= max_len
    assert inst.token_ids[inst.mask_position] == MASK_ID
    assert inst.token_ids.count(MASK_ID) == 1


def test_encode_errors(qa_vocab):
    with pytest.raises(ValueError, match="missing template fields"):
        verbalize_and_encode({"passage": "cat", "label": "true"}, BOOLQ, qa_vocab)
    with pytest.raises(ValueError, match="not in verbalizer"):
        verbalize_and_encode({"passage": "cat", "question": "cat", "label": "maybe"}, BOOLQ, qa_vocab)
    with pytest.raises(ValueError, match="no label field"):
        verbalize_and_encode({"passage": "cat", "question": "cat"}, BOOLQ, qa_vocab)
    tight = TaskSpec(name="t", template=BOOLQ.template, verbalizer=BOOLQ.verbalizer, max_len=4)
    with pytest.raises(ValueError, match="lost by truncation"):
        verbalize_and_encode({"passage": "cat", "question": "cat", "label": "true"}, tight, qa_vocab)


def test_verbalizer_tokens_must_be_in_vocab():
    vocab = build_vocab(["cat"])
    with pytest.raises(ValueError, match="verbalizer tokens"):
        BOOLQ.verbalizer_ids(vocab)


def test_jsonl_round_trip_and_errors(tmp_path, qa_vocab):
    path = tmp_path / "d.jsonl"
    write_jsonl(str(path), [{"passage": "cat", "question": "mat", "label": "true"}])
    records = load_jsonl(str(path))
    assert encode_dataset(records, BOOLQ, qa_vocab, prefix="dev")[0].id == "dev-0"
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"a": 1}\n\nnot json\n')
    with pytest.raises(ValueError, match=":3:"):
        load_jsonl(str(bad))


def test_input_ids_hold_only_the_field_tokens(qa_vocab):
    inst = verbalize_and_encode({"passage": "the cat sat", "question": "is the cat", "label": True}, BOOLQ, qa_vocab)
    assert qa_vocab.decode(inst.input_ids) == ["the", "cat", "sat", "is", "the", "cat"]
    assert BOS_ID not in inst.input_ids and MASK_ID not in inst.input_ids
