import json

import numpy as np
import pytest

from ipt_lab.backbone import Transformer, TransformerConfig
from ipt_lab.synth import SynthTaskConfig, gen_synth_task
from ipt_lab.taxonomy import CATEGORIES
from ipt_lab.text import build_vocab, encode_dataset

TINY_TASK = dict(n_triggers=8, per_class=12, background_size=20, min_len=3, max_len=6, max_len_tokens=16)


def tiny_config(vocab_size: int, **overrides) -> TransformerConfig:
    base = dict(vocab_size=vocab_size, d_model=8, n_layers=2, n_heads=2, ff_dim=16, max_context=48, init_std=0.1)
    base.update(overrides)
    return TransformerConfig(**base)


@pytest.fixture
def task_cfg():
    return SynthTaskConfig(**TINY_TASK)


@pytest.fixture
def task_records(task_cfg):
    return gen_synth_task(task_cfg, seed=0)


@pytest.fixture
def spec(task_cfg):
    return task_cfg.task_spec()


@pytest.fixture
def vocab(task_records, spec):
    extra = [w for c in CATEGORIES for w in c.lower().split()] + spec.literal_words()
    return build_vocab([r["text"] for r in task_records], extra_tokens=extra)


@pytest.fixture
def instances(task_records, spec, vocab):
    return encode_dataset(task_records, spec, vocab)


@pytest.fixture
def backbone(vocab):
    model = Transformer(tiny_config(len(vocab)), seed=0)
    model.freeze()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_RUN = {
    "seed": 0,
    "backbone": "model/backbone.json",
    "task": "data/task.json",
    "manifest": "data/corpus_manifest.json",
    "data": {"train": "data/train.jsonl", "dev": "data/dev.jsonl", "test": "data/test.jsonl"},
    "synth_task": TINY_TASK,
    "synth_category": {"texts_per_category": 4, "markers_per_category": 2, "background_size": 20,
                       "min_len": 3, "max_len": 5},
    "transformer": {"d_model": 8, "n_layers": 2, "n_heads": 2, "ff_dim": 16, "max_context": 48},
    "pretrain": {"steps": 2, "batch_size": 2, "warmup_steps": 1},
    "classifier": {"emb_dim": 8, "channels": 4, "epochs": 1, "batch_size": 8},
    "train": {"max_epochs": 1, "batch_size": 4, "warmup_steps": 0},
    "strategy": {"strategy": "random-ipt", "prompt_len": 3},
    "few_shot": {"k": 2, "grid": [{"lr": 1e-2, "prompt_len": 2}, {"lr": 3e-3, "prompt_len": 3}]},
    "sweep": {"axis": "prompt-length", "values": [2, 3]},
    "analysis": {"sample_size": 100, "case_instances": 2, "seeds": [0, 1]},
}


def write_run_config(directory, **changes):
    """A run config whose every stage finishes in seconds; paths are relative to the config file."""
    cfg = {**TINY_RUN, **changes}
    path = directory / "run.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def tiny_run_config(tmp_path):
    return write_run_config(tmp_path)
