"""Run configs and the pipelines behind every subcommand.

Each ``run_*`` function validates what it needs, writes its artifacts into
``out_dir`` and returns a JSON-serialisable summary. The CLI and the MCP
server both go through these functions.
"""

import dataclasses
import functools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .analysis import (case_study, distance_stats, plm_sentence_embeddings, project_2d,
                       prompt_sentence_embeddings, render_case_study, sample_indices, write_projection_csv,
                       write_scatter_svg)
from .backbone import (Transformer, TransformerConfig, load_backbone, masked_accuracy, mlm_pretrain, param_count,
                       save_backbone)
from .config import ConfigError, build_dataclass, read_config_file
from .harness import (DEFAULT_GRID, SEED_COLUMNS, RunResult, TrainConfig, few_shot_protocol, multi_seed_report,
                      param_ratio_report, sweep, train_config_from, train_downstream, validate_sweep, write_csv)
from .knowledge import (ClassifierConfig, TrainedClassifier, label_corpus_by_description, load_classifier,
                        load_manifest, save_classifier, train_classifier)
from .prompts import PromptTable
from .report import render_comparison
from .strategies import StrategyConfig, build_strategy
from .synth import (SynthCategoryConfig, SynthTaskConfig, default_markers, gen_synth_category_corpus,
                    gen_synth_task, train_dev_test)
from .taxonomy import CATEGORIES
from .text import (BOS_ID, LabeledInstance, TaskSpec, Vocabulary, build_vocab, encode_dataset, load_jsonl,
                   load_task_spec, write_jsonl)

log = logging.getLogger("ipt-lab")

COMMANDS = ("gen-data", "pretrain-backbone", "pretrain-prompts", "train", "few-shot", "sweep", "seeds", "analyze",
            "report")


@dataclass
class DataPaths:
    train: str = ""
    dev: str = ""
    test: str = ""


@dataclass
class PretrainConfig:
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    mask_rate: float = 0.15
    warmup_steps: int = 20
    corpus: List[str] = field(default_factory=list)


@dataclass
class FewShotConfig:
    k: int = 32
    folds: int = 4
    grid: List[Dict[str, Any]] = field(default_factory=lambda: [dict(p) for p in DEFAULT_GRID])


@dataclass
class SweepConfig:
    axis: str = "prompt-length"
    values: List[Any] = field(default_factory=lambda: [5, 10, 16, 32, 64, 100, 120])


@dataclass
class AnalysisConfig:
    sample_size: int = 4000
    case_instances: int = 3
    case_strategies: List[str] = field(default_factory=lambda: ["task-prompt", "random-ipt", "encoder-ipt"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    preset: str = "desk"
    backbone: str = ""
    task: str = ""
    manifest: str = ""
    data: DataPaths = field(default_factory=DataPaths)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk_defaults)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    synth_task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    synth_category: SynthCategoryConfig = field(default_factory=SynthCategoryConfig)
    few_shot: FewShotConfig = field(default_factory=FewShotConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = "") -> "RunConfig":
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown config keys {', '.join(unknown)}; allowed: {', '.join(sorted(top))}")
        preset = data.get("preset", "desk")
        rc = cls(
            seed=int(data.get("seed", 0)),
            out=str(data.get("out", "out")),
            preset=preset,
            backbone=_resolve(base_dir, data.get("backbone", "")),
            task=_resolve(base_dir, data.get("task", "")),
            manifest=_resolve(base_dir, data.get("manifest", "")),
            data=build_dataclass(DataPaths, {k: _resolve(base_dir, v) for k, v in (data.get("data") or {}).items()},
                                 "data"),
            strategy=build_dataclass(StrategyConfig, _resolved_strategy(data.get("strategy"), base_dir), "strategy"),
            train=train_config_from(preset, data.get("train") or {}),
            transformer=build_dataclass(TransformerConfig, data.get("transformer"), "transformer"),
            pretrain=build_dataclass(PretrainConfig, data.get("pretrain"), "pretrain"),
            classifier=build_dataclass(ClassifierConfig, data.get("classifier"), "classifier"),
            synth_task=build_dataclass(SynthTaskConfig, data.get("synth_task"), "synth_task"),
            synth_category=build_dataclass(SynthCategoryConfig, data.get("synth_category"), "synth_category"),
            few_shot=build_dataclass(FewShotConfig, data.get("few_shot"), "few_shot"),
            sweep=build_dataclass(SweepConfig, data.get("sweep"), "sweep"),
            analysis=build_dataclass(AnalysisConfig, data.get("analysis"), "analysis"),
        )
        rc.pretrain.corpus = [_resolve(base_dir, p) for p in rc.pretrain.corpus]
        try:
            rc.synth_task.validate()
        except ValueError as e:
            raise ConfigError(f"synth_task: {e}") from e
        return rc


def _resolve(base_dir: str, path: str) -> str:
    if not path or not base_dir or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def _resolved_strategy(block: Optional[Dict[str, Any]], base_dir: str) -> Dict[str, Any]:
    block = dict(block or {})
    if block.get("pretrained_table"):
        block["pretrained_table"] = _resolve(base_dir, block["pretrained_table"])
    return block


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < config file < ``overrides`` (already-parsed CLI flags)."""
    data: Dict[str, Any] = read_config_file(path) if path else {}
    base_dir = os.path.dirname(os.path.abspath(path)) if path else ""
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "strategy":
            data["strategy"] = {**(data.get("strategy") or {}), "strategy": value}
        elif key == "k":
            data["few_shot"] = {**(data.get("few_shot") or {}), "k": value}
        elif key in ("axis", "values"):
            data["sweep"] = {**(data.get("sweep") or {}), key: value}
        elif key == "seeds":
            data["analysis"] = {**(data.get("analysis") or {}), "seeds": _seed_list(value)}
        else:
            data[key] = value
    return RunConfig.from_dict(data, base_dir)


def _seed_list(value: Any) -> List[int]:
    items = value.split(",") if isinstance(value, str) else value
    try:
        return [int(s) for s in items if str(s).strip()]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"seeds must be integers, got {value!r}") from e


def _require(rc: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(rc.data, name[5:]) if name.startswith("data.") else getattr(rc, name)
        if not value:
            raise ConfigError(f"config needs '{name}' for this command")
        if not os.path.exists(value):
            raise ConfigError(f"'{name}' points to a missing file: {value}")


def validate_for(command: str, rc: RunConfig) -> None:
    """Everything a command needs, checked before any work starts."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; allowed: {', '.join(COMMANDS)}")
    if command in ("train", "few-shot", "sweep", "seeds", "analyze"):
        _require(rc, "backbone", "task", "data.train", "data.dev")
        if rc.strategy.strategy == "pretrained-ipt" and not rc.strategy.pretrained_table:
            raise ConfigError("strategy 'pretrained-ipt' needs strategy.pretrained_table")
        if rc.strategy.pretrained_table:
            _require_file(rc.strategy.pretrained_table, "strategy.pretrained_table")
    if command == "pretrain-prompts":
        _require(rc, "manifest")
    if command == "sweep":
        validate_sweep(rc.sweep.axis, rc.sweep.values)
    if command == "few-shot" and rc.few_shot.k < 1:
        raise ConfigError(f"few_shot.k must be >= 1, got {rc.few_shot.k}")
    if command == "seeds":
        seeds = list(rc.analysis.seeds)
        if len(seeds) < 2:
            raise ConfigError(f"analysis.seeds needs at least 2 seeds, got {seeds}")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"analysis.seeds repeats a seed: {seeds}")


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"'{what}' points to a missing file: {path}")


# shared loading

@dataclass
class TaskData:
    backbone: Transformer
    vocab: Vocabulary
    spec: TaskSpec
    train: List[LabeledInstance]
    dev: List[LabeledInstance]
    test: List[LabeledInstance]


def load_task_data(rc: RunConfig) -> TaskData:
    backbone, vocab, _ = load_backbone(rc.backbone)
    spec = load_task_spec(rc.task)
    split = {}
    for name in ("train", "dev", "test"):
        path = getattr(rc.data, name)
        split[name] = encode_dataset(load_jsonl(path), spec, vocab, prefix=name) if path else []
    return TaskData(backbone, vocab, spec, split["train"], split["dev"], split["test"])


def _classifier_for(rc: RunConfig) -> Optional[TrainedClassifier]:
    return load_classifier(rc.strategy.pretrained_table) if rc.strategy.pretrained_table else None


def _write_json(path: str, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# pipelines

def run_gen_data(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    """Synthetic trigger task splits plus the 13-category corpus and its manifest."""
    records = gen_synth_task(rc.synth_task, rc.seed)
    train, dev, test = train_dev_test(records, rc.seed)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        write_jsonl(os.path.join(out_dir, f"{name}.jsonl"), part)
    _write_json(os.path.join(out_dir, "task.json"), rc.synth_task.task_spec().to_dict())

    corpus = gen_synth_category_corpus(rc.synth_category, rc.seed)
    os.makedirs(os.path.join(out_dir, "corpus"), exist_ok=True)
    manifest = {}
    for i, cat in enumerate(CATEGORIES):
        rel = f"corpus/{i:02d}.jsonl"
        write_jsonl(os.path.join(out_dir, rel), [{"text": e.text} for e in corpus if e.category == cat])
        manifest[rel] = cat
    _write_json(os.path.join(out_dir, "corpus_manifest.json"), manifest)
    markers = rc.synth_category.markers or default_markers(rc.synth_category.markers_per_category)
    _write_json(os.path.join(out_dir, "markers.json"), markers)
    return {"command": "gen-data", "train": len(train), "dev": len(dev), "test": len(test),
            "corpus_texts": len(corpus), "artifacts": ["train.jsonl", "dev.jsonl", "test.jsonl", "task.json",
                                                       "corpus_manifest.json", "markers.json", "corpus/"]}


def _pretraining_texts(rc: RunConfig) -> List[str]:
    texts: List[str] = []
    paths = list(rc.pretrain.corpus)
    if not paths:
        paths = [p for p in (rc.data.train, rc.data.dev) if p]
        if rc.manifest:
            manifest, base = load_manifest(rc.manifest)
            paths += [os.path.join(base, p) for p in manifest]
    for path in paths:
        texts.extend(str(r["text"]) for r in load_jsonl(path) if "text" in r)
    if not texts:
        raise ConfigError("no pretraining text: set pretrain.corpus, data.train or manifest")
    return texts


def run_pretrain_backbone(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    """Build the vocabulary and pretrain the backbone with masked-token prediction."""
    texts = _pretraining_texts(rc)
    extra = [w for c in CATEGORIES for w in c.lower().split()]
    if rc.task:
        extra += load_task_spec(rc.task).literal_words()
    vocab = build_vocab(texts, extra_tokens=extra)
    cfg = dataclasses.replace(rc.transformer, vocab_size=len(vocab))
    model = Transformer(cfg, seed=rc.seed)
    corpus = [[BOS_ID] + vocab.encode(t) for t in texts]
    p = rc.pretrain
    history = mlm_pretrain(model, corpus, mask_rate=p.mask_rate, steps=p.steps, seed=rc.seed, lr=p.lr,
                           batch_size=p.batch_size, warmup_steps=p.warmup_steps)
    acc = masked_accuracy(model, corpus[:500], p.mask_rate, seed=rc.seed)
    digest = save_backbone(os.path.join(out_dir, "backbone.json"), model, vocab, step=p.steps,
                           extra={"masked_accuracy": acc})
    write_csv(os.path.join(out_dir, "pretrain_loss.csv"),
              [{"step": i + 1, "loss": l} for i, l in enumerate(history["loss"])], ("step", "loss"))
    return {"command": "pretrain-backbone", "vocab_size": len(vocab), "params": param_count(model),
            "final_loss": history["loss"][-1], "masked_accuracy": acc, "sha256": digest,
            "artifacts": ["backbone.json", "pretrain_loss.csv"]}


def run_pretrain_prompts(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    """Label the manifest corpus by source, train the category classifier and save it."""
    manifest, base = load_manifest(rc.manifest)
    examples = label_corpus_by_description(manifest, base)
    if rc.backbone:
        _, vocab, _ = load_backbone(rc.backbone)
    else:
        vocab = build_vocab([e.text for e in examples])
    cfg = rc.classifier
    if rc.backbone and cfg.emb_dim != rc.transformer.d_model:
        log.info(f"classifier emb_dim={cfg.emb_dim} differs from backbone width; the prompt table will project")
    clf = train_classifier(examples, vocab, cfg, seed=rc.seed)
    digest = save_classifier(os.path.join(out_dir, "classifier.json"), clf)
    _write_json(os.path.join(out_dir, "classifier_history.json"), clf.history)
    return {"command": "pretrain-prompts", "examples": len(examples), "heldout_accuracy": clf.accuracy,
            "sha256": digest, "artifacts": ["classifier.json", "classifier_history.json"]}


def train_once(rc: RunConfig, strategy_cfg: StrategyConfig, train_cfg: TrainConfig,
               metrics_path: Optional[str] = None, data: Optional[TaskData] = None) -> RunResult:
    """One downstream run on a private model copy."""
    data = data or load_task_data(rc)
    strategy = build_strategy(strategy_cfg, data.backbone, data.vocab, train_cfg.seed, _classifier_for(rc))
    return train_downstream(data.backbone, strategy, data.train, data.dev, data.spec, data.vocab, train_cfg,
                            test=data.test, metrics_path=metrics_path)


def run_train(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    train_cfg = dataclasses.replace(rc.train, seed=rc.seed)
    result = train_once(rc, rc.strategy, train_cfg, metrics_path=os.path.join(out_dir, "metrics.jsonl"))
    payload = {"strategy_config": dataclasses.asdict(rc.strategy), **result.to_dict()}
    _write_json(os.path.join(out_dir, "result.json"), payload)
    return {"command": "train", **payload, "artifacts": ["metrics.jsonl", "result.json"]}


def run_few_shot(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    data = load_task_data(rc)
    fs = few_shot_protocol(data.backbone, rc.strategy, data.train + data.dev, data.spec, data.vocab,
                           rc.train, k=rc.few_shot.k, grid=rc.few_shot.grid, seed=rc.seed,
                           folds=rc.few_shot.folds, test=data.test, classifier=_classifier_for(rc))
    payload = {"strategy_config": dataclasses.asdict(rc.strategy), "k": rc.few_shot.k, **fs.to_dict()}
    _write_json(os.path.join(out_dir, "few_shot.json"), payload)
    _write_json(os.path.join(out_dir, "result.json"),
                {"strategy_config": dataclasses.asdict(rc.strategy), **fs.result.to_dict()})
    return {"command": "few-shot", **payload, "artifacts": ["few_shot.json", "result.json"]}


def sweep_cell(rc: RunConfig, strategy_cfg: StrategyConfig, train_cfg: TrainConfig) -> RunResult:
    """Worker entry point: loads its own backbone copy from the checkpoint."""
    return train_once(rc, strategy_cfg, train_cfg)


def run_sweep(rc: RunConfig, out_dir: str, jobs: int = 1) -> Dict[str, Any]:
    train_cfg = dataclasses.replace(rc.train, seed=rc.seed)
    rows = sweep(rc.sweep.axis, rc.sweep.values, rc.strategy, train_cfg, functools.partial(sweep_cell, rc),
                 jobs=jobs, out_csv=os.path.join(out_dir, "sweep.csv"))
    return {"command": "sweep", "axis": rc.sweep.axis, "rows": rows, "artifacts": ["sweep.csv"]}


def run_seeds(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    """Repeat ``train`` over the configured seeds and aggregate."""
    data = load_task_data(rc)
    initial = data.backbone.state_dict()

    def one(seed: int) -> RunResult:
        data.backbone.load_state_dict(initial)
        return train_once(rc, rc.strategy, dataclasses.replace(rc.train, seed=seed), data=data)

    report = multi_seed_report(one, rc.analysis.seeds)
    write_csv(os.path.join(out_dir, "seeds.csv"), report.rows, SEED_COLUMNS)
    payload = {"strategy_config": dataclasses.asdict(rc.strategy), "seeds": list(rc.analysis.seeds),
               "mean": report.mean, "sd": report.sd, "rows": report.rows}
    _write_json(os.path.join(out_dir, "seeds.json"), payload)
    return {"command": "seeds", **payload, "artifacts": ["seeds.csv", "seeds.json"]}


def _category_instances(rc: RunConfig, vocab: Vocabulary, size: int, max_tokens: int) -> Tuple[List[LabeledInstance], List[str]]:
    manifest, base = load_manifest(rc.manifest)
    examples = label_corpus_by_description(manifest, base)
    keep = sample_indices(len(examples), size, rc.seed)
    instances, cats = [], []
    for i in keep:
        ids = tuple([BOS_ID] + vocab.encode(examples[i].text)[: max_tokens - 1])
        instances.append(LabeledInstance(id=f"corpus-{i}", raw_fields={"text": examples[i].text}, token_ids=ids,
                                         label_id=0, mask_position=0, content_ids=ids[1:]))
        cats.append(examples[i].category)
    return instances, cats


def _marker_stats(vocab: Vocabulary, table: np.ndarray, rc: RunConfig) -> Optional[Dict[str, float]]:
    markers = rc.synth_category.markers or default_markers(rc.synth_category.markers_per_category)
    rows, cats = [], []
    for cat, words in markers.items():
        for w in words:
            if w in vocab:
                rows.append(table[vocab.id(w)])
                cats.append(cat)
    if len(set(cats)) < 2:
        return None
    try:
        return distance_stats(np.stack(rows), cats)
    except ValueError as e:
        log.warning(f"marker distance stats skipped: {e}")
        return None


def run_analyze(rc: RunConfig, out_dir: str) -> Dict[str, Any]:
    """Sentence-embedding projections, knowledge clustering statistics and the case study."""
    data = load_task_data(rc)
    classifier = _classifier_for(rc)
    summary: Dict[str, Any] = {"command": "analyze"}
    artifacts = ["projection.csv", "scatter.svg", "case_study.md", "analysis.json"]

    if rc.manifest:
        instances, cats = _category_instances(rc, data.vocab, rc.analysis.sample_size,
                                              data.backbone.config.max_context)
    else:
        pool = data.train + data.dev + data.test
        keep = sample_indices(len(pool), rc.analysis.sample_size, rc.seed)
        instances = [pool[i] for i in keep]
        cats = [data.spec.labels[inst.label_id] for inst in instances]

    prompt_cfg = dataclasses.replace(rc.strategy, strategy="encoder-ipt" if classifier else "random-ipt",
                                     hard_prefix=None, family="input")
    prompt_side = build_strategy(prompt_cfg, data.backbone, data.vocab, rc.seed, classifier)
    spaces = {"plm": plm_sentence_embeddings(data.backbone, instances),
              "prompt": prompt_sentence_embeddings(prompt_side, instances)}
    projections, stats = {}, {}
    for name, vecs in spaces.items():
        projections[name] = project_2d(vecs, cats, [inst.id for inst in instances], seed=rc.seed)
        stats[name] = distance_stats(vecs, cats)
    write_projection_csv(os.path.join(out_dir, "projection.csv"), projections)
    write_scatter_svg(os.path.join(out_dir, "scatter.svg"), projections)
    summary["distance_stats"] = stats
    summary["explained_variance"] = {k: [float(x) for x in p.explained] for k, p in projections.items()}

    if classifier is not None:
        random_table = PromptTable.random(len(data.vocab), classifier.embedding.shape[1],
                                          np.random.default_rng(rc.seed), std=classifier.config.emb_std)
        summary["marker_clustering"] = {
            "pretrained": _marker_stats(classifier.vocab, classifier.embedding, rc),
            "random": _marker_stats(data.vocab, random_table.table.data, rc),
        }

    reports = []
    initial = data.backbone.state_dict()
    case_set = (data.test or data.dev)[: rc.analysis.case_instances]
    for name in rc.analysis.case_strategies:
        if name == "pretrained-ipt" and classifier is None:
            log.warning("case study skips pretrained-ipt: no classifier configured")
            continue
        data.backbone.load_state_dict(initial)
        s_cfg = dataclasses.replace(rc.strategy, strategy=name, hard_prefix=None, family="input")
        strategy = build_strategy(s_cfg, data.backbone, data.vocab, rc.seed, classifier)
        train_downstream(data.backbone, strategy, data.train, data.dev, data.spec, data.vocab,
                         dataclasses.replace(rc.train, seed=rc.seed))
        reports.append(case_study(strategy, case_set, data.spec, data.vocab))
    with open(os.path.join(out_dir, "case_study.md"), "w", encoding="utf-8") as f:
        f.write(render_case_study(reports))

    strategies = {}
    # fine-tune last: building it unfreezes the backbone
    for name in ("prefix", "task-prompt", "random-ipt", "encoder-ipt", "fine-tune"):
        s_cfg = dataclasses.replace(rc.strategy, strategy=name, hard_prefix=None, family="input")
        strategies[name] = build_strategy(s_cfg, data.backbone, data.vocab, rc.seed)
    summary["param_ratio"] = param_ratio_report(strategies, data.backbone)
    _write_json(os.path.join(out_dir, "analysis.json"), summary)
    summary["artifacts"] = artifacts
    return summary


def run_report(run_dirs: Sequence[str], out_dir: str) -> Dict[str, Any]:
    """Markdown comparison across finished run directories."""
    entries = []
    for d in run_dirs:
        path = os.path.join(d, "result.json")
        if not os.path.isfile(path):
            raise ConfigError(f"{d}: no result.json (is it a finished train or few-shot run?)")
        with open(path, encoding="utf-8") as f:
            entries.append({"run": d, **json.load(f)})
    markdown = render_comparison(entries)
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as f:
        f.write(markdown)
    return {"command": "report", "runs": len(entries), "markdown": markdown, "artifacts": ["report.md"]}


def manifest_record(command: str, config_path: Optional[str], config_sha: str, seed: int, started: str,
                    finished: str, outputs: Sequence[str]) -> Dict[str, Any]:
    return {"command": command, "config": config_path, "config_sha256": config_sha, "seed": seed,
            "code_version": __version__, "started": started, "finished": finished, "outputs": list(outputs)}
