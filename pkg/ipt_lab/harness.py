"""Downstream tuning with a frozen backbone, evaluation, the few-shot
protocol, seed aggregation, sweeps and parameter accounting."""

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .backbone import Transformer
from .config import ConfigError, allowed
from .optim import Adam
from .splits import sample_few_shot
from .strategies import (STRATEGIES, EncoderIPT, FineTune, PrefixTuning, PromptStrategy, RandomIPT,
                         StrategyConfig, TaskPromptTuning, build_strategy, encoder_param_count, trainable_params)
from .tensor import Tape
from .text import LabeledInstance, TaskSpec, Vocabulary

log = logging.getLogger("ipt-lab")


class FrozenDriftError(RuntimeError):
    """A parameter that should have stayed frozen changed during training."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-5
    grad_accum_steps: int = 2
    warmup_steps: int = 2000
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "grad_accum_steps", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")

    @classmethod
    def paper_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{**dict(batch_size=32, lr=1e-5, grad_accum_steps=2, warmup_steps=2000, max_epochs=100,
                             early_stop_patience=10), **overrides})

    @classmethod
    def desk_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**{**dict(batch_size=8, lr=1e-2, grad_accum_steps=1, warmup_steps=200, max_epochs=30,
                             early_stop_patience=5), **overrides})


PRESETS = {"paper-defaults": TrainConfig.paper_defaults, "desk": TrainConfig.desk_defaults}


def train_config_from(preset: str, overrides: Dict[str, Any]) -> TrainConfig:
    if preset not in PRESETS:
        raise allowed("preset", preset, PRESETS)
    unknown = sorted(set(overrides) - {f.name for f in dataclasses.fields(TrainConfig)})
    if unknown:
        raise ConfigError(f"train: unknown keys {', '.join(unknown)}")
    return PRESETS[preset](**overrides)


@dataclass
class RunResult:
    strategy: str
    seed: int
    train_loss: List[float] = field(default_factory=list)
    dev_accuracy: List[float] = field(default_factory=list)
    best_dev_accuracy: float = 0.0
    best_epoch: int = 0
    train_accuracy: float = 0.0
    test_accuracy: Optional[float] = None
    trainable_params: int = 0
    param_ratio: float = 0.0
    wall_time: float = 0.0
    steps: int = 0

    @property
    def score(self) -> float:
        return self.best_dev_accuracy if self.test_accuracy is None else self.test_accuracy

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


class FrozenSnapshot:
    """Content hashes of every frozen parameter, taken before training."""

    def __init__(self, strategy: PromptStrategy):
        self.hashes = {name: self._digest(p.data) for name, p in strategy.frozen_parameters()}

    @staticmethod
    def _digest(arr: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()

    def drifted(self, strategy: PromptStrategy) -> List[str]:
        now = dict(strategy.frozen_parameters())
        return sorted(n for n, h in self.hashes.items() if n not in now or self._digest(now[n].data) != h)

    def verify(self, strategy: PromptStrategy) -> None:
        drifted = self.drifted(strategy)
        if drifted:
            raise FrozenDriftError(f"frozen parameters changed during training: {', '.join(drifted)}")


# loss and evaluation

def instance_loss(strategy: PromptStrategy, instance: LabeledInstance, candidate_ids: Sequence[int]):
    """-log p(y | t, x) with p the softmax over the verbalizer logits."""
    logits = strategy.backbone.cloze_logits(strategy.prompted_input(instance), candidate_ids)
    return ops.cross_entropy(logits, np.asarray([instance.label_id]))


def evaluate(backbone: Transformer, strategy: PromptStrategy, instances: Sequence[LabeledInstance],
             spec: TaskSpec, vocab: Vocabulary) -> Tuple[float, float]:
    """Accuracy and mean loss over ``instances``."""
    if not instances:
        return 0.0, 0.0
    if strategy.backbone is not backbone:
        raise ValueError("strategy was built over a different backbone")
    cand = spec.verbalizer_ids(vocab)
    hits, losses = 0, []
    for inst in instances:
        logits = backbone.cloze_logits(strategy.prompted_input(inst), cand)
        losses.append(float(ops.cross_entropy(logits, np.asarray([inst.label_id])).data))
        hits += int(np.argmax(logits.data)) == inst.label_id
    return hits / len(instances), float(np.mean(losses))


def _groups(order: np.ndarray, batch_size: int, accum: int) -> List[List[List[int]]]:
    batches = [[int(i) for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]
    return [batches[s:s + accum] for s in range(0, len(batches), accum)]


def train_downstream(backbone: Transformer, strategy: PromptStrategy, train: Sequence[LabeledInstance],
                     dev: Sequence[LabeledInstance], spec: TaskSpec, vocab: Vocabulary, cfg: TrainConfig,
                     test: Sequence[LabeledInstance] = (), metrics_path: Optional[str] = None) -> RunResult:
    """Tune the strategy's trainable parameters with early stopping on dev accuracy.

    Gradients of one accumulation group are summed with each instance loss
    scaled by 1/(instances in the group), so ``grad_accum_steps=2`` with
    batch 16 takes the same update as batch 32. The best epoch's parameters
    are restored at the end and the frozen snapshot is checked.
    """
    if not train:
        raise ValueError("no training instances")
    if strategy.backbone is not backbone:
        raise ValueError("strategy was built over a different backbone")
    start = time.perf_counter()
    cand = spec.verbalizer_ids(vocab)
    named = trainable_params(strategy)
    params = [p for _, p in named]
    opt = Adam(params, lr=cfg.lr, warmup_steps=cfg.warmup_steps)
    snapshot = FrozenSnapshot(strategy)
    rng = np.random.default_rng(cfg.seed)
    n_train = sum(p.size for p in params)

    result = RunResult(strategy=strategy.name, seed=cfg.seed, trainable_params=n_train,
                       param_ratio=n_train / backbone.num_parameters())
    best: Optional[Tuple[float, float]] = None
    best_state = {n: p.data.copy() for n, p in named}
    stale = 0
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            epoch_loss = 0.0
            for group in _groups(rng.permutation(len(train)), cfg.batch_size, cfg.grad_accum_steps):
                scale = 1.0 / sum(len(b) for b in group)
                opt.zero_grad()
                step_loss = 0.0
                for batch in group:
                    for i in batch:
                        with Tape() as tape:
                            loss = ops.mul(instance_loss(strategy, train[i], cand), scale)
                        tape.backward(loss)
                        step_loss += float(loss.data)
                opt.step()
                result.steps += 1
                epoch_loss += step_loss * sum(len(b) for b in group)
                log.debug(f"step {result.steps} loss={step_loss:.5f}")
            result.train_loss.append(epoch_loss / len(train))
            acc, dev_loss = evaluate(backbone, strategy, dev, spec, vocab)
            result.dev_accuracy.append(acc)
            log.info(f"epoch {epoch}/{cfg.max_epochs} train_loss={result.train_loss[-1]:.4f} "
                     f"dev_acc={acc:.4f} dev_loss={dev_loss:.4f}")
            if metrics is not None:
                metrics.write(json.dumps({"epoch": epoch, "train_loss": result.train_loss[-1], "dev_accuracy": acc,
                                          "dev_loss": dev_loss, "lr": opt.current_lr()}) + "\n")
            if best is None or acc > best[0] or (acc == best[0] and dev_loss < best[1]):
                best = (acc, dev_loss)
                result.best_dev_accuracy, result.best_epoch = acc, epoch
                best_state = {n: p.data.copy() for n, p in named}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    log.info(f"early stop after epoch {epoch} (best epoch {result.best_epoch})")
                    break
    finally:
        if metrics is not None:
            metrics.close()

    for n, p in named:
        p.tensor.data = best_state[n]
    snapshot.verify(strategy)
    result.train_accuracy = evaluate(backbone, strategy, train, spec, vocab)[0]
    if test:
        result.test_accuracy = evaluate(backbone, strategy, test, spec, vocab)[0]
    result.wall_time = time.perf_counter() - start
    return result


# few-shot protocol

DEFAULT_GRID = ({"lr": 1e-2, "prompt_len": 5}, {"lr": 1e-2, "prompt_len": 20},
                {"lr": 3e-3, "prompt_len": 5}, {"lr": 3e-3, "prompt_len": 20})


def apply_grid_point(point: Dict[str, Any], strategy_cfg: StrategyConfig,
                     train_cfg: TrainConfig) -> Tuple[StrategyConfig, TrainConfig]:
    """Split one grid point's keys between the strategy and the training config."""
    s_fields = {f.name for f in dataclasses.fields(StrategyConfig)}
    t_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(point) - s_fields - t_fields)
    if unknown:
        raise ConfigError(f"grid keys not recognised: {', '.join(unknown)}")
    s = dataclasses.replace(strategy_cfg, **{k: v for k, v in point.items() if k in s_fields})
    t = dataclasses.replace(train_cfg, **{k: v for k, v in point.items() if k in t_fields})
    return s, t


@dataclass
class FewShotResult:
    result: RunResult
    chosen_index: int
    chosen: Dict[str, Any]
    cv_scores: List[List[float]]
    cv_fits: int
    final_fits: int

    def to_dict(self) -> Dict[str, Any]:
        return {"result": self.result.to_dict(), "chosen_index": self.chosen_index, "chosen": self.chosen,
                "cv_scores": self.cv_scores, "cv_means": [float(np.mean(s)) for s in self.cv_scores],
                "cv_fits": self.cv_fits, "final_fits": self.final_fits}


def few_shot_protocol(backbone: Transformer, strategy_cfg: StrategyConfig, instances: Sequence[LabeledInstance],
                      spec: TaskSpec, vocab: Vocabulary, train_cfg: TrainConfig, k: int = 32,
                      grid: Sequence[Dict[str, Any]] = DEFAULT_GRID, seed: int = 0, folds: int = 4,
                      test: Sequence[LabeledInstance] = (), classifier=None) -> FewShotResult:
    """Sample 2K per label, pick the grid point with the best mean k-fold
    accuracy on that sample, then retrain it on the first K per label with
    early stopping on the second K. Ties go to the earlier grid point."""
    if not grid:
        raise ConfigError("few-shot grid is empty")
    points = [apply_grid_point(p, strategy_cfg, train_cfg) for p in grid]
    split = sample_few_shot([inst.label_id for inst in instances], k, seed, folds, label_names=spec.labels)
    initial = backbone.state_dict()

    def fit(s_cfg: StrategyConfig, t_cfg: TrainConfig, tr: List[int], dv: List[int],
            te: Sequence[LabeledInstance] = ()) -> RunResult:
        backbone.load_state_dict(initial)
        strategy = build_strategy(s_cfg, backbone, vocab, seed, classifier)
        return train_downstream(backbone, strategy, [instances[i] for i in tr], [instances[i] for i in dv],
                                spec, vocab, dataclasses.replace(t_cfg, seed=seed), test=te)

    cv_scores: List[List[float]] = []
    cv_fits = 0
    for idx, (s_cfg, t_cfg) in enumerate(points):
        scores = []
        for tr, va in split.folds:
            scores.append(fit(s_cfg, t_cfg, tr, va).best_dev_accuracy)
            cv_fits += 1
        cv_scores.append(scores)
        log.info(f"grid point {idx} {dict(grid[idx])}: cv mean {np.mean(scores):.4f}")
    means = [float(np.mean(s)) for s in cv_scores]
    chosen = int(np.argmax(means))
    s_cfg, t_cfg = points[chosen]
    final = fit(s_cfg, t_cfg, split.train, split.dev, test)
    backbone.load_state_dict(initial)
    log.info(f"few-shot K={k}: chose grid point {chosen}, {cv_fits} cv fits + 1 final fit")
    return FewShotResult(result=final, chosen_index=chosen, chosen=dict(grid[chosen]), cv_scores=cv_scores,
                         cv_fits=cv_fits, final_fits=1)


# aggregation

@dataclass
class SeedReport:
    mean: float
    sd: float
    rows: List[Dict[str, Any]]


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError(f"need at least 2 values to aggregate, got {arr.size}")
    return float(arr.mean()), float(arr.std(ddof=1))


SEED_COLUMNS = ("seed", "score", "best_dev_accuracy", "test_accuracy")


def multi_seed_report(run: Callable[[int], RunResult], seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> SeedReport:
    if len(seeds) < 2:
        raise ValueError(f"need at least 2 seeds, got {len(seeds)}")
    rows = []
    for seed in seeds:
        res = run(seed)
        rows.append(dict(zip(SEED_COLUMNS, (seed, res.score, res.best_dev_accuracy, res.test_accuracy))))
    mean, sd = aggregate([r["score"] for r in rows])
    log.info(f"{len(seeds)} seeds: mean={mean:.4f} sd={sd:.4f}")
    return SeedReport(mean=mean, sd=sd, rows=rows)


# sweeps

SWEEP_AXES = ("prompt-length", "utilization-rate", "strategy")
_AXIS_FIELD = {"prompt-length": "prompt_len", "utilization-rate": "utilization_rate", "strategy": "strategy"}

SWEEP_COLUMNS = ("axis", "value", "strategy", "best_dev_accuracy", "best_epoch", "test_accuracy",
                 "trainable_params", "param_ratio", "wall_time")


def _parse_rate(value: Any) -> float:
    if isinstance(value, str) and value.strip().endswith("%"):
        return float(value.strip()[:-1]) / 100.0
    return float(value)


def validate_sweep(axis: str, values: Sequence[Any]) -> Tuple[str, List[Any]]:
    """Normalise the axis name and parse every value; raises ConfigError before any work."""
    axis = axis.replace("_", "-")
    if axis not in SWEEP_AXES:
        raise allowed("sweep axis", axis, SWEEP_AXES)
    if not values:
        raise ConfigError("sweep needs at least one value")
    parsed: List[Any] = []
    for v in values:
        try:
            if axis == "prompt-length":
                x = int(v)
                ok = x >= 1 and float(v) == x
            elif axis == "utilization-rate":
                x = _parse_rate(v)
                ok = 0.0 < x <= 1.0
            else:
                x = str(v).strip()
                ok = x in STRATEGIES
        except (TypeError, ValueError):
            ok = False
        if not ok:
            if axis == "strategy":
                raise allowed("strategy", v, STRATEGIES)
            raise ConfigError(f"invalid {axis} value {v!r}")
        parsed.append(x)
    return axis, parsed


def sweep(axis: str, values: Sequence[Any], strategy_cfg: StrategyConfig, train_cfg: TrainConfig,
          runner: Callable[[StrategyConfig, TrainConfig], RunResult], jobs: int = 1,
          out_csv: Optional[str] = None) -> List[Dict[str, Any]]:
    """One run per value along ``axis``; rows come back in value order.

    ``runner`` must build its own model copy; with ``jobs > 1`` it runs in
    worker processes and has to be picklable.
    """
    axis, parsed = validate_sweep(axis, values)
    cells = [dataclasses.replace(strategy_cfg, **{_AXIS_FIELD[axis]: v}) for v in parsed]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(runner, cells, [train_cfg] * len(cells)))
    else:
        results = [runner(c, train_cfg) for c in cells]
    rows = []
    for v, res in zip(parsed, results):
        rows.append({"axis": axis, "value": v, "strategy": res.strategy, "best_dev_accuracy": res.best_dev_accuracy,
                     "best_epoch": res.best_epoch, "test_accuracy": res.test_accuracy,
                     "trainable_params": res.trainable_params, "param_ratio": res.param_ratio,
                     "wall_time": round(res.wall_time, 3)})
    if out_csv:
        write_csv(out_csv, rows, SWEEP_COLUMNS)
    return rows


def write_csv(path: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in columns})


# parameter accounting

def expected_trainable_count(strategy: PromptStrategy) -> int:
    """Closed-form trainable parameter count, independent of module enumeration."""
    cfg = strategy.backbone.config
    d, k = cfg.d_model, strategy.prompt_len
    if isinstance(strategy, FineTune):
        return strategy.backbone.num_parameters()
    if isinstance(strategy, TaskPromptTuning):
        count = k * d
    elif isinstance(strategy, PrefixTuning):
        if strategy._reparam:
            hid = strategy.reparam_in.weight.data.shape[1]
            count = k * d + (d * hid + hid) + (hid * cfg.n_layers * d + cfg.n_layers * d)
        else:
            count = cfg.n_layers * k * d
    elif isinstance(strategy, RandomIPT):
        v, d_p = strategy.table.shape
        count = v * d_p + (d_p * d if d_p != d else 0)
    elif isinstance(strategy, EncoderIPT):
        count = encoder_param_count(strategy.variant, strategy.hidden, strategy.table.shape[1], d, k)
    else:
        raise TypeError(f"no closed form for {type(strategy).__name__}")
    if strategy.compose is not None:
        count += cfg.n_layers * d * d
    return count


def param_ratio_report(strategies: Dict[str, PromptStrategy], backbone: Transformer,
                       prefix_count: Optional[int] = None) -> List[Dict[str, Any]]:
    """Per strategy: trainable count, ratio against fine-tuning and against Prefix Tuning."""
    full = backbone.num_parameters()
    if prefix_count is None:
        prefixes = [s for s in strategies.values() if isinstance(s, PrefixTuning)]
        k = prefixes[0].prompt_len if prefixes else 20
        prefix_count = (sum(p.size for _, p in trainable_params(prefixes[0])) if prefixes
                        else backbone.config.n_layers * k * backbone.config.d_model)
    rows = []
    for name, strategy in strategies.items():
        count = sum(p.size for _, p in trainable_params(strategy))
        rows.append({"strategy": name, "trainable_params": count, "ratio_vs_finetune": count / full,
                     "ratio_vs_prefix": count / prefix_count,
                     "matches_closed_form": count == expected_trainable_count(strategy)})
    return rows
