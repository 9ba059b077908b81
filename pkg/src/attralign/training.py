"""Two-stage training driver and the ablation suite.

Stage one optimizes the contrastive alignment objective over the projection
heads; stage two trains a linear classifier over projected objects (softmax
cross-entropy), updating the object head and classifier. The one-stage mode
optimizes both losses jointly from step zero; stage2-only skips alignment;
finetune-only freezes the heads and fits the classifier alone.

Effective batch sizes are honored by accumulation: each seeded-shuffle batch
is processed in micro-batches whose gradients sum into one optimizer step,
and each micro-batch contributes its own in-batch contrastive denominators.
Recorded per-step losses are sums over the effective batch. All randomness
flows from one seeded generator, so identical inputs and config reproduce
the loss history bit-for-bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import AlignmentDataset, Split
from .diagnostics import MetricsReport, compute_metrics
from .errors import ConfigError, MiningIncomplete
from .losses import object_category_graph, stage1_graph
from .mining import HardNegativeSet, mine, simple_negatives
from .model import (
    AdamConfig,
    ClassifierHead,
    OptimizerState,
    ProjectionModel,
    adam_step,
    head_graph,
    views_graph,
)
from .numerics import Tape, add, add_rowvec, backward, logsumexp_rows, matmul, \
    scale, select_cols, sum_all, transpose


class TrainMode(str, Enum):
    TWO_STAGE = "two-stage"
    ONE_STAGE = "one-stage"
    STAGE2_ONLY = "stage2-only"
    FINETUNE_ONLY = "finetune-only"


class ContrastMode(str, Enum):
    TRIPLE = "triple"
    OBJECT_CATEGORY = "object-category"


@dataclass(frozen=True)
class StageConfig:
    batch_size: int = 64
    epochs: int = 1
    lr: float = 2e-4
    warmup_steps: int = 60
    temperature: float = 1.0

    def as_dict(self) -> dict:
        return {"batch_size": self.batch_size, "epochs": self.epochs, "lr": self.lr,
                "warmup_steps": self.warmup_steps, "temperature": self.temperature}


@dataclass(frozen=True)
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(batch_size=64))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(batch_size=128))
    k_hard_negatives: int = 3
    mode: TrainMode = TrainMode.TWO_STAGE
    contrast: ContrastMode = ContrastMode.TRIPLE
    micro_batch: int = 16
    one_stage_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2)):
            if stage.batch_size < 1:
                raise ConfigError(f"{name}.batch_size must be >= 1")
            if stage.epochs < 0:
                raise ConfigError(f"{name}.epochs must be >= 0")
            if not stage.lr > 0:
                raise ConfigError(f"{name}.lr must be positive")
            if stage.warmup_steps < 0:
                raise ConfigError(f"{name}.warmup_steps must be >= 0")
            if not stage.temperature > 0:
                raise ConfigError(f"{name}.temperature must be positive")
        if self.k_hard_negatives < 1:
            raise ConfigError("k_hard_negatives must be >= 1")
        if self.micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")
        if self.one_stage_weight < 0:
            raise ConfigError("one_stage_weight must be >= 0")

    def as_dict(self) -> dict:
        return {
            "stage1": self.stage1.as_dict(),
            "stage2": self.stage2.as_dict(),
            "k_hard_negatives": self.k_hard_negatives,
            "mode": self.mode.value,
            "contrast": self.contrast.value,
            "micro_batch": self.micro_batch,
            "one_stage_weight": self.one_stage_weight,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        kwargs = dict(payload)
        if "stage1" in kwargs:
            kwargs["stage1"] = StageConfig(**kwargs["stage1"])
        if "stage2" in kwargs:
            kwargs["stage2"] = StageConfig(**kwargs["stage2"])
        if "mode" in kwargs:
            kwargs["mode"] = TrainMode(kwargs["mode"])
        if "contrast" in kwargs:
            kwargs["contrast"] = ContrastMode(kwargs["contrast"])
        return cls(**kwargs)


@dataclass(frozen=True)
class StepRecord:
    stage: str
    step: int
    losses: dict[str, float]
    lr: float

    def as_dict(self) -> dict:
        return {"stage": self.stage, "step": self.step, "lr": self.lr,
                "losses": dict(sorted(self.losses.items()))}


@dataclass
class RunRecord:
    """Everything one training run produced, minus the model itself."""

    config: dict
    seed: int
    history: list[StepRecord] = field(default_factory=list)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    initial_metrics: MetricsReport | None = None
    final_metrics: MetricsReport | None = None

    def save(self, directory) -> tuple[Path, Path]:
        """Write the deterministic record plus a volatile timing sidecar.

        Wall times vary run to run, so they live in timing.json and stay out
        of the reproducibility-checked record.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        record = {
            "kind": "run-record",
            "config": self.config,
            "seed": self.seed,
            "history": [h.as_dict() for h in self.history],
            "initial_metrics": None if self.initial_metrics is None else self.initial_metrics.to_dict(),
            "final_metrics": None if self.final_metrics is None else self.final_metrics.to_dict(),
        }
        record_path = directory / "record.json"
        record_path.write_text(json.dumps(record, indent=2, sort_keys=True))
        timing_path = directory / "timing.json"
        timing_path.write_text(json.dumps({"stage_seconds": self.stage_seconds}, indent=2, sort_keys=True))
        return record_path, timing_path


def _chunks(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


class _Trainer:
    def __init__(self, ds: AlignmentDataset, hn: HardNegativeSet | None,
                 model: ProjectionModel, classifier: ClassifierHead, cfg: TrainConfig):
        self.ds = ds
        self.hn = hn
        self.model = model
        self.classifier = classifier
        self.cfg = cfg
        self.train_idx = ds.indices(Split.TRAIN)
        self.labels = ds.labels
        self.history: list[StepRecord] = []

    # -- batch assembly -------------------------------------------------------

    def _negative_rows(self, idx: np.ndarray):
        attr_rows, cat_rows = [], []
        for i in idx:
            sid = self.ds.samples[i].sample_id
            entries = self.hn.entries[sid]
            if entries:
                attr_rows.append(np.stack([
                    self.ds.attribute_matrix[self.ds.index_by_id[nsid]] for _, nsid in entries]))
                cat_rows.append(np.stack([
                    self.ds.table.name_matrix[ncat] for ncat, _ in entries]))
            else:
                dt = self.ds.embedding_dim_text
                attr_rows.append(np.zeros((0, dt)))
                cat_rows.append(np.zeros((0, dt)))
        return attr_rows, cat_rows

    def _contrastive_graph(self, tape: Tape, param_vars, idx: np.ndarray):
        attr_rows, cat_rows = self._negative_rows(idx)
        views = views_graph(
            tape, self.model, param_vars,
            objects=self.ds.object_matrix[idx],
            attributes=self.ds.attribute_matrix[idx],
            categories=self.ds.table.name_matrix[self.labels[idx]],
            attr_negative_rows=attr_rows,
            cat_negative_rows=cat_rows,
            temperature=self.cfg.stage1.temperature,
        )
        if self.cfg.contrast == ContrastMode.TRIPLE:
            return stage1_graph(tape, views)
        return object_category_graph(tape, views)

    def _classifier_graph(self, tape: Tape, param_vars, head_vars, idx: np.ndarray):
        h = head_graph(tape, self.model.object_head, self.ds.object_matrix[idx],
                       head_vars, "object.") if head_vars is not None else \
            tape.leaf(self._frozen_features(idx))
        logits = add_rowvec(matmul(h, transpose(param_vars["classifier.weight"])),
                            param_vars["classifier.bias"])
        y = self.labels[idx]
        ce_sum = sum_all(add(logsumexp_rows(logits), scale(select_cols(logits, y), -1.0)))
        return ce_sum

    def _frozen_features(self, idx: np.ndarray) -> np.ndarray:
        from .model import project
        return project(self.model, "object", self.ds.object_matrix[idx])

    # -- optimization loops ----------------------------------------------------

    def _run_loop(self, stage_name: str, stage: StageConfig, params: dict,
                  rng: np.random.Generator, build_objective) -> None:
        state = OptimizerState(params)
        adam_cfg = AdamConfig(lr=stage.lr, warmup_steps=stage.warmup_steps)
        for _ in range(stage.epochs):
            order = self.train_idx[rng.permutation(len(self.train_idx))]
            for batch_idx in _chunks(order, stage.batch_size):
                grads = {k: np.zeros_like(v) for k, v in params.items()}
                losses: dict[str, float] = {}
                for micro_idx in _chunks(batch_idx, self.cfg.micro_batch):
                    tape = Tape()
                    param_vars = {k: tape.leaf(v) for k, v in params.items()}
                    terms, total = build_objective(tape, param_vars, micro_idx)
                    table = backward(tape, total)
                    for k in params:
                        grads[k] += table[param_vars[k].index]
                    for name, var in terms.items():
                        losses[name] = losses.get(name, 0.0) + float(var.value)
                lr = adam_step(state, params, grads, adam_cfg)
                # step indexes the whole run history, monotone across stages
                self.history.append(StepRecord(stage_name, len(self.history) + 1, losses, lr))

    def run_stage1(self, rng: np.random.Generator) -> None:
        params = self.model.parameters()

        def objective(tape, param_vars, idx):
            return self._contrastive_graph(tape, param_vars, idx)

        self._run_loop("stage1", self.cfg.stage1, params, rng, objective)

    def run_stage2(self, rng: np.random.Generator, train_object_head: bool) -> None:
        params = dict(self.classifier.parameters())
        if train_object_head:
            head_params = {k: v for k, v in self.model.parameters().items()
                           if k.startswith("object.")}
            params.update(head_params)

        def objective(tape, param_vars, idx):
            head_vars = param_vars if train_object_head else None
            ce_sum = self._classifier_graph(tape, param_vars, head_vars, idx)
            return {"ce_sum": ce_sum}, ce_sum

        self._run_loop("stage2", self.cfg.stage2, params, rng, objective)

    def run_combined(self, rng: np.random.Generator) -> None:
        params = dict(self.model.parameters())
        params.update(self.classifier.parameters())

        def objective(tape, param_vars, idx):
            terms, contrastive = self._contrastive_graph(tape, param_vars, idx)
            ce_sum = self._classifier_graph(tape, param_vars, param_vars, idx)
            total = add(contrastive, scale(ce_sum, self.cfg.one_stage_weight))
            terms = dict(terms)
            terms["ce_sum"] = ce_sum
            terms["combined_total"] = total
            return terms, total

        self._run_loop("combined", self.cfg.stage1, params, rng, objective)


def train(ds: AlignmentDataset, hn: HardNegativeSet | None, model: ProjectionModel,
          cfg: TrainConfig, classifier: ClassifierHead | None = None,
          evaluate: bool = True, probe: bool = False) -> RunRecord:
    """Run the configured schedule and return the record (model mutates in place)."""
    cfg.validate()
    train_idx = ds.indices(Split.TRAIN)
    if train_idx.size == 0:
        raise ConfigError("training requires a non-empty train split")
    needs_mining = cfg.mode in (TrainMode.TWO_STAGE, TrainMode.ONE_STAGE)
    if needs_mining:
        if hn is None:
            raise MiningIncomplete("contrastive training requires a negative set")
        missing = [ds.samples[i].sample_id for i in train_idx
                   if ds.samples[i].sample_id not in hn.entries]
        if missing:
            raise MiningIncomplete(
                f"negative set misses {len(missing)} train samples (first: {missing[:5]})")

    if classifier is None:
        classifier = ClassifierHead.create(ds.num_categories, model.out_dim,
                                           seed=cfg.seed + 1)

    record = RunRecord(config=cfg.as_dict(), seed=cfg.seed)
    if evaluate:
        record.initial_metrics = compute_metrics(ds, model, seed=cfg.seed, probe=probe)

    trainer = _Trainer(ds, hn, model, classifier, cfg)
    rng = np.random.default_rng(cfg.seed)

    if cfg.mode == TrainMode.TWO_STAGE:
        t0 = time.perf_counter()
        trainer.run_stage1(rng)
        t1 = time.perf_counter()
        trainer.run_stage2(rng, train_object_head=True)
        t2 = time.perf_counter()
        record.stage_seconds = {"stage1": t1 - t0, "stage2": t2 - t1}
    elif cfg.mode == TrainMode.ONE_STAGE:
        t0 = time.perf_counter()
        trainer.run_combined(rng)
        record.stage_seconds = {"combined": time.perf_counter() - t0}
    elif cfg.mode == TrainMode.STAGE2_ONLY:
        t0 = time.perf_counter()
        trainer.run_stage2(rng, train_object_head=True)
        record.stage_seconds = {"stage2": time.perf_counter() - t0}
    elif cfg.mode == TrainMode.FINETUNE_ONLY:
        t0 = time.perf_counter()
        trainer.run_stage2(rng, train_object_head=False)
        record.stage_seconds = {"stage2": time.perf_counter() - t0}
    else:  # pragma: no cover
        raise ConfigError(f"unknown mode {cfg.mode}")

    record.history = trainer.history
    if evaluate:
        record.final_metrics = compute_metrics(ds, model, seed=cfg.seed, probe=probe)
    return record


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmResult:
    group: str
    arm: str
    config_summary: dict
    accuracies: tuple[float, ...]
    alignments: tuple[float, ...]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def mean_alignment(self) -> float:
        return float(np.mean(self.alignments))

    @property
    def std_alignment(self) -> float:
        return float(np.std(self.alignments))

    def as_dict(self) -> dict:
        return {
            "group": self.group, "arm": self.arm, "config": dict(self.config_summary),
            "accuracies": list(self.accuracies), "alignments": list(self.alignments),
            "mean_accuracy": self.mean_accuracy, "std_accuracy": self.std_accuracy,
            "mean_alignment": self.mean_alignment, "std_alignment": self.std_alignment,
        }


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[ArmResult, ...]
    seeds: tuple[int, ...]

    def row(self, group: str, arm: str) -> ArmResult:
        for r in self.rows:
            if r.group == group and r.arm == arm:
                return r
        raise KeyError(f"no arm {group}/{arm}")

    def config_diff(self, group: str) -> dict[str, dict]:
        """Keys on which the group's arm configs disagree; everything else
        is shared, which is what makes the comparison paired."""
        rows = [r for r in self.rows if r.group == group]
        keys = set().union(*[r.config_summary.keys() for r in rows])
        diff = {}
        for key in sorted(keys):
            values = {r.arm: r.config_summary.get(key) for r in rows}
            if len(set(map(str, values.values()))) > 1:
                diff[key] = values
        return diff

    def to_dict(self) -> dict:
        return {"kind": "ablation-report", "seeds": list(self.seeds),
                "rows": [r.as_dict() for r in self.rows],
                "config_diffs": {g: self.config_diff(g)
                                 for g in sorted({r.group for r in self.rows})}}

    def to_text(self) -> str:
        lines = [f"ablation over seeds {list(self.seeds)}",
                 f"{'group':<12} {'arm':<16} {'accuracy':<20} {'alignment':<20}"]
        for r in self.rows:
            lines.append(
                f"{r.group:<12} {r.arm:<16} "
                f"{r.mean_accuracy:.4f} +/- {r.std_accuracy:.4f}    "
                f"{r.mean_alignment:.4f} +/- {r.std_alignment:.4f}")
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = directory / "ablation.json"
        out.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (directory / "ablation.txt").write_text(self.to_text())
        return out


def _fresh_model(ds: AlignmentDataset, seed: int, dim_shared: int = 64) -> ProjectionModel:
    return ProjectionModel.create(ds.embedding_dim_object, ds.embedding_dim_text,
                                  dim_shared=dim_shared, seed=seed)


def ablation_suite(ds: AlignmentDataset, cfg: TrainConfig,
                   seeds: Sequence[int] | None = None,
                   dim_shared: int = 64) -> AblationReport:
    """Train every ablation arm over >= 5 seeds and report mean +/- std.

    Within one seed all arms share the dataset, the mined hard negatives,
    and the model initialization, so arms differ only in the single factor
    under study: negative source, attribute pathway, or training paradigm.
    """
    cfg.validate()
    if seeds is None:
        seeds = [cfg.seed + i for i in range(5)]
    seeds = tuple(int(s) for s in seeds)

    hard = mine(ds, k=cfg.k_hard_negatives)
    arms = [
        ("negatives", "hard", {"mode": TrainMode.TWO_STAGE, "contrast": ContrastMode.TRIPLE,
                               "negatives": "hard"}),
        ("negatives", "simple", {"mode": TrainMode.TWO_STAGE, "contrast": ContrastMode.TRIPLE,
                                 "negatives": "simple"}),
        ("attributes", "triple", {"mode": TrainMode.TWO_STAGE, "contrast": ContrastMode.TRIPLE,
                                  "negatives": "hard"}),
        ("attributes", "object_category", {"mode": TrainMode.TWO_STAGE,
                                           "contrast": ContrastMode.OBJECT_CATEGORY,
                                           "negatives": "hard"}),
        ("paradigm", "two_stage", {"mode": TrainMode.TWO_STAGE, "contrast": ContrastMode.TRIPLE,
                                   "negatives": "hard"}),
        ("paradigm", "one_stage", {"mode": TrainMode.ONE_STAGE, "contrast": ContrastMode.TRIPLE,
                                   "negatives": "hard"}),
        ("paradigm", "stage2_only", {"mode": TrainMode.STAGE2_ONLY, "contrast": ContrastMode.TRIPLE,
                                     "negatives": "none"}),
    ]

    results = []
    for group, arm, spec in arms:
        accs, aligns = [], []
        for seed in seeds:
            run_cfg = replace(cfg, mode=spec["mode"], contrast=spec["contrast"], seed=seed)
            if spec["negatives"] == "hard":
                hn = hard
            elif spec["negatives"] == "simple":
                hn = simple_negatives(ds, k=cfg.k_hard_negatives, seed=seed)
            else:
                hn = None
            model = _fresh_model(ds, seed, dim_shared=dim_shared)
            record = train(ds, hn, model, run_cfg, evaluate=True, probe=False)
            accs.append(record.final_metrics.mc_accuracy)
            aligns.append(record.final_metrics.alignment_quality)
        summary = {"mode": spec["mode"].value, "contrast": spec["contrast"].value,
                   "negatives": spec["negatives"],
                   "stage1": cfg.stage1.as_dict(), "stage2": cfg.stage2.as_dict(),
                   "k_hard_negatives": cfg.k_hard_negatives}
        results.append(ArmResult(group, arm, summary, tuple(accs), tuple(aligns)))
    return AblationReport(rows=tuple(results), seeds=seeds)
