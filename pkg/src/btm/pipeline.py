"""Stage orchestration: pre-train, optional classifier-refresh (FC),
balanced fine-tuning plus merging, and post-train, with a no-merge
baseline arm run from the same pre-trained weights.

Every stage restarts its randomness from declared seeds, so rerunning a
stage from its recorded inputs reproduces its recorded checkpoint hash.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import json
import os
from dataclasses import dataclass, replace

from .data import LabeledDataset, SamplerSpec, sample_balanced_fewshot, union_datasets
from .merging import MergeStrategy, interpolate, merge_models
from .metrics import REPORT_FIELDS, MetricsReport, evaluate
from .nn import (
    Architecture,
    Checkpoint,
    TrainConfig,
    init_params,
    load_checkpoint,
    make_checkpoint,
    train,
)

PLACEMENTS = ("between_stages", "after_stage2")


@dataclass
class BtmStage:
    """Balanced fine-tuning block: how to sample, train, and merge."""

    sampler: SamplerSpec
    finetune: TrainConfig
    strategy: MergeStrategy


@dataclass
class StagePlan:
    """Complete recipe for one experiment."""

    arch: Architecture
    pretrain: TrainConfig
    btm: BtmStage
    posttrain: TrainConfig
    fc_stage: TrainConfig | None = None
    placement: str = "between_stages"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.pretrain.freeze != "none" or self.pretrain.class_balanced_sampling:
            raise ValueError("pretrain must train the whole model without balancing")
        if self.posttrain.freeze != "backbone" or not self.posttrain.class_balanced_sampling:
            raise ValueError("posttrain must be classifier-only with class-balanced sampling")
        if self.fc_stage is not None:
            if self.fc_stage.freeze != "backbone" or self.fc_stage.class_balanced_sampling:
                raise ValueError("fc stage must be classifier-only with plain sampling")

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "pretrain": dataclasses.asdict(self.pretrain),
            "btm": {
                "sampler": dataclasses.asdict(self.btm.sampler),
                "finetune": dataclasses.asdict(self.btm.finetune),
                "strategy": self.btm.strategy.kind,
            },
            "posttrain": dataclasses.asdict(self.posttrain),
            "fc_stage": None if self.fc_stage is None else dataclasses.asdict(self.fc_stage),
            "placement": self.placement,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(
            arch=Architecture.from_dict(d["arch"]),
            pretrain=TrainConfig(**d["pretrain"]),
            btm=BtmStage(
                sampler=SamplerSpec(**d["btm"]["sampler"]),
                finetune=TrainConfig(**d["btm"]["finetune"]),
                strategy=MergeStrategy(kind=d["btm"]["strategy"]),
            ),
            posttrain=TrainConfig(**d["posttrain"]),
            fc_stage=None if d["fc_stage"] is None else TrainConfig(**d["fc_stage"]),
            placement=d["placement"],
        )


@dataclass
class BtmResult:
    """What one balanced-training block produced."""

    merged: Checkpoint
    fine_tuned: list
    per_model_reports: list
    subset_seeds: list


@dataclass
class UnionComparison:
    """Fine-tunes on two balanced subsets, their union, and the midpoint
    interpolation of the two subset models."""

    ckpt_a: Checkpoint
    ckpt_b: Checkpoint
    ckpt_union: Checkpoint
    ckpt_mid: Checkpoint
    report_a: MetricsReport
    report_b: MetricsReport
    report_union: MetricsReport
    report_mid: MetricsReport


def run_pretrain(data: LabeledDataset, cfg: TrainConfig, arch: Architecture) -> Checkpoint:
    """Train from fresh initialization on the long-tailed data with plain
    cross-entropy (no imbalance handling)."""
    if cfg.class_balanced_sampling or cfg.freeze != "none":
        raise ValueError("pretrain must use plain sampling and train all parameters")
    start = init_params(arch, cfg.seed)
    params = train(start, data, cfg)
    return make_checkpoint(params, "pretrain", cfg.seed, parent=None)


def run_fc_stage(start: Checkpoint, data: LabeledDataset, cfg: TrainConfig) -> Checkpoint:
    """Refresh only the classifier on all training data (instance-uniform
    sampling); used when the pre-trained weights already handled
    imbalance. The backbone stays bit-identical."""
    if cfg.freeze != "backbone" or cfg.class_balanced_sampling:
        raise ValueError("fc stage must be classifier-only with plain sampling")
    params = train(start.params, data, cfg)
    return make_checkpoint(params, "fc", cfg.seed, parent=start)


def run_posttrain(start: Checkpoint, data: LabeledDataset, cfg: TrainConfig) -> Checkpoint:
    """Classifier-only fine-tune with class-balanced batches; the frozen
    backbone stays bit-identical."""
    if cfg.freeze != "backbone" or not cfg.class_balanced_sampling:
        raise ValueError("posttrain must be classifier-only with class-balanced sampling")
    params = train(start.params, data, cfg)
    return make_checkpoint(params, "posttrain", cfg.seed, parent=start)


def run_btm(start: Checkpoint, data: LabeledDataset, sampler: SamplerSpec,
            ft_cfg: TrainConfig, strategy: MergeStrategy,
            test_set: LabeledDataset | None = None):
    """Balanced training and merging.

    Draws n_datasets balanced subsets (seeds sampler.seed + i), fine-tunes
    the starting weights on each independently (train seeds ft_cfg.seed +
    i), then merges per the strategy. Score-driven strategies without an
    explicit selection set score models on the union of the drawn subsets.
    Returns (merged checkpoint, BtmResult).
    """
    subsets = [
        sample_balanced_fewshot(data, sampler.n_per_class, sampler.seed + i)
        for i in range(sampler.n_datasets)
    ]
    fine_tuned = []
    for i, subset in enumerate(subsets):
        cfg_i = replace(ft_cfg, seed=ft_cfg.seed + i)
        params = train(start.params, subset, cfg_i)
        fine_tuned.append(
            make_checkpoint(params, f"btm_ft_{i:02d}", cfg_i.seed, parent=start)
        )
    models = [c.params for c in fine_tuned]
    if strategy.requires_selection_set() and strategy.selection_set is None:
        selection = functools.reduce(union_datasets, subsets)
        strategy = MergeStrategy(kind=strategy.kind, selection_set=selection)
    merged_params = merge_models(models, strategy)
    merged = make_checkpoint(merged_params, "btm_merge", sampler.seed, parent=start)
    per_model_reports = []
    if test_set is not None:
        per_model_reports = [evaluate(c, test_set) for c in fine_tuned]
    result = BtmResult(
        merged=merged,
        fine_tuned=fine_tuned,
        per_model_reports=per_model_reports,
        subset_seeds=[sampler.seed + i for i in range(sampler.n_datasets)],
    )
    return merged, result


def observation_union_experiment(start: Checkpoint, data: LabeledDataset,
                                 test_set: LabeledDataset, n_per_class: int,
                                 seeds, ft_cfg: TrainConfig) -> UnionComparison:
    """Fine-tune on two balanced subsets and on their (imbalanced) union,
    and probe the midpoint interpolation of the two subset models."""
    seed_a, seed_b = seeds
    d_a = sample_balanced_fewshot(data, n_per_class, seed_a)
    d_b = sample_balanced_fewshot(data, n_per_class, seed_b)
    d_union = union_datasets(d_a, d_b)
    ckpt_a = make_checkpoint(train(start.params, d_a, ft_cfg), "ft_a", ft_cfg.seed, parent=start)
    ckpt_b = make_checkpoint(train(start.params, d_b, ft_cfg), "ft_b", ft_cfg.seed, parent=start)
    ckpt_union = make_checkpoint(train(start.params, d_union, ft_cfg), "ft_union",
                                 ft_cfg.seed, parent=start)
    mid = interpolate(ckpt_a.params, ckpt_b.params, 0.5)
    ckpt_mid = make_checkpoint(mid, "ft_mid", ft_cfg.seed, parent=start)
    return UnionComparison(
        ckpt_a=ckpt_a, ckpt_b=ckpt_b, ckpt_union=ckpt_union, ckpt_mid=ckpt_mid,
        report_a=evaluate(ckpt_a, test_set),
        report_b=evaluate(ckpt_b, test_set),
        report_union=evaluate(ckpt_union, test_set),
        report_mid=evaluate(ckpt_mid, test_set),
    )


@dataclass
class ExperimentRecord:
    """Everything one experiment produced, keyed by stage name.

    `order` fixes the stage sequence for the summary table; checkpoints
    and reports share keys. The baseline arm shares the pretrain
    checkpoint with the balanced-training arm.
    """

    plan: StagePlan
    seeds: dict
    order: list
    checkpoints: dict
    reports: dict

    @property
    def per_model_reports(self) -> list:
        return [self.reports[k] for k in self.order if k.startswith("btm_ft_")]

    @property
    def merged_report(self) -> MetricsReport:
        return self.reports["btm_merged"]

    @property
    def final_report(self) -> MetricsReport:
        return self.reports["final"]

    @property
    def baseline_report(self) -> MetricsReport:
        return self.reports["baseline_final"]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("stage",) + REPORT_FIELDS + ("checkpoint_hash",))
        for key in self.order:
            row = [key] + self.reports[key].csv_values()
            row.append(self.checkpoints[key].hash if key in self.checkpoints else "")
            writer.writerow(row)
        return buf.getvalue()

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        rep_dir = os.path.join(out_dir, "reports")
        os.makedirs(ckpt_dir, exist_ok=True)
        os.makedirs(rep_dir, exist_ok=True)
        doc = {"plan": self.plan.to_dict(), "seeds": self.seeds, "order": self.order}
        with open(os.path.join(out_dir, "plan.json"), "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        for key, ckpt in self.checkpoints.items():
            ckpt.save(os.path.join(ckpt_dir, f"{key}.ckpt"))
        for key, report in self.reports.items():
            with open(os.path.join(rep_dir, f"{key}.json"), "w") as f:
                f.write(report.to_json())
                f.write("\n")
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
            f.write(self.summary_csv())

    @classmethod
    def load(cls, out_dir) -> "ExperimentRecord":
        with open(os.path.join(out_dir, "plan.json")) as f:
            doc = json.load(f)
        plan = StagePlan.from_dict(doc["plan"])
        order = doc["order"]
        reports = {}
        checkpoints = {}
        for key in order:
            with open(os.path.join(out_dir, "reports", f"{key}.json")) as f:
                reports[key] = MetricsReport.from_json(f.read())
            ckpt_path = os.path.join(out_dir, "checkpoints", f"{key}.ckpt")
            if os.path.exists(ckpt_path):
                checkpoints[key] = load_checkpoint(ckpt_path)
        return cls(plan=plan, seeds=doc["seeds"], order=order,
                   checkpoints=checkpoints, reports=reports)


def run_experiment(plan: StagePlan, data: LabeledDataset,
                   test_set: LabeledDataset) -> ExperimentRecord:
    """Run the baseline arm (pretrain -> posttrain) and the balanced
    training arm (pretrain -> [fc] -> balanced fine-tunes + merge ->
    posttrain) from one shared pretrain checkpoint.

    placement="after_stage2" instead appends the balanced block after the
    posttrain stage, with the merged model as the final one.
    """
    order = []
    checkpoints = {}
    reports = {}

    def record(key: str, ckpt: Checkpoint):
        order.append(key)
        checkpoints[key] = ckpt
        reports[key] = evaluate(ckpt, test_set)

    pre = run_pretrain(data, plan.pretrain, plan.arch)
    record("pretrain", pre)

    arm_start = pre
    if plan.fc_stage is not None:
        arm_start = run_fc_stage(pre, data, plan.fc_stage)
        record("fc", arm_start)

    def record_btm(start: Checkpoint):
        merged, btm_res = run_btm(start, data, plan.btm.sampler, plan.btm.finetune,
                                  plan.btm.strategy, test_set)
        for ckpt, report in zip(btm_res.fine_tuned, btm_res.per_model_reports):
            order.append(ckpt.stage_tag)
            checkpoints[ckpt.stage_tag] = ckpt
            reports[ckpt.stage_tag] = report
        order.append("btm_merged")
        checkpoints["btm_merged"] = merged
        reports["btm_merged"] = evaluate(merged, test_set)
        return merged, btm_res

    if plan.placement == "between_stages":
        merged, btm_res = record_btm(arm_start)
        final = run_posttrain(merged, data, plan.posttrain)
    else:
        stage2 = run_posttrain(arm_start, data, plan.posttrain)
        record("stage2", stage2)
        merged, btm_res = record_btm(stage2)
        final = merged
    record("final", final)

    baseline = run_posttrain(pre, data, plan.posttrain)
    record("baseline_final", baseline)

    seeds = {
        "pretrain": plan.pretrain.seed,
        "fc": None if plan.fc_stage is None else plan.fc_stage.seed,
        "sampler": plan.btm.sampler.seed,
        "subsets": btm_res.subset_seeds,
        "finetunes": [plan.btm.finetune.seed + i
                      for i in range(plan.btm.sampler.n_datasets)],
        "posttrain": plan.posttrain.seed,
    }
    return ExperimentRecord(plan=plan, seeds=seeds, order=order,
                            checkpoints=checkpoints, reports=reports)
