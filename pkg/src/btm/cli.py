"""Command-line surface: gen-data, run, eval, sweep, ablate.

Configuration is a JSON document validated against a published schema
before any stage runs; unknown keys are rejected. Flags override config
keys. All randomness flows from the declared seed. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage or validation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace

import jsonschema

from .data import (
    LabeledDataset,
    LongTailSpec,
    SamplerSpec,
    imbalance_ratio,
    load_dataset,
    load_idx,
    make_synthetic_problem,
    save_dataset,
)
from .merging import STRATEGY_KINDS, MergeStrategy, lambda_sweep
from .metrics import evaluate
from .nn import Architecture, TrainConfig, load_checkpoint
from .pipeline import (
    PLACEMENTS,
    BtmStage,
    StagePlan,
    run_btm,
    run_experiment,
    run_posttrain,
    run_pretrain,
)

log = logging.getLogger("btm")


class UsageError(Exception):
    """Bad flags, bad config, missing inputs: exit status 2."""


# Seed offsets for the independent random streams hanging off the global
# seed. Data uses the global seed directly.
SEED_OFFSETS = {
    "pretrain": 100,
    "fc": 200,
    "sampler": 300,
    "finetune": 400,
    "posttrain": 500,
}

_TRAIN_PROPS = {
    "epochs": {"type": "integer", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr_init": {"type": "number", "exclusiveMinimum": 0},
    "momentum": {"type": "number", "minimum": 0, "maximum": 1},
    "weight_decay": {"type": "number", "minimum": 0},
    "schedule": {"enum": ["cosine", "constant"]},
    "mixup_alpha": {"type": "number", "minimum": 0},
    "label_smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
}

_TRAIN_SCHEMA = {
    "type": "object",
    "properties": _TRAIN_PROPS,
    "required": ["epochs", "batch_size", "lr_init"],
    "additionalProperties": False,
}

_FT_SCHEMA = {
    "type": "object",
    "properties": {**_TRAIN_PROPS, "freeze": {"enum": ["none", "backbone", "classifier"]}},
    "required": ["epochs", "batch_size", "lr_init"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "data": {
            "type": "object",
            "properties": {
                "synthetic": {
                    "type": "object",
                    "properties": {
                        "n_classes": {"type": "integer", "minimum": 2},
                        "dim": {"type": "integer", "minimum": 2},
                        "separation": {"type": "number", "minimum": 0},
                        "max_count": {"type": "integer", "minimum": 1},
                        "imbalance_ratio": {"type": "number", "minimum": 1},
                        "test_per_class": {"type": "integer", "minimum": 1},
                    },
                    "required": ["n_classes", "dim", "separation", "max_count",
                                 "imbalance_ratio", "test_per_class"],
                    "additionalProperties": False,
                },
                "files": {
                    "type": "object",
                    "properties": {"train": {"type": "string"}, "test": {"type": "string"}},
                    "required": ["train", "test"],
                    "additionalProperties": False,
                },
                "idx": {
                    "type": "object",
                    "properties": {
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                    },
                    "required": ["train_images", "train_labels", "test_images", "test_labels"],
                    "additionalProperties": False,
                },
            },
            "minProperties": 1,
            "maxProperties": 1,
            "additionalProperties": False,
        },
        "arch": {
            "type": "object",
            "properties": {
                "hidden_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "activation": {"enum": ["relu", "tanh"]},
            },
            "required": ["hidden_dims"],
            "additionalProperties": False,
        },
        "pretrain": _TRAIN_SCHEMA,
        "fc": {"anyOf": [{"type": "null"}, _TRAIN_SCHEMA]},
        "btm": {
            "type": "object",
            "properties": {
                "n_datasets": {"type": "integer", "minimum": 1},
                "n_per_class": {"type": "integer", "minimum": 1},
                "strategy": {"enum": list(STRATEGY_KINDS)},
                "finetune": _FT_SCHEMA,
            },
            "required": ["n_datasets", "n_per_class", "finetune"],
            "additionalProperties": False,
        },
        "posttrain": _TRAIN_SCHEMA,
        "placement": {"enum": list(PLACEMENTS)},
    },
    "required": ["seed", "data", "arch", "pretrain", "btm", "posttrain"],
    "additionalProperties": False,
}


def validate_config(doc: dict) -> dict:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {path}: {e.message}") from e
    return doc


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from e
    return validate_config(doc)


def _train_config(section: dict, seed: int, **overrides) -> TrainConfig:
    return TrainConfig(**{**section, **overrides, "seed": seed})


def build_datasets(config: dict, seed: int):
    """Materialize (train, test) from the config's data source."""
    data = config["data"]
    if "synthetic" in data:
        s = data["synthetic"]
        spec = LongTailSpec(
            n_classes=s["n_classes"], max_count=s["max_count"],
            imbalance_ratio=s["imbalance_ratio"], seed=seed,
        )
        return make_synthetic_problem(spec, s["dim"], s["separation"], s["test_per_class"])
    if "files" in data:
        for key in ("train", "test"):
            if not os.path.exists(data["files"][key]):
                raise UsageError(f"dataset file not found: {data['files'][key]}")
        return load_dataset(data["files"]["train"]), load_dataset(data["files"]["test"])
    idx = data["idx"]
    for key in idx:
        if not os.path.exists(idx[key]):
            raise UsageError(f"IDX file not found: {idx[key]}")
    return (
        load_idx(idx["train_images"], idx["train_labels"]),
        load_idx(idx["test_images"], idx["test_labels"]),
    )


def build_plan(config: dict, seed: int, train_set: LabeledDataset) -> StagePlan:
    """Assemble the stage plan from the validated config document."""
    arch = Architecture(
        layer_dims=(train_set.dim, *config["arch"]["hidden_dims"], train_set.n_classes),
        activation=config["arch"].get("activation", "relu"),
    )
    btm_cfg = config["btm"]
    ft_section = dict(btm_cfg["finetune"])
    ft_freeze = ft_section.pop("freeze", "none")
    fc_section = config.get("fc")
    return StagePlan(
        arch=arch,
        pretrain=_train_config(config["pretrain"], seed + SEED_OFFSETS["pretrain"],
                               freeze="none", class_balanced_sampling=False),
        fc_stage=None if fc_section is None else _train_config(
            fc_section, seed + SEED_OFFSETS["fc"],
            freeze="backbone", class_balanced_sampling=False),
        btm=BtmStage(
            sampler=SamplerSpec(
                n_datasets=btm_cfg["n_datasets"],
                n_per_class=btm_cfg["n_per_class"],
                seed=seed + SEED_OFFSETS["sampler"],
            ),
            finetune=_train_config(ft_section, seed + SEED_OFFSETS["finetune"],
                                   freeze=ft_freeze, class_balanced_sampling=False),
            strategy=MergeStrategy(kind=btm_cfg.get("strategy", "average")),
        ),
        posttrain=_train_config(config["posttrain"], seed + SEED_OFFSETS["posttrain"],
                                freeze="backbone", class_balanced_sampling=True),
        placement=config.get("placement", "between_stages"),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.config:
        config = load_config(args.config)
        s = config["data"].get("synthetic")
        if s is None:
            raise UsageError("gen-data needs a synthetic data section in the config")
        defaults = dict(s)
        seed = config["seed"]
    else:
        defaults = {}
        seed = 0
    merged = {
        "n_classes": args.classes or defaults.get("n_classes", 20),
        "dim": args.dim or defaults.get("dim", 16),
        "separation": args.separation if args.separation is not None
                      else defaults.get("separation", 3.0),
        "max_count": args.max_count or defaults.get("max_count", 500),
        "imbalance_ratio": args.imbalance if args.imbalance is not None
                           else defaults.get("imbalance_ratio", 100.0),
        "test_per_class": args.test_per_class or defaults.get("test_per_class", 100),
    }
    if args.seed is not None:
        seed = args.seed
    spec = LongTailSpec(n_classes=merged["n_classes"], max_count=merged["max_count"],
                        imbalance_ratio=merged["imbalance_ratio"], seed=seed)
    train, test = make_synthetic_problem(spec, merged["dim"], merged["separation"],
                                         merged["test_per_class"])
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    train_path = os.path.join(out, "train.btmd")
    test_path = os.path.join(out, "test.btmd")
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    print(f"wrote {train_path} ({train.n_samples} samples) and "
          f"{test_path} ({test.n_samples} samples)")
    print("class counts:", " ".join(str(int(c)) for c in train.class_counts))
    print(f"imbalance ratio: {imbalance_ratio(train):.6g}")
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise UsageError("run requires --config")
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config["seed"]
    out_dir = args.out or config.get("out_dir", "btm-run")
    train, test = build_datasets(config, seed)
    plan = build_plan(config, seed, train)
    log.info("running experiment: %d train / %d test samples, seed %d",
             train.n_samples, test.n_samples, seed)
    record = run_experiment(plan, train, test)
    record.save(out_dir)
    print(f"experiment written to {out_dir}")
    for key in record.order:
        r = record.reports[key]
        print(f"  {key:<16} h={100 * r.harmonic_mean:6.2f} g={100 * r.geometric_mean:6.2f} "
              f"a={100 * r.arithmetic_mean:6.2f} low={100 * r.lowest_recall:6.2f} "
              f"acc={100 * r.accuracy:6.2f}")
    return 0


def cmd_eval(args) -> int:
    if not args.ckpt or not args.data:
        raise UsageError("eval requires --ckpt and --data")
    for p in (args.ckpt, args.data):
        if not os.path.exists(p):
            raise UsageError(f"input not found: {p}")
    ckpt = load_checkpoint(args.ckpt)
    test = load_dataset(args.data)
    report = evaluate(ckpt, test)
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
            f.write("\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    if not (args.ckpt_a and args.ckpt_b and args.data):
        raise UsageError("sweep requires --ckpt-a, --ckpt-b and --data")
    for p in (args.ckpt_a, args.ckpt_b, args.data):
        if not os.path.exists(p):
            raise UsageError(f"input not found: {p}")
    a = load_checkpoint(args.ckpt_a)
    b = load_checkpoint(args.ckpt_b)
    test = load_dataset(args.data)
    curve = lambda_sweep(a.params, b.params, args.grid, test)
    text = curve.to_csv()
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
        print(f"sweep written to {args.out}")
    else:
        print(text, end="")
    return 0


ABLATIONS = ("merge-strategies", "subset-size", "when-how")

# (n_datasets, n_per_class) grid for the subset-size ablation.
SUBSET_SIZE_GRID = ((2, 10), (4, 10), (8, 10), (20, 10), (10, 5), (10, 10), (10, 20))


def _fmt(x: float) -> str:
    return repr(float(x))


def _report_row(report) -> list:
    return [_fmt(report.harmonic_mean), _fmt(report.geometric_mean),
            _fmt(report.arithmetic_mean), _fmt(report.lowest_recall),
            _fmt(report.accuracy)]


def cmd_ablate(args) -> int:
    if not args.config:
        raise UsageError("ablate requires --config")
    if args.ablation not in ABLATIONS:
        raise UsageError(
            f"unknown ablation {args.ablation!r}; options: {', '.join(ABLATIONS)}"
        )
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config["seed"]
    train, test = build_datasets(config, seed)
    plan = build_plan(config, seed, train)
    pre = run_pretrain(train, plan.pretrain, plan.arch)
    arm_start = pre
    metric_cols = ["h_mean", "g_mean", "a_mean", "lowest_recall", "accuracy"]
    rows = []

    if args.ablation == "merge-strategies":
        header = ["strategy", "phase"] + metric_cols
        for kind in STRATEGY_KINDS:
            merged, _ = run_btm(arm_start, train, plan.btm.sampler, plan.btm.finetune,
                                MergeStrategy(kind=kind))
            rows.append([kind, "merge"] + _report_row(evaluate(merged, test)))
            final = run_posttrain(merged, train, plan.posttrain)
            rows.append([kind, "posttrain"] + _report_row(evaluate(final, test)))
    elif args.ablation == "subset-size":
        header = ["n_datasets", "n_per_class"] + metric_cols
        for n_d, n_c in SUBSET_SIZE_GRID:
            sampler = replace(plan.btm.sampler, n_datasets=n_d, n_per_class=n_c)
            merged, _ = run_btm(arm_start, train, sampler, plan.btm.finetune,
                                plan.btm.strategy)
            final = run_posttrain(merged, train, plan.posttrain)
            rows.append([str(n_d), str(n_c)] + _report_row(evaluate(final, test)))
    else:  # when-how
        header = ["placement", "tuned"] + metric_cols
        tuned_to_freeze = {"backbone": "classifier", "classifier": "backbone", "whole": "none"}
        for placement in PLACEMENTS:
            for tuned, freeze in tuned_to_freeze.items():
                ft = replace(plan.btm.finetune, freeze=freeze)
                if placement == "between_stages":
                    merged, _ = run_btm(arm_start, train, plan.btm.sampler, ft,
                                        plan.btm.strategy)
                    final = run_posttrain(merged, train, plan.posttrain)
                else:
                    stage2 = run_posttrain(arm_start, train, plan.posttrain)
                    final, _ = run_btm(stage2, train, plan.btm.sampler, ft,
                                       plan.btm.strategy)
                rows.append([placement, tuned] + _report_row(evaluate(final, test)))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
        print(f"ablation table written to {args.out}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btm",
        description="Balanced training and merging experiments for "
                    "long-tailed classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output path or directory")
        p.add_argument("--config", default=None, help="JSON config path")

    p = sub.add_parser("gen-data", help="generate a long-tailed train/test pair")
    common(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--max-count", type=int, default=None)
    p.add_argument("--imbalance", type=float, default=None)
    p.add_argument("--test-per-class", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run the full experiment from a config")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint path")
    p.add_argument("--data", default=None, help="dataset path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="interpolation sweep between two checkpoints")
    common(p)
    p.add_argument("--ckpt-a", default=None)
    p.add_argument("--ckpt-b", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--grid", type=int, default=11)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run one of the ablation grids")
    common(p)
    p.add_argument("--ablation", default=None,
                   help=f"one of: {', '.join(ABLATIONS)}")
    p.set_defaults(func=cmd_ablate)

    return parser


def _setup_logging():
    level_name = os.environ.get("BTM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level_name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
