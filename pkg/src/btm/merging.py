"""Weight-space operations: interpolation, averaging, adaptive-ratio
merging, greedy soup, and lambda-sweep evaluation.

All merges use left-to-right sequential summation over the given model
order so results are bit-reproducible.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .metrics import evaluate
from .nn import ParamVector

STRATEGY_KINDS = ("average", "adaptive_h", "adaptive_g", "greedy_soup_h", "greedy_soup_g")

SWEEP_FIELDS = ("lambda", "h_mean", "g_mean", "a_mean", "lowest_recall", "accuracy")


def _check_same_arch(models):
    first = models[0].arch
    for m in models[1:]:
        if m.arch != first:
            raise ValueError("architecture mismatch between models")


def interpolate(a: ParamVector, b: ParamVector, lam: float) -> ParamVector:
    """Elementwise lam*a + (1-lam)*b.

    lam=1 returns a bit-exactly and lam=0 returns b bit-exactly, so sweep
    endpoints reproduce the unmerged models.
    """
    _check_same_arch([a, b])
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 0.0:
        return b.copy()
    if lam == 1.0:
        return a.copy()
    return ParamVector(lam * a.values + (1.0 - lam) * b.values, a.arch)


def average_merge(models) -> ParamVector:
    """Uniform 1/N weight average."""
    if not models:
        raise ValueError("cannot merge an empty model list")
    _check_same_arch(models)
    acc = models[0].values.copy()
    for m in models[1:]:
        acc += m.values
    return ParamVector(acc / len(models), models[0].arch)


def adaptive_merge(models, scores) -> ParamVector:
    """Weighted average with coefficients proportional to the scores."""
    if not models:
        raise ValueError("cannot merge an empty model list")
    if len(models) != len(scores):
        raise ValueError("need one score per model")
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(scores <= 0):
        raise ValueError("adaptive merge scores must be positive")
    _check_same_arch(models)
    coeffs = scores / scores.sum()
    acc = coeffs[0] * models[0].values
    for c, m in zip(coeffs[1:], models[1:]):
        acc += c * m.values
    return ParamVector(acc, models[0].arch)


def greedy_soup(models, score_fn) -> ParamVector:
    """Greedy weight averaging: rank models by score, then grow the soup
    one model at a time, keeping a candidate only if the averaged result
    scores at least as well as the current soup.

    Sorting ties break by original index. Returned soup's score is >= the
    best single model's score by construction.
    """
    if not models:
        raise ValueError("cannot build a soup from an empty model list")
    _check_same_arch(models)
    ranked = sorted(range(len(models)), key=lambda i: (-score_fn(models[i]), i))
    members = [models[ranked[0]]]
    soup_score = score_fn(models[ranked[0]])
    for i in ranked[1:]:
        candidate = average_merge(members + [models[i]])
        cand_score = score_fn(candidate)
        if cand_score >= soup_score:
            members.append(models[i])
            soup_score = cand_score
    return average_merge(members)


@dataclass
class MergeStrategy:
    """Which merge to run and, for score-driven kinds, what data scores it."""

    kind: str = "average"
    selection_set: LabeledDataset | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"kind must be one of {STRATEGY_KINDS}")

    def requires_selection_set(self) -> bool:
        return self.kind != "average"

    def validate_ready(self):
        if self.requires_selection_set():
            if self.selection_set is None or self.selection_set.n_samples == 0:
                raise ValueError(f"strategy {self.kind} requires a non-empty selection set")


def selection_score_fn(strategy: MergeStrategy):
    """Score a ParamVector on the strategy's selection set by H- or G-mean."""
    strategy.validate_ready()
    use_h = strategy.kind.endswith("_h")

    def score(model: ParamVector) -> float:
        report = evaluate(model, strategy.selection_set)
        return report.harmonic_mean if use_h else report.geometric_mean

    return score


def merge_models(models, strategy: MergeStrategy) -> ParamVector:
    """Dispatch to the configured merge."""
    if strategy.kind == "average":
        return average_merge(models)
    score = selection_score_fn(strategy)
    if strategy.kind.startswith("adaptive"):
        return adaptive_merge(models, [score(m) for m in models])
    return greedy_soup(models, score)


@dataclass
class LambdaCurve:
    """Metrics along the interpolation path between two models."""

    lambdas: list
    reports: list

    def __post_init__(self):
        if len(self.lambdas) != len(self.reports):
            raise ValueError("one report per lambda required")
        if len(self.lambdas) < 2 or self.lambdas[0] != 0.0 or self.lambdas[-1] != 1.0:
            raise ValueError("lambda grid must run from 0 to 1")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for lam, rep in zip(self.lambdas, self.reports):
            writer.writerow([
                repr(lam),
                repr(rep.harmonic_mean),
                repr(rep.geometric_mean),
                repr(rep.arithmetic_mean),
                repr(rep.lowest_recall),
                repr(rep.accuracy),
            ])
        return buf.getvalue()


def lambda_sweep(a: ParamVector, b: ParamVector, grid_steps: int, test_set) -> LambdaCurve:
    """Evaluate interpolate(a, b, i/(grid_steps-1)) over an even grid."""
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    _check_same_arch([a, b])
    lambdas = [i / (grid_steps - 1) for i in range(grid_steps)]
    reports = [evaluate(interpolate(a, b, lam), test_set) for lam in lambdas]
    return LambdaCurve(lambdas, reports)
