"""The five model-selection baselines and the comparison report.

Strategies, in report column order: chance (no model runs), average over
all models, majority voting over all models, the trained router, the
dataset-level oracle, and the per-query upper bound. Inference cost over N
models is O(1) for average and the router, O(N) for voting, oracle, and
the upper bound.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

from .core import (
    AccuracyTable,
    ExecutionRecord,
    Sample,
    World,
    group_records,
    weighted_average,
)
from .errors import CoverageError, InvalidInputError

STRATEGIES = ("chance", "average", "voting", "router", "oracle", "upper_bound")
COST_ROW = {
    "chance": "-",
    "average": "O(1)",
    "voting": "O(N)",
    "router": "O(1)",
    "oracle": "O(N)",
    "upper_bound": "O(N)",
}


def chance_uniform(samples: Iterable[Sample]) -> float:
    """Expected accuracy of a uniform random guess: mean of 1/K.

    Computed in exact rational arithmetic so fixed-K sets yield exactly
    1/K (e.g. 0.01 for 100 options) rather than an accumulation of float
    error."""
    samples = list(samples)
    if not samples:
        raise InvalidInputError("no samples")
    total = sum(Fraction(1, len(s.response_options)) for s in samples)
    return float(total / len(samples))


def chance_majority(samples: Iterable[Sample]) -> float:
    """Frequency of the most common gold option string; the chance rate an
    always-majority guesser achieves on an imbalanced set."""
    samples = list(samples)
    if not samples:
        raise InvalidInputError("no samples")
    counts = Counter(s.gold_option for s in samples)
    return counts.most_common(1)[0][1] / len(samples)


def average_baseline(table: AccuracyTable, dataset_id: str) -> float:
    """Unweighted mean of the model x dataset marginals: the expected
    accuracy of picking a pool model at random per query."""
    models = [m for m in table.models() if table.variants(m, dataset_id)]
    if not models:
        raise InvalidInputError(f"no models cover dataset {dataset_id!r}")
    return sum(table.marginal(m, dataset_id) for m in models) / len(models)


def voting_predict(per_model_predicted_indices: Sequence[int]) -> int:
    """Modal predicted index; ties break to the lowest index among the tied."""
    if not per_model_predicted_indices:
        raise InvalidInputError("no votes")
    counts = Counter(per_model_predicted_indices)
    best_count = max(counts.values())
    return min(i for i, c in counts.items() if c == best_count)


def oracle_accuracy(table: AccuracyTable, heldout_dataset: str) -> float:
    """Best single model for the whole dataset, chosen with held-out ground
    truth."""
    models = [m for m in table.models() if table.variants(m, heldout_dataset)]
    if not models:
        raise InvalidInputError(f"table does not cover dataset {heldout_dataset!r}")
    return max(table.marginal(m, heldout_dataset) for m in models)


def _dataset_groups(
    records: Iterable[ExecutionRecord],
    dataset_id: str,
    model_pool: Sequence[str] | None,
):
    groups = {
        key: per_model
        for key, per_model in group_records(records).items()
        if key[0] == dataset_id
    }
    if not groups:
        raise InvalidInputError(f"no records for dataset {dataset_id!r}")
    pool = set(model_pool) if model_pool is not None else set().union(
        *(set(g) for g in groups.values())
    )
    gaps = [
        (ds, sid, vid, tuple(sorted(pool - set(per_model))))
        for (ds, sid, vid), per_model in groups.items()
        if pool - set(per_model)
    ]
    if gaps:
        raise CoverageError(
            f"{len(gaps)} (sample, variant) groups on {dataset_id} are missing "
            f"model outcomes", gaps=gaps,
        )
    return groups


def upper_bound_accuracy(
    records: Iterable[ExecutionRecord],
    heldout_dataset: str,
    model_pool: Sequence[str] | None = None,
) -> float:
    """Per-query any-model-correct rate, averaged across prompt variants;
    the ceiling for any selection strategy."""
    groups = _dataset_groups(records, heldout_dataset, model_pool)
    per_variant: dict[str, list[bool]] = {}
    for (_, _, vid), per_model in groups.items():
        per_variant.setdefault(vid, []).append(
            any(rec.correct for rec in per_model.values())
        )
    accs = [sum(v) / len(v) for v in per_variant.values()]
    return sum(accs) / len(accs)


def voting_accuracy(
    records: Iterable[ExecutionRecord],
    world: World,
    dataset_id: str,
    model_pool: Sequence[str] | None = None,
) -> float:
    """Accuracy of the modal prediction, per (sample, variant), averaged
    across prompt variants."""
    groups = _dataset_groups(records, dataset_id, model_pool or world.model_pool)
    samples = world.sample_index()
    per_variant: dict[str, list[bool]] = {}
    for (ds, sid, vid), per_model in groups.items():
        votes = [rec.predicted_index for _, rec in sorted(per_model.items())]
        modal = voting_predict(votes)
        gold = samples[(ds, sid)].gold_index
        per_variant.setdefault(vid, []).append(modal == gold)
    accs = [sum(v) / len(v) for v in per_variant.values()]
    return sum(accs) / len(accs)


@dataclass
class ComparisonReport:
    """Per-dataset accuracy (percent) for every selection strategy, with
    plain and size-weighted averages and the cost row."""

    dataset_ids: tuple[str, ...]
    cells: dict[str, dict[str, float | None]]  # strategy -> dataset -> percent
    sizes: dict[str, int]
    chance_kind: str = "uniform"
    failed_folds: tuple[str, ...] = ()
    averages: dict[str, float | None] = field(init=False)
    weighted_averages: dict[str, float | None] = field(init=False)

    def __post_init__(self):
        for strategy in STRATEGIES:
            if strategy not in self.cells:
                raise InvalidInputError(f"missing strategy column {strategy!r}")
            for ds, value in self.cells[strategy].items():
                if value is not None and not 0.0 <= value <= 100.0:
                    raise InvalidInputError(
                        f"{strategy}/{ds}: accuracy {value} outside [0, 100]"
                    )
        self.averages = {}
        self.weighted_averages = {}
        for strategy in STRATEGIES:
            col = self.cells[strategy]
            values = {ds: col[ds] for ds in self.dataset_ids if col.get(ds) is not None}
            if len(values) == len(self.dataset_ids) and values:
                self.averages[strategy] = sum(values.values()) / len(values)
                self.weighted_averages[strategy] = weighted_average(
                    values, {ds: self.sizes[ds] for ds in values}
                )
            else:
                self.averages[strategy] = None
                self.weighted_averages[strategy] = None

    @property
    def cost_row(self) -> dict[str, str]:
        return dict(COST_ROW)

    def cell(self, dataset_id: str, strategy: str) -> float | None:
        return self.cells[strategy].get(dataset_id)

    def write_csv(self, target: str | Path | IO[str]) -> None:
        """Table-2 shaped export: strategies as columns, datasets as rows,
        two summary rows, one cost row."""
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(fh)
            writer.writerow(["dataset", *STRATEGIES])
            for ds in self.dataset_ids:
                writer.writerow([ds, *(_fmt_pct(self.cells[s].get(ds)) for s in STRATEGIES)])
            writer.writerow(["average", *(_fmt_pct(self.averages[s]) for s in STRATEGIES)])
            writer.writerow(
                ["average_weighted", *(_fmt_pct(self.weighted_averages[s]) for s in STRATEGIES)]
            )
            writer.writerow(["cost_over_n_models", *(COST_ROW[s] for s in STRATEGIES)])
        finally:
            if own:
                fh.close()

    def to_dict(self) -> dict:
        return {
            "dataset_ids": list(self.dataset_ids),
            "chance_kind": self.chance_kind,
            "sizes": dict(self.sizes),
            "cells": {s: dict(col) for s, col in self.cells.items()},
            "averages": dict(self.averages),
            "weighted_averages": dict(self.weighted_averages),
            "cost_over_n_models": dict(COST_ROW),
            "failed_folds": list(self.failed_folds),
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _fmt_pct(value: float | None) -> str:
    return "" if value is None else f"{value:.1f}"


def build_comparison_report(
    world: World,
    router=None,
    router_accuracies: Mapping[str, float] | None = None,
    records: Sequence[ExecutionRecord] | None = None,
    accuracy_table: AccuracyTable | None = None,
    chance_kind: str = "uniform",
    failed_folds: Sequence[str] = (),
) -> ComparisonReport:
    """Assemble the per-dataset strategy comparison.

    The router column comes either from ``router_accuracies`` (fractions,
    e.g. per-fold held-out replay results) or from replaying ``router``
    over every dataset; with neither, the column is left empty.

    Every column is computed over the valid prompt variants only (the
    empty-question variants are removed for all models), so the six
    strategies share one (sample, variant) universe and the ordering
    guarantees among them hold exactly.
    """
    if chance_kind not in ("uniform", "majority"):
        raise InvalidInputError(f"unknown chance kind {chance_kind!r}")
    from .core import aggregate_accuracy
    from .routerdata import filter_valid_prompts

    recs = filter_valid_prompts(
        list(records) if records is not None else list(world.records),
        world.prompt_configs,
    )
    if not recs:
        raise InvalidInputError("no records on valid prompt variants")
    table = accuracy_table if accuracy_table is not None else aggregate_accuracy(
        recs, world.sample_index()
    )

    router_col: dict[str, float | None]
    if router_accuracies is not None:
        router_col = {ds: router_accuracies.get(ds) for ds in world.datasets}
    elif router is not None:
        from .router import evaluate_router

        router_col = dict(evaluate_router(router, recs, world))
    else:
        router_col = {ds: None for ds in world.datasets}

    chance_fn = chance_uniform if chance_kind == "uniform" else chance_majority
    cells: dict[str, dict[str, float | None]] = {s: {} for s in STRATEGIES}
    for ds_id, manifest in world.datasets.items():
        cells["chance"][ds_id] = 100.0 * chance_fn(manifest.samples)
        cells["average"][ds_id] = 100.0 * average_baseline(table, ds_id)
        cells["voting"][ds_id] = 100.0 * voting_accuracy(recs, world, ds_id)
        r = router_col.get(ds_id)
        cells["router"][ds_id] = None if r is None else 100.0 * r
        cells["oracle"][ds_id] = 100.0 * oracle_accuracy(table, ds_id)
        cells["upper_bound"][ds_id] = 100.0 * upper_bound_accuracy(
            recs, ds_id, world.model_pool
        )
    return ComparisonReport(
        dataset_ids=tuple(world.datasets),
        cells=cells,
        sizes=world.sizes(),
        chance_kind=chance_kind,
        failed_folds=tuple(failed_folds),
    )
