"""Experiment orchestration: leave-one-dataset-out cross-validation, the
metadata/response-option ablation grid, selection-distribution heatmaps,
and run manifests.

Every fold is self-contained: its corpus, router file, and metrics land in
their own directory, so reports can be rebuilt from persisted artifacts
and a failed fold never aborts the remaining ones.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np

from .baselines import ComparisonReport, build_comparison_report
from .core import World
from .errors import CoverageError, InvalidInputError, TaskRouterError
from .router import FeaturizerConfig, RouterModel, TrainConfig, evaluate_router, train_router
from .routerdata import (
    ALL_FLAG_COMBOS,
    RouterExample,
    SerializationFlags,
    build_router_dataset,
    save_corpus,
    split_80_10_10,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: where the world comes from, which flag combinations
    to run, the shared training configuration, and the master seed."""

    world_dir: str | None = None
    world_spec: Mapping | None = None
    flag_grid: tuple[SerializationFlags, ...] = (SerializationFlags(),)
    train: TrainConfig = TrainConfig()
    featurizer: FeaturizerConfig = FeaturizerConfig()
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.world_dir is None and self.world_spec is None:
            raise InvalidInputError("an experiment needs a world directory or spec")
        if not self.flag_grid:
            raise InvalidInputError("flag grid must be non-empty")

    def load_world(self) -> World:
        if self.world_dir is not None:
            from .core import load_world

            return load_world(self.world_dir)
        from .synth import WorldSpec, generate_world

        return generate_world(WorldSpec.from_dict(dict(self.world_spec)))


@dataclass
class FoldResult:
    heldout_dataset: str
    status: str  # "ok" | "failed"
    router_accuracy: float | None = None
    error: str | None = None
    router_path: str | None = None
    corpus_sizes: dict = field(default_factory=dict)


@dataclass
class LodoResult:
    report: ComparisonReport
    folds: dict[str, FoldResult]

    @property
    def failed_folds(self) -> list[str]:
        return [ds for ds, f in self.folds.items() if f.status == "failed"]


def _fold_seed(base_seed: int, fold_index: int) -> int:
    return base_seed + fold_index


def run_lodo(
    world: World,
    flags: SerializationFlags = SerializationFlags(),
    train_config: TrainConfig = TrainConfig(),
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    seed: int = 0,
    out_dir: str | Path | None = None,
    chance_kind: str = "uniform",
) -> LodoResult:
    """For each dataset D: build a router corpus from every other dataset,
    split 80/10/10, train, and evaluate on D by recorded-outcome replay.
    Fold failures are recorded and the remaining folds continue."""
    if len(world.datasets) < 2:
        raise InvalidInputError("leave-one-dataset-out needs at least two datasets")
    if len(world.model_pool) < 2:
        raise InvalidInputError("leave-one-dataset-out needs at least two models")

    out = Path(out_dir) if out_dir is not None else None
    folds: dict[str, FoldResult] = {}
    router_accuracies: dict[str, float] = {}

    for fold_index, heldout in enumerate(world.datasets):
        fold_dir = None
        if out is not None:
            fold_dir = out / f"fold_{heldout}"
            fold_dir.mkdir(parents=True, exist_ok=True)
        try:
            result = _run_fold(
                world, heldout, flags, train_config, featurizer,
                _fold_seed(seed, fold_index), fold_dir,
            )
            folds[heldout] = result
            if result.router_accuracy is not None:
                router_accuracies[heldout] = result.router_accuracy
        except TaskRouterError as exc:
            logger.warning("fold %s failed: %s", heldout, exc)
            folds[heldout] = FoldResult(heldout, "failed", error=str(exc))
            if fold_dir is not None:
                (fold_dir / "metrics.json").write_text(json.dumps(
                    {"status": "failed", "error": str(exc)}, indent=2, sort_keys=True
                ) + "\n")

    report = build_comparison_report(
        world,
        router_accuracies=router_accuracies,
        chance_kind=chance_kind,
        failed_folds=[ds for ds, f in folds.items() if f.status == "failed"],
    )
    if out is not None:
        report.write_csv(out / "report.csv")
        report.write_json(out / "report.json")
    return LodoResult(report=report, folds=folds)


def _run_fold(
    world: World,
    heldout: str,
    flags: SerializationFlags,
    train_config: TrainConfig,
    featurizer: FeaturizerConfig,
    fold_seed: int,
    fold_dir: Path | None,
) -> FoldResult:
    train_records = [r for r in world.records if r.dataset_id != heldout]
    examples = build_router_dataset(world, flags, records=train_records)
    train, validate, test = split_80_10_10(examples, seed=fold_seed)
    assert not any(ex.provenance[1] == heldout for ex in examples)

    model = train_router(
        train, validate,
        config=_with_seed(train_config, fold_seed),
        flags=flags,
        featurizer=featurizer,
        vocabulary=sorted(world.model_pool),
    )
    heldout_records = [r for r in world.records if r.dataset_id == heldout]
    accuracy = evaluate_router(model, heldout_records, world, datasets=[heldout])[heldout]

    result = FoldResult(
        heldout_dataset=heldout,
        status="ok",
        router_accuracy=accuracy,
        corpus_sizes={"train": len(train), "validate": len(validate), "test": len(test)},
    )
    if fold_dir is not None:
        save_corpus(train, fold_dir / "train.txt")
        save_corpus(validate, fold_dir / "validate.txt")
        save_corpus(test, fold_dir / "test.txt")
        router_path = fold_dir / "router.bin"
        model.save(router_path)
        result.router_path = str(router_path)
        (fold_dir / "metrics.json").write_text(json.dumps({
            "status": "ok",
            "heldout_dataset": heldout,
            "router_accuracy": accuracy,
            "corpus_sizes": result.corpus_sizes,
            "flags": flags.to_dict(),
            "seed": fold_seed,
        }, indent=2, sort_keys=True) + "\n")
    return result


def _with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_iterations=config.max_iterations,
        eval_every=config.eval_every,
        seed=seed,
    )


@dataclass
class AblationResult:
    """Held-out router accuracy per dataset for each flag combination,
    plus the optional in-distribution column."""

    dataset_ids: tuple[str, ...]
    columns: dict[str, dict[str, float | None]]  # flag tag -> dataset -> fraction
    sizes: dict[str, int]
    in_distribution: dict[str, float] | None = None

    def average(self, tag: str) -> float | None:
        vals = [v for v in self.columns[tag].values() if v is not None]
        return sum(vals) / len(vals) if vals else None

    def write_csv(self, target: str | Path | IO[str]) -> None:
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(fh)
            tags = list(self.columns)
            header = ["dataset", *tags]
            if self.in_distribution is not None:
                header.append("in_distribution")
            writer.writerow(header)
            for ds in self.dataset_ids:
                row = [ds] + [
                    _fmt(self.columns[t].get(ds)) for t in tags
                ]
                if self.in_distribution is not None:
                    row.append(_fmt(self.in_distribution.get(ds)))
                writer.writerow(row)
            avg_row = ["average"] + [_fmt(self.average(t)) for t in tags]
            if self.in_distribution is not None:
                vals = list(self.in_distribution.values())
                avg_row.append(_fmt(sum(vals) / len(vals) if vals else None))
            writer.writerow(avg_row)
        finally:
            if own:
                fh.close()

    def to_dict(self) -> dict:
        return {
            "dataset_ids": list(self.dataset_ids),
            "columns": {t: dict(col) for t, col in self.columns.items()},
            "sizes": dict(self.sizes),
            "in_distribution": dict(self.in_distribution)
            if self.in_distribution is not None else None,
        }


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{100.0 * value:.1f}"


def run_ablation(
    world: World,
    train_config: TrainConfig = TrainConfig(),
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    seed: int = 0,
    out_dir: str | Path | None = None,
    flag_grid: Sequence[SerializationFlags] = ALL_FLAG_COMBOS,
    include_in_distribution: bool = False,
) -> AblationResult:
    """Train and evaluate routers under every flag combination with the
    held-out protocol; optionally add the in-distribution protocol, where
    the router sees every dataset and is evaluated on held-out samples."""
    out = Path(out_dir) if out_dir is not None else None
    columns: dict[str, dict[str, float | None]] = {}
    for flags in flag_grid:
        sub_dir = out / flags.tag if out is not None else None
        lodo = run_lodo(
            world, flags=flags, train_config=train_config, featurizer=featurizer,
            seed=seed, out_dir=sub_dir,
        )
        columns[flags.tag] = {
            ds: fold.router_accuracy for ds, fold in lodo.folds.items()
        }

    ind = None
    if include_in_distribution:
        ind = run_in_distribution(
            world, flags=flag_grid[0], train_config=train_config,
            featurizer=featurizer, seed=seed,
        )

    result = AblationResult(
        dataset_ids=tuple(world.datasets),
        columns=columns,
        sizes=world.sizes(),
        in_distribution=ind,
    )
    if out is not None:
        result.write_csv(out / "ablation.csv")
        (out / "ablation.json").write_text(
            json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    return result


def run_in_distribution(
    world: World,
    flags: SerializationFlags = SerializationFlags(),
    train_config: TrainConfig = TrainConfig(),
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    seed: int = 0,
) -> dict[str, float]:
    """Train one router on an 80/10/10 split of every dataset and replay
    it on the test split, grouped per dataset."""
    examples = build_router_dataset(world, flags)
    train, validate, test = split_80_10_10(examples, seed=seed)
    model = train_router(
        train, validate, config=_with_seed(train_config, seed), flags=flags,
        featurizer=featurizer, vocabulary=sorted(world.model_pool),
    )
    outcomes = {
        (r.dataset_id, r.sample_id, r.prompt_variant_id, r.model_id): r
        for r in world.records
    }
    per_dataset: dict[str, list[bool]] = {}
    for ex in test:
        sample_id, ds_id, variant_id = ex.provenance
        choice = model.route_text(ex.serialized_input)
        outcome = outcomes.get((ds_id, sample_id, variant_id, choice))
        if outcome is None:
            raise CoverageError(
                f"no recorded outcome for routed model {choice!r} on "
                f"{ds_id}/{sample_id}/{variant_id}"
            )
        per_dataset.setdefault(ds_id, []).append(outcome.correct)
    return {ds: sum(v) / len(v) for ds, v in sorted(per_dataset.items())}


@dataclass
class SelectionDistribution:
    """model x dataset matrix of selection fractions; every dataset column
    sums to one."""

    model_ids: tuple[str, ...]
    dataset_ids: tuple[str, ...]
    fractions: np.ndarray  # (n_models, n_datasets)

    def __post_init__(self):
        sums = self.fractions.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise InvalidInputError(
                f"selection fractions must sum to 1 per dataset, got {sums}"
            )

    def write_csv(self, target: str | Path | IO[str]) -> None:
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(fh)
            writer.writerow(["model_id", *self.dataset_ids])
            for i, model in enumerate(self.model_ids):
                writer.writerow([model, *(repr(float(x)) for x in self.fractions[i])])
        finally:
            if own:
                fh.close()

    def render_image(self, path: str | Path) -> bool:
        """Best-effort heatmap image; returns False when matplotlib is
        unavailable."""
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            logger.warning("matplotlib unavailable; skipping heatmap image")
            return False
        fig, ax = plt.subplots(figsize=(1.2 + 0.6 * len(self.dataset_ids),
                                        1.2 + 0.5 * len(self.model_ids)))
        im = ax.imshow(self.fractions, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xticks(range(len(self.dataset_ids)), self.dataset_ids, rotation=45,
                      ha="right")
        ax.set_yticks(range(len(self.model_ids)), self.model_ids)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return True


def selection_heatmap(
    router: RouterModel,
    world: World,
    datasets: Sequence[str] | None = None,
) -> SelectionDistribution:
    """How often the router picks each model per dataset, over every
    (sample, valid variant) query."""
    from .prompts import prompt_variants, render, rendered_options, valid_variant_ids

    chosen = list(datasets) if datasets is not None else list(world.datasets)
    models = list(router.vocabulary)
    index = {m: i for i, m in enumerate(models)}
    counts = np.zeros((len(models), len(chosen)))
    for j, ds_id in enumerate(chosen):
        manifest = world.datasets[ds_id]
        config = world.prompt_configs[ds_id]
        valid = valid_variant_ids(config)
        variants = [v for v in prompt_variants(config) if v.variant_id in valid]
        for sample in manifest.samples:
            for variant in variants:
                choice = router.route(
                    world.metadata.get(sample.sample_id),
                    render(variant.question, sample, config),
                    rendered_options(sample, config, variant),
                )
                counts[index[choice], j] += 1
        if counts[:, j].sum() == 0:
            raise InvalidInputError(f"no queries for dataset {ds_id!r}")
    return SelectionDistribution(
        model_ids=tuple(models),
        dataset_ids=tuple(chosen),
        fractions=counts / counts.sum(axis=0, keepdims=True),
    )


def training_label_distribution(
    examples: Sequence[RouterExample], model_ids: Sequence[str]
) -> SelectionDistribution:
    """Companion to selection_heatmap: how often each model is the label in
    the training data, per dataset."""
    datasets = sorted({ex.provenance[1] for ex in examples})
    index_m = {m: i for i, m in enumerate(model_ids)}
    index_d = {d: j for j, d in enumerate(datasets)}
    counts = np.zeros((len(model_ids), len(datasets)))
    for ex in examples:
        counts[index_m[ex.label_model_id], index_d[ex.provenance[1]]] += 1
    if (counts.sum(axis=0) == 0).any():
        raise InvalidInputError("every dataset needs at least one example")
    return SelectionDistribution(
        model_ids=tuple(model_ids),
        dataset_ids=tuple(datasets),
        fractions=counts / counts.sum(axis=0, keepdims=True),
    )


def write_run_manifest(
    out_dir: str | Path,
    config: Mapping,
    seeds: Mapping[str, int],
    input_files: Sequence[str | Path] = (),
) -> Path:
    """Record seeds, a config hash, and input file digests for a run."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    digests = {}
    for p in input_files:
        p = Path(p)
        digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "config": config,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seeds": dict(seeds),
        "input_digests": digests,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
