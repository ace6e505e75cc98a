"""Canonical data model: datasets, samples, image metadata, execution
records, and accuracy aggregation.

Everything here is an immutable value after construction; the operations
are pure functions, so they are safe to run concurrently over disjoint
record partitions. Partial accuracy tables merge by weighted counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import IntegrityError, InvalidInputError

TASK_KINDS = ("recognition", "reasoning")


@dataclass(frozen=True)
class MetadataSummary:
    """Image resolution plus per-channel pixel mean/std, one decimal place."""

    dims: tuple[int, int, int]
    channel_means: tuple[float, ...]
    channel_stds: tuple[float, ...]

    def __post_init__(self):
        h, w, c = self.dims
        if min(h, w, c) < 1:
            raise InvalidInputError(f"dims must all be >= 1, got {self.dims}")
        if len(self.channel_means) != c or len(self.channel_stds) != c:
            raise InvalidInputError(
                f"expected {c} channel means/stds, got "
                f"{len(self.channel_means)}/{len(self.channel_stds)}"
            )
        if any(s < 0 for s in self.channel_stds):
            raise InvalidInputError("channel stds must be non-negative")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "channel_means": list(self.channel_means),
            "channel_stds": list(self.channel_stds),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetadataSummary":
        return cls(
            dims=tuple(int(x) for x in d["dims"]),
            channel_means=tuple(float(x) for x in d["channel_means"]),
            channel_stds=tuple(float(x) for x in d["channel_stds"]),
        )


@dataclass(frozen=True)
class Sample:
    """One visual-task query: an image locator, named context text fields,
    the ordered response options, and the gold option index."""

    sample_id: str
    dataset_id: str
    image_ref: str
    context: Mapping[str, str]
    response_options: tuple[str, ...]
    gold_index: int

    def __post_init__(self):
        object.__setattr__(self, "response_options", tuple(self.response_options))
        object.__setattr__(self, "context", dict(self.context))
        if not self.response_options:
            raise InvalidInputError(f"sample {self.sample_id}: no response options")
        if not 0 <= self.gold_index < len(self.response_options):
            raise InvalidInputError(
                f"sample {self.sample_id}: gold_index {self.gold_index} outside "
                f"[0, {len(self.response_options)})"
            )

    @property
    def gold_option(self) -> str:
        return self.response_options[self.gold_index]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dataset_id": self.dataset_id,
            "image_ref": self.image_ref,
            "context": dict(self.context),
            "response_options": list(self.response_options),
            "gold_index": self.gold_index,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Sample":
        return cls(
            sample_id=d["sample_id"],
            dataset_id=d["dataset_id"],
            image_ref=d["image_ref"],
            context=dict(d.get("context", {})),
            response_options=tuple(d["response_options"]),
            gold_index=int(d["gold_index"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """A dataset: its id, task kind, ordered samples, and the id of the
    prompt configuration it is evaluated with."""

    dataset_id: str
    task_kind: str
    samples: tuple[Sample, ...]
    prompt_config_ref: str

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.task_kind not in TASK_KINDS:
            raise InvalidInputError(
                f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}"
            )
        seen = set()
        for s in self.samples:
            if s.dataset_id != self.dataset_id:
                raise IntegrityError(
                    f"sample {s.sample_id} belongs to {s.dataset_id}, "
                    f"not {self.dataset_id}"
                )
            if s.sample_id in seen:
                raise IntegrityError(
                    f"duplicate sample id {s.sample_id} in {self.dataset_id}"
                )
            seen.add(s.sample_id)

    @property
    def size(self) -> int:
        return len(self.samples)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "task_kind": self.task_kind,
            "prompt_config_ref": self.prompt_config_ref,
            "size": self.size,
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetManifest":
        manifest = cls(
            dataset_id=d["dataset_id"],
            task_kind=d["task_kind"],
            samples=tuple(Sample.from_dict(s) for s in d["samples"]),
            prompt_config_ref=d["prompt_config_ref"],
        )
        if "size" in d and int(d["size"]) != manifest.size:
            raise IntegrityError(
                f"{manifest.dataset_id}: declared size {d['size']} != "
                f"{manifest.size} samples"
            )
        return manifest


@dataclass(frozen=True)
class ExecutionRecord:
    """Outcome of one (model, sample, prompt variant) evaluation."""

    sample_id: str
    dataset_id: str
    model_id: str
    prompt_variant_id: str
    predicted_index: int
    correct: bool

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "prompt_variant_id": self.prompt_variant_id,
            "predicted_index": self.predicted_index,
            "correct": self.correct,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExecutionRecord":
        return cls(
            sample_id=d["sample_id"],
            dataset_id=d["dataset_id"],
            model_id=d["model_id"],
            prompt_variant_id=d["prompt_variant_id"],
            predicted_index=int(d["predicted_index"]),
            correct=bool(d["correct"]),
        )


class AccuracyTable:
    """Accuracy per (model, dataset, prompt variant) cell plus the
    (model, dataset) marginal, an unweighted mean over the prompt variants
    present for that pair.

    Internally the table stores (correct, total) counts so that partial
    tables built over disjoint record sets merge exactly.
    """

    def __init__(self, counts: Mapping[tuple[str, str, str], tuple[int, int]] | None = None):
        self._counts: dict[tuple[str, str, str], tuple[int, int]] = dict(counts or {})

    @property
    def counts(self) -> dict[tuple[str, str, str], tuple[int, int]]:
        return dict(self._counts)

    def cell(self, model_id: str, dataset_id: str, variant_id: str) -> float:
        correct, total = self._counts[(model_id, dataset_id, variant_id)]
        return correct / total

    def has_cell(self, model_id: str, dataset_id: str, variant_id: str) -> bool:
        return (model_id, dataset_id, variant_id) in self._counts

    def marginal(self, model_id: str, dataset_id: str) -> float:
        cells = [
            correct / total
            for (m, d, _), (correct, total) in self._counts.items()
            if m == model_id and d == dataset_id
        ]
        if not cells:
            raise KeyError((model_id, dataset_id))
        return sum(cells) / len(cells)

    def models(self) -> list[str]:
        return sorted({m for m, _, _ in self._counts})

    def datasets(self) -> list[str]:
        return sorted({d for _, d, _ in self._counts})

    def variants(self, model_id: str, dataset_id: str) -> list[str]:
        return sorted(
            v for (m, d, v) in self._counts if m == model_id and d == dataset_id
        )

    def merge(self, other: "AccuracyTable") -> "AccuracyTable":
        merged = dict(self._counts)
        for key, (c, t) in other._counts.items():
            c0, t0 = merged.get(key, (0, 0))
            merged[key] = (c0 + c, t0 + t)
        return AccuracyTable(merged)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AccuracyTable) and self._counts == other._counts

    def __len__(self) -> int:
        return len(self._counts)

    def write_csv(self, target: str | Path | IO[str]) -> None:
        """Export cells as CSV: model_id,dataset_id,prompt_variant_id,accuracy."""
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(fh)
            writer.writerow(["model_id", "dataset_id", "prompt_variant_id", "accuracy"])
            for (m, d, v) in sorted(self._counts):
                writer.writerow([m, d, v, repr(self.cell(m, d, v))])
        finally:
            if own:
                fh.close()


def summarize_image(pixels) -> MetadataSummary:
    """Summarize a decoded H x W x C pixel array into resolution plus
    per-channel population mean/std, rounded to one decimal place.

    Decoding from picture file formats is out of scope; callers hand in
    integer arrays.
    """
    arr = np.asarray(pixels)
    if arr.size == 0:
        raise InvalidInputError("empty pixel array")
    if arr.ndim != 3:
        raise InvalidInputError(f"expected an H x W x C array, got shape {arr.shape}")
    h, w, c = arr.shape
    flat = arr.reshape(h * w, c).astype(np.float64)
    means = np.round(flat.mean(axis=0), 1)
    stds = np.round(flat.std(axis=0), 1)  # population std (ddof=0)
    return MetadataSummary(
        dims=(h, w, c),
        channel_means=tuple(float(x) for x in means),
        channel_stds=tuple(float(x) for x in stds),
    )


def aggregate_accuracy(
    records: Iterable[ExecutionRecord],
    samples: Mapping[tuple[str, str], Sample] | None = None,
) -> AccuracyTable:
    """Aggregate correctness flags into an AccuracyTable.

    When ``samples`` (keyed by (dataset_id, sample_id)) is supplied, every
    record is checked against it: dangling references, out-of-range
    predictions, and inconsistent correct flags raise IntegrityError.
    """
    counts: dict[tuple[str, str, str], list[int]] = {}
    n = 0
    for rec in records:
        n += 1
        if samples is not None:
            sample = samples.get((rec.dataset_id, rec.sample_id))
            if sample is None:
                raise IntegrityError(
                    f"record references unknown sample "
                    f"{rec.dataset_id}/{rec.sample_id}"
                )
            if not 0 <= rec.predicted_index < len(sample.response_options):
                raise IntegrityError(
                    f"record for {rec.sample_id}: predicted_index "
                    f"{rec.predicted_index} outside option range"
                )
            if rec.correct != (rec.predicted_index == sample.gold_index):
                raise IntegrityError(
                    f"record for {rec.sample_id}: correct flag inconsistent "
                    f"with predicted_index"
                )
        key = (rec.model_id, rec.dataset_id, rec.prompt_variant_id)
        cell = counts.setdefault(key, [0, 0])
        cell[0] += int(rec.correct)
        cell[1] += 1
    if n == 0:
        raise InvalidInputError("no records to aggregate")
    return AccuracyTable({k: (c, t) for k, (c, t) in counts.items()})


def weighted_average(
    per_dataset_values: Mapping[str, float], sizes: Mapping[str, int]
) -> float:
    """Size-weighted mean of per-dataset values."""
    if set(per_dataset_values) != set(sizes):
        raise InvalidInputError(
            f"key mismatch: values {sorted(per_dataset_values)} vs "
            f"sizes {sorted(sizes)}"
        )
    if not per_dataset_values:
        raise InvalidInputError("no values to average")
    if any(s <= 0 for s in sizes.values()):
        raise InvalidInputError("all sizes must be positive")
    total = sum(sizes.values())
    return sum(per_dataset_values[k] * sizes[k] for k in per_dataset_values) / total


def group_records(
    records: Iterable[ExecutionRecord],
) -> dict[tuple[str, str, str], dict[str, ExecutionRecord]]:
    """Group records by (dataset_id, sample_id, prompt_variant_id), mapping
    each group to {model_id: record}. Duplicate (model, sample, variant)
    outcomes raise IntegrityError."""
    groups: dict[tuple[str, str, str], dict[str, ExecutionRecord]] = {}
    for rec in records:
        key = (rec.dataset_id, rec.sample_id, rec.prompt_variant_id)
        per_model = groups.setdefault(key, {})
        if rec.model_id in per_model:
            raise IntegrityError(
                f"duplicate record for model {rec.model_id} on "
                f"{rec.dataset_id}/{rec.sample_id}/{rec.prompt_variant_id}"
            )
        per_model[rec.model_id] = rec
    return groups


@dataclass
class World:
    """Everything the pipeline needs about one benchmark universe:
    manifests, prompt configs, per-sample image metadata, execution
    records, and the registered model pool.

    ``pixels`` holds raw arrays for freshly generated synthetic worlds;
    it is never persisted (records store no pixel data).
    """

    datasets: dict[str, DatasetManifest]
    prompt_configs: dict[str, "object"]  # DatasetPromptConfig; untyped to avoid a cycle
    metadata: dict[str, MetadataSummary]
    records: list[ExecutionRecord]
    model_pool: list[str]
    seed: int | None = None
    pixels: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def sample_index(self) -> dict[tuple[str, str], Sample]:
        return {
            (ds_id, s.sample_id): s
            for ds_id, manifest in self.datasets.items()
            for s in manifest.samples
        }

    def sizes(self) -> dict[str, int]:
        return {ds_id: m.size for ds_id, m in self.datasets.items()}

    def accuracy_table(self) -> AccuracyTable:
        return aggregate_accuracy(self.records, self.sample_index())


# ---------------------------------------------------------------------------
# Persistence: line-delimited JSON for records and manifests, JSON for the
# rest. Field names match the type definitions.

def save_records(records: Iterable[ExecutionRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[ExecutionRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ExecutionRecord.from_dict(json.loads(line)))
    return records


def save_manifests(manifests: Iterable[DatasetManifest], path: str | Path) -> None:
    with open(path, "w") as fh:
        for m in manifests:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")


def load_manifests(path: str | Path) -> list[DatasetManifest]:
    manifests = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                manifests.append(DatasetManifest.from_dict(json.loads(line)))
    return manifests


def save_metadata(metadata: Mapping[str, MetadataSummary], path: str | Path) -> None:
    with open(path, "w") as fh:
        for sample_id in metadata:
            row = {"sample_id": sample_id, **metadata[sample_id].to_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_metadata(path: str | Path) -> dict[str, MetadataSummary]:
    out: dict[str, MetadataSummary] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                d = json.loads(line)
                out[d["sample_id"]] = MetadataSummary.from_dict(d)
    return out


WORLD_FILES = ("datasets.jsonl", "prompt_configs.json", "metadata.jsonl",
               "records.jsonl", "world.json")


def save_world(world: World, out_dir: str | Path) -> Path:
    """Persist a world directory. Pixel arrays are intentionally dropped."""
    from .prompts import DatasetPromptConfig  # local import to avoid a cycle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_manifests(world.datasets.values(), out / "datasets.jsonl")
    configs = {
        ds: cfg.to_dict() if isinstance(cfg, DatasetPromptConfig) else cfg
        for ds, cfg in world.prompt_configs.items()
    }
    (out / "prompt_configs.json").write_text(
        json.dumps(configs, indent=2, sort_keys=True) + "\n"
    )
    save_metadata(world.metadata, out / "metadata.jsonl")
    save_records(world.records, out / "records.jsonl")
    (out / "world.json").write_text(
        json.dumps(
            {"model_pool": list(world.model_pool), "seed": world.seed},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    return out


def load_world(world_dir: str | Path) -> World:
    from .prompts import DatasetPromptConfig

    root = Path(world_dir)
    manifests = load_manifests(root / "datasets.jsonl")
    configs_raw = json.loads((root / "prompt_configs.json").read_text())
    configs = {ds: DatasetPromptConfig.from_dict(d) for ds, d in configs_raw.items()}
    meta = load_metadata(root / "metadata.jsonl")
    records = load_records(root / "records.jsonl")
    info = json.loads((root / "world.json").read_text())
    return World(
        datasets={m.dataset_id: m for m in manifests},
        prompt_configs=configs,
        metadata=meta,
        records=records,
        model_pool=list(info["model_pool"]),
        seed=info.get("seed"),
    )
