"""Shared fixtures: hand-built micro-worlds and synthetic worlds."""

from __future__ import annotations

import numpy as np
import pytest

from taskrouter import (
    DatasetManifest,
    ExecutionRecord,
    MetadataSummary,
    Sample,
    World,
)
from taskrouter.prompts import DatasetPromptConfig, PromptTemplate, prompt_variants
from taskrouter.synth import WorldSpec, generate_world


def make_micro_world(
    n_samples: int = 2,
    models: tuple[str, ...] = ("alpha", "beta", "gamma"),
    correctness: dict | None = None,
    with_empty_question: bool = True,
) -> World:
    """A tiny deterministic world with one dataset.

    ``correctness`` maps (model, sample_index, variant_id) -> bool; models
    not mentioned default to predicting index 0.
    """
    questions = [PromptTemplate("Say: this is ")]
    if with_empty_question:
        questions.insert(0, PromptTemplate(""))
    config = DatasetPromptConfig(
        dataset_id="micro",
        question_forms=tuple(questions),
        option_forms=(PromptTemplate("{class_name}"),),
        class_names=("red", "blue"),
    )
    samples = [
        Sample(
            sample_id=f"s{i}",
            dataset_id="micro",
            image_ref=f"micro/s{i}",
            context={},
            response_options=("red", "blue"),
            gold_index=i % 2,
        )
        for i in range(n_samples)
    ]
    manifest = DatasetManifest("micro", "recognition", tuple(samples), "micro")
    metadata = {
        s.sample_id: MetadataSummary(
            (4, 4, 3), (10.0 + i, 20.0, 30.0), (1.0, 2.0, 3.0)
        )
        for i, s in enumerate(samples)
    }
    records = []
    for model in models:
        for i, sample in enumerate(samples):
            for variant in prompt_variants(config):
                ok = bool(correctness.get((model, i, variant.variant_id), False)) \
                    if correctness else False
                predicted = sample.gold_index if ok else (sample.gold_index + 1) % 2
                records.append(ExecutionRecord(
                    sample_id=sample.sample_id,
                    dataset_id="micro",
                    model_id=model,
                    prompt_variant_id=variant.variant_id,
                    predicted_index=predicted,
                    correct=ok,
                ))
    return World(
        datasets={"micro": manifest},
        prompt_configs={"micro": config},
        metadata=metadata,
        records=records,
        model_pool=list(models),
    )


def keyword_world_spec(
    n_datasets: int = 4,
    samples_per_dataset: int = 100,
    paired: bool = False,
    seed: int = 7,
    question_forms: int = 1,
    options: tuple[int, int] = (4, 4),
) -> WorldSpec:
    """A prompt_keyword world: each dataset has a unique competence-1.0
    model. With ``paired=True``, consecutive datasets share their best
    model (and thus their keyword), making LODO transfer possible."""
    models = [f"m{i}" for i in range(4)]
    competence = {}
    for mi, model in enumerate(models):
        probs = []
        for d in range(n_datasets):
            best = (d // 2) % len(models) if paired else d % len(models)
            probs.append(1.0 if mi == best else 0.3)
        competence[model] = tuple(probs)
    return WorldSpec(
        n_datasets=n_datasets,
        samples_per_dataset=samples_per_dataset,
        options_range=options,
        competence=competence,
        signal_mode="prompt_keyword",
        question_forms_per_dataset=question_forms,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_keyword_world() -> World:
    return generate_world(keyword_world_spec(samples_per_dataset=60, seed=13))


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
