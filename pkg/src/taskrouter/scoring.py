"""Closed-ended prediction for both model families, plus batch evaluation
over an abstract backend protocol.

Contrastive backends expose image/text encoders; the prediction is the
option whose text embedding has the largest dot product with the image
embedding. Generative backends expose per-token log-probabilities for each
prompt; the prediction is the option whose prompt scores highest under the
chosen normalization (sum of log-probs, or mean per token). Ties always
break to the lowest option index.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import DatasetManifest, ExecutionRecord, Sample
from .errors import BackendError, InvalidInputError
from .prompts import DatasetPromptConfig, PromptVariant, closed_prompt_set, prompt_variants

logger = logging.getLogger(__name__)

EMBEDDING = "embedding"
GENERATIVE = "generative"
NORMALIZATIONS = ("sum", "mean")


@dataclass(frozen=True)
class BackendInfo:
    """Capability descriptor a backend must expose.

    ``token_span`` records which tokens a generative backend scores
    (e.g. "full_prompt" or "option_only"); the framework stores it but does
    not interpret it.
    """

    name: str
    family: str
    deterministic: bool = True
    concurrent_safe: bool = True
    embedding_dim: int | None = None
    token_span: str | None = None

    def __post_init__(self):
        if self.family not in (EMBEDDING, GENERATIVE):
            raise InvalidInputError(f"unknown backend family {self.family!r}")


@runtime_checkable
class EmbeddingBackend(Protocol):
    info: BackendInfo

    def embed_image(self, image_ref: str) -> np.ndarray: ...

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray: ...


@runtime_checkable
class GenerativeBackend(Protocol):
    info: BackendInfo

    def option_token_logprobs(
        self, image_ref: str, prompts: Sequence[str]
    ) -> list[list[float]]: ...


@dataclass(frozen=True)
class Prediction:
    predicted_index: int
    per_option_scores: tuple[float, ...]


def predict_contrastive(image_embedding, option_embeddings) -> Prediction:
    """Dot-product alignment: score option o as dot(v_image, row o)."""
    v = np.asarray(image_embedding, dtype=np.float64)
    m = np.asarray(option_embeddings, dtype=np.float64)
    if v.ndim != 1 or m.ndim != 2:
        raise InvalidInputError(
            f"expected a vector and a matrix, got shapes {v.shape} and {m.shape}"
        )
    if m.shape[0] < 1:
        raise InvalidInputError("at least one option embedding required")
    if m.shape[1] != v.shape[0]:
        raise InvalidInputError(
            f"dimension mismatch: image {v.shape[0]} vs options {m.shape[1]}"
        )
    scores = m @ v
    return Prediction(int(np.argmax(scores)), tuple(float(s) for s in scores))


def predict_generative(
    token_logprobs: Sequence[Sequence[float]], normalization: str = "sum"
) -> Prediction:
    """Score each option's prompt by summed (or per-token mean) log-probability."""
    if normalization not in NORMALIZATIONS:
        raise InvalidInputError(
            f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}"
        )
    if not token_logprobs:
        raise InvalidInputError("at least one option required")
    scores = []
    for i, lps in enumerate(token_logprobs):
        if len(lps) == 0:
            raise InvalidInputError(f"option {i} has an empty token list")
        total = float(sum(lps))
        scores.append(total if normalization == "sum" else total / len(lps))
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return Prediction(best, tuple(scores))


@dataclass
class SkipNote:
    sample_id: str
    prompt_variant_id: str
    error: str


@dataclass
class EvaluationRun:
    """Records produced by an evaluate() call plus its skip summary."""

    records: list[ExecutionRecord]
    skipped: list[SkipNote] = field(default_factory=list)

    @property
    def skip_count(self) -> int:
        return len(self.skipped)


def evaluate(
    backend,
    manifest: DatasetManifest,
    config: DatasetPromptConfig,
    variants: Sequence[PromptVariant] | None = None,
    normalization: str = "sum",
    max_workers: int = 1,
) -> EvaluationRun:
    """Run one backend over every (sample, variant) of a dataset.

    Prompts are built via closed_prompt_set, so option order aligns with
    gold_index. A backend failure on a sample skips that record and logs
    the sample id; the returned run reports the skip count. Backends that
    declare concurrent_safe=False are serialized behind a lock even when
    max_workers > 1.
    """
    info: BackendInfo = backend.info
    if info.family == EMBEDDING and not isinstance(backend, EmbeddingBackend):
        raise InvalidInputError(f"backend {info.name} does not implement embedding ops")
    if info.family == GENERATIVE and not isinstance(backend, GenerativeBackend):
        raise InvalidInputError(f"backend {info.name} does not implement generative ops")

    chosen = list(variants) if variants is not None else prompt_variants(config)
    lock = threading.Lock() if not info.concurrent_safe else None

    def score_one(sample: Sample, variant: PromptVariant):
        prompts = closed_prompt_set(sample, config, variant)
        if lock is not None:
            with lock:
                return _predict(backend, info, sample, prompts, normalization)
        return _predict(backend, info, sample, prompts, normalization)

    tasks = [(s, v) for s in manifest.samples for v in chosen]
    results: list[tuple[Sample, PromptVariant, Prediction | Exception]] = []
    if max_workers <= 1:
        for sample, variant in tasks:
            try:
                results.append((sample, variant, score_one(sample, variant)))
            except Exception as exc:  # noqa: BLE001 - backend failures are data
                results.append((sample, variant, exc))
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(score_one, s, v) for s, v in tasks]
            for (sample, variant), fut in zip(tasks, futures):
                try:
                    results.append((sample, variant, fut.result()))
                except Exception as exc:  # noqa: BLE001
                    results.append((sample, variant, exc))

    run = EvaluationRun(records=[])
    for sample, variant, outcome in results:
        if isinstance(outcome, Exception):
            logger.warning(
                "backend %s failed on sample %s (%s): %s",
                info.name, sample.sample_id, variant.variant_id, outcome,
            )
            run.skipped.append(SkipNote(sample.sample_id, variant.variant_id, str(outcome)))
            continue
        run.records.append(
            ExecutionRecord(
                sample_id=sample.sample_id,
                dataset_id=manifest.dataset_id,
                model_id=info.name,
                prompt_variant_id=variant.variant_id,
                predicted_index=outcome.predicted_index,
                correct=outcome.predicted_index == sample.gold_index,
            )
        )
    if run.skipped:
        logger.warning(
            "backend %s on %s: %d of %d evaluations skipped",
            info.name, manifest.dataset_id, run.skip_count, len(tasks),
        )
    return run


def _predict(backend, info: BackendInfo, sample: Sample, prompts, normalization):
    if info.family == EMBEDDING:
        v = backend.embed_image(sample.image_ref)
        m = backend.embed_texts(prompts)
        return predict_contrastive(v, m)
    lps = backend.option_token_logprobs(sample.image_ref, prompts)
    if len(lps) != len(prompts):
        raise BackendError(
            f"backend {info.name} returned {len(lps)} logprob lists for "
            f"{len(prompts)} prompts"
        )
    return predict_generative(lps, normalization)


# ---------------------------------------------------------------------------
# In-process mock backends. They implement the same contract as real model
# servers and exist so the whole pipeline runs at desk scale.

def _stable_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "big")


class GoldEmbeddingBackend:
    """Embeds option i as basis vector e_i and the image as the basis
    vector of its gold option: accuracy 1.0 by construction."""

    def __init__(self, gold_by_ref: Mapping[str, int], dim: int, name: str = "gold-embed"):
        self._gold = dict(gold_by_ref)
        self._dim = dim
        self.info = BackendInfo(name=name, family=EMBEDDING, embedding_dim=dim)

    def embed_image(self, image_ref: str) -> np.ndarray:
        v = np.zeros(self._dim)
        v[self._gold[image_ref]] = 1.0
        return v

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray:
        if len(prompts) > self._dim:
            raise BackendError(f"{len(prompts)} prompts exceed dim {self._dim}")
        return np.eye(len(prompts), self._dim)


class ConstantEmbeddingBackend:
    """All embeddings are the all-ones vector: every option scores the
    same, so the tie rule always predicts index 0."""

    def __init__(self, dim: int = 4, name: str = "constant-embed"):
        self._dim = dim
        self.info = BackendInfo(name=name, family=EMBEDDING, embedding_dim=dim)

    def embed_image(self, image_ref: str) -> np.ndarray:
        return np.ones(self._dim)

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray:
        return np.ones((len(prompts), self._dim))


class SeededEmbeddingBackend:
    """Deterministic pseudo-random embeddings keyed by input content."""

    def __init__(self, seed: int = 0, dim: int = 16, name: str = "seeded-embed"):
        self._seed = seed
        self._dim = dim
        self.info = BackendInfo(name=name, family=EMBEDDING, embedding_dim=dim)

    def embed_image(self, image_ref: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed(self._seed, "img", image_ref))
        return rng.normal(size=self._dim)

    def embed_texts(self, prompts: Sequence[str]) -> np.ndarray:
        rows = []
        for p in prompts:
            rng = np.random.default_rng(_stable_seed(self._seed, "txt", p))
            rows.append(rng.normal(size=self._dim))
        return np.stack(rows)


class GoldLogprobBackend:
    """Generative mock: the gold option's prompt gets the least-negative
    token log-probabilities."""

    def __init__(self, gold_by_ref: Mapping[str, int], name: str = "gold-gen"):
        self._gold = dict(gold_by_ref)
        self.info = BackendInfo(name=name, family=GENERATIVE, token_span="full_prompt")

    def option_token_logprobs(self, image_ref, prompts):
        gold = self._gold[image_ref]
        return [
            [-0.05] * 3 if i == gold else [-1.5] * 3 for i in range(len(prompts))
        ]


class SeededLogprobBackend:
    """Deterministic pseudo-random per-token log-probabilities."""

    def __init__(self, seed: int = 0, tokens: int = 4, name: str = "seeded-gen"):
        self._seed = seed
        self._tokens = tokens
        self.info = BackendInfo(name=name, family=GENERATIVE, token_span="full_prompt")

    def option_token_logprobs(self, image_ref, prompts):
        out = []
        for p in prompts:
            rng = np.random.default_rng(_stable_seed(self._seed, "lp", image_ref, p))
            out.append(list(-rng.uniform(0.01, 3.0, size=self._tokens)))
        return out


class FlakyBackend:
    """Wraps another backend and fails on a fixed set of sample refs; used
    to exercise the skip path."""

    def __init__(self, inner, failing_refs: Iterable[str]):
        self._inner = inner
        self._failing = set(failing_refs)
        self.info = inner.info

    def _check(self, image_ref: str):
        if image_ref in self._failing:
            raise BackendError(f"simulated failure for {image_ref}")

    def embed_image(self, image_ref: str):
        self._check(image_ref)
        return self._inner.embed_image(image_ref)

    def embed_texts(self, prompts):
        return self._inner.embed_texts(prompts)

    def option_token_logprobs(self, image_ref, prompts):
        self._check(image_ref)
        return self._inner.option_token_logprobs(image_ref, prompts)


def gold_index_by_ref(manifests: Iterable[DatasetManifest]) -> dict[str, int]:
    """Image-ref -> gold option index lookup used by the gold mocks."""
    return {
        s.image_ref: s.gold_index for m in manifests for s in m.samples
    }


def make_mock_backend(kind: str, family: str, *, name: str | None = None,
                      seed: int = 0, manifests=None, dim: int = 128):
    """Factory for the builtin mocks: kind in {gold, constant, seeded}."""
    if kind == "gold":
        if manifests is None:
            raise InvalidInputError("gold backend needs manifests to look up answers")
        gold = gold_index_by_ref(manifests)
        if family == EMBEDDING:
            return GoldEmbeddingBackend(gold, dim=dim, name=name or "gold-embed")
        return GoldLogprobBackend(gold, name=name or "gold-gen")
    if kind == "constant":
        if family != EMBEDDING:
            raise InvalidInputError("constant mock is embedding-only")
        return ConstantEmbeddingBackend(dim=dim, name=name or "constant-embed")
    if kind == "seeded":
        if family == EMBEDDING:
            return SeededEmbeddingBackend(seed=seed, dim=dim, name=name or "seeded-embed")
        return SeededLogprobBackend(seed=seed, name=name or "seeded-gen")
    raise InvalidInputError(f"unknown mock backend kind {kind!r}")
