"""Trainable text-to-model router.

The default learner is a multinomial logistic regression over signed
hashed character n-grams: dependency-free, deterministic, and fast enough
to train at desk scale. The learner interface is pluggable so a generative
LM can be swapped in later without touching the data pipeline.

Serialized inputs are featurized as character n-grams (orders 2-4 by
default) hashed into 2^18 signed buckets. Hashing uses a fixed polynomial
over the character code points, so feature vectors are stable across
processes and platforms.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import ExecutionRecord, MetadataSummary, World, group_records
from .errors import CoverageError, InvalidInputError
from .prompts import prompt_variants, render, rendered_options, valid_variant_ids
from .routerdata import RouterExample, SerializationFlags, serialize_input

logger = logging.getLogger(__name__)

# Fixed hashing constants: featurization must agree across runs and hosts.
_HASH_SEED = 0x7461736B726F7574
_MAX_UINT64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class FeaturizerConfig:
    ngram_orders: tuple[int, ...] = (2, 3, 4)
    hash_dim: int = 2 ** 18
    lowercase: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ngram_orders", tuple(self.ngram_orders))
        if not self.ngram_orders or any(n < 1 for n in self.ngram_orders):
            raise InvalidInputError(f"bad n-gram orders {self.ngram_orders}")
        if self.hash_dim < 2:
            raise InvalidInputError("hash_dim must be at least 2")

    def to_dict(self) -> dict:
        return {
            "ngram_orders": list(self.ngram_orders),
            "hash_dim": self.hash_dim,
            "lowercase": self.lowercase,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeaturizerConfig":
        return cls(
            ngram_orders=tuple(d["ngram_orders"]),
            hash_dim=int(d["hash_dim"]),
            lowercase=bool(d["lowercase"]),
        )


def _hash_atoms(order: int) -> np.ndarray:
    rng = np.random.default_rng(_HASH_SEED + order)
    # odd multipliers keep the low bits well mixed under mod-2^64 products
    return (rng.integers(0, 2 ** 62, size=order, dtype=np.uint64) << np.uint64(1)) | np.uint64(1)


_ATOM_CACHE: dict[int, np.ndarray] = {}


def _atoms(order: int) -> np.ndarray:
    if order not in _ATOM_CACHE:
        _ATOM_CACHE[order] = _hash_atoms(order)
    return _ATOM_CACHE[order]


def char_ngrams(text: str, order: int) -> list[str]:
    """Plain enumeration of the character n-grams of one order; the
    reference the vectorized hasher is checked against."""
    return [text[i:i + order] for i in range(len(text) - order + 1)]


def ngram_hash(gram: str) -> int:
    """Hash of one n-gram under the same polynomial the vectorized path uses."""
    atoms = _atoms(len(gram))
    h = 0
    for code, a in zip((ord(c) for c in gram), atoms.tolist()):
        h = (h + code * a) % (2 ** 64)
    return h


def featurize(text: str, config: FeaturizerConfig = FeaturizerConfig()):
    """Signed hashed n-gram counts of a serialized input.

    Returns (indices, values): sorted unique bucket indices and the signed
    counts that landed in them.
    """
    if not text:
        raise InvalidInputError("cannot featurize an empty string")
    if config.lowercase:
        text = text.lower()
    codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32).astype(np.uint64)
    all_buckets = []
    all_signs = []
    for order in config.ngram_orders:
        if len(codes) < order:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(codes, order)
        hashes = (windows * _atoms(order)[None, :]).sum(axis=1, dtype=np.uint64)
        all_buckets.append((hashes % np.uint64(config.hash_dim)).astype(np.int64))
        signs = ((hashes >> np.uint64(63)) & np.uint64(1)).astype(np.float64)
        all_signs.append(1.0 - 2.0 * signs)
    if not all_buckets:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    buckets = np.concatenate(all_buckets)
    signs = np.concatenate(all_signs)
    uniq, inverse = np.unique(buckets, return_inverse=True)
    values = np.zeros(len(uniq), dtype=np.float64)
    np.add.at(values, inverse, signs)
    return uniq, values


@dataclass(frozen=True)
class TrainConfig:
    """Training defaults mirror the reference configuration: lr 2e-4,
    batch size 1, 5000 iterations, evaluation every 1000 with
    best-checkpoint selection."""

    learning_rate: float = 2e-4
    batch_size: int = 1
    max_iterations: int = 5000
    eval_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or \
                self.max_iterations < 1 or self.eval_every < 1:
            raise InvalidInputError("all training parameters must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_iterations": self.max_iterations,
            "eval_every": self.eval_every,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**{k: d[k] for k in
                      ("learning_rate", "batch_size", "max_iterations",
                       "eval_every", "seed") if k in d})


Features = tuple[np.ndarray, np.ndarray]


def softmax_loss_and_grads(
    weights: np.ndarray,
    bias: np.ndarray,
    feats: Sequence[Features],
    labels: Sequence[int],
):
    """Mean cross-entropy over a mini-batch plus its analytic gradients.

    Returns (loss, grad_bias, grad_cols) where grad_cols maps a feature
    column index to its (n_classes,) weight gradient. Gradients for columns
    no example touches are identically zero and therefore omitted.
    """
    n = len(feats)
    if n == 0:
        raise InvalidInputError("empty mini-batch")
    k = weights.shape[0]
    loss = 0.0
    grad_bias = np.zeros(k)
    grad_cols: dict[int, np.ndarray] = {}
    for (idx, vals), label in zip(feats, labels):
        scores = weights[:, idx] @ vals + bias
        scores -= scores.max()
        exp = np.exp(scores)
        probs = exp / exp.sum()
        loss -= float(np.log(max(probs[label], 1e-300)))
        delta = probs.copy()
        delta[label] -= 1.0
        grad_bias += delta
        for col, val in zip(idx.tolist(), vals.tolist()):
            acc = grad_cols.get(col)
            if acc is None:
                acc = np.zeros(k)
                grad_cols[col] = acc
            acc += delta * val
    inv = 1.0 / n
    for col in grad_cols:
        grad_cols[col] *= inv
    return loss * inv, grad_bias * inv, grad_cols


def batch_loss(weights, bias, feats, labels) -> float:
    loss, _, _ = softmax_loss_and_grads(weights, bias, feats, labels)
    return loss


@dataclass
class RouterModel:
    """A trained router: model vocabulary, featurization config, the
    serialization flags it was trained with, and the learner parameters.
    Inference is deterministic; ties break to the lowest vocabulary index."""

    vocabulary: tuple[str, ...]
    featurizer: FeaturizerConfig
    flags: SerializationFlags
    seed: int
    weights: np.ndarray  # (n_models, hash_dim)
    bias: np.ndarray  # (n_models,)
    learner_kind: str = "linear_hashed_ngram"

    def __post_init__(self):
        if not self.vocabulary:
            raise InvalidInputError("empty model vocabulary")
        if self.weights.shape != (len(self.vocabulary), self.featurizer.hash_dim):
            raise InvalidInputError(
                f"weights shape {self.weights.shape} does not match "
                f"{len(self.vocabulary)} models x {self.featurizer.hash_dim} buckets"
            )

    def scores_for(self, serialized_input: str) -> np.ndarray:
        idx, vals = featurize(serialized_input, self.featurizer)
        if len(idx) == 0:
            return self.bias.copy()
        return self.weights[:, idx] @ vals + self.bias

    def route_text(self, serialized_input: str) -> str:
        return self.vocabulary[int(np.argmax(self.scores_for(serialized_input)))]

    def route(
        self,
        metadata: MetadataSummary | None,
        prompt_text: str,
        options: Sequence[str] | None,
    ) -> str:
        """Route one query: serialize the input portion with the train-time
        flags, featurize, and return the argmax-probability model."""
        text = serialize_input(
            metadata if self.flags.include_metadata else None,
            prompt_text,
            options if self.flags.include_response_options else None,
            self.flags,
        )
        return self.route_text(text)

    # -- persistence --------------------------------------------------------

    MAGIC = b"TROUTER\x01"

    def save(self, path: str | Path) -> None:
        header = {
            "format_version": 1,
            "learner_kind": self.learner_kind,
            "vocabulary": list(self.vocabulary),
            "flags": self.flags.to_dict(),
            "featurization": self.featurizer.to_dict(),
            "seed": self.seed,
            "weights_shape": list(self.weights.shape),
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "RouterModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise InvalidInputError(f"{path} is not a router file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format_version") != 1:
                raise InvalidInputError(
                    f"unsupported router file version {header.get('format_version')}"
                )
            shape = tuple(header["weights_shape"])
            n = shape[0] * shape[1]
            weights = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            bias = np.frombuffer(fh.read(8 * shape[0]), dtype="<f8").copy()
        return cls(
            vocabulary=tuple(header["vocabulary"]),
            featurizer=FeaturizerConfig.from_dict(header["featurization"]),
            flags=SerializationFlags.from_dict(header["flags"]),
            seed=int(header["seed"]),
            weights=weights,
            bias=bias,
            learner_kind=header["learner_kind"],
        )


def _label_accuracy(weights, bias, feats, labels) -> float:
    if not feats:
        return 0.0
    hits = 0
    for (idx, vals), label in zip(feats, labels):
        scores = weights[:, idx] @ vals + bias
        if int(np.argmax(scores)) == label:
            hits += 1
    return hits / len(feats)


def train_router(
    train: Sequence[RouterExample],
    validate: Sequence[RouterExample],
    config: TrainConfig = TrainConfig(),
    flags: SerializationFlags | None = None,
    featurizer: FeaturizerConfig = FeaturizerConfig(),
    vocabulary: Sequence[str] | None = None,
) -> RouterModel:
    """Fit the default learner with seeded SGD over the training examples.

    Every ``eval_every`` steps (and at the final step) the validation label
    accuracy is measured and the best checkpoint kept. With no validation
    examples the final parameters are returned with a warning.
    """
    if not train:
        raise InvalidInputError("empty training set")
    vocab = tuple(vocabulary) if vocabulary is not None else tuple(
        sorted({ex.label_model_id for ex in train})
    )
    vocab_index = {m: i for i, m in enumerate(vocab)}
    for ex in list(train) + list(validate):
        if ex.label_model_id not in vocab_index:
            raise InvalidInputError(
                f"label {ex.label_model_id!r} outside the model vocabulary {vocab}"
            )
    if flags is None:
        flags = _infer_flags(train[0])

    feats = [featurize(ex.serialized_input, featurizer) for ex in train]
    labels = [vocab_index[ex.label_model_id] for ex in train]
    val_feats = [featurize(ex.serialized_input, featurizer) for ex in validate]
    val_labels = [vocab_index[ex.label_model_id] for ex in validate]

    k = len(vocab)
    weights = np.zeros((k, featurizer.hash_dim))
    bias = np.zeros(k)
    rng = np.random.default_rng(config.seed)

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    order = np.arange(len(train))
    pos = len(train)  # force a shuffle before the first step
    lr = config.learning_rate

    for step in range(1, config.max_iterations + 1):
        if pos + config.batch_size > len(order):
            rng.shuffle(order)
            pos = 0
        batch = order[pos:pos + config.batch_size]
        pos += config.batch_size
        batch_feats = [feats[i] for i in batch]
        batch_labels = [labels[i] for i in batch]
        _, grad_bias, grad_cols = softmax_loss_and_grads(
            weights, bias, batch_feats, batch_labels
        )
        bias -= lr * grad_bias
        for col, g in grad_cols.items():
            weights[:, col] -= lr * g

        if step % config.eval_every == 0 or step == config.max_iterations:
            if val_feats:
                acc = _label_accuracy(weights, bias, val_feats, val_labels)
                logger.info("step %d: validation label accuracy %.4f", step, acc)
                if best is None or acc > best[0]:
                    best = (acc, weights.copy(), bias.copy())

    if best is not None:
        _, weights, bias = best
    else:
        logger.warning("no validation examples; keeping final-iteration parameters")

    return RouterModel(
        vocabulary=vocab,
        featurizer=featurizer,
        flags=flags,
        seed=config.seed,
        weights=weights,
        bias=bias,
    )


def _infer_flags(example: RouterExample) -> SerializationFlags:
    from .routerdata import IMG_MARK, OPTIONS_MARK

    return SerializationFlags(
        include_metadata=example.serialized_input.startswith(IMG_MARK),
        include_response_options=OPTIONS_MARK in example.serialized_input,
    )


def evaluate_router(
    router: RouterModel,
    records: Sequence[ExecutionRecord],
    world: World,
    datasets: Sequence[str] | None = None,
) -> dict[str, float]:
    """Recorded-outcome replay: per (sample, valid variant), ask the router
    for a model and score the sample by that model's stored correctness.
    No model is executed. Returns per-dataset accuracy averaged across
    prompt variants."""
    groups = group_records(records)
    chosen = list(datasets) if datasets is not None else list(world.datasets)
    out: dict[str, float] = {}
    for ds_id in chosen:
        manifest = world.datasets[ds_id]
        config = world.prompt_configs[ds_id]
        valid = valid_variant_ids(config)
        variants = [v for v in prompt_variants(config) if v.variant_id in valid]
        per_variant: dict[str, list[bool]] = {v.variant_id: [] for v in variants}
        for sample in manifest.samples:
            for variant in variants:
                per_model = groups.get((ds_id, sample.sample_id, variant.variant_id))
                if per_model is None:
                    continue
                choice = router.route(
                    world.metadata.get(sample.sample_id),
                    render(variant.question, sample, config),
                    rendered_options(sample, config, variant),
                )
                outcome = per_model.get(choice)
                if outcome is None:
                    raise CoverageError(
                        f"no recorded outcome for routed model {choice!r} on "
                        f"{ds_id}/{sample.sample_id}/{variant.variant_id}"
                    )
                per_variant[variant.variant_id].append(outcome.correct)
        variant_accs = [
            sum(flags_) / len(flags_) for flags_ in per_variant.values() if flags_
        ]
        if variant_accs:
            out[ds_id] = sum(variant_accs) / len(variant_accs)
    return out
