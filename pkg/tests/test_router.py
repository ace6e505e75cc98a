"""Featurizer, learner gradients, training, routing, and replay
evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskrouter import (
    CoverageError,
    InvalidInputError,
    RouterExample,
    SerializationFlags,
    build_router_dataset,
    evaluate_router,
    featurize,
    split_80_10_10,
    train_router,
)
from taskrouter.router import (
    FeaturizerConfig,
    RouterModel,
    TrainConfig,
    batch_loss,
    char_ngrams,
    ngram_hash,
    softmax_loss_and_grads,
)
from conftest import make_micro_world

SMALL = FeaturizerConfig(ngram_orders=(2, 3), hash_dim=1024)


def example(text: str, label: str) -> RouterExample:
    return RouterExample(
        serialized_input=f"[prompt]{text}",
        label_model_id=label,
        provenance=("s", "d", "q0-o0"),
        raw_line=f"[prompt]{text}[SEP]model::{label}[response]"
                 f"correct::True;;;avg_accuracy::1.00000",
    )


class TestFeaturize:
    def test_deterministic(self):
        a = featurize("hello world", SMALL)
        b = featurize("hello world", SMALL)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_bigram_enumeration(self):
        assert char_ngrams("abc", 2) == ["ab", "bc"]
        assert char_ngrams("abc", 3) == ["abc"]
        assert char_ngrams("ab", 3) == []

    def test_vectorized_matches_per_gram_hash(self):
        # brute force: hash each enumerated n-gram separately and histogram
        config = FeaturizerConfig(ngram_orders=(2, 3, 4), hash_dim=512,
                                  lowercase=False)
        text = "The weather is sunny é?"
        expected: dict[int, float] = {}
        for order in config.ngram_orders:
            for gram in char_ngrams(text, order):
                h = ngram_hash(gram)
                sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
                bucket = h % config.hash_dim
                expected[bucket] = expected.get(bucket, 0.0) + sign
        idx, vals = featurize(text, config)
        assert {int(i): float(v) for i, v in zip(idx, vals)} == expected

    def test_lowercase_rule(self):
        low = FeaturizerConfig(ngram_orders=(2,), hash_dim=256, lowercase=True)
        keep = FeaturizerConfig(ngram_orders=(2,), hash_dim=256, lowercase=False)
        a, b = featurize("ABC", low), featurize("abc", low)
        np.testing.assert_array_equal(a[0], b[0])
        c, d = featurize("ABC", keep), featurize("abc", keep)
        assert not (len(c[0]) == len(d[0]) and np.array_equal(c[0], d[0]))

    def test_one_char_substitution_locality(self, rng):
        # substituting one character changes at most n windows per order,
        # each moving one count out of its old bucket and into a new one
        config = FeaturizerConfig(ngram_orders=(2, 3, 4), hash_dim=2 ** 18)
        bound = 2 * sum(config.ngram_orders)
        alphabet = list("abcdefghijklmnop")
        for _ in range(25):
            chars = [alphabet[i] for i in rng.integers(0, 16, size=40)]
            text = "".join(chars)
            pos = int(rng.integers(0, 40))
            changed = chars.copy()
            changed[pos] = "Z".lower() if chars[pos] != "z" else "q"
            other = "".join(changed)
            a = dict(zip(*featurize(text, config)))
            b = dict(zip(*featurize(other, config)))
            differing = {k for k in set(a) | set(b)
                         if a.get(k, 0.0) != b.get(k, 0.0)}
            assert len(differing) <= bound

    def test_empty_string(self):
        with pytest.raises(InvalidInputError):
            featurize("", SMALL)

    def test_short_string_under_all_orders(self):
        idx, vals = featurize("a", SMALL)
        assert len(idx) == 0 and len(vals) == 0

    def test_bad_config(self):
        with pytest.raises(InvalidInputError):
            FeaturizerConfig(ngram_orders=())
        with pytest.raises(InvalidInputError):
            FeaturizerConfig(hash_dim=1)


class TestGradients:
    def test_analytic_matches_central_finite_differences(self, rng):
        config = FeaturizerConfig(ngram_orders=(2, 3), hash_dim=512)
        texts = ["alpha route one", "bravo route two", "charlie three",
                 "delta four", "echo five", "foxtrot six"]
        feats = [featurize(t, config) for t in texts]
        k = 3
        eps = 1e-6
        for trial in range(10):
            weights = rng.normal(scale=0.1, size=(k, config.hash_dim))
            bias = rng.normal(scale=0.1, size=k)
            batch_idx = rng.choice(len(feats), size=3, replace=False)
            batch = [feats[i] for i in batch_idx]
            labels = [int(rng.integers(k)) for _ in batch]
            loss, grad_bias, grad_cols = softmax_loss_and_grads(
                weights, bias, batch, labels
            )
            assert loss > 0
            # bias coordinates
            for j in range(k):
                w_hi, w_lo = bias.copy(), bias.copy()
                w_hi[j] += eps
                w_lo[j] -= eps
                fd = (batch_loss(weights, w_hi, batch, labels)
                      - batch_loss(weights, w_lo, batch, labels)) / (2 * eps)
                rel = abs(fd - grad_bias[j]) / max(abs(fd), abs(grad_bias[j]), 1e-10)
                assert rel <= 1e-4
            # a sample of touched weight coordinates
            cols = list(grad_cols)
            for col in cols[:5]:
                for j in range(k):
                    hi, lo = weights.copy(), weights.copy()
                    hi[j, col] += eps
                    lo[j, col] -= eps
                    fd = (batch_loss(hi, bias, batch, labels)
                          - batch_loss(lo, bias, batch, labels)) / (2 * eps)
                    a = grad_cols[col][j]
                    rel = abs(fd - a) / max(abs(fd), abs(a), 1e-10)
                    assert rel <= 1e-4
            # untouched columns have exactly zero gradient
            untouched = next(c for c in range(config.hash_dim) if c not in grad_cols)
            hi = weights.copy()
            hi[0, untouched] += eps
            assert batch_loss(hi, bias, batch, labels) == loss


class TestTraining:
    def test_constant_label_predicts_constant(self):
        train = [example(f"text number {i}", "only") for i in range(20)]
        model = train_router(train, train[:2],
                             config=TrainConfig(max_iterations=50, eval_every=25),
                             flags=SerializationFlags(False, False),
                             featurizer=SMALL,
                             vocabulary=["only", "other"])
        for text in ("[prompt]anything at all", "[prompt]unseen input"):
            assert model.route_text(text) == "only"

    def test_separable_keyword_set_reaches_high_accuracy(self):
        rng = np.random.default_rng(5)
        labels = ["m0", "m1", "m2"]
        fillers = ["the sky is wide", "numbers drift by", "a quiet road"]
        examples = []
        for i in range(600):
            label = labels[int(rng.integers(3))]
            filler = fillers[int(rng.integers(3))]
            examples.append(example(f"token-{label} {filler} #{i}", label))
        train, val, test = split_80_10_10(examples, seed=1)
        model = train_router(train, val, config=TrainConfig(seed=2),
                             flags=SerializationFlags(False, False))
        accuracy = sum(
            model.route_text(e.serialized_input) == e.label_model_id for e in test
        ) / len(test)
        assert accuracy >= 0.99

    def test_same_seed_byte_identical(self, tmp_path):
        train = [example(f"t{i} {'x' * (i % 5)}", f"m{i % 2}") for i in range(40)]
        val = train[:6]
        kwargs = dict(config=TrainConfig(max_iterations=300, eval_every=100, seed=7),
                      flags=SerializationFlags(False, False), featurizer=SMALL)
        a = train_router(train, val, **kwargs)
        b = train_router(train, val, **kwargs)
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
        a.save(tmp_path / "a.bin")
        b.save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_label_outside_vocabulary(self):
        train = [example("x", "mystery")]
        with pytest.raises(InvalidInputError):
            train_router(train, [], flags=SerializationFlags(False, False),
                         featurizer=SMALL, vocabulary=["a", "b"])

    def test_empty_train(self):
        with pytest.raises(InvalidInputError):
            train_router([], [], featurizer=SMALL)

    def test_empty_validation_warns_and_trains(self, caplog):
        train = [example(f"t{i}", "m0") for i in range(12)]
        with caplog.at_level("WARNING"):
            model = train_router(
                train, [], config=TrainConfig(max_iterations=30, eval_every=10),
                flags=SerializationFlags(False, False), featurizer=SMALL,
                vocabulary=["m0", "m1"],
            )
        assert "no validation examples" in caplog.text
        assert model.route_text("[prompt]t1") == "m0"

    def test_flags_inferred_from_corpus(self):
        train = [example(f"t{i}", "m0") for i in range(12)]
        model = train_router(train, train[:2],
                             config=TrainConfig(max_iterations=20, eval_every=10),
                             featurizer=SMALL)
        assert model.flags == SerializationFlags(False, False)


class TestRoute:
    def _model(self, vocab=("a", "b"), flags=SerializationFlags(False, False)):
        rng = np.random.default_rng(0)
        return RouterModel(
            vocabulary=tuple(vocab),
            featurizer=SMALL,
            flags=flags,
            seed=0,
            weights=rng.normal(size=(len(vocab), SMALL.hash_dim)),
            bias=np.zeros(len(vocab)),
        )

    def test_single_model_vocabulary(self):
        model = self._model(vocab=("solo",))
        assert model.route(None, "whatever", None) == "solo"

    @given(st.text(min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_route_stays_in_vocabulary(self, text):
        model = self._model()
        assert model.route(None, text, None) in model.vocabulary

    def test_ro_off_ignores_option_order(self):
        model = self._model(flags=SerializationFlags(False, False))
        a = model.route(None, "prompt text", ["x", "y", "z"])
        b = model.route(None, "prompt text", ["z", "y", "x"])
        c = model.route(None, "prompt text", None)
        assert a == b == c

    def test_tie_breaks_to_lowest_vocab_index(self):
        model = RouterModel(
            vocabulary=("first", "second"),
            featurizer=SMALL,
            flags=SerializationFlags(False, False),
            seed=0,
            weights=np.zeros((2, SMALL.hash_dim)),
            bias=np.zeros(2),
        )
        assert model.route(None, "anything", None) == "first"

    def test_save_load_round_trip(self, tmp_path):
        model = self._model(vocab=("a", "b", "c"))
        model.save(tmp_path / "r.bin")
        loaded = RouterModel.load(tmp_path / "r.bin")
        assert loaded.vocabulary == model.vocabulary
        assert loaded.flags == model.flags
        assert loaded.featurizer == model.featurizer
        np.testing.assert_array_equal(loaded.weights, model.weights)
        np.testing.assert_array_equal(loaded.bias, model.bias)
        assert loaded.route_text("[prompt]abc") == model.route_text("[prompt]abc")

    def test_load_rejects_foreign_file(self, tmp_path):
        (tmp_path / "junk.bin").write_bytes(b"not a router")
        with pytest.raises(InvalidInputError):
            RouterModel.load(tmp_path / "junk.bin")


def constant_router(model_id: str, vocab, flags=SerializationFlags(True, True)):
    vocab = tuple(vocab)
    bias = np.zeros(len(vocab))
    bias[vocab.index(model_id)] = 10.0
    return RouterModel(
        vocabulary=vocab, featurizer=SMALL, flags=flags, seed=0,
        weights=np.zeros((len(vocab), SMALL.hash_dim)), bias=bias,
    )


class TestEvaluateRouter:
    def test_constant_router_equals_model_marginal(self, small_keyword_world):
        world = small_keyword_world
        router = constant_router("m1", world.model_pool)
        replay = evaluate_router(router, world.records, world)
        from taskrouter.core import aggregate_accuracy
        from taskrouter.routerdata import filter_valid_prompts

        table = aggregate_accuracy(
            filter_valid_prompts(world.records, world.prompt_configs),
            world.sample_index(),
        )
        for ds, acc in replay.items():
            assert acc == pytest.approx(table.marginal("m1", ds))

    def test_perfect_labels_hit_upper_bound(self):
        correctness = {
            ("alpha", 0, "q1-o0"): True,
            ("beta", 1, "q1-o0"): True,
            ("gamma", 2, "q1-o0"): False,
        }
        world = make_micro_world(n_samples=3, correctness=correctness)
        examples = build_router_dataset(world, SerializationFlags(True, True))
        # a lookup router that answers with the corpus label per input text
        class LabelLookupRouter:
            vocabulary = tuple(sorted(world.model_pool))
            flags = SerializationFlags(True, True)

            def __init__(self):
                self.by_input = {e.serialized_input: e.label_model_id
                                 for e in examples}

            def route(self, metadata, prompt_text, options):
                from taskrouter.routerdata import serialize_input

                return self.by_input[serialize_input(
                    metadata, prompt_text, options, self.flags)]

        replay = evaluate_router(LabelLookupRouter(), world.records, world)
        from taskrouter.baselines import upper_bound_accuracy

        assert replay["micro"] == pytest.approx(
            upper_bound_accuracy(
                [r for r in world.records if r.prompt_variant_id == "q1-o0"],
                "micro", world.model_pool,
            )
        )

    def test_matches_independent_replay_script(self, small_keyword_world):
        world = small_keyword_world
        rng = np.random.default_rng(3)
        router = RouterModel(
            vocabulary=tuple(sorted(world.model_pool)),
            featurizer=SMALL,
            flags=SerializationFlags(True, False),
            seed=0,
            weights=rng.normal(size=(len(world.model_pool), SMALL.hash_dim)),
            bias=np.zeros(len(world.model_pool)),
        )
        replay = evaluate_router(router, world.records, world)

        # independent replay: walk raw records, re-deriving prompts inline
        from taskrouter.prompts import (
            prompt_variants, render, rendered_options, valid_variant_ids,
        )
        outcomes = {
            (r.dataset_id, r.sample_id, r.prompt_variant_id, r.model_id): r.correct
            for r in world.records
        }
        for ds_id, manifest in world.datasets.items():
            config = world.prompt_configs[ds_id]
            per_variant = {}
            for v in prompt_variants(config):
                if v.variant_id not in valid_variant_ids(config):
                    continue
                hits = []
                for s in manifest.samples:
                    choice = router.route(
                        world.metadata[s.sample_id],
                        render(v.question, s, config),
                        rendered_options(s, config, v),
                    )
                    hits.append(outcomes[(ds_id, s.sample_id, v.variant_id, choice)])
                per_variant[v.variant_id] = sum(hits) / len(hits)
            expected = sum(per_variant.values()) / len(per_variant)
            assert replay[ds_id] == pytest.approx(expected)

    def test_missing_outcome_is_coverage_error(self):
        world = make_micro_world(n_samples=2)
        router = constant_router("alpha", world.model_pool)
        partial = [r for r in world.records if r.model_id != "alpha"]
        with pytest.raises(CoverageError):
            evaluate_router(router, partial, world)

    def test_replay_never_exceeds_upper_bound(self, small_keyword_world):
        from taskrouter.baselines import upper_bound_accuracy

        world = small_keyword_world
        rng = np.random.default_rng(17)
        for trial in range(3):
            router = RouterModel(
                vocabulary=tuple(sorted(world.model_pool)),
                featurizer=SMALL,
                flags=SerializationFlags(True, True),
                seed=trial,
                weights=rng.normal(size=(len(world.model_pool), SMALL.hash_dim)),
                bias=rng.normal(size=len(world.model_pool)),
            )
            replay = evaluate_router(router, world.records, world)
            for ds, acc in replay.items():
                from taskrouter.routerdata import filter_valid_prompts

                valid = filter_valid_prompts(world.records, world.prompt_configs)
                ub = upper_bound_accuracy(
                    [r for r in valid if r.dataset_id == ds], ds, world.model_pool
                )
                assert acc <= ub + 1e-12
