"""Wire protocol: client/server round trips, error propagation, and the
stdio server subprocess."""

import os
import sys
import threading

import numpy as np
import pytest

from taskrouter import BackendError
from taskrouter.core import aggregate_accuracy, save_world
from taskrouter.scoring import (
    GoldEmbeddingBackend,
    SeededLogprobBackend,
    evaluate,
    gold_index_by_ref,
)
from taskrouter.wire import SubprocessBackend, WireBackendClient, serve_backend

from conftest import make_micro_world


class _PipePair:
    """A served backend reachable over OS pipes from the same process."""

    def __init__(self, backend):
        c2s_read, c2s_write = os.pipe()
        s2c_read, s2c_write = os.pipe()
        self.server_in = os.fdopen(c2s_read, "r")
        self.client_out = os.fdopen(c2s_write, "w")
        self.client_in = os.fdopen(s2c_read, "r")
        self.server_out = os.fdopen(s2c_write, "w")
        self.thread = threading.Thread(
            target=serve_backend, args=(backend, self.server_in, self.server_out),
            daemon=True,
        )
        self.thread.start()
        self.client = WireBackendClient(self.client_in, self.client_out)

    def close(self):
        self.client.shutdown()
        self.thread.join(timeout=5)
        for fh in (self.client_out, self.client_in, self.server_in, self.server_out):
            try:
                fh.close()
            except OSError:
                pass


@pytest.fixture
def micro_world():
    return make_micro_world(n_samples=4, models=("only",), with_empty_question=False)


def test_embedding_round_trip(micro_world):
    manifest = micro_world.datasets["micro"]
    inner = GoldEmbeddingBackend(gold_index_by_ref([manifest]), dim=2, name="only")
    pair = _PipePair(inner)
    try:
        assert pair.client.info.name == "only"
        assert pair.client.info.family == "embedding"
        v = pair.client.embed_image("micro/s0")
        np.testing.assert_array_equal(v, inner.embed_image("micro/s0"))
        m = pair.client.embed_texts(["red", "blue"])
        np.testing.assert_array_equal(m, inner.embed_texts(["red", "blue"]))
    finally:
        pair.close()


def test_generative_round_trip():
    inner = SeededLogprobBackend(seed=9, name="gen")
    pair = _PipePair(inner)
    try:
        got = pair.client.option_token_logprobs("img", ["a", "b"])
        assert got == inner.option_token_logprobs("img", ["a", "b"])
    finally:
        pair.close()


def test_error_propagates_as_backend_error(micro_world):
    manifest = micro_world.datasets["micro"]
    inner = GoldEmbeddingBackend(gold_index_by_ref([manifest]), dim=2, name="only")
    pair = _PipePair(inner)
    try:
        with pytest.raises(BackendError):
            pair.client.embed_image("no/such/ref")
        # the channel survives an error and keeps serving
        assert pair.client.embed_image("micro/s1") is not None
    finally:
        pair.close()


def test_evaluate_through_wire_matches_in_process(micro_world):
    manifest = micro_world.datasets["micro"]
    config = micro_world.prompt_configs["micro"]
    inner = GoldEmbeddingBackend(gold_index_by_ref([manifest]), dim=2, name="only")
    direct = evaluate(inner, manifest, config)
    pair = _PipePair(inner)
    try:
        wired = evaluate(pair.client, manifest, config)
    finally:
        pair.close()
    assert wired.records == direct.records
    table = aggregate_accuracy(wired.records)
    assert table.marginal("only", "micro") == 1.0


def test_stdio_server_subprocess(tmp_path, micro_world):
    world_dir = tmp_path / "world"
    save_world(micro_world, world_dir)
    backend = SubprocessBackend([
        sys.executable, "-m", "taskrouter.wire",
        "--kind", "gold", "--family", "embedding",
        "--world", str(world_dir), "--dim", "2", "--name", "only",
    ])
    try:
        assert backend.info.name == "only"
        manifest = micro_world.datasets["micro"]
        run = evaluate(backend, manifest, micro_world.prompt_configs["micro"])
        assert all(r.correct for r in run.records)
    finally:
        backend.close()
