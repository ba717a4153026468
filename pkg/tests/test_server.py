import json
import threading

import numpy as np
import pytest

from pairnn.catalog import Catalog, ProductRecord, UserProfile
from pairnn.corpus import Word2VecConfig, train_word2vec
from pairnn.retrieval import RetrievalRequest, Retriever, build_index
from pairnn.server import Client, QueryServer, handle_line
from pairnn.towers import PairNN, TowerConfig


@pytest.fixture(scope="module")
def retriever():
    rng = np.random.default_rng(4)
    users = [UserProfile(f"u{k}", ["red", "bike"], list(rng.random(3)), (0.0, 0.0), 40.0) for k in range(4)]
    products = [
        ProductRecord(f"p{k:03d}", str(rng.choice(["red bike", "sofa", "lamp shade"])), "", list(rng.normal(size=4)), (0.0, float(rng.uniform(-0.2, 0.2))), float(k))
        for k in range(200)
    ]
    cat = Catalog.from_records(users, products)
    vectors = train_word2vec([p.title for p in products], Word2VecConfig(dim=8, epochs=1))
    model = PairNN.from_vectors(TowerConfig(image_dim=4, demo_dim=3, conv_channels=4), vectors)
    return Retriever(cat, build_index(cat, model), model, vectors)


@pytest.fixture
def server(retriever):
    srv = QueryServer(retriever)
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


def as_lists(hits):
    return [[h.product_id, h.score] for h in hits]


def test_endpoint_matches_library(server, retriever):
    with Client(*server.address) as c:
        for strategy in ("pairnn", "word2vec", "time"):
            reply = c.query(user_id="u1", strategy=strategy, M=120, N=15)
            assert reply["ok"] and reply["latency_ms"] >= 0
            assert reply["results"] == as_lists(retriever.retrieve(RetrievalRequest("u1", 120, 15, strategy)))


def test_defaults_and_before(server, retriever):
    with Client(*server.address) as c:
        reply = c.query(user_id="u2", before=50)
    expected = retriever.retrieve(RetrievalRequest("u2", before=50.0))
    assert reply["results"] == as_lists(expected)
    assert all(int(pid[1:]) < 50 for pid, _ in reply["results"])


@pytest.mark.parametrize(
    "line, fragment",
    [
        (b'{"user_id": "u1", "N": 0}', "N must be"),
        (b"not json", "Expecting value"),
        (b'{"user_id": "nobody"}', "unknown user"),
        (b'{"user_id": "u1", "strategy": "magic"}', "unknown strategy"),
        (b'{"user_id": "u1", "colour": 1}', "unknown request field"),
        (b"[1, 2]", "JSON object"),
        (b'{"user_id": 7}', "user_id"),
    ],
)
def test_malformed_queries_get_errors_and_server_survives(server, line, fragment):
    with Client(*server.address) as c:
        reply = c.send_raw(line)
        assert reply["ok"] is False and fragment in reply["error"]
        assert c.query(user_id="u0", M=10, N=3)["ok"]


def test_handle_line_never_raises(retriever):
    assert handle_line(retriever, b"\xff\xfe")["ok"] is False
    assert handle_line(retriever, json.dumps({"user_id": "u0", "M": "many"}))["ok"] is False


def test_concurrent_clients(server, retriever):
    expected = {u: as_lists(retriever.retrieve(RetrievalRequest(u, 80, 9, "pairnn"))) for u in ("u0", "u1", "u2", "u3")}
    errors = []

    def run(user):
        with Client(*server.address) as c:
            for _ in range(20):
                if c.query(user_id=user, M=80, N=9)["results"] != expected[user]:
                    errors.append(user)

    threads = [threading.Thread(target=run, args=(u,)) for u in expected]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
