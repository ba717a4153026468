"""Acceptance criteria: one test, and one PASS/FAIL line, per criterion.

The heavy criteria drive the real ``pairnn`` command line on the default
synthetic marketplace for five seeds; trained artifacts are shared
between criteria through module-scoped fixtures. The summary block is
printed at the end of the pytest run.
"""

import math
import re
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pairnn import autodiff as ad
from pairnn.catalog import PLANTED, ProductRecord, UserProfile, generate_synthetic, load_catalog, load_events, time_split
from pairnn.cli import main
from pairnn.corpus import Word2VecConfig, WordVectors, train_word2vec
from pairnn.metrics import EvalSet, accuracy, average_loss, read_records
from pairnn.retrieval import EmbeddingIndex, RetrievalRequest, Retriever, build_index, candidate_set, retrieve
from pairnn.server import Client
from pairnn.towers import ModelCheckpoint, PairNN, TowerConfig
from pairnn.training import TrainConfig, build_triples, split_by_user, train

from oracles import (
    PRIMITIVES,
    oracle_accuracy,
    oracle_candidates,
    oracle_cosine,
    oracle_loss,
    oracle_mean,
    oracle_rank,
    random_primitive_losses,
    random_world,
)

SEEDS = range(5)


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


def data_flags(d: Path) -> list:
    return ["--users", d / "data" / "users.jsonl", "--products", d / "data" / "products.jsonl",
            "--events", d / "data" / "events.jsonl", "--vectors", d / "vec.bin"]


def run_ablation(d: Path, seed: int, gen_extra=(), modalities="text,image,both") -> dict:
    """gen-data -> train-word2vec -> ablation; returns {(modality, metric): value}."""
    cli("gen-data", "--out", d / "data", "--seed", seed, *gen_extra)
    cli("train-word2vec", "--products", d / "data" / "products.jsonl", "--out", d / "vec.bin", "--seed", seed)
    cli("ablation", *data_flags(d), "--seed", seed, "--modalities", modalities, "--out", d / "ablation.tsv")
    return {(s, m): v for s, m, v in read_records(d / "ablation.tsv")}


@pytest.fixture(scope="module")
def seed_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in SEEDS:
        d = root / f"seed{seed}"
        ablation = run_ablation(d, seed)
        cli("replay", *data_flags(d), "--checkpoint", d / "ablation.both.ckpt", "--seed", seed, "--out", d / "replay.tsv")
        replay = {(s, m): v for s, m, v in read_records(d / "replay.tsv")}
        runs[seed] = (d, ablation, replay)
    return runs


# -- gradients, metrics, retrieval oracles ---------------------------------------------------


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = {}
    for name in PRIMITIVES:
        for seed in range(10):
            fn, params = random_primitive_losses(np.random.default_rng(seed))[name]
            worst[name] = max(worst.get(name, 0.0), ad.grad_check_report(fn, params, step=1e-3).max_rel_error)
    vectors = train_word2vec(["red bike fast", "blue sofa soft", "red sofa", "bike lock"], Word2VecConfig(dim=16, epochs=1))
    model = PairNN.from_vectors(TowerConfig(word_dim=16, init_scale=0.25), vectors)
    rng = np.random.default_rng(0)
    ui = model.encode_users([UserProfile("u", ["red", "bike", "sofa"], list(rng.random(8)), (0.0, 0.0), 10.0)])
    pi = model.encode_products([ProductRecord("p", "red bike fast soft", "blue lock", list(rng.normal(size=64)), (0.0, 0.0), 0.0)])
    target = ad.Tensor(np.linspace(-1, 1, 50)[None, :])
    for side, forward in (("user", lambda: model.user_forward(ui)), ("product", lambda: model.product_forward(pi))):
        params = [p for name, p in model.params.items() if name.startswith(side)]
        fn = lambda: ad.sum(ad.dot(forward(), target))
        worst[f"{side} tower"] = ad.grad_check_report(fn, params, step=1e-3).max_rel_error
    seconds = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and seconds < 60
    name, err = max(worst.items(), key=lambda kv: kv[1])
    assert verdict("gradient correctness", ok, f"max rel error {err:.2e} ({name}) < 1e-4 over {len(worst)} checks, {seconds:.1f}s < 60s")


def test_metric_oracles(verdict):
    tuples = [tuple(x) for x in np.random.default_rng(11).uniform(-1, 1, (10_000, 2))]
    s = EvalSet.from_pairs(tuples)
    d_acc = abs(accuracy(s) - oracle_accuracy(tuples))
    d_loss = abs(average_loss(s, 1.0) - oracle_loss(tuples, 1.0))
    ex = EvalSet.from_pairs([(0.9, 0.1), (0.2, 0.3)])
    worked = (accuracy(ex), average_loss(ex, 1.0))
    ok = d_acc < 1e-6 and d_loss < 1e-6 and worked == (0.5, 0.65)
    assert verdict("metric oracles", ok, f"|d accuracy| {d_acc:.1e}, |d loss| {d_loss:.1e} on 10k tuples; worked example {worked}")


def test_retrieval_oracles(verdict):
    mismatches, checks = [], 0
    for seed in range(100):
        rng, catalog, index, vectors = random_world(seed, n_products=1000)
        emb_of = {pid: index._emb64[index.position[pid]] for pid in index.ids}
        w2v = Retriever(catalog, vectors=vectors)
        for user in catalog.users.values():
            M = int(rng.integers(1, 400))
            N = int(rng.integers(1, M + 1))
            cands = oracle_candidates(catalog, user, M)
            u = rng.normal(size=index.dim)
            u /= np.linalg.norm(u)
            kw = oracle_mean(user.keywords, vectors)
            got = {
                "candidate_set": candidate_set(index, user, M),
                "pairnn": [h.product_id for h in retrieve(index, RetrievalRequest(user.user_id, M, N, "pairnn", tuple(u)), catalog, None)],
                "word2vec": [h.product_id for h in w2v.retrieve(RetrievalRequest(user.user_id, M, N, "word2vec"))],
            }
            want = {
                "candidate_set": cands,
                "pairnn": oracle_rank(cands, lambda pid: math.fsum(emb_of[pid] * u), N),
                "word2vec": oracle_rank(cands, lambda pid: oracle_cosine(kw, oracle_mean(catalog.products[pid].title.split(), vectors)), N),
            }
            for k in got:
                checks += 1
                if got[k] != want[k]:
                    mismatches.append((seed, k))
    ok = not mismatches
    assert verdict("retrieval oracles", ok, f"{checks - len(mismatches)}/{checks} exact matches over 100 trials x 1000 products"
                   + (f"; first mismatch {mismatches[0]}" if mismatches else ""))


# -- learning --------------------------------------------------------------------------------


class _Reached(Exception):
    pass


def test_learnability(verdict):
    start = time.perf_counter()
    data = generate_synthetic(PLANTED)
    _, before, _ = time_split(data.events)
    vectors = train_word2vec([p.title + " " + p.description for p in data.catalog.products.values()])
    train_set, val_set = split_by_user(build_triples(before, 14, 0, data.catalog))
    history = []

    def on_epoch(m):
        history.append(m)
        if m.val_accuracy >= 0.95:
            raise _Reached

    try:
        train(data.catalog, train_set, vectors, TrainConfig(epochs=20), val_triples=val_set, on_epoch=on_epoch)
    except _Reached:
        pass
    seconds = time.perf_counter() - start
    best = max(m.val_accuracy for m in history)
    ok = best >= 0.95 and seconds < 600
    assert verdict("learnability", ok, f"planted held-out accuracy {best:.4f} >= 0.95 after {len(history)} epoch(s), {seconds:.0f}s < 600s")


def test_table1_ordering(seed_runs, verdict):
    wins, lines = 0, []
    for seed, (_, a, _) in seed_runs.items():
        acc = {m: a[m, "accuracy"] for m in ("text", "image", "both")}
        loss = {m: a[m, "average_loss"] for m in ("text", "image", "both")}
        win = acc["both"] > max(acc["text"], acc["image"]) and loss["both"] < min(loss["text"], loss["image"])
        wins += win
        lines.append(f"s{seed}:{acc['both']:.3f}/{acc['text']:.3f}/{acc['image']:.3f}{'' if win else '(x)'}")
    assert verdict("Table 1 ordering", wins >= 4, f"{wins}/5 seeds with both > text, image on accuracy and reverse on loss "
                   f"[accuracy both/text/image {' '.join(lines)}]")


def test_table2_ordering(seed_runs, verdict):
    wins, lines = 0, []
    for seed, (_, _, r) in seed_runs.items():
        rec = {s: r[s, "recall@50"] for s in ("pairnn", "word2vec", "time")}
        win = rec["pairnn"] > rec["word2vec"] > rec["time"]
        wins += win
        lines.append(f"s{seed}:{rec['pairnn']:.3f}/{rec['word2vec']:.3f}/{rec['time']:.3f}{'' if win else '(x)'}")

    # time-based results must not depend on which checkpoint backs the retriever
    d, _, _ = seed_runs[0]
    catalog = load_catalog(d / "data" / "users.jsonl", d / "data" / "products.jsonl")
    vectors = WordVectors.load(d / "vec.bin")
    _, _, held_out = time_split(load_events(d / "data" / "events.jsonl"))
    lists = []
    for m in ("both", "text"):
        ck = ModelCheckpoint.load(d / f"ablation.{m}.ckpt")
        model = ck.to_model(vectors.vocab)
        fn = Retriever(catalog, build_index(catalog, model, ck), model, vectors).strategy_fn("time")
        lists.append([fn(e.user_id, e.timestamp, 500, 50) for e in held_out if e.type == "message"])
    identical = lists[0] == lists[1]
    ok = wins >= 4 and identical
    assert verdict("Table 2 ordering", ok, f"{wins}/5 seeds with recall@50 pairnn > word2vec > time "
                   f"[{' '.join(lines)}]; time-based identical across checkpoints: {identical}")


def test_chance_controls(tmp_path_factory, verdict):
    root = tmp_path_factory.mktemp("chance")
    text = run_ablation(root / "text0", 0, ["--text-signal", "0"], "text")["text", "accuracy"]
    image = run_ablation(root / "image0", 0, ["--image-signal", "0"], "image")["image", "accuracy"]
    ok = abs(text - 0.5) <= 0.05 and abs(image - 0.5) <= 0.05
    assert verdict("chance-level controls", ok, f"text-only {text:.4f} at text signal 0, image-only {image:.4f} at image signal 0; both within 0.5 +- 0.05")


# -- artifacts and serving ------------------------------------------------------------------------


def _pipeline_once(d: Path) -> None:
    seed = ["--seed", 7]
    cli("gen-data", "--out", d / "data", "--n-users", 300, "--n-products", 1500, "--vocab-size", 300, *seed)
    cli("train-word2vec", "--products", d / "data" / "products.jsonl", "--out", d / "vec.bin", *seed)
    flags = data_flags(d)
    cli("train", *flags, "--out", d / "model.ckpt", "--epochs", 2, *seed)
    cli("eval", *flags, "--checkpoint", d / "model.ckpt", "--out", d / "eval.tsv", *seed)
    cli("index", "--products", d / "data" / "products.jsonl", "--vectors", d / "vec.bin", "--checkpoint", d / "model.ckpt", "--out", d / "index.bin", *seed)
    cli("retrieve", *flags[:4], "--vectors", d / "vec.bin", "--checkpoint", d / "model.ckpt", "--index", d / "index.bin",
        "--user-id", "u017", "--out", d / "retrieve.tsv", *seed)
    cli("replay", *flags, "--checkpoint", d / "model.ckpt", "--index", d / "index.bin", "--out", d / "replay.tsv", "--workers", 2, *seed)
    cli("ablation", *flags, "--epochs", 1, "--out", d / "ablation.tsv", *seed)


def test_determinism(tmp_path, capsys, verdict):
    for run in ("a", "b"):
        _pipeline_once(tmp_path / run)
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file() and "manifest" not in p.name)
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    kinds = {f.suffix for f in files}
    ok = not differ and {".bin", ".ckpt", ".tsv", ".jsonl", ".png"} <= kinds
    assert verdict("determinism", ok, f"{len(files) - len(differ)}/{len(files)} artifacts byte-identical across re-runs"
                   + (f"; differing: {', '.join(differ)}" if differ else ""))


def test_serving_budget(seed_runs, tmp_path, verdict):
    d, _, _ = seed_runs[0]
    ckpt = d / "ablation.both.ckpt"
    cli("index", "--products", d / "data" / "products.jsonl", "--vectors", d / "vec.bin", "--checkpoint", ckpt, "--out", d / "index.bin")
    catalog = load_catalog(d / "data" / "users.jsonl", d / "data" / "products.jsonl")
    users = sorted(catalog.users)
    queries = [users[(k * 7919) % len(users)] for k in range(10_000)]

    proc = subprocess.Popen(
        [sys.executable, "-m", "pairnn.cli", "serve", *map(str, data_flags(d)[:4]), "--vectors", str(d / "vec.bin"),
         "--checkpoint", str(ckpt), "--index", str(d / "index.bin"), "--port", "0", "--manifest", str(tmp_path / "serve.json")],
        stdout=subprocess.PIPE, text=True,
    )
    latencies, replies = [], []
    try:
        host, port = re.match(r"listening on (\S+):(\d+)", proc.stdout.readline()).groups()
        with Client(host, int(port)) as c:
            for uid in queries:
                t0 = time.perf_counter()
                replies.append(c.query(user_id=uid, M=500, N=50))
                latencies.append((time.perf_counter() - t0) * 1000)
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=30)
    finally:
        if proc.poll() is None:
            proc.kill()

    vectors = WordVectors.load(d / "vec.bin")
    model = ModelCheckpoint.load(ckpt).to_model(vectors.vocab)
    lib = Retriever(catalog, EmbeddingIndex.load(d / "index.bin"), model, vectors)
    expected = {uid: [[h.product_id, h.score] for h in lib.retrieve(RetrievalRequest(uid, 500, 50))] for uid in set(queries)}
    same = sum(r.get("ok") and r["results"] == expected[uid] for uid, r in zip(queries, replies))
    p99 = float(np.percentile(latencies, 99))
    ok = p99 < 50 and same == len(queries)
    assert verdict("serving budget", ok, f"p99 {p99:.2f} ms < 50 ms over {len(queries)} queries (median {np.median(latencies):.2f} ms); "
                   f"{same}/{len(queries)} endpoint results identical to in-process")
