"""pairnn command line: generate, word2vec, train, eval, index, then retrieve, replay or serve.

Every subcommand takes explicit file paths, draws all randomness from
``--seed`` and writes one RunManifest JSON next to its primary output.
Settings resolve as: command-line flags, then ``--config`` JSON file,
then built-in defaults. Exit status: 0 success, 1 validation or runtime
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import signal
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence


from . import __version__
from . import plotting
from .catalog import PLANTED, SyntheticConfig, generate_synthetic, load_catalog, load_events, load_products, time_split
from .corpus import Word2VecConfig, WordVectors, train_word2vec
from .metrics import EvalSet, accuracy, average_loss, replay, table1, write_records
from .retrieval import STRATEGIES, EmbeddingIndex, RetrievalRequest, Retriever, build_index, word2vec_eval_set
from .server import QueryServer
from .towers import ModelCheckpoint, PairNN
from .training import TrainConfig, TrainingDivergedError, build_triples, score_triples, split_by_user, train

logger = logging.getLogger("pairnn")

MODALITY_ROWS = {"text": "Text only", "image": "Image only", "both": "Text + Image"}


class CliError(Exception):
    """Validation or runtime failure reported with exit status 1."""


# -- option table ------------------------------------------------------------------


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable
    default: Any
    help: str
    check: Callable[[Any], str | None] | None = None
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def at_least(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def unit_interval(v):
    return None if 0 <= v <= 1 else "must lie in [0, 1]"


def open_unit(v):
    return None if 0 < v <= 1 else "must lie in (0, 1]"


def optional_float(text):
    return None if text in (None, "", "none") else float(text)


COMMON = [
    Option("seed", int, 0, "seed for all randomness", at_least(0)),
    Option("workers", int, 1, "worker threads (1 keeps results bit-deterministic)", at_least(1)),
]

SYNTH = [
    Option("preset", str, "default", "base generator settings", choices=("default", "planted")),
    Option("n_users", int, None, "number of users", at_least(1)),
    Option("n_products", int, None, "number of products", at_least(1)),
    Option("n_topics", int, None, "number of latent topics", at_least(1)),
    Option("vocab_size", int, None, "number of distinct words", at_least(2)),
    Option("text_signal", float, None, "share of title/description words drawn from the product's topic", unit_interval),
    Option("image_signal", float, None, "scale of the topic centroid inside image features", unit_interval),
    Option("keyword_signal", float, None, "share of user keywords drawn from the user's topic", unit_interval),
    Option("p_hi", float, None, "message probability on a topic match", unit_interval),
    Option("p_lo", float, None, "message probability on a mismatch", unit_interval),
    Option("geo_spread_km", float, None, "std-dev of locations around a city centre", at_least(0)),
    Option("impressions_per_user", int, None, "impressions drawn per user", at_least(0)),
]

W2V = [
    Option("dim", int, Word2VecConfig.dim, "vector dimension", at_least(1)),
    Option("window", int, Word2VecConfig.window, "max context distance", at_least(1)),
    Option("negatives", int, Word2VecConfig.negatives, "noise words per pair", at_least(1)),
    Option("w2v_epochs", int, Word2VecConfig.epochs, "passes over the corpus", at_least(1)),
    Option("min_count", int, Word2VecConfig.min_count, "minimum token frequency", at_least(1)),
    Option("w2v_learning_rate", float, Word2VecConfig.learning_rate, "initial SGD step", at_least(0)),
]

SPLIT = [
    Option("train_fraction", float, 0.8, "events before this time quantile train; the rest are replayed", open_unit),
    Option("val_fraction", float, TrainConfig.val_fraction, "share of users (by id hash) held out for offline metrics", unit_interval),
    Option("negatives_per_positive", int, TrainConfig.negatives_per_positive, "negatives sampled per positive", at_least(1)),
]

TRAIN = [
    Option("epochs", int, TrainConfig.epochs, "training epochs", at_least(0)),
    Option("learning_rate", float, TrainConfig.learning_rate, "optimizer step size", at_least(0)),
    Option("batch_size", int, TrainConfig.batch_size, "triples per minibatch", at_least(1)),
    Option("margin", float, TrainConfig.margin, "hinge margin", at_least(0)),
    Option("optimizer", str, TrainConfig.optimizer, "optimizer", choices=("adam", "sgd")),
]

MODALITY = [Option("modality", str, TrainConfig.modality, "product tower branches", choices=("text", "image", "both"))]

RETRIEVE = [
    Option("M", int, 500, "recency window size", at_least(1)),
    Option("N", int, 50, "results per query", at_least(1)),
]


# -- commands ------------------------------------------------------------------------


@dataclass
class Command:
    name: str
    help: str
    options: list[Option]
    inputs: dict[str, bool]  # path flag -> required
    outputs: dict[str, str]  # path flag -> help
    run: Callable


def _add(parser: argparse.ArgumentParser, cmd: Command) -> None:
    for flag, required in cmd.inputs.items():
        parser.add_argument(f"--{flag}", required=required, type=Path, metavar="PATH", help=f"input {flag} file")
    for flag, text in cmd.outputs.items():
        parser.add_argument(f"--{flag}", required=True, type=Path, metavar="PATH", help=text)
    parser.add_argument("--config", type=Path, metavar="JSON", help="settings file; flags override it")
    parser.add_argument("--manifest", type=Path, metavar="PATH", help="run manifest path (default: next to the output)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    for o in cmd.options:
        kw = {"dest": o.name, "default": argparse.SUPPRESS, "help": f"{o.help} (default: {o.default})"}
        kw["type"] = o.type
        if o.choices:
            kw["choices"] = o.choices
        parser.add_argument(o.flag, **kw)


def _coerce(o: Option, value):
    if value is None:
        return None
    if o.type is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise CliError(f"{o.flag}: expected an integer, got {value!r}")
    if o.type is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise CliError(f"{o.flag}: expected a number, got {value!r}")
    if o.type is str and not isinstance(value, str):
        raise CliError(f"{o.flag}: expected a string, got {value!r}")
    return o.type(value)


def resolve_config(cmd: Command, args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the --config file, overlaid by explicit flags."""
    cfg = {o.name: o.default for o in cmd.options}
    by_name = {o.name: o for o in cmd.options}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"--config: file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"--config: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise CliError("--config: expected a JSON object")
        for key, value in data.items():
            name = key.replace("-", "_")
            if name not in by_name:
                raise CliError(f"--config: unknown setting {key!r} for {cmd.name}")
            cfg[name] = _coerce(by_name[name], value)
    for o in cmd.options:
        if hasattr(args, o.name):
            cfg[o.name] = getattr(args, o.name)
    for o in cmd.options:
        v = cfg[o.name]
        if v is None:
            continue
        if o.choices and v not in o.choices:
            raise CliError(f"{o.flag}: must be one of {', '.join(o.choices)}, got {v!r}")
        if o.check is not None and (msg := o.check(v)):
            raise CliError(f"{o.flag}: {msg}, got {v!r}")
    return cfg


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


class Run:
    """Context of one invocation: resolved settings, inputs, outputs, manifest."""

    def __init__(self, cmd: Command, args: argparse.Namespace, cfg: dict):
        self.cmd, self.args, self.cfg = cmd, args, cfg
        self.started = time.perf_counter()
        self.timings: list[float] = []  # per-epoch seconds, kept out of the deterministic artifacts
        self.outputs: list[Path] = []
        self.inputs: dict[str, dict] = {}
        for flag in cmd.inputs:
            path = getattr(args, flag)
            if path is None:
                continue
            if not path.is_file():
                raise CliError(f"--{flag}: file not found: {path}")
            self.inputs[flag] = {"path": str(path), "sha256": _sha256(path)}

    def path(self, flag: str) -> Path | None:
        return getattr(self.args, flag)

    def output(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def manifest_path(self) -> Path:
        if self.args.manifest is not None:
            return self.args.manifest
        if not self.cmd.outputs:
            return Path(f"pairnn-{self.cmd.name}.manifest.json")
        primary = getattr(self.args, next(iter(self.cmd.outputs)))
        if self.cmd.name == "gen-data":
            return primary / "manifest.json"
        return _sidecar(primary, ".manifest.json")

    def write_manifest(self, extra: dict | None = None) -> Path:
        manifest = {
            "command": self.cmd.name,
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": [str(p) for p in self.outputs],
            "seed": self.cfg["seed"],
            "version": __version__,
            "duration_s": round(time.perf_counter() - self.started, 3),
            **({"epoch_seconds": self.timings} if self.timings else {}),
            **(extra or {}),
        }
        path = self.manifest_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- shared loading helpers ---------------------------------------------------------------


def _catalog(run: Run):
    return load_catalog(run.path("users"), run.path("products"))


def _vectors(run: Run) -> WordVectors:
    return WordVectors.load(run.path("vectors"))


def _model(run: Run, vectors: WordVectors) -> tuple[PairNN, ModelCheckpoint]:
    ck = ModelCheckpoint.load(run.path("checkpoint"))
    return ck.to_model(vectors.vocab), ck


def _train_config(cfg: dict, modality: str | None = None) -> TrainConfig:
    return TrainConfig(
        margin=cfg["margin"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        optimizer=cfg["optimizer"],
        negatives_per_positive=cfg["negatives_per_positive"],
        seed=cfg["seed"],
        modality=modality or cfg["modality"],
        val_fraction=cfg["val_fraction"],
    )


def _offline_triples(run: Run, catalog, events):
    """Triples from the training window, split by user hash into (train, val)."""
    if run.cfg["train_fraction"] < 1:
        cutoff, before, _ = time_split(events, run.cfg["train_fraction"])
    else:
        cutoff, before = None, events
    triples = build_triples(before, run.cfg["negatives_per_positive"], run.cfg["seed"], catalog)
    if not triples:
        raise CliError("no training triples: the event log has no message with an impressed, unmessaged alternative")
    train_set, val_set = split_by_user(triples, run.cfg["val_fraction"])
    return train_set, val_set, cutoff


def _metric_records(name: str, s: EvalSet, margin: float) -> list[tuple[str, str, float]]:
    return [(name, "accuracy", accuracy(s)), (name, "average_loss", average_loss(s, margin)), (name, "tuples", float(len(s)))]


# -- handlers -------------------------------------------------------------------------------


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    base = PLANTED if cfg["preset"] == "planted" else SyntheticConfig()
    fields = {o.name: cfg[o.name] for o in SYNTH if o.name != "preset" and cfg[o.name] is not None}
    try:
        synth = replace(base, seed=cfg["seed"], **fields)
    except ValueError as exc:
        msg = str(exc)
        named = [o.flag for o in SYNTH if o.name in msg]
        raise CliError(f"{'/'.join(named) or '--config'}: {msg}") from None
    out = run.path("out")
    data = generate_synthetic(synth)
    data.save(out)
    for name in ("users.jsonl", "products.jsonl", "events.jsonl", "topics.json"):
        run.output(out / name)
    run.cfg = {**cfg, "synthetic": asdict(synth)}
    n_msg = sum(e.type == "message" for e in data.events)
    print(f"wrote {len(data.catalog.users)} users, {len(data.catalog.products)} products, "
          f"{len(data.events) - n_msg} impressions, {n_msg} messages to {out}")


def cmd_train_word2vec(run: Run) -> None:
    cfg = run.cfg
    catalog = load_products(run.path("products"))
    corpus = [p.title + " " + p.description for p in catalog.products.values()]
    w2v = Word2VecConfig(
        dim=cfg["dim"], window=cfg["window"], negatives=cfg["negatives"], epochs=cfg["w2v_epochs"],
        seed=cfg["seed"], min_count=cfg["min_count"], learning_rate=cfg["w2v_learning_rate"],
    )
    try:
        vectors = train_word2vec(corpus, w2v)
    except ValueError as exc:
        raise CliError(f"--products: {exc}") from None
    vectors.save(run.output(run.path("out")))
    print(f"wrote {len(vectors.vocab) - 1} word vectors of dimension {vectors.dim}; final loss {vectors.losses[-1]:.4f}"
          if vectors.losses else f"wrote {len(vectors.vocab) - 1} word vectors")


def cmd_train(run: Run) -> None:
    catalog = _catalog(run)
    events = load_events(run.path("events"))
    vectors = _vectors(run)
    train_set, val_set, cutoff = _offline_triples(run, catalog, events)
    out = run.path("out")
    metrics_path = run.output(_sidecar(out, ".metrics.jsonl"))
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_epoch(m):
            fh.write(m.to_json() + "\n")
            fh.flush()
            run.timings.append(round(m.seconds, 3))
            acc = "n/a" if m.val_accuracy is None else f"{m.val_accuracy:.4f}"
            print(f"epoch {m.epoch}: train loss {m.train_loss:.4f}, held-out accuracy {acc}", flush=True)

        try:
            result = train(catalog, train_set, vectors, _train_config(run.cfg), val_triples=val_set, on_epoch=on_epoch)
        except TrainingDivergedError as exc:
            exc.checkpoint.save(run.output(out))
            raise CliError(f"{exc}; last good checkpoint saved to {out}") from None
    result.checkpoint.save(run.output(out))
    if result.history:
        plotting.training_curves({run.cfg["modality"]: result.history}, run.output(_sidecar(out, ".curves.png")))
    run.cfg = {**run.cfg, "time_cutoff": cutoff}
    print(f"wrote checkpoint {out} ({result.train_triples} train / {result.val_triples} held-out triples)")


def cmd_eval(run: Run) -> None:
    catalog = _catalog(run)
    vectors = _vectors(run)
    model, ck = _model(run, vectors)
    _, val_set, _ = _offline_triples(run, catalog, load_events(run.path("events")))
    if not val_set:
        raise CliError("--val-fraction: the held-out user split is empty")
    margin = ck.train_config.get("margin", 1.0)
    s = score_triples(model, catalog, val_set)
    b = word2vec_eval_set(vectors, catalog, val_set)
    records = _metric_records("pairnn", s, margin) + _metric_records("word2vec", b, margin)
    out = run.output(run.path("out"))
    write_records(out, records)
    plotting.score_margins({"pairnn": s.r_pos - s.r_neg, "word2vec": b.r_pos - b.r_neg}, run.output(_sidecar(out, ".margins.png")), margin)
    row = MODALITY_ROWS[ck.config.modality]
    print(table1({row: (accuracy(s), average_loss(s, margin))}, baseline=(accuracy(b), average_loss(b, margin))))


def cmd_index(run: Run) -> None:
    vectors = _vectors(run)
    model, ck = _model(run, vectors)
    catalog = load_products(run.path("products"))
    index = build_index(catalog, model, ck)
    index.save(run.output(run.path("out")))
    print(f"indexed {len(index)} products (dim {index.dim}, max norm error {index.norm_error():.2e})")


def _retriever(run: Run, catalog, need_model: bool) -> Retriever:
    vectors = _vectors(run) if run.path("vectors") else None
    index = model = None
    if run.path("checkpoint") is not None:
        if vectors is None:
            raise CliError("--vectors: required to load a checkpoint (it carries the vocabulary)")
        model, ck = _model(run, vectors)
        if run.path("index") is not None:
            index = EmbeddingIndex.load(run.path("index"))
            if index.checkpoint_fingerprint and index.checkpoint_fingerprint != ck.fingerprint():
                raise CliError("--index: built from a different checkpoint than --checkpoint")
        else:
            index = build_index(catalog, model, ck)
    elif need_model:
        raise CliError("--checkpoint: required for the pairnn strategy")
    return Retriever(catalog, index, model, vectors)


def cmd_retrieve(run: Run) -> None:
    catalog = _catalog(run)
    cfg = run.cfg
    if cfg["user_id"] not in catalog.users:
        raise CliError(f"--user-id: unknown user id {cfg['user_id']!r}")
    r = _retriever(run, catalog, cfg["strategy"] == "pairnn")
    if cfg["strategy"] == "word2vec" and not r.available("word2vec"):
        raise CliError("--vectors: required for the word2vec strategy")
    if cfg["N"] > cfg["M"]:
        raise CliError(f"--N: must not exceed --M ({cfg['M']}), got {cfg['N']}")
    hits = r.retrieve(RetrievalRequest(cfg["user_id"], cfg["M"], cfg["N"], cfg["strategy"], before=cfg["before"]))
    text = "rank\tproduct_id\tscore\n" + "".join(f"{k}\t{h.product_id}\t{h.score:.6f}\n" for k, h in enumerate(hits, 1))
    run.output(run.path("out")).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_replay(run: Run) -> None:
    cfg = run.cfg
    catalog = _catalog(run)
    events = load_events(run.path("events"))
    strategies = [s.strip() for s in cfg["strategies"].split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGIES:
            raise CliError(f"--strategies: unknown strategy {s!r}")
    if cfg["N"] > cfg["M"]:
        raise CliError(f"--N: must not exceed --M ({cfg['M']}), got {cfg['N']}")
    r = _retriever(run, catalog, "pairnn" in strategies)
    fns = {s: r.strategy_fn(s) for s in strategies}
    if fns.get("word2vec", 0) is None:
        raise CliError("--vectors: required for the word2vec strategy")
    cutoff, before, held_out = time_split(events, cfg["train_fraction"])
    report = replay(held_out, fns, cfg["M"], cfg["N"], training_events=before, workers=cfg["workers"])
    out = run.output(run.path("out"))
    write_records(out, report.records())
    plotting.replay_bars({s: report.recall(s) for s in strategies}, run.output(_sidecar(out, ".replay.png")), cfg["N"])
    run.cfg = {**cfg, "time_cutoff": cutoff}
    print(report.table())


def cmd_serve(run: Run) -> None:
    catalog = _catalog(run)
    r = _retriever(run, catalog, need_model=False)
    server = QueryServer(r, run.cfg["host"], run.cfg["port"])
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)

    def stop(signum, frame):
        raise KeyboardInterrupt

    previous = signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        signal.signal(signal.SIGTERM, previous)
        server.server_close()
    run.cfg = {**run.cfg, "bound_port": port}


def cmd_ablation(run: Run) -> None:
    cfg = run.cfg
    modalities = [m.strip() for m in cfg["modalities"].split(",") if m.strip()]
    for m in modalities:
        if m not in MODALITY_ROWS:
            raise CliError(f"--modalities: unknown modality {m!r}")
    catalog = _catalog(run)
    vectors = _vectors(run)
    train_set, val_set, _ = _offline_triples(run, catalog, load_events(run.path("events")))
    if not val_set:
        raise CliError("--val-fraction: the held-out user split is empty")
    out = run.path("out")
    rows, histories, records = {}, {}, []
    for m in modalities:
        print(f"training {MODALITY_ROWS[m]} ...", flush=True)
        result = train(catalog, train_set, vectors, _train_config(cfg, m), val_triples=val_set)
        result.checkpoint.save(run.output(_sidecar(out, f".{m}.ckpt")))
        s = score_triples(result.model, catalog, val_set)
        rows[MODALITY_ROWS[m]] = (accuracy(s), average_loss(s, cfg["margin"]))
        histories[MODALITY_ROWS[m]] = result.history
        records += _metric_records(m, s, cfg["margin"])
    b = word2vec_eval_set(vectors, catalog, val_set)
    baseline = (accuracy(b), average_loss(b, cfg["margin"]))
    records += _metric_records("word2vec", b, cfg["margin"])
    run.output(out)
    write_records(out, records)
    plotting.ablation_bars(rows, run.output(_sidecar(out, ".ablation.png")), baseline)
    if any(histories.values()):
        plotting.training_curves(histories, run.output(_sidecar(out, ".curves.png")))
    print(table1(rows, baseline=baseline))


COMMANDS = [
    Command("gen-data", "generate a synthetic marketplace", COMMON + SYNTH, {}, {"out": "output directory"}, cmd_gen_data),
    Command("train-word2vec", "train skip-gram word vectors on product text", COMMON + W2V,
            {"products": True}, {"out": "word vectors file"}, cmd_train_word2vec),
    Command("train", "train the two towers", COMMON + MODALITY + TRAIN + SPLIT,
            {"users": True, "products": True, "events": True, "vectors": True}, {"out": "checkpoint file"}, cmd_train),
    Command("eval", "offline accuracy / average loss on held-out users", COMMON + SPLIT,
            {"users": True, "products": True, "events": True, "vectors": True, "checkpoint": True},
            {"out": "report file (TSV)"}, cmd_eval),
    Command("index", "embed every product into an index snapshot", COMMON,
            {"products": True, "vectors": True, "checkpoint": True}, {"out": "index file"}, cmd_index),
    Command("retrieve", "top-N products for one user", COMMON + RETRIEVE + [
                Option("user_id", str, None, "user to retrieve for"),
                Option("strategy", str, "pairnn", "retrieval strategy", choices=STRATEGIES),
                Option("before", optional_float, None, "only products created before this timestamp"),
            ],
            {"users": True, "products": True, "vectors": False, "checkpoint": False, "index": False},
            {"out": "results file (TSV)"}, cmd_retrieve),
    Command("replay", "recall@N of each strategy on held-out messages", COMMON + RETRIEVE + [
                Option("strategies", str, ",".join(STRATEGIES), "comma-separated strategies"),
                Option("train_fraction", float, 0.8, "events after this time quantile are replayed", open_unit),
            ],
            {"users": True, "products": True, "events": True, "vectors": False, "checkpoint": False, "index": False},
            {"out": "report file (TSV)"}, cmd_replay),
    Command("serve", "JSON-lines query endpoint", COMMON + [
                Option("host", str, "127.0.0.1", "bind address"),
                Option("port", int, 7878, "TCP port (0 picks a free one)", at_least(0)),
            ],
            {"users": True, "products": True, "vectors": False, "checkpoint": False, "index": False},
            {}, cmd_serve),
    Command("ablation", "train text / image / both and report them side by side", COMMON + TRAIN + SPLIT + [
                Option("modalities", str, "text,image,both", "comma-separated modalities"),
            ],
            {"users": True, "products": True, "events": True, "vectors": True}, {"out": "report file (TSV)"}, cmd_ablation),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pairnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for cmd in COMMANDS:
        _add(sub.add_parser(cmd.name, help=cmd.help, description=cmd.help), cmd)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    cmd = next(c for c in COMMANDS if c.name == args.command)
    try:
        cfg = resolve_config(cmd, args)
        if cmd.name == "retrieve" and not cfg["user_id"]:
            raise CliError("--user-id: required")
        run = Run(cmd, args, cfg)
        cmd.run(run)
        run.write_manifest()
    except CliError as exc:
        print(f"pairnn {cmd.name}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:  # data validation, bad files
        print(f"pairnn {cmd.name}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
