"""Command-line entry point.

Every option can also come from a JSON config file (``--config``) whose keys
are the option names with dashes or underscores; explicit flags win.  Each
command validates its paths before doing any work, writes JSON outputs plus
a ``run_config`` echo and prints a short summary.

Exit codes: 0 success, 2 configuration, 3 data, 4 numeric, 1 other.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import SyntheticWorldConfig, generate_synthetic, load_dataset, manifest_digest, save_dataset
from .errors import ConfigError, DataError, TSCMError
from .losses import CrossTermMask
from .models import load_checkpoint, save_checkpoint
from .retrieval import (
    DEFAULT_NS,
    bench_latency,
    bench_threads,
    build_db,
    describe,
    evaluate,
    ground_truth_by_place,
    ground_truth_by_radius,
    knn_search,
    load_db,
    random_db,
    save_db,
)
from .training import TrainConfig, distill_student, final_recall, train_teacher

logger = logging.getLogger("tscm")

RUN_CONFIG_VERSION = 1
QUERY_RESULTS_VERSION = 1


@dataclass(frozen=True)
class Opt:
    key: str
    type: object = str
    default: object = None
    help: str = ""
    kind: str = "value"  # value | input | output | choice
    choices: tuple = ()

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _mask(text) -> str:
    return str(CrossTermMask.parse(",".join(text) if isinstance(text, list) else str(text)))


_WORLD = [
    Opt("places", int, 8, "number of places"),
    Opt("views", int, 20, "views per place"),
    *[Opt(f.name, type(f.default), f.default, f"world parameter {f.name}")
      for f in fields(SyntheticWorldConfig)
      if f.name not in ("n_places", "views_per_place", "split_fractions")],
    Opt("split_fractions", _float_list, list(SyntheticWorldConfig().split_fractions),
        "train,val,database,query fractions"),
]

_TRAIN = [
    Opt("epochs", int, TrainConfig.epochs, "training epochs"),
    Opt("batch_size", int, TrainConfig.batch_size, "triplets per step"),
    Opt("learning_rate", float, TrainConfig.learning_rate, "initial Adam learning rate"),
    Opt("lr_decay_per_epoch", float, TrainConfig.lr_decay_per_epoch, "learning-rate factor per epoch"),
    Opt("weight_decay", float, TrainConfig.weight_decay, "L2 coefficient"),
    Opt("margin", float, TrainConfig.margin, "hinge margin"),
    Opt("r_pos", float, TrainConfig.r_pos, "positive radius (m)"),
    Opt("r_neg", float, TrainConfig.r_neg, "negative radius (m)"),
    Opt("negatives_per_anchor", int, TrainConfig.negatives_per_anchor, "negatives per triplet"),
    Opt("metric", str, TrainConfig.metric, "descriptor distance", "choice", ("squared", "euclidean")),
]

COMMANDS = {
    "gen-data": (
        "generate a synthetic place dataset",
        [*_WORLD, Opt("seed", int, 0, "generation seed"), Opt("out", str, None, "output directory", "output")],
    ),
    "train-teacher": (
        "train the teacher with the triplet loss",
        [Opt("data", str, None, "dataset directory", "input"), *_TRAIN, Opt("seed", int, 0, "run seed"),
         Opt("out", str, None, "output directory", "output")],
    ),
    "distill-student": (
        "distil a student from a frozen teacher",
        [Opt("data", str, None, "dataset directory", "input"),
         Opt("teacher", str, None, "teacher checkpoint", "input"), *_TRAIN,
         Opt("cm_terms", _mask, "d1,d2", "cross-metric terms, e.g. d1,d2[,d3][,d4] or none"),
         Opt("loss_weights", _float_list, [1.0, 1.0, 1.0], "weights of L_hard,L_soft,L_cm"),
         Opt("seed", int, 0, "run seed"), Opt("out", str, None, "output directory", "output")],
    ),
    "build-db": (
        "describe a dataset split into a descriptor database",
        [Opt("data", str, None, "dataset directory", "input"),
         Opt("checkpoint", str, None, "model checkpoint", "input"),
         Opt("split", str, "database", "dataset split", "choice", ("train", "val", "database", "query")),
         Opt("out", str, None, "database file", "output")],
    ),
    "query": (
        "nearest database entries for dataset samples",
        [Opt("db", str, None, "database file", "input"),
         Opt("data", str, None, "dataset directory", "input"),
         Opt("checkpoint", str, "", "model checkpoint (default: recorded by build-db)"),
         Opt("split", str, "query", "split to query with", "choice", ("train", "val", "database", "query")),
         Opt("ids", _int_list, [], "sample ids (default: the whole split)"),
         Opt("n", int, 5, "neighbours per query"),
         Opt("out", str, None, "results file", "output")],
    ),
    "eval": (
        "recall@N, mAP@N and AP of a database against query samples",
        [Opt("db", str, None, "database file", "input"),
         Opt("queries", str, None, "dataset directory holding the queries", "input"),
         Opt("checkpoint", str, "", "model checkpoint (default: recorded by build-db)"),
         Opt("split", str, "query", "split to evaluate", "choice", ("train", "val", "database", "query")),
         Opt("ns", _int_list, list(DEFAULT_NS), "N values"),
         Opt("ground_truth", str, "place", "correctness rule", "choice", ("place", "radius")),
         Opt("r_gt", float, 25.0, "radius for the radius rule (m)"),
         Opt("report", str, None, "report file", "output")],
    ),
    "bench": (
        "per-query matching (and optional descriptor) latency",
        [Opt("db", str, "", "database file (default: random unit vectors)"),
         Opt("db_size", int, 10_000, "rows of the random database"),
         Opt("width", int, 512, "width of the random database"),
         Opt("queries", int, 100, "number of queries"),
         Opt("repetitions", int, 5, "passes over the queries"),
         Opt("n", int, 1, "neighbours per query"),
         Opt("checkpoint", str, "", "also time descriptor generation with this model"),
         Opt("threads", int, 0, "throughput workers (default: TSCM_BENCH_THREADS or 1)"),
         Opt("seed", int, 0, "seed for random data"),
         Opt("out", str, None, "report file", "output")],
    ),
    "params": (
        "parameter count of a checkpoint",
        [Opt("checkpoint", str, None, "model checkpoint", "input"),
         Opt("out", str, "", "optional JSON output file")],
    ),
}


# -- argument handling ----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tscm", description="Teacher-student place recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"tscm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option values")
        for o in opts:
            extra = {"choices": o.choices} if o.choices else {}
            p.add_argument(o.flag, dest=o.key, default=argparse.SUPPRESS, help=o.help,
                           type=o.type if o.type is not bool else _bool, **extra)
    return parser


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes"):
        return True
    if str(text).lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _read_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(command: str, args: dict) -> dict:
    """Defaults, then config file, then flags; every key type-checked."""
    opts = {o.key: o for o in COMMANDS[command][1]}
    from_file = _read_config(args.pop("config")) if "config" in args else {}
    unknown = sorted(set(from_file) - set(opts))
    if unknown:
        raise ConfigError(f"unknown {command} config keys: {unknown}")
    values = {}
    for key, o in opts.items():
        if key in args:
            values[key] = args[key]
        elif key in from_file:
            values[key] = _coerce(o, from_file[key])
        else:
            values[key] = o.default
        if o.choices and values[key] not in o.choices:
            raise ConfigError(f"{o.flag} must be one of {list(o.choices)}, got {values[key]!r}")
        if o.kind in ("input", "output") and not values[key]:
            raise ConfigError(f"{command} needs {o.flag}")
    return values


def _coerce(o: Opt, value):
    if o.type is bool:
        return _bool(value)
    if o.type in (int, float) and isinstance(value, bool):
        raise ConfigError(f"{o.key} must be a number, got {value!r}")
    try:
        return o.type(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{o.key}: cannot interpret {value!r}") from None


def _check_paths(command: str, values: dict) -> None:
    for o in COMMANDS[command][1]:
        v = values.get(o.key)
        if not v:
            continue
        if o.kind == "input" or (o.key in ("db", "checkpoint") and v):
            if not Path(v).exists():
                raise ConfigError(f"{o.flag} {v}: no such file or directory")
    if command in ("train-teacher", "distill-student", "build-db", "query", "eval"):
        data = values.get("data") or values.get("queries")
        if not (Path(data) / "manifest.json").is_file():
            raise ConfigError(f"{data}: not a dataset directory (manifest.json missing)")
    out = values.get("out") or values.get("report")
    if out:
        target = Path(out)
        if command in ("gen-data", "train-teacher", "distill-student"):
            if target.exists() and not target.is_dir():
                raise ConfigError(f"--out {out} exists and is not a directory")
            parent = target.parent
        else:
            if target.is_dir():
                raise ConfigError(f"{out} is a directory, expected a file path")
            parent = target.parent
        if not parent.exists():
            raise ConfigError(f"output location {parent} does not exist")
        inputs = {Path(values[o.key]).resolve() for o in COMMANDS[command][1] if o.kind == "input" and values.get(o.key)}
        if target.resolve() in inputs:
            raise ConfigError(f"output {out} would overwrite an input")


# -- outputs --------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _echo_path(command: str, values: dict) -> Path | None:
    if command in ("gen-data", "train-teacher", "distill-student"):
        return Path(values["out"]) / "run_config.json"
    out = values.get("out") or values.get("report")
    return Path(str(out) + ".run_config.json") if out else None


def _echo(command: str, values: dict) -> None:
    path = _echo_path(command, values)
    if path is not None:
        _write_json(path, {"version": RUN_CONFIG_VERSION, "command": command, "tool_version": __version__,
                           "options": values})


def _db_meta_path(db_path) -> Path:
    return Path(str(db_path) + ".meta.json")


def _model_for_db(values: dict, db) -> object:
    ckpt = values.get("checkpoint")
    if not ckpt:
        meta = _db_meta_path(values["db"])
        if not meta.is_file():
            raise ConfigError(f"no --checkpoint given and {meta} not found")
        ckpt = json.loads(meta.read_text())["checkpoint_path"]
        if not Path(ckpt).is_file():
            raise ConfigError(f"checkpoint {ckpt} recorded for {values['db']} no longer exists")
    model = load_checkpoint(ckpt)
    if model.digest() != db.checkpoint:
        raise DataError(f"checkpoint {ckpt} does not match the model that built {values['db']}")
    return model


def _train_config(values: dict, **extra) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{**{k: v for k, v in values.items() if k in keys}, **extra})


# -- commands -------------------------------------------------------------------

def cmd_gen_data(v: dict) -> str:
    world = {k: v[k] for k in (f.name for f in fields(SyntheticWorldConfig)) if k in v}
    cfg = SyntheticWorldConfig(n_places=v["places"], views_per_place=v["views"], **world)
    ds = generate_synthetic(cfg, seed=v["seed"])
    out = save_dataset(ds, v["out"])
    digest = manifest_digest(out)
    counts = {name: len(ds.split(name)) for name in ("train", "val", "database", "query")}
    _write_json(out / "summary.json", {"samples": len(ds), "splits": counts, "manifest_sha256": digest})
    return f"wrote {len(ds)} samples to {out} (splits {counts}); manifest sha256 {digest[:16]}"


def _fit_command(v: dict, kind: str) -> str:
    ds = load_dataset(v["data"])
    out = Path(v["out"])
    out.mkdir(exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log:
        if kind == "teacher":
            model, records = train_teacher(ds, _train_config(v), log=log)
        else:
            teacher = load_checkpoint(v["teacher"])
            cfg = _train_config(v, mask=v["cm_terms"], loss_weights=tuple(v["loss_weights"]))
            model, records = distill_student(ds, teacher, cfg, log=log)
    ckpt = out / f"{kind}.ckpt"
    digest = save_checkpoint(ckpt, model)
    summary = {
        "kind": kind,
        "checkpoint": str(ckpt),
        "digest": digest,
        "num_params": model.num_params(),
        "epochs": v["epochs"],
        "final_val_recall@1": final_recall(records),
    }
    last = [r for r in records if r["kind"] == "epoch"][-1]
    if "val_mean_d_st" in last:
        summary["final_val_mean_d_st"] = last["val_mean_d_st"]
    _write_json(out / "summary.json", summary)
    return f"{kind} trained for {v['epochs']} epochs; val recall@1 {summary['final_val_recall@1']:.3f}; saved {ckpt}"


def cmd_train_teacher(v: dict) -> str:
    return _fit_command(v, "teacher")


def cmd_distill_student(v: dict) -> str:
    return _fit_command(v, "student")


def cmd_build_db(v: dict) -> str:
    ds = load_dataset(v["data"])
    model = load_checkpoint(v["checkpoint"])
    samples = ds.split(v["split"])
    if not samples:
        raise DataError(f"split {v['split']!r} of {v['data']} is empty")
    db = build_db(samples, model)
    save_db(db, v["out"])
    _write_json(_db_meta_path(v["out"]), {
        "checkpoint_path": str(Path(v["checkpoint"]).resolve()),
        "checkpoint_digest": db.checkpoint,
        "dataset": str(Path(v["data"]).resolve()),
        "split": v["split"],
        "size": db.size,
        "width": db.width,
    })
    return f"database of {db.size} x {db.width} written to {v['out']}"


def _query_samples(v: dict, ds):
    if v.get("ids"):
        missing = [i for i in v["ids"] if i not in {s.id for s in ds.samples}]
        if missing:
            raise ConfigError(f"unknown sample ids {missing}")
        return [ds[i] for i in v["ids"]]
    samples = ds.split(v["split"])
    if not samples:
        raise DataError(f"split {v['split']!r} is empty")
    return samples


def cmd_query(v: dict) -> str:
    db = load_db(v["db"])
    ds = load_dataset(v["data"])
    model = _model_for_db(v, db)
    if not 1 <= v["n"] <= db.size:
        raise ConfigError(f"--n must be in [1, {db.size}]")
    samples = _query_samples(v, ds)
    desc = describe(model, ds.images([s.id for s in samples]))
    rows = []
    for s, d in zip(samples, desc):
        r = knn_search(db, d, v["n"])
        rows.append({"query_id": s.id, "ids": r.ids.tolist(), "distances": r.distances.tolist()})
    _write_json(Path(v["out"]), {"version": QUERY_RESULTS_VERSION, "n": v["n"], "results": rows})
    return f"{len(rows)} queries answered with {v['n']} neighbours each; written to {v['out']}"


def cmd_eval(v: dict) -> str:
    db = load_db(v["db"])
    ds = load_dataset(v["queries"])
    model = _model_for_db(v, db)
    samples = ds.split(v["split"])
    if not samples:
        raise DataError(f"split {v['split']!r} of {v['queries']} is empty")
    if any(n < 1 for n in v["ns"]) or not v["ns"]:
        raise ConfigError("--ns needs positive integers")
    desc = describe(model, ds.images([s.id for s in samples]))
    if v["ground_truth"] == "place":
        gt = ground_truth_by_place(db, [s.place_id for s in samples])
    else:
        gt = ground_truth_by_radius(db, [s.location for s in samples], v["r_gt"])
    report = evaluate(db, desc, gt, ns=tuple(sorted(set(v["ns"]))))
    _write_json(Path(v["report"]), report.to_dict())
    parts = ", ".join(f"R@{n} {report.recall[n]:.3f}" for n in sorted(report.recall))
    return f"{report.n_queries} queries vs {report.db_size} entries: {parts}, AP {report.ap:.3f}"


def cmd_bench(v: dict) -> str:
    rng = np.random.default_rng(v["seed"])
    db = load_db(v["db"]) if v["db"] else random_db(v["db_size"], v["width"], seed=v["seed"])
    if v["queries"] < 1:
        raise ConfigError("--queries must be >= 1")
    queries = rng.standard_normal((v["queries"], db.width))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    model = images = None
    if v["checkpoint"]:
        model = load_checkpoint(v["checkpoint"])
        c = model.config
        images = rng.uniform(size=(min(v["queries"], 20), c.channels, c.image_size, c.image_size))
    threads = v["threads"] or bench_threads()
    report = bench_latency(db, queries, repetitions=v["repetitions"], n=v["n"], model=model, images=images,
                           threads=threads)
    out = report.to_dict()
    out["version"] = 1
    _write_json(Path(v["out"]), out)
    text = (f"matching over {db.size} x {db.width}: median {report.matching_ms['median']:.3f} ms, "
            f"p95 {report.matching_ms['p95']:.3f} ms; {report.throughput_qps:.0f} queries/s on {threads} thread(s)")
    if report.generation_ms:
        text += f"; descriptor generation median {report.generation_ms['median']:.3f} ms"
    return text


def cmd_params(v: dict) -> str:
    model = load_checkpoint(v["checkpoint"])
    n = model.num_params()
    if v["out"]:
        _write_json(Path(v["out"]), {"kind": model.kind, "num_params": n, "digest": model.digest()})
    return f"{model.kind} parameters: {n}"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill-student": cmd_distill_student,
    "build-db": cmd_build_db,
    "query": cmd_query,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "params": cmd_params,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = vars(build_parser().parse_args(argv))
        command = ns.pop("command")
        verbose = ns.pop("verbose")
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
        values = resolve(command, ns)
        _check_paths(command, values)
        if command in ("gen-data", "train-teacher", "distill-student"):
            Path(values["out"]).mkdir(exist_ok=True)
        _echo(command, values)
        print(HANDLERS[command](values))
        return 0
    except TSCMError as exc:
        print(f"tscm: error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tscm: error [io]: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
