"""Descriptor database, exact k-nearest-neighbour search, VPR metrics,
database persistence and latency benchmarking.

Ranking is by Euclidean distance with ties broken by the lower id, so
results are identical across platforms.  Candidates are preselected with a
single matrix-vector product and then re-ranked on exact float64
distances, which makes the output agree with a naive double loop.

Database file layout (little-endian)::

    magic  b"TSCMDB\\0\\0"          8 bytes
    version u32, n u64, width u32
    checkpoint hash                 64 bytes, ASCII hex (zero padded)
    descriptors float32             n * width
    ids int64                       n
    place ids int64                 n        (-1 when unknown)
    locations float64               n * 2
"""

from __future__ import annotations

import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, IntegrityError, VersionMismatchError
from .tensor import no_grad

DB_MAGIC = b"TSCMDB\x00\x00"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<8sIQI64s")
REPORT_VERSION = 1
DEFAULT_NS = (1, 5, 10)
BENCH_THREADS_ENV = "TSCM_BENCH_THREADS"


@dataclass(frozen=True, eq=False)
class DescriptorDatabase:
    descriptors: np.ndarray
    ids: np.ndarray
    locations: np.ndarray
    place_ids: np.ndarray
    checkpoint: str = ""
    sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.ascontiguousarray(self.descriptors)
        if d.ndim != 2 or d.shape[0] == 0:
            raise DataError(f"descriptor matrix must be non-empty (n, width), got {d.shape}")
        n = d.shape[0]
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        loc = np.ascontiguousarray(self.locations, dtype=np.float64).reshape(n, 2)
        places = np.ascontiguousarray(self.place_ids, dtype=np.int64)
        if ids.shape != (n,) or places.shape != (n,):
            raise DataError("ids/place_ids length does not match the descriptor count")
        if len(np.unique(ids)) != n:
            raise IntegrityError("database ids are not unique")
        norms = np.linalg.norm(d.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise IntegrityError(f"descriptor rows must be unit norm, worst deviation {np.abs(norms - 1).max():.3g}")
        sq = np.einsum("ij,ij->i", d, d)
        for name, arr in (("descriptors", d), ("ids", ids), ("locations", loc), ("place_ids", places), ("sq_norms", sq)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.descriptors.shape[0]

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.size

    def equals(self, other: "DescriptorDatabase") -> bool:
        return (
            self.checkpoint == other.checkpoint
            and self.descriptors.dtype == other.descriptors.dtype
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.place_ids, other.place_ids)
            and np.array_equal(self.locations, other.locations)
        )


def describe(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Descriptors (float64) for an image batch, computed without a tape."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size]).data)
    return np.concatenate(out, axis=0)


def build_db(samples, model, checkpoint: str | None = None, dtype=np.float32) -> DescriptorDatabase:
    """One descriptor per sample, stored as ``dtype`` (float32 by default)."""
    samples = list(samples)
    if not samples:
        raise DataError("cannot build a database from zero samples")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    desc = describe(model, images)
    assert desc.shape == (len(samples), model.width)
    desc = desc.astype(dtype)
    # re-normalise after the cast so rows are unit norm in the stored precision
    desc /= np.linalg.norm(desc.astype(np.float64), axis=1, keepdims=True).astype(dtype)
    return DescriptorDatabase(
        descriptors=desc,
        ids=np.array([s.id for s in samples]),
        locations=np.array([s.location for s in samples], dtype=np.float64),
        place_ids=np.array([s.place_id for s in samples]),
        checkpoint=checkpoint if checkpoint is not None else model.digest(),
    )


# -- search -------------------------------------------------------------------

@dataclass
class QueryResult:
    ids: np.ndarray
    distances: np.ndarray
    seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.ids)


def _prepare_query(db: DescriptorDatabase, query) -> np.ndarray:
    q = np.asarray(getattr(query, "data", query), dtype=np.float64).reshape(-1)
    if q.shape[0] != db.width:
        raise ConfigError(f"query width {q.shape[0]} != database width {db.width}")
    return q


def knn_search(db: DescriptorDatabase, query, n: int) -> QueryResult:
    """Exact top-``n`` database entries by Euclidean distance, ties by lower id."""
    if db is None or db.size == 0:
        raise DataError("empty database")
    if not 1 <= n <= db.size:
        raise ConfigError(f"n must be in [1, {db.size}], got {n}")
    t0 = time.perf_counter()
    q = _prepare_query(db, query)
    qc = q.astype(db.descriptors.dtype)
    approx = db.sq_norms + float(qc @ qc) - 2.0 * (db.descriptors @ qc)
    if n < db.size:
        kth = np.partition(approx, n - 1)[n - 1]
        # slack covers float32 rounding in the expanded form
        slack = 1e-4 * (1.0 + abs(float(kth)))
        cand = np.flatnonzero(approx <= kth + slack)
    else:
        cand = np.arange(db.size)
    diff = db.descriptors[cand].astype(np.float64) - q
    exact = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((db.ids[cand], exact))[:n]
    sel = cand[order]
    res = QueryResult(db.ids[sel].copy(), np.sqrt(exact[order]), 0.0)
    res.seconds = time.perf_counter() - t0
    return res


def knn_search_many(db: DescriptorDatabase, queries, n: int) -> list[QueryResult]:
    return [knn_search(db, q, n) for q in np.asarray(queries)]


# -- ground truth and metrics --------------------------------------------------

def ground_truth_by_place(db: DescriptorDatabase, query_place_ids) -> list[set]:
    by_place: dict[int, set] = {}
    for i, p in zip(db.ids, db.place_ids):
        by_place.setdefault(int(p), set()).add(int(i))
    return [set(by_place.get(int(p), ())) for p in query_place_ids]


def ground_truth_by_radius(db: DescriptorDatabase, query_locations, r_gt: float = 25.0) -> list[set]:
    q = np.asarray(query_locations, dtype=np.float64).reshape(-1, 2)
    d = np.sqrt(((q[:, None, :] - db.locations[None, :, :]) ** 2).sum(-1))
    return [set(int(i) for i in db.ids[row <= r_gt]) for row in d]


def _ranked_ids(r) -> np.ndarray:
    return np.asarray(r.ids if isinstance(r, QueryResult) else r)


def _valid(results, ground_truth) -> list[int]:
    if len(results) != len(ground_truth):
        raise ConfigError(f"{len(results)} results but {len(ground_truth)} ground-truth sets")
    keep = [i for i, g in enumerate(ground_truth) if g]
    if not keep:
        raise DataError("no query has a non-empty ground-truth set")
    return keep


def excluded_queries(ground_truth) -> int:
    """Number of queries with an empty ground-truth set (left out of every metric)."""
    return sum(1 for g in ground_truth if not g)


def recall_at_n(results: Sequence, ground_truth: Sequence[set], n: int) -> float:
    """Fraction of queries with at least one correct id in the top ``n``."""
    keep = _valid(results, ground_truth)
    hits = sum(
        1 for i in keep if any(int(x) in ground_truth[i] for x in _ranked_ids(results[i])[:n])
    )
    return hits / len(keep)


def map_at_n(results: Sequence, ground_truth: Sequence[set], n: int) -> float:
    """Mean over queries of sum_{k<=n} P@k * rel(k) / min(n, #relevant)."""
    keep = _valid(results, ground_truth)
    total = 0.0
    for i in keep:
        rel = np.array([int(x) in ground_truth[i] for x in _ranked_ids(results[i])[:n]], dtype=float)
        if rel.size == 0:
            continue
        prec = np.cumsum(rel) / np.arange(1, rel.size + 1)
        total += float((prec * rel).sum()) / min(n, len(ground_truth[i]))
    return total / len(keep)


def average_precision(results: Sequence[QueryResult], ground_truth: Sequence[set]) -> float:
    """Area under the precision-recall curve of all (query, candidate) pairs
    pooled and ranked by ascending distance.

    Recall is relative to every relevant pair in the ground truth, so a
    truncated result list caps the attainable recall.
    """
    keep = _valid(results, ground_truth)
    dist, qidx, rank, rel = [], [], [], []
    for i in keep:
        r = results[i]
        if not isinstance(r, QueryResult):
            raise ConfigError("average_precision needs QueryResult objects with distances")
        dist.append(np.asarray(r.distances, dtype=np.float64))
        qidx.append(np.full(len(r), i))
        rank.append(np.arange(len(r)))
        rel.append(np.array([int(x) in ground_truth[i] for x in r.ids], dtype=float))
    dist, qidx, rank, rel = map(np.concatenate, (dist, qidx, rank, rel))
    order = np.lexsort((rank, qidx, dist))
    rel = rel[order]
    n_rel = sum(len(ground_truth[i]) for i in keep)
    prec = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((prec * rel).sum() / n_rel)


@dataclass
class EvalReport:
    recall: dict
    map: dict
    ap: float
    n_queries: int
    n_excluded: int
    db_size: int
    timing_ms: dict
    version: int = REPORT_VERSION

    def __post_init__(self):
        ns = sorted(self.recall)
        vals = [self.recall[k] for k in ns]
        if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
            raise IntegrityError(f"recall@N not monotone: {self.recall}")
        for v in list(self.recall.values()) + list(self.map.values()) + [self.ap]:
            if not 0.0 <= v <= 1.0:
                raise IntegrityError(f"metric outside [0, 1]: {v}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["map"] = {str(k): v for k, v in self.map.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["recall"] = {int(k): v for k, v in d["recall"].items()}
        d["map"] = {int(k): v for k, v in d["map"].items()}
        return cls(**d)


def _percentiles_ms(seconds) -> dict:
    s = np.asarray(seconds, dtype=np.float64) * 1e3
    return {"median": float(np.median(s)), "p95": float(np.percentile(s, 95))}


def evaluate(db: DescriptorDatabase, query_descriptors, ground_truth: Sequence[set],
             ns: Sequence[int] = DEFAULT_NS) -> EvalReport:
    """Full-ranking retrieval of every query and the resulting metrics.

    ``N`` values larger than the database are clipped to its size.
    """
    queries = np.asarray(query_descriptors)
    results = knn_search_many(db, queries, db.size)
    recall, mean_ap = {}, {}
    for n in ns:
        k = min(n, db.size)
        recall[n] = recall_at_n(results, ground_truth, k)
        mean_ap[n] = map_at_n(results, ground_truth, k)
    return EvalReport(
        recall=recall,
        map=mean_ap,
        ap=average_precision(results, ground_truth),
        n_queries=len(queries),
        n_excluded=excluded_queries(ground_truth),
        db_size=db.size,
        timing_ms=_percentiles_ms([r.seconds for r in results]),
    )


# -- persistence --------------------------------------------------------------

def save_db(db: DescriptorDatabase, path) -> None:
    if db.descriptors.dtype != np.float32:
        raise ConfigError("database files store float32 descriptors")
    ckpt = db.checkpoint.encode("ascii")
    if len(ckpt) > 64:
        raise ConfigError("checkpoint hash longer than 64 characters")
    with open(path, "wb") as fh:
        fh.write(_DB_HEADER.pack(DB_MAGIC, DB_VERSION, db.size, db.width, ckpt.ljust(64, b"\0")))
        fh.write(db.descriptors.astype("<f4").tobytes())
        fh.write(db.ids.astype("<i8").tobytes())
        fh.write(db.place_ids.astype("<i8").tobytes())
        fh.write(db.locations.astype("<f8").tobytes())


def load_db(path) -> DescriptorDatabase:
    raw = Path(path).read_bytes()
    if len(raw) < _DB_HEADER.size:
        raise FormatError(f"{path}: too short for a database header")
    magic, version, n, width, ckpt = _DB_HEADER.unpack_from(raw)
    if magic != DB_MAGIC:
        raise FormatError(f"{path}: bad database magic {magic!r}")
    if version != DB_VERSION:
        raise VersionMismatchError("database", version, DB_VERSION)
    expected = _DB_HEADER.size + n * width * 4 + n * 8 * 2 + n * 16
    if len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} bytes, header implies {expected}")
    off = _DB_HEADER.size
    desc = np.frombuffer(raw, "<f4", n * width, off).reshape(n, width)
    off += n * width * 4
    ids = np.frombuffer(raw, "<i8", n, off)
    off += n * 8
    places = np.frombuffer(raw, "<i8", n, off)
    off += n * 8
    loc = np.frombuffer(raw, "<f8", n * 2, off).reshape(n, 2)
    return DescriptorDatabase(
        descriptors=desc.astype(np.float32),
        ids=ids.astype(np.int64),
        locations=loc.astype(np.float64),
        place_ids=places.astype(np.int64),
        checkpoint=ckpt.rstrip(b"\0").decode("ascii"),
    )


# -- benchmarking --------------------------------------------------------------

def random_db(n: int, width: int, seed: int = 0) -> DescriptorDatabase:
    """Random unit-norm float32 database for latency measurements."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, width)).astype(np.float32)
    x /= np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True).astype(np.float32)
    return DescriptorDatabase(x, np.arange(n), np.zeros((n, 2)), np.full(n, -1), "random")


def bench_threads() -> int:
    raw = os.environ.get(BENCH_THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{BENCH_THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{BENCH_THREADS_ENV} must be >= 1")
    return value


@dataclass
class BenchReport:
    db_size: int
    width: int
    n_queries: int
    repetitions: int
    matching_ms: dict
    generation_ms: dict | None
    throughput_qps: float
    throughput_threads: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench_latency(db: DescriptorDatabase, queries, repetitions: int = 5, n: int = 1,
                  model=None, images=None, threads: int | None = None) -> BenchReport:
    """Per-query wall time of matching (single-threaded BLAS) and, when a
    model and images are given, of descriptor generation.  Multi-query
    throughput with ``threads`` workers is reported separately.
    """
    from threadpoolctl import threadpool_limits

    if repetitions < 3:
        raise ConfigError("repetitions must be >= 3")
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != db.width:
        raise ConfigError(f"queries must be (m, {db.width}), got {queries.shape}")
    threads = threads or bench_threads()
    match_times, gen_times = [], []
    with threadpool_limits(limits=1):
        knn_search(db, queries[0], n)
        for _ in range(repetitions):
            for q in queries:
                t0 = time.perf_counter()
                knn_search(db, q, n)
                match_times.append(time.perf_counter() - t0)
        if model is not None and images is not None:
            images = np.asarray(images, dtype=np.float64)
            with no_grad():
                model(images[:1])
                for _ in range(repetitions):
                    for img in images:
                        t0 = time.perf_counter()
                        model(img)
                        gen_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda q: knn_search(db, q, n), queries))
        elapsed = time.perf_counter() - t0
    return BenchReport(
        db_size=db.size,
        width=db.width,
        n_queries=len(queries),
        repetitions=repetitions,
        matching_ms=_percentiles_ms(match_times),
        generation_ms=_percentiles_ms(gen_times) if gen_times else None,
        throughput_qps=len(queries) / elapsed,
        throughput_threads=threads,
    )
