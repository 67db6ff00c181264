"""Synthetic place dataset, on-disk format and geographic triplet mining.

Each place gets a latent signature image (random coloured blobs plus a
low-frequency pattern).  Places sit on a jittered grid whose pitch exceeds
twice the negative radius, so place identity and geographic proximity
coincide.  A view is the signature under a random circular shift, a
brightness offset, additive noise and an occluding patch.

On disk a dataset is a directory holding ``manifest.json`` and
``samples.bin``.  ``samples.bin`` starts with the 8-byte magic ``TSCMSAMP``
and a little-endian u32 format version; each image follows as
little-endian float32 in row-major (C, H, W) order at the byte offset the
manifest records for it.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    EmptyMiningError,
    FormatError,
    IntegrityError,
    VersionMismatchError,
)

DATASET_VERSION = 1
SAMPLES_MAGIC = b"TSCMSAMP"
_BIN_HEADER = struct.Struct("<8sI")
SPLITS = ("train", "val", "database", "query")


@dataclass(frozen=True)
class SyntheticWorldConfig:
    n_places: int = 8
    views_per_place: int = 20
    image_size: int = 32
    channels: int = 3
    grid_pitch: float = 60.0
    place_jitter: float = 4.0
    view_spread: float = 3.0
    blobs: int = 6
    max_shift: int = 16
    brightness: float = 0.3
    noise: float = 0.25
    occlusion: int = 16
    split_fractions: tuple = (0.4, 0.2, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if self.n_places < 2:
            raise ConfigError(f"n_places must be >= 2, got {self.n_places}")
        if self.views_per_place < 2:
            raise ConfigError(f"views_per_place must be >= 2, got {self.views_per_place}")
        if self.image_size < 4 or self.channels < 1:
            raise ConfigError("image_size must be >= 4 and channels >= 1")
        if len(self.split_fractions) != 4 or any(f < 0 for f in self.split_fractions):
            raise ConfigError(f"split_fractions needs four non-negative entries, got {self.split_fractions}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must sum to 1, got {sum(self.split_fractions)}")
        if self.grid_pitch - 2 * (self.place_jitter + self.view_spread) <= 0:
            raise ConfigError("grid_pitch too small for the jitter and view spread")
        for name in ("brightness", "noise", "view_spread", "place_jitter"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_shift < 0 or self.occlusion < 0 or self.occlusion > self.image_size:
            raise ConfigError("max_shift and occlusion must be in [0, image_size]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown world config keys: {unknown}")
        return cls(**d)


@dataclass
class PlaceSample:
    id: int
    place_id: int
    location: tuple
    image: np.ndarray = field(repr=False)
    split: str = "train"


@dataclass
class Dataset:
    """Samples plus the manifest metadata they were generated with."""

    samples: list
    config: dict
    seed: int
    version: int = DATASET_VERSION

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.samples}
        if len(self._by_id) != len(self.samples):
            raise IntegrityError("sample ids are not unique")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, sample_id: int) -> PlaceSample:
        return self._by_id[sample_id]

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def images(self, ids) -> np.ndarray:
        """(B, C, H, W) float64 batch for ``ids``."""
        return np.stack([self._by_id[i].image for i in ids]).astype(np.float64)

    def locations(self, ids) -> np.ndarray:
        return np.array([self._by_id[i].location for i in ids], dtype=np.float64)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.samples[0].image.shape)

    def manifest(self) -> dict:
        records = [
            {
                "id": s.id,
                "place_id": s.place_id,
                "x": float(s.location[0]),
                "y": float(s.location[1]),
                "split": s.split,
            }
            for s in self.samples
        ]
        return {
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "image_shape": list(self.image_shape),
            "samples": records,
        }

    def validate(self) -> None:
        """Split and geography invariants; raises IntegrityError."""
        db_places = {s.place_id for s in self.split("database")}
        for s in self.samples:
            if s.split not in SPLITS:
                raise IntegrityError(f"sample {s.id} has unknown split {s.split!r}")
            if not np.all(np.isfinite(s.location)):
                raise IntegrityError(f"sample {s.id} has a non-finite location")
            if not np.all(np.isfinite(s.image)) or s.image.min() < 0 or s.image.max() > 1:
                raise IntegrityError(f"sample {s.id} image is non-finite or outside [0, 1]")
        for s in self.split("query"):
            if s.place_id not in db_places:
                raise IntegrityError(f"query {s.id} has place {s.place_id} absent from the database split")


# -- generation ---------------------------------------------------------------

def _signature(rng: np.random.Generator, cfg: SyntheticWorldConfig) -> np.ndarray:
    n, c = cfg.image_size, cfg.channels
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((c, n, n))
    base = rng.uniform(0.2, 0.5, size=(c, 1, 1))
    img += base
    for _ in range(cfg.blobs):
        cy, cx = rng.uniform(0, n, size=2)
        sigma = rng.uniform(0.06, 0.18) * n
        # toroidal distance keeps the pattern consistent under circular shifts
        dy = np.minimum(np.abs(yy - cy), n - np.abs(yy - cy))
        dx = np.minimum(np.abs(xx - cx), n - np.abs(xx - cx))
        blob = np.exp(-(dy ** 2 + dx ** 2) / (2 * sigma ** 2))
        colour = rng.uniform(-0.5, 0.5, size=(c, 1, 1))
        img += colour * blob
    fy, fx = rng.integers(1, 4, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=(c, 1, 1))
    img += 0.1 * np.sin(2 * np.pi * (fy * yy + fx * xx) / n + phase)
    return img


def _render_view(rng: np.random.Generator, sig: np.ndarray, cfg: SyntheticWorldConfig) -> np.ndarray:
    n = cfg.image_size
    img = sig
    if cfg.max_shift:
        dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
        img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
    img = img + rng.uniform(-cfg.brightness, cfg.brightness)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape) if cfg.noise else img
    if cfg.occlusion:
        size = int(rng.integers(cfg.occlusion // 2, cfg.occlusion + 1))
        if size:
            y0, x0 = rng.integers(0, n - size + 1, size=2)
            img = img.copy()
            img[:, y0:y0 + size, x0:x0 + size] = rng.uniform(0.0, 1.0, size=(cfg.channels, 1, 1))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_counts(views: int, fractions: tuple) -> list:
    f_train, f_val, f_db, f_q = fractions
    n_db = max(1, int(round(f_db * views))) if f_db > 0 else 0
    n_q = int(round(f_q * views))
    n_val = int(round(f_val * views))
    while n_db + n_q + n_val > views - (1 if f_train > 0 else 0) and (n_val or n_q):
        if n_val:
            n_val -= 1
        else:
            n_q -= 1
    n_train = views - n_db - n_q - n_val
    return ["train"] * n_train + ["val"] * n_val + ["database"] * n_db + ["query"] * n_q


def generate_synthetic(config: SyntheticWorldConfig | None = None, seed: int = 0) -> Dataset:
    """Deterministic synthetic world; a pure function of (config, seed)."""
    cfg = config or SyntheticWorldConfig()
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(cfg.n_places))
    samples = []
    split_plan = _split_counts(cfg.views_per_place, cfg.split_fractions)
    for place in range(cfg.n_places):
        sig = _signature(rng, cfg)
        r, c = divmod(place, cols)
        centre = np.array([c * cfg.grid_pitch, r * cfg.grid_pitch]) + rng.uniform(
            -cfg.place_jitter, cfg.place_jitter, size=2
        )
        order = rng.permutation(cfg.views_per_place)
        for v in range(cfg.views_per_place):
            radius = cfg.view_spread * math.sqrt(rng.uniform())
            angle = rng.uniform(0, 2 * math.pi)
            loc = centre + radius * np.array([math.cos(angle), math.sin(angle)])
            samples.append(
                PlaceSample(
                    id=len(samples),
                    place_id=place,
                    location=(float(loc[0]), float(loc[1])),
                    image=_render_view(rng, sig, cfg),
                    split=split_plan[order[v]],
                )
            )
    ds = Dataset(samples, cfg.to_dict(), seed)
    ds.validate()
    return ds


# -- persistence --------------------------------------------------------------

def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path, "manifest.json").read_bytes()).hexdigest()


def save_dataset(dataset: Dataset, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest()
    offset = _BIN_HEADER.size
    with open(out / "samples.bin", "wb") as fh:
        fh.write(_BIN_HEADER.pack(SAMPLES_MAGIC, DATASET_VERSION))
        for rec, s in zip(manifest["samples"], dataset.samples):
            raw = np.ascontiguousarray(s.image, dtype="<f4").tobytes()
            rec["offset"] = offset
            rec["nbytes"] = len(raw)
            fh.write(raw)
            offset += len(raw)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath, bpath = root / "manifest.json", root / "samples.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise FormatError(f"{root}: expected manifest.json and samples.bin")
    try:
        manifest = json.loads(mpath.read_text())
    except ValueError as exc:
        raise FormatError(f"{mpath}: not valid JSON") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise VersionMismatchError("dataset", manifest.get("version"), DATASET_VERSION)
    raw = bpath.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise FormatError(f"{bpath}: truncated header")
    magic, version = _BIN_HEADER.unpack_from(raw)
    if magic != SAMPLES_MAGIC:
        raise FormatError(f"{bpath}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionMismatchError("dataset", version, DATASET_VERSION)
    shape = tuple(manifest["image_shape"])
    nbytes = int(np.prod(shape)) * 4
    samples = []
    for rec in manifest["samples"]:
        if "offset" not in rec or "nbytes" not in rec:
            raise IntegrityError(f"sample {rec.get('id')} has no payload offset")
        if rec["nbytes"] != nbytes:
            raise IntegrityError(f"sample {rec['id']} payload size {rec['nbytes']} != {nbytes}")
        off = rec["offset"]
        if off < _BIN_HEADER.size or off + nbytes > len(raw):
            raise FormatError(f"sample {rec['id']} payload lies outside samples.bin (truncated?)")
        img = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        samples.append(
            PlaceSample(
                id=rec["id"],
                place_id=rec["place_id"],
                location=(rec["x"], rec["y"]),
                image=img.astype(np.float32),
                split=rec["split"],
            )
        )
    ds = Dataset(samples, manifest["config"], manifest["seed"], manifest["version"])
    ds.validate()
    return ds


# -- triplet mining -----------------------------------------------------------

@dataclass(frozen=True)
class TripletSpec:
    r_pos: float = 10.0
    r_neg: float = 25.0
    negatives_per_anchor: int = 2

    def __post_init__(self):
        if not 0 < self.r_pos < self.r_neg:
            raise ConfigError(f"need 0 < r_pos < r_neg, got {self.r_pos}, {self.r_neg}")
        if self.negatives_per_anchor < 1:
            raise ConfigError("negatives_per_anchor must be >= 1")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negatives: tuple


@dataclass
class Mining:
    triplets: list
    skipped: int

    def __iter__(self):
        return iter(self.triplets)

    def __len__(self) -> int:
        return len(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]


def mine_triplets(dataset: Dataset, spec: TripletSpec | None = None, seed: int = 0,
                  split: str = "train") -> Mining:
    """One triplet per anchor of ``split`` that has a positive within r_pos.

    Negatives are drawn from samples farther than r_neg, without
    replacement when enough exist.
    """
    spec = spec or TripletSpec()
    pool = dataset.split(split)
    if not pool:
        raise EmptyMiningError(f"split {split!r} is empty")
    rng = np.random.default_rng(seed)
    ids = np.array([s.id for s in pool])
    loc = np.array([s.location for s in pool], dtype=np.float64)
    dist = np.sqrt(((loc[:, None, :] - loc[None, :, :]) ** 2).sum(-1))
    triplets, skipped = [], 0
    k = spec.negatives_per_anchor
    for i in range(len(pool)):
        pos = np.flatnonzero(dist[i] <= spec.r_pos)
        pos = pos[pos != i]
        neg = np.flatnonzero(dist[i] > spec.r_neg)
        if len(pos) == 0 or len(neg) == 0:
            skipped += 1
            continue
        p = int(rng.choice(pos))
        n = rng.choice(neg, size=k, replace=len(neg) < k)
        triplets.append(Triplet(int(ids[i]), int(ids[p]), tuple(int(ids[j]) for j in n)))
    if not triplets:
        raise EmptyMiningError(f"no mineable triplet in split {split!r} ({skipped} anchors skipped)")
    return Mining(triplets, skipped)
