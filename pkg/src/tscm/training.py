"""Adam, teacher pre-training and teacher-to-student distillation.

Both loops re-mine triplets every epoch (mining seed = run seed folded with
the epoch index), run mini-batches of ``batch_size`` triplets, decay the
learning rate by ``lr_decay_per_epoch`` after each epoch and emit JSON-lines
records.  Step records carry the loss breakdown; epoch records carry the
validation recall@1 (val split queried against the database split) and,
during distillation, the mean student-teacher distance on the val split.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import numpy as np

from .data import Dataset, TripletSpec, mine_triplets
from .errors import ConfigError, FrozenTeacherError, NonFiniteError, ShapeError
from .losses import DEFAULT_MARGIN, PULL_ONLY, CrossTermMask, TripletEmbeddings, total_loss, triplet_loss
from .models import Model, StudentConfig, TeacherConfig, build_model
from .retrieval import DescriptorDatabase, describe, ground_truth_by_place, knn_search, recall_at_n
from .tensor import Tensor, reshape, slice_

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_decay_per_epoch: float = 0.99
    weight_decay: float = 0.001
    epochs: int = 10
    seed: int = 0
    mask: CrossTermMask = PULL_ONLY
    margin: float = DEFAULT_MARGIN
    loss_weights: tuple = (1.0, 1.0, 1.0)
    r_pos: float = 10.0
    r_neg: float = 25.0
    negatives_per_anchor: int = 2
    metric: str = "squared"

    def __post_init__(self):
        if isinstance(self.mask, str):
            object.__setattr__(self, "mask", CrossTermMask.parse(self.mask))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0 or self.lr_decay_per_epoch <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and lr_decay_per_epoch must be positive, weight_decay >= 0")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights needs three non-negative values")
        self.triplet_spec()

    def triplet_spec(self) -> TripletSpec:
        return TripletSpec(self.r_pos, self.r_neg, self.negatives_per_anchor)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_per_epoch ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = str(self.mask)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d)


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place Adam update; the L2 term weight_decay * w is added to the gradient."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- helpers ----------------------------------------------------------------------

class _Log:
    def __init__(self, sink):
        self.records: list[dict] = []
        self._sink = sink

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._sink is None:
            return
        if callable(self._sink):
            self._sink(record)
        else:
            self._sink.write(json.dumps(record) + "\n")


def _batches(items: list, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _gather(desc: Tensor, index: dict, triplets) -> tuple:
    a = [index[t.anchor] for t in triplets]
    p = [index[t.positive] for t in triplets]
    n = [[index[j] for j in t.negatives] for t in triplets]
    neg = slice_(desc, np.array(n).reshape(-1))
    neg = reshape(neg, (len(triplets), len(n[0]), desc.shape[-1]))
    return slice_(desc, np.array(a)), slice_(desc, np.array(p)), neg


def _unique_ids(triplets) -> list:
    seen = {}
    for t in triplets:
        for i in (t.anchor, t.positive, *t.negatives):
            seen.setdefault(i, None)
    return list(seen)


def validation_recall(model: Model, dataset: Dataset, n: int = 1, split: str = "val") -> float:
    """recall@n of ``split`` queries against the database split (same place = correct)."""
    db_samples = dataset.split("database")
    queries = dataset.split(split)
    if not db_samples or not queries:
        return float("nan")
    db = DescriptorDatabase(
        describe(model, dataset.images([s.id for s in db_samples])),
        np.array([s.id for s in db_samples]),
        np.array([s.location for s in db_samples]),
        np.array([s.place_id for s in db_samples]),
    )
    qd = describe(model, dataset.images([s.id for s in queries]))
    gt = ground_truth_by_place(db, [s.place_id for s in queries])
    results = [knn_search(db, q, min(n, db.size)) for q in qd]
    return recall_at_n(results, gt, n)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteError(f"loss became non-finite at step {step}")


# -- teacher ------------------------------------------------------------------------

def train_teacher(dataset: Dataset, config: TrainConfig, model_config: TeacherConfig | None = None,
                  log=None, init: Model | None = None) -> tuple[Model, list]:
    """Minimise the triplet loss on teacher descriptors; returns (model, log records)."""
    model = init or build_model("teacher", model_config, seed=config.seed)
    records = _fit(model, dataset, config, log, teacher=None)
    return model, records


def distill_student(dataset: Dataset, teacher: Model, config: TrainConfig,
                    model_config: StudentConfig | None = None, log=None,
                    init: Model | None = None) -> tuple[Model, list]:
    """Train a student on L_hard + L_soft + L_cm against a frozen teacher."""
    student = init or build_model("student", model_config, seed=config.seed)
    if student.width != teacher.width:
        raise ShapeError(f"student width {student.width} != teacher width {teacher.width}")
    records = _fit(student, dataset, config, log, teacher=teacher)
    return student, records


def _teacher_table(teacher: Model, dataset: Dataset) -> tuple[np.ndarray, dict]:
    ids = [s.id for s in dataset.samples]
    table = describe(teacher, dataset.images(ids))
    return table, {i: k for k, i in enumerate(ids)}


def _assert_frozen(teacher: Model) -> None:
    for name, p in teacher.params.items():
        if p.grad is not None and np.any(p.grad != 0):
            raise FrozenTeacherError(f"teacher parameter {name} received a gradient")


def mean_teacher_distance(student: Model, teacher_table: np.ndarray, row: dict, samples) -> float:
    ids = [s.id for s in samples]
    if not ids:
        return float("nan")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    s = describe(student, images)
    t = teacher_table[[row[i] for i in ids]]
    return float(((s - t) ** 2).sum(axis=1).mean())


def _fit(model: Model, dataset: Dataset, config: TrainConfig, sink, teacher: Model | None) -> list:
    log = _Log(sink)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    spec = config.triplet_spec()
    distilling = teacher is not None
    if distilling:
        t_table, t_row = _teacher_table(teacher, dataset)
        held_out = dataset.split("val")
    step = 0

    def epoch_record(epoch_done: int, lr: float, losses: list) -> dict:
        rec = {
            "kind": "epoch",
            "epoch": epoch_done,
            "lr": lr,
            "val_recall@1": validation_recall(model, dataset),
        }
        if losses:
            rec.update({k: float(np.mean([r[k] for r in losses])) for k in ("L_hard", "L_soft", "L_cm", "L_total")})
        if distilling:
            rec["val_mean_d_st"] = mean_teacher_distance(model, t_table, t_row, held_out)
        return rec

    log.emit(epoch_record(0, config.lr_at(0), []))
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        mining = mine_triplets(dataset, spec, seed=config.seed * 100_003 + epoch)
        triplets = [mining[i] for i in rng.permutation(len(mining))]
        step_records = []
        for batch in _batches(triplets, config.batch_size):
            step += 1
            ids = _unique_ids(batch)
            index = {i: k for k, i in enumerate(ids)}
            model.zero_grad()
            desc = model(dataset.images(ids))
            s_a, s_p, s_n = _gather(desc, index, batch)
            if distilling:
                t_desc = Tensor(t_table[[t_row[i] for i in ids]])
                t_a, t_p, t_n = _gather(t_desc, index, batch)
                emb = TripletEmbeddings(s_a, s_p, s_n, t_a, t_p, t_n, margin=config.margin)
                loss, parts = total_loss(emb, config.mask, weights=config.loss_weights, metric=config.metric)
                values = parts.as_dict()
            else:
                emb = TripletEmbeddings(s_a, s_p, s_n, margin=config.margin)
                loss = triplet_loss(emb, config.metric)
                values = {"L_hard": loss.item(), "L_soft": 0.0, "L_cm": 0.0, "L_total": loss.item()}
            _check_finite(values["L_total"], step)
            if loss.requires_grad:
                loss.backward()
            if distilling:
                _assert_frozen(teacher)
            grads = {k: p.grad for k, p in model.params.items()}
            adam_step(model.params, grads, state, lr, config.weight_decay)
            rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr, **values, "val_recall@1": None}
            step_records.append(rec)
            log.emit(rec)
        log.emit(epoch_record(epoch + 1, lr, step_records))
        logger.info("epoch %d lr=%.3g recall@1=%.3f", epoch + 1, lr, log.records[-1]["val_recall@1"])
    model.zero_grad()
    return log.records


# -- ablation over cross-metric masks ------------------------------------------------

ABLATION_VARIANTS = {
    "hard+soft": CrossTermMask(),
    "hard+soft+d1d2": CrossTermMask(True, True),
    "hard+soft+d1d2d3d4": CrossTermMask(True, True, True, True),
}


def final_recall(records: list) -> float:
    return [r for r in records if r["kind"] == "epoch"][-1]["val_recall@1"]


def mask_ablation(dataset: Dataset, teacher: Model, config: TrainConfig,
                  variants: dict | None = None, model_config: StudentConfig | None = None) -> dict:
    """Distil one student per mask from the same init and mining seed.

    Returns ``{variant: final validation recall@1}``.
    """
    variants = variants or ABLATION_VARIANTS
    out = {}
    for name, mask in variants.items():
        _, records = distill_student(dataset, teacher, replace(config, mask=mask), model_config)
        out[name] = final_recall(records)
    return out
