"""Triplet, soft-target and cross-metric distillation losses.

Notation: ``s_*`` are student descriptors, ``t_*`` teacher descriptors, for
anchor (a), positive (p) and negatives (n).  Teacher descriptors are always
detached: no gradient ever reaches the teacher.

Batch conventions:

* anchors/positives are (B, w), negatives (B, k, w); a single triplet with
  (w,) vectors is promoted to B = 1, k = 1;
* every loss is averaged over the batch and over the k negatives, so the
  three terms of the total loss stay on the same scale.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, concat, mean, relu, reshape, sqrt, square

DEFAULT_MARGIN = 0.1


def distance(x: Tensor, y: Tensor, metric: str = "squared") -> Tensor:
    """Squared (default) or plain Euclidean distance along the last axis."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if not isinstance(y, Tensor):
        y = Tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ShapeError(f"distance: widths {x.shape[-1]} and {y.shape[-1]} differ")
    sq = square(x - y).sum(axis=-1)
    if metric == "squared":
        return sq
    if metric == "euclidean":
        return sqrt(sq)
    raise ConfigError(f"unknown distance metric {metric!r}")


@dataclass(frozen=True)
class CrossTermMask:
    d1_sa_tp: bool = False
    d2_sp_ta: bool = False
    d3_sa_tn: bool = False
    d4_sn_ta: bool = False

    def __post_init__(self):
        if (self.d3_sa_tn or self.d4_sn_ta) and not (self.d1_sa_tp or self.d2_sp_ta):
            raise ConfigError("a push term (d3/d4) needs at least one pull term (d1/d2)")

    @classmethod
    def parse(cls, text: str) -> "CrossTermMask":
        """From ``"d1,d2"`` style text; empty string or ``"none"`` means no terms."""
        names = [t.strip().lower() for t in text.split(",") if t.strip()]
        if names == ["none"]:
            names = []
        allowed = {"d1", "d2", "d3", "d4"}
        bad = sorted(set(names) - allowed)
        if bad:
            raise ConfigError(f"unknown cross-metric terms {bad}; use d1..d4")
        return cls(*(f"d{i}" in names for i in range(1, 5)))

    def __str__(self) -> str:
        on = [f"d{i + 1}" for i, v in enumerate(self.flags) if v]
        return ",".join(on) or "none"

    @property
    def flags(self) -> tuple:
        return (self.d1_sa_tp, self.d2_sp_ta, self.d3_sa_tn, self.d4_sn_ta)

    @property
    def has_push(self) -> bool:
        return self.d3_sa_tn or self.d4_sn_ta

    @property
    def empty(self) -> bool:
        return not any(self.flags)


NO_CROSS = CrossTermMask()
PULL_ONLY = CrossTermMask(True, True)
ALL_FOUR = CrossTermMask(True, True, True, True)


@dataclass
class TripletEmbeddings:
    s_a: Tensor
    s_p: Tensor
    s_n: Tensor
    t_a: Tensor | None = None
    t_p: Tensor | None = None
    t_n: Tensor | None = None
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        self.s_a, self.s_p, self.s_n = _batched(self.s_a, self.s_p, self.s_n)
        if self.t_a is not None:
            t = _batched(self.t_a, self.t_p, self.t_n)
            self.t_a, self.t_p, self.t_n = (x.detach() for x in t)
            if self.t_n.shape != self.s_n.shape or self.t_a.shape != self.s_a.shape:
                raise ShapeError(
                    f"teacher/student shapes differ: {self.t_a.shape} vs {self.s_a.shape}, "
                    f"{self.t_n.shape} vs {self.s_n.shape}"
                )

    @property
    def has_teacher(self) -> bool:
        return self.t_a is not None

    def __len__(self) -> int:
        return self.s_a.shape[0]


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _batched(a, p, n):
    a, p, n = _as_t(a), _as_t(p), _as_t(n)
    if a.ndim == 1:
        a = reshape(a, (1, -1))
        p = reshape(p, (1, -1))
        n = reshape(n, (1, 1, -1)) if n.ndim == 1 else reshape(n, (1,) + n.shape)
    elif n.ndim == 2:
        n = reshape(n, (n.shape[0], 1, n.shape[1]))
    if a.shape != p.shape or a.ndim != 2 or n.ndim != 3 or n.shape[0] != a.shape[0] or n.shape[2] != a.shape[1]:
        raise ShapeError(f"triplet shapes inconsistent: a={a.shape} p={p.shape} n={n.shape}")
    return a, p, n


def merge(batch: Sequence[TripletEmbeddings]) -> TripletEmbeddings:
    """Stack single triplets (same negative count and margin) into one batch."""
    if isinstance(batch, TripletEmbeddings):
        return batch
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    if len(batch) == 1:
        return batch[0]
    margins = {e.margin for e in batch}
    if len(margins) != 1:
        raise ConfigError(f"triplets carry different margins: {sorted(margins)}")
    teacher = all(e.has_teacher for e in batch)

    def cat(attr):
        return concat([getattr(e, attr) for e in batch], axis=0)

    return TripletEmbeddings(
        cat("s_a"), cat("s_p"), cat("s_n"),
        cat("t_a") if teacher else None,
        cat("t_p") if teacher else None,
        cat("t_n") if teacher else None,
        margin=margins.pop(),
    )


def _pair(a: Tensor, n: Tensor, metric: str) -> Tensor:
    # a (B, w) against every negative in n (B, k, w) -> (B, k)
    return distance(reshape(a, (a.shape[0], 1, a.shape[1])), n, metric)


def _need_teacher(e: TripletEmbeddings, name: str) -> None:
    if not e.has_teacher:
        raise ConfigError(f"{name} needs teacher embeddings")


def triplet_loss(e, metric: str = "squared") -> Tensor:
    """Student-only hinge: max(d(Sa,Sp) - d(Sa,Sn) + m, 0)."""
    e = merge(e)
    pos = reshape(distance(e.s_a, e.s_p, metric), (len(e), 1))
    neg = _pair(e.s_a, e.s_n, metric)
    return mean(relu(pos - neg + e.margin))


def soft_kd_loss(batch, metric: str = "squared") -> Tensor:
    """d(Sa,Ta) + d(Sp,Tp) + d(Sn,Tn) per triplet, averaged over the batch."""
    if isinstance(batch, (list, tuple)) and not batch:
        warnings.warn("soft_kd_loss on an empty batch is zero", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    e = merge(batch)
    _need_teacher(e, "soft_kd_loss")
    da = distance(e.s_a, e.t_a, metric)
    dp = distance(e.s_p, e.t_p, metric)
    dn = distance(e.s_n, e.t_n, metric).mean(axis=1)
    return mean(da + dp + dn)


def cross_metric_loss(batch, mask: CrossTermMask = PULL_ONLY, margin: float | None = None,
                      metric: str = "squared") -> Tensor:
    """Student-teacher cross distances selected by ``mask``.

    With a push term enabled the per-triplet hinge
    max(sum(pull) - sum(push) + m, 0) is used; with pull terms only, the
    plain sum of the pull distances.
    """
    if not isinstance(mask, CrossTermMask):
        raise ConfigError(f"mask must be a CrossTermMask, got {mask!r}")
    e = merge(batch)
    if mask.empty:
        return Tensor(0.0)
    _need_teacher(e, "cross_metric_loss")
    m = e.margin if margin is None else margin
    B = len(e)
    pull = None
    if mask.d1_sa_tp:
        pull = distance(e.s_a, e.t_p, metric)
    if mask.d2_sp_ta:
        d2 = distance(e.s_p, e.t_a, metric)
        pull = d2 if pull is None else pull + d2
    if not mask.has_push:
        return mean(pull)
    push = None
    if mask.d3_sa_tn:
        push = _pair(e.s_a, e.t_n, metric)
    if mask.d4_sn_ta:
        d4 = _pair(e.t_a, e.s_n, metric)
        push = d4 if push is None else push + d4
    return mean(relu(reshape(pull, (B, 1)) - push + m))


@dataclass(frozen=True)
class LossBreakdown:
    hard: float
    soft: float
    cm: float
    total: float

    def as_dict(self) -> dict:
        return {"L_hard": self.hard, "L_soft": self.soft, "L_cm": self.cm, "L_total": self.total}

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.as_dict()})


def total_loss(batch, mask: CrossTermMask = PULL_ONLY, margin: float | None = None,
               weights: Sequence[float] = (1.0, 1.0, 1.0), metric: str = "squared"):
    """L_hard + L_soft + L_cm (optionally weighted); returns (loss, breakdown)."""
    e = merge(batch)
    if margin is not None and margin != e.margin:
        e = TripletEmbeddings(e.s_a, e.s_p, e.s_n, e.t_a, e.t_p, e.t_n, margin=margin)
    w_hard, w_soft, w_cm = (float(w) for w in weights)
    hard = triplet_loss(e, metric)
    soft = soft_kd_loss(e, metric) if w_soft else Tensor(0.0)
    cm = cross_metric_loss(e, mask, metric=metric) if w_cm else Tensor(0.0)
    total = hard * w_hard + soft * w_soft + cm * w_cm
    return total, LossBreakdown(hard.item(), soft.item(), cm.item(), total.item())
