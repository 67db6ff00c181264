"""Network building blocks: linear and conv stubs, cross attention, the
residual feed-forward block, the two-branch inter-transformer encoder and
NetVLAD aggregation with its projection head.

Layers are plain functions over parameter dictionaries (``name -> Tensor``).
Each ``*Spec`` dataclass knows how to initialise its own dictionary;
:func:`init_params` dispatches on the spec type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    NORM_EPS,
    Tensor,
    clamped_normalize,
    concat,
    conv2d,
    l2_normalize,
    matmul,
    relu,
    reshape,
    softmax,
    swapaxes,
    transpose,
)

Params = dict  # str -> Tensor


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _positive(**dims):
    for name, v in dims.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class LinearSpec:
    d_in: int
    d_out: int
    bias: bool = True

    def init(self, rng):
        _positive(d_in=self.d_in, d_out=self.d_out)
        p = {"w": he_uniform(rng, (self.d_in, self.d_out), self.d_in)}
        if self.bias:
            p["b"] = zeros(self.d_out)
        return p


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    kernel: int = 3

    def init(self, rng):
        _positive(c_in=self.c_in, c_out=self.c_out, kernel=self.kernel)
        fan_in = self.c_in * self.kernel * self.kernel
        return {
            "w": he_uniform(rng, (self.c_out, self.c_in, self.kernel, self.kernel), fan_in),
            "b": zeros(self.c_out),
        }


@dataclass(frozen=True)
class CrossAttentionSpec:
    d_model: int
    n_heads: int

    def init(self, rng):
        _positive(d_model=self.d_model, n_heads=self.n_heads)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        p = {}
        for name in ("q", "k", "v", "o"):
            p[f"w{name}"] = he_uniform(rng, (self.d_model, self.d_model), self.d_model)
            p[f"b{name}"] = zeros(self.d_model)
        return p


@dataclass(frozen=True)
class FFNSpec:
    d_model: int
    d_ff: int

    def init(self, rng):
        _positive(d_model=self.d_model, d_ff=self.d_ff)
        return {
            "w1": he_uniform(rng, (self.d_model, self.d_ff), self.d_model),
            "b1": zeros(self.d_ff),
            "w2": he_uniform(rng, (self.d_ff, self.d_model), self.d_ff),
            "b2": zeros(self.d_model),
        }


@dataclass(frozen=True)
class InterTransformerSpec:
    d_model: int
    n_heads: int
    d_ff: int

    def init(self, rng):
        att = CrossAttentionSpec(self.d_model, self.n_heads)
        ffn = FFNSpec(self.d_model, self.d_ff)
        p = {}
        for branch in ("res", "vit"):
            p.update(prefixed(f"{branch}.att", att.init(rng)))
            p.update(prefixed(f"{branch}.ffn", ffn.init(rng)))
        return p


@dataclass(frozen=True)
class NetVLADSpec:
    feature_size: int
    clusters: int
    d_output: int

    def init(self, rng):
        _positive(feature_size=self.feature_size, clusters=self.clusters, d_output=self.d_output)
        if self.clusters < 2:
            raise ConfigError(f"NetVLAD needs at least 2 clusters, got {self.clusters}")
        f, k = self.feature_size, self.clusters
        return {
            "assign_w": he_uniform(rng, (f, k), f),
            "assign_b": zeros(k),
            "centers": he_uniform(rng, (k, f), f),
            "proj_w": he_uniform(rng, (k * f, self.d_output), k * f),
            "proj_b": zeros(self.d_output),
        }


def init_params(spec, seed: int) -> Params:
    """Deterministic parameters for ``spec`` from ``seed``."""
    if not hasattr(spec, "init"):
        raise ConfigError(f"not a layer spec: {spec!r}")
    return spec.init(np.random.default_rng(seed))


def count_params(params) -> int:
    """Exact number of scalars in a parameter dict or a model."""
    if hasattr(params, "params"):
        params = params.params
    return int(sum(t.size for t in params.values()))


def prefixed(prefix: str, params: Params) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def sub_params(params: Params, prefix: str) -> Params:
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


# -- forward functions ---------------------------------------------------------

def linear(x: Tensor, p: Params) -> Tensor:
    y = matmul(x, p["w"]) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), p["w"]), (-1,))
    return y + p["b"] if "b" in p else y


def conv_block(x: Tensor, p: Params) -> Tensor:
    """3x3 same-padding convolution followed by ReLU."""
    k = p["w"].shape[-1]
    return relu(conv2d(x, p["w"], p["b"], padding=k // 2))


def cross_attention(x_q: Tensor, x_kv: Tensor, p: Params, n_heads: int, return_weights: bool = False):
    """Multi-head attention with queries from ``x_q`` and keys/values from ``x_kv``.

    Inputs are (t, d_model) or (B, t, d_model).
    """
    if x_q.shape != x_kv.shape:
        raise ShapeError(f"cross_attention: branch shapes {x_q.shape} and {x_kv.shape} differ")
    if x_q.ndim not in (2, 3):
        raise ShapeError(f"cross_attention expects (t, d) or (B, t, d), got {x_q.shape}")
    d = p["wq"].shape[0]
    if x_q.shape[-1] != d:
        raise ShapeError(f"cross_attention: input width {x_q.shape[-1]} != d_model {d}")
    if x_q.shape[-2] == 0:
        raise ShapeError("cross_attention: empty token sequence")
    if d % n_heads:
        raise ConfigError(f"d_model={d} not divisible by n_heads={n_heads}")
    single = x_q.ndim == 2
    if single:
        x_q = reshape(x_q, (1,) + x_q.shape)
        x_kv = reshape(x_kv, (1,) + x_kv.shape)
    B, t, _ = x_q.shape
    dk = d // n_heads

    def heads(z):
        return transpose(reshape(z, (B, t, n_heads, dk)), (0, 2, 1, 3))

    q = heads(linear(x_q, {"w": p["wq"], "b": p["bq"]}))
    k = heads(linear(x_kv, {"w": p["wk"], "b": p["bk"]}))
    v = heads(linear(x_kv, {"w": p["wv"], "b": p["bv"]}))
    weights = softmax(matmul(q, swapaxes(k, -1, -2)) / math.sqrt(dk), axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, t, d))
    out = linear(ctx, {"w": p["wo"], "b": p["bo"]})
    if single:
        out = reshape(out, (t, d))
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, p: Params) -> Tensor:
    return linear(relu(linear(x, {"w": p["w1"], "b": p["b1"]})), {"w": p["w2"], "b": p["b2"]})


def ffn_residual(f_att: Tensor, f_in: Tensor, p: Params) -> Tensor:
    """FFN(f_att + f_in) + f_att + f_in."""
    if f_att.shape != f_in.shape:
        raise ShapeError(f"ffn_residual: shapes {f_att.shape} and {f_in.shape} differ")
    s = f_att + f_in
    return feed_forward(s, p) + s


def inter_transformer_encode(f_res: Tensor, f_vit: Tensor, p: Params, n_heads: int) -> Tensor:
    """Each branch attends to the other; outputs concatenated on the feature axis."""
    if f_res.shape != f_vit.shape:
        raise ShapeError(f"inter-transformer: branch shapes {f_res.shape} and {f_vit.shape} differ")
    res_att = cross_attention(f_res, f_vit, sub_params(p, "res.att"), n_heads)
    res_itf = ffn_residual(res_att, f_res, sub_params(p, "res.ffn"))
    vit_att = cross_attention(f_vit, f_res, sub_params(p, "vit.att"), n_heads)
    vit_itf = ffn_residual(vit_att, f_vit, sub_params(p, "vit.ffn"))
    return concat([res_itf, vit_itf], axis=-1)


def _basis_guard(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    # rows with vanishing norm are replaced by e_0; they carry no gradient
    norm = np.sqrt((x.data * x.data).sum(axis=-1))
    dead = norm < eps
    if not np.any(dead):
        return x
    out = x.data.copy()
    out[dead] = 0.0
    out[dead, 0] = 1.0

    def backward(g):
        g = g.copy()
        g[dead] = 0.0
        return (g,)

    return Tensor._result(out, (x,), backward, "basis_guard")


def vlad_aggregate(features: Tensor, p: Params) -> Tensor:
    """Flattened, intra- and globally normalised VLAD vector.

    ``features`` is (t, F) or (B, t, F); the result is (K*F,) or (B, K*F).
    """
    if features.ndim not in (2, 3):
        raise ShapeError(f"netvlad expects (t, F) or (B, t, F), got {features.shape}")
    if features.shape[-2] == 0:
        raise ShapeError("netvlad: empty feature set")
    f = p["centers"].shape[1]
    if features.shape[-1] != f:
        raise ShapeError(f"netvlad: feature width {features.shape[-1]} != feature_size {f}")
    single = features.ndim == 2
    if single:
        features = reshape(features, (1,) + features.shape)
    B = features.shape[0]
    k = p["centers"].shape[0]
    assign = softmax(matmul(features, p["assign_w"]) + p["assign_b"], axis=-1)  # B,t,K
    assign_t = swapaxes(assign, 1, 2)  # B,K,t
    weighted = matmul(assign_t, features)  # B,K,F
    mass = reshape(assign.sum(axis=1), (B, k, 1))
    vlad = weighted - mass * p["centers"]
    vlad = clamped_normalize(vlad, axis=-1)
    flat = _basis_guard(reshape(vlad, (B, k * f)))
    flat = l2_normalize(flat, axis=-1)
    return reshape(flat, (k * f,)) if single else flat


def netvlad(features: Tensor, p: Params) -> Tensor:
    """VLAD aggregation, linear projection and final L2 normalisation."""
    flat = vlad_aggregate(features, p)
    return l2_normalize(linear(flat, {"w": p["proj_w"], "b": p["proj_b"]}), axis=-1)
