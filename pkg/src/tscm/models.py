"""Toy-scale teacher and student networks and their checkpoint format.

Teacher: a three-stage conv backbone (the ResNet stand-in) feeds a token
branch; a patch-embedding transformer block stands in for the ViT.  The
inter-transformer fuses both token sequences and the descriptor is the
concatenation of per-branch NetVLAD heads (inter, resnet, vit).

Student: the same style of backbone, its resnet-token branch, and a single
conv layer replacing both the ViT and the inter-transformer.

Both accept a single image (C, H, W) or a batch (B, C, H, W) and return
unit-norm descriptors of shape (width,) or (B, width).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, ShapeError, VersionMismatchError
from .layers import (
    ConvSpec,
    CrossAttentionSpec,
    FFNSpec,
    InterTransformerSpec,
    LinearSpec,
    NetVLADSpec,
    Params,
    conv_block,
    count_params,
    cross_attention,
    ffn_residual,
    inter_transformer_encode,
    linear,
    netvlad,
    prefixed,
    sub_params,
)
from .tensor import Tensor, avg_pool2d, concat, l2_normalize, reshape, transpose


@dataclass(frozen=True)
class TeacherConfig:
    image_size: int = 32
    channels: int = 3
    stage_channels: tuple = (8, 16, 16)
    use_resnet_branch: bool = True
    drop_last_stage: bool = True
    use_inter_encoder: bool = True
    tokens: int = 16
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    clusters: int = 8
    inter_width: int = 48
    mid_feature_width: int = 24
    vit_width: int = 24

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        _check_common(self)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.grid:
            raise ConfigError(f"image_size {self.image_size} not divisible by token grid {self.grid}")

    @property
    def grid(self) -> int:
        return math.isqrt(self.tokens)

    @property
    def branch_widths(self) -> dict:
        widths = {"inter": self.inter_width}
        if self.use_resnet_branch:
            widths["resnet"] = self.mid_feature_width
        widths["vit"] = self.vit_width
        return widths

    @property
    def descriptor_width(self) -> int:
        return sum(self.branch_widths.values())


@dataclass(frozen=True)
class StudentConfig:
    image_size: int = 32
    channels: int = 3
    stage_channels: tuple = (8, 16, 16)
    drop_last_stage: bool = True
    tokens: int = 16
    d_model: int = 16
    conv_channels: int = 16
    clusters: int = 8
    resnet_width: int = 48
    conv_width: int = 48

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        _check_common(self)

    @property
    def grid(self) -> int:
        return math.isqrt(self.tokens)

    @property
    def branch_widths(self) -> dict:
        return {"resnet": self.resnet_width, "conv": self.conv_width}

    @property
    def descriptor_width(self) -> int:
        return self.resnet_width + self.conv_width


def _check_common(cfg) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool) or f.name == "stage_channels":
            continue
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ConfigError(f"{type(cfg).__name__}.{f.name} must be a positive integer, got {v!r}")
    if len(cfg.stage_channels) != 3 or any(c <= 0 for c in cfg.stage_channels):
        raise ConfigError(f"stage_channels needs three positive entries, got {cfg.stage_channels}")
    g = math.isqrt(cfg.tokens)
    if g * g != cfg.tokens:
        raise ConfigError(f"tokens must be a perfect square, got {cfg.tokens}")
    feat = cfg.image_size // (4 if cfg.drop_last_stage else 8)
    if cfg.image_size % 8 or feat % g:
        raise ConfigError(
            f"image_size {cfg.image_size} incompatible with {cfg.tokens} tokens "
            f"(drop_last_stage={cfg.drop_last_stage})"
        )


def _backbone_specs(cfg) -> dict:
    c1, c2, c3 = cfg.stage_channels
    specs = {"stage1": ConvSpec(cfg.channels, c1), "stage2": ConvSpec(c1, c2)}
    if not cfg.drop_last_stage:
        specs["stage3"] = ConvSpec(c2, c3)
    return specs


def _feature_channels(cfg) -> int:
    return cfg.stage_channels[1] if cfg.drop_last_stage else cfg.stage_channels[2]


def _backbone(x: Tensor, cfg, p: Params) -> Tensor:
    """Selected stage activations; each stage is conv + ReLU + 2x2 average pool."""
    h = avg_pool2d(conv_block(x, sub_params(p, "stage1")), 2)
    h = avg_pool2d(conv_block(h, sub_params(p, "stage2")), 2)
    if not cfg.drop_last_stage:
        h = avg_pool2d(conv_block(h, sub_params(p, "stage3")), 2)
    return h


def _to_tokens(fmap: Tensor, grid: int) -> Tensor:
    B, C, H, _ = fmap.shape
    if H != grid:
        fmap = avg_pool2d(fmap, H // grid)
    return transpose(reshape(fmap, (B, C, grid * grid)), (0, 2, 1))


def _patchify(x: Tensor, grid: int) -> Tensor:
    B, C, H, W = x.shape
    ph = H // grid
    z = reshape(x, (B, C, grid, ph, grid, ph))
    z = transpose(z, (0, 2, 4, 1, 3, 5))
    return reshape(z, (B, grid * grid, C * ph * ph))


def _as_batch(images, cfg) -> tuple[Tensor, bool]:
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=np.float64))
    single = images.ndim == 3
    if single:
        images = reshape(images, (1,) + images.shape)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ShapeError(f"expected images of shape {want} (optionally batched), got {images.shape}")
    return images, single


# -- teacher -------------------------------------------------------------------

def teacher_specs(cfg: TeacherConfig) -> dict:
    patch_dim = cfg.channels * (cfg.image_size // cfg.grid) ** 2
    inter_in = 2 * cfg.d_model
    specs = {f"backbone.{k}": v for k, v in _backbone_specs(cfg).items()}
    specs["res_tokens"] = LinearSpec(_feature_channels(cfg), cfg.d_model)
    specs["vit.embed"] = LinearSpec(patch_dim, cfg.d_model)
    specs["vit.att"] = CrossAttentionSpec(cfg.d_model, cfg.n_heads)
    specs["vit.ffn"] = FFNSpec(cfg.d_model, cfg.d_ff)
    if cfg.use_inter_encoder:
        specs["inter"] = InterTransformerSpec(cfg.d_model, cfg.n_heads, cfg.d_ff)
    specs["head.inter"] = NetVLADSpec(inter_in, cfg.clusters, cfg.inter_width)
    if cfg.use_resnet_branch:
        specs["head.resnet"] = NetVLADSpec(cfg.d_model, cfg.clusters, cfg.mid_feature_width)
    specs["head.vit"] = NetVLADSpec(cfg.d_model, cfg.clusters, cfg.vit_width)
    return specs


def student_specs(cfg: StudentConfig) -> dict:
    specs = {f"backbone.{k}": v for k, v in _backbone_specs(cfg).items()}
    specs["res_tokens"] = LinearSpec(_feature_channels(cfg), cfg.d_model)
    specs["conv_branch"] = ConvSpec(_feature_channels(cfg), cfg.conv_channels)
    specs["head.resnet"] = NetVLADSpec(cfg.d_model, cfg.clusters, cfg.resnet_width)
    specs["head.conv"] = NetVLADSpec(cfg.conv_channels, cfg.clusters, cfg.conv_width)
    return specs


def _init_from_specs(specs: dict, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in specs.items():
        params.update(prefixed(name, spec.init(rng)))
    return params


def init_teacher(cfg: TeacherConfig, seed: int = 0) -> Params:
    params = _init_from_specs(teacher_specs(cfg), seed)
    grid = cfg.grid
    # learned position embedding, sinusoidal start
    params["vit.pos"] = Tensor(0.1 * _position_code(grid * grid, cfg.d_model), requires_grad=True)
    return params


def init_student(cfg: StudentConfig, seed: int = 0) -> Params:
    return _init_from_specs(student_specs(cfg), seed)


def _position_code(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(100.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _check_params(params: Params, expected: Params, kind: str) -> None:
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(f"{kind} parameters do not match config: missing={missing} extra={extra}")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise ConfigError(f"{kind} parameter {k} has shape {params[k].shape}, config wants {v.shape}")


def teacher_forward(images, cfg: TeacherConfig, params: Params) -> Tensor:
    x, single = _as_batch(images, cfg)
    fmap = _backbone(x, cfg, sub_params(params, "backbone"))
    f_res = linear(_to_tokens(fmap, cfg.grid), sub_params(params, "res_tokens"))

    patches = _patchify(x, cfg.grid)
    v = linear(patches, sub_params(params, "vit.embed")) + params["vit.pos"]
    att = cross_attention(v, v, sub_params(params, "vit.att"), cfg.n_heads)
    f_vit = ffn_residual(att, v, sub_params(params, "vit.ffn"))

    if cfg.use_inter_encoder:
        f_inter = inter_transformer_encode(f_res, f_vit, sub_params(params, "inter"), cfg.n_heads)
    else:
        f_inter = concat([f_res, f_vit], axis=-1)

    parts = [netvlad(f_inter, sub_params(params, "head.inter"))]
    if cfg.use_resnet_branch:
        parts.append(netvlad(f_res, sub_params(params, "head.resnet")))
    parts.append(netvlad(f_vit, sub_params(params, "head.vit")))
    out = l2_normalize(concat(parts, axis=-1), axis=-1)
    return reshape(out, (out.shape[-1],)) if single else out


def student_forward(images, cfg: StudentConfig, params: Params) -> Tensor:
    x, single = _as_batch(images, cfg)
    fmap = _backbone(x, cfg, sub_params(params, "backbone"))
    f_res = linear(_to_tokens(fmap, cfg.grid), sub_params(params, "res_tokens"))
    f_conv = _to_tokens(conv_block(fmap, sub_params(params, "conv_branch")), cfg.grid)
    parts = [
        netvlad(f_res, sub_params(params, "head.resnet")),
        netvlad(f_conv, sub_params(params, "head.conv")),
    ]
    out = l2_normalize(concat(parts, axis=-1), axis=-1)
    return reshape(out, (out.shape[-1],)) if single else out


# -- model wrapper --------------------------------------------------------------

@dataclass
class Model:
    """A configuration plus its parameters; callable on images."""

    kind: str
    config: object
    params: Params = field(repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")

    def __call__(self, images) -> Tensor:
        return _KINDS[self.kind][1](images, self.config, self.params)

    @property
    def width(self) -> int:
        return self.config.descriptor_width

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return count_params(self.params)

    def digest(self) -> str:
        """SHA-256 over kind, config and parameter bytes."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(json.dumps(_config_dict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()


def _validate_teacher(cfg, params):
    expected = init_teacher(cfg, 0)
    _check_params(params, expected, "teacher")


def _validate_student(cfg, params):
    _check_params(params, init_student(cfg, 0), "student")


_KINDS = {
    "teacher": (TeacherConfig, teacher_forward, init_teacher, _validate_teacher),
    "student": (StudentConfig, student_forward, init_student, _validate_student),
}


def build_model(kind: str, config=None, seed: int = 0) -> Model:
    if kind not in _KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    cfg_cls, _, init, _ = _KINDS[kind]
    config = config or cfg_cls()
    return Model(kind, config, init(config, seed))


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    d["stage_channels"] = list(d["stage_channels"])
    return d


def config_from_dict(kind: str, d: dict):
    if kind not in _KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    cls = _KINDS[kind][0]
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {kind} config keys: {unknown}")
    return cls(**d)


# -- checkpoints -------------------------------------------------------------------
#
# layout: b"TSCMCKPT" | u32 version | u64 header_len | header JSON (utf-8)
#         | float64 little-endian payload, tensors back to back in header order

CKPT_MAGIC = b"TSCMCKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path, model: Model) -> str:
    """Write ``model`` to ``path`` and return its digest."""
    entries, offset, blobs = [], 0, []
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    digest = model.digest()
    header = json.dumps(
        {"kind": model.kind, "config": _config_dict(model.config), "tensors": entries, "digest": digest},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return digest


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: too short to be a checkpoint")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError("checkpoint", version, CKPT_VERSION)
    start = _CKPT_PREFIX.size
    if len(raw) < start + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    payload = memoryview(raw)[start + hlen:]
    params = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["nbytes"] != n:
            raise IntegrityError(f"{path}: tensor {e['name']} byte count disagrees with its shape")
        if e["offset"] + n > len(payload):
            raise FormatError(f"{path}: truncated payload for tensor {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + n], dtype="<f8").reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)
    kind = header["kind"]
    cfg = config_from_dict(kind, header["config"])
    _KINDS[kind][3](cfg, params)
    model = Model(kind, cfg, params)
    if model.digest() != header["digest"]:
        raise IntegrityError(f"{path}: checkpoint digest mismatch")
    return model
