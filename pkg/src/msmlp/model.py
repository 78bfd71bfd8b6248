"""Four-stage MS-MLP pyramid: specs, presets, parameters, forward pass, checkpoints."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .mixshift import (
    BranchParams,
    MixShiftParams,
    MixShiftSpec,
    init_params as init_mixshift,
    mix_shift_forward,
    trunc_normal,
)
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    mixshift: MixShiftSpec
    mlp_ratio: int = 4
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        if self.channels < self.mixshift.S:
            raise ValueError(f"{self.channels} channels cannot form {self.mixshift.S} groups")


@dataclass(frozen=True)
class StageSpec:
    patch_ratio: int
    out_channels: int
    num_blocks: int
    mixshift: MixShiftSpec
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.patch_ratio not in (2, 4):
            raise ValueError(f"patch_ratio must be 2 or 4, got {self.patch_ratio}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.out_channels < self.mixshift.S:
            raise ValueError(f"{self.out_channels} channels cannot form {self.mixshift.S} groups")


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple
    image_size: int = 224
    in_channels: int = 3
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a model needs at least one stage")
        total = 1
        for st in self.stages:
            total *= st.patch_ratio
        if self.image_size % total:
            raise ValueError(f"image_size {self.image_size} not divisible by total patch ratio {total}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be positive")

    @property
    def depth(self) -> int:
        return sum(st.num_blocks for st in self.stages)

    def resolutions(self, image_size: Optional[int] = None) -> list[int]:
        """Token grid side length of each stage."""
        res = image_size or self.image_size
        out = []
        for st in self.stages:
            res //= st.patch_ratio
            out.append(res)
        return out

    def drop_path_schedule(self) -> list[float]:
        """Per-block rates, linear in depth from 0 to ``drop_path_rate``."""
        return [float(v) for v in np.linspace(0.0, self.drop_path_rate, self.depth)]

    def block_specs(self) -> list[list[BlockSpec]]:
        rates = iter(self.drop_path_schedule())
        return [
            [BlockSpec(st.out_channels, st.mixshift, st.mlp_ratio, next(rates)) for _ in range(st.num_blocks)]
            for st in self.stages
        ]

    def with_image_size(self, image_size: int) -> "ModelSpec":
        return replace(self, image_size=image_size)

    def to_dict(self) -> dict:
        schedule = self.drop_path_schedule()
        stages = []
        k = 0
        for st in self.stages:
            k += st.num_blocks
            stages.append({
                "p": st.patch_ratio,
                "c": st.out_channels,
                "blocks": st.num_blocks,
                "mlp_ratio": st.mlp_ratio,
                "mixshift": st.mixshift.to_dict(),
                "drop_path_max": schedule[k - 1],
            })
        return {
            "name": self.name,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "drop_path_rate": self.drop_path_rate,
            "stages": stages,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelSpec":
        stages = [
            StageSpec(
                patch_ratio=int(s["p"]),
                out_channels=int(s["c"]),
                num_blocks=int(s["blocks"]),
                mixshift=MixShiftSpec.from_dict(s["mixshift"]),
                mlp_ratio=int(s.get("mlp_ratio", 4)),
            )
            for s in obj["stages"]
        ]
        rate = obj.get("drop_path_rate")
        if rate is None:
            rate = max((float(s.get("drop_path_max", 0.0)) for s in obj["stages"]), default=0.0)
        return cls(
            stages=tuple(stages),
            image_size=int(obj.get("image_size", 224)),
            in_channels=int(obj.get("in_channels", 3)),
            num_classes=int(obj.get("num_classes", 1000)),
            drop_path_rate=float(rate),
            name=obj.get("name", "custom"),
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

D_DEFAULT = (0, 1, 2, 3, 4)
R_STAGES = ((1, 1, 3, 5, 7), (1, 3, 3, 5, 7), (1, 5, 5, 5, 7), (1, 7, 7, 7, 7))
PATCH_RATIOS = (4, 2, 2, 2)

_SIZES = {
    # name: (channels, blocks, max drop-path rate)
    "ms-mlp-t": ((96, 192, 384, 768), (3, 3, 9, 3), 0.2),
    "ms-mlp-s": ((96, 192, 384, 768), (3, 3, 27, 3), 0.3),
    "ms-mlp-b": ((128, 256, 512, 1024), (3, 3, 27, 3), 0.5),
    "ms-mlp-t-lite": ((96, 192, 384, 768), (2, 2, 6, 2), 0.2),
    "ms-mlp-s-lite": ((96, 192, 384, 768), (2, 2, 18, 2), 0.3),
    "ms-mlp-b-lite": ((128, 256, 512, 1024), (2, 2, 18, 2), 0.5),
}

# region sizes / distances shared by every stage of an ablation model
_ABLATIONS = {
    "ablation-local": ((1, 1, 1, 1, 1), (0, 1, 2, 3, 4)),
    "ablation-global": ((7, 7, 7, 7, 7), (0, 1, 2, 3, 4)),
    "ablation-isolated": ((1, 1, 3, 5, 7), (0, 2, 5, 10, 17)),
    "ablation-regional": ((1, 1, 3, 5, 7), (0, 1, 2, 3, 4)),
}


def _pyramid(name, channels, blocks, rate, r_per_stage, d_per_stage, **ms_kw) -> ModelSpec:
    stages = tuple(
        StageSpec(p, c, nb, MixShiftSpec(S=len(r), d=d, r=r, **ms_kw))
        for p, c, nb, r, d in zip(PATCH_RATIOS, channels, blocks, r_per_stage, d_per_stage)
    )
    return ModelSpec(stages=stages, image_size=224, in_channels=3, num_classes=1000,
                     drop_path_rate=rate, name=name)


def _tiny_desk(**ms_kw) -> ModelSpec:
    stages = (
        StageSpec(2, 16, 1, MixShiftSpec(S=4, d=(0, 1, 2, 3), r=(1, 1, 3, 5), **ms_kw)),
        StageSpec(2, 32, 1, MixShiftSpec(S=4, d=(0, 1, 2, 3), r=(1, 3, 3, 5), **ms_kw)),
    )
    return ModelSpec(stages=stages, image_size=32, in_channels=3, num_classes=8,
                     drop_path_rate=0.0, name="tiny-desk")


PRESET_NAMES = tuple(_SIZES) + tuple(_ABLATIONS) + ("tiny-desk",)


def preset(name: str, image_size: Optional[int] = None, num_classes: Optional[int] = None,
           **mixshift_overrides) -> ModelSpec:
    """Named architecture.  ``mixshift_overrides`` (e.g. ``conv_type="full"``)
    are applied to every stage's :class:`MixShiftSpec`."""
    if name in _SIZES:
        channels, blocks, rate = _SIZES[name]
        spec = _pyramid(name, channels, blocks, rate, R_STAGES, (D_DEFAULT,) * 4, **mixshift_overrides)
    elif name in _ABLATIONS:
        r, d = _ABLATIONS[name]
        channels, blocks, rate = _SIZES["ms-mlp-t"]
        spec = _pyramid(name, channels, blocks, rate, (r,) * 4, (d,) * 4, **mixshift_overrides)
    elif name == "tiny-desk":
        spec = _tiny_desk(**mixshift_overrides)
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if image_size is not None:
        spec = replace(spec, image_size=image_size)
    if num_classes is not None:
        spec = replace(spec, num_classes=num_classes)
    return spec


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    mix: MixShiftParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    def named(self, prefix: str = ""):
        return [
            (prefix + "norm1.gamma", self.norm1_gamma),
            (prefix + "norm1.beta", self.norm1_beta),
            *self.mix.named(prefix + "mix."),
            (prefix + "norm2.gamma", self.norm2_gamma),
            (prefix + "norm2.beta", self.norm2_beta),
            (prefix + "mlp.fc1.weight", self.fc1_weight),
            (prefix + "mlp.fc1.bias", self.fc1_bias),
            (prefix + "mlp.fc2.weight", self.fc2_weight),
            (prefix + "mlp.fc2.bias", self.fc2_bias),
        ]


@dataclass
class StageParams:
    embed_weight: Tensor
    embed_bias: Tensor
    blocks: list = field(default_factory=list)


@dataclass
class Model:
    spec: ModelSpec
    stages: list
    norm_gamma: Tensor
    norm_beta: Tensor
    head_weight: Tensor
    head_bias: Tensor

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for i, st in enumerate(self.stages):
            out[f"stages.{i}.embed.weight"] = st.embed_weight
            out[f"stages.{i}.embed.bias"] = st.embed_bias
            for k, bp in enumerate(st.blocks):
                out.update(bp.named(f"stages.{i}.blocks.{k}."))
        out["norm.gamma"] = self.norm_gamma
        out["norm.beta"] = self.norm_beta
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def flat_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters()])


def _ones(n, dtype):
    return Tensor(np.ones(n, dtype=dtype), requires_grad=True)


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def _linear_w(rng, out_f, in_f, dtype):
    return Tensor(trunc_normal(rng, (out_f, in_f), 0.02, dtype), requires_grad=True)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> Model:
    """Allocate and initialise every parameter deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    stages = []
    c_in = spec.in_channels
    for st, blocks in zip(spec.stages, spec.block_specs()):
        c = st.out_channels
        sp = StageParams(_linear_w(rng, c, st.patch_ratio ** 2 * c_in, dtype), _zeros(c, dtype))
        for bs in blocks:
            hidden = bs.mlp_ratio * c
            sp.blocks.append(BlockParams(
                norm1_gamma=_ones(c, dtype),
                norm1_beta=_zeros(c, dtype),
                mix=init_mixshift(bs.mixshift, c, rng, 0.02, dtype),
                norm2_gamma=_ones(c, dtype),
                norm2_beta=_zeros(c, dtype),
                fc1_weight=_linear_w(rng, hidden, c, dtype),
                fc1_bias=_zeros(hidden, dtype),
                fc2_weight=_linear_w(rng, c, hidden, dtype),
                fc2_bias=_zeros(c, dtype),
            ))
        stages.append(sp)
        c_in = c
    model = Model(
        spec=spec,
        stages=stages,
        norm_gamma=_ones(c_in, dtype),
        norm_beta=_zeros(c_in, dtype),
        head_weight=_linear_w(rng, spec.num_classes, c_in, dtype),
        head_bias=_zeros(spec.num_classes, dtype),
    )
    names = model.named_parameters()
    for name, t in names.items():
        t.name = name
    return model


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def patch_embed(x: Tensor, p: int, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Non-overlapping ``p x p`` patches, flattened and linearly projected."""
    flat = ops.patchify(x, p) if p > 1 else x
    return ops.channel_linear(flat, weight, bias)


def drop_path(x: Tensor, rate: float, train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Zero the whole branch per sample with probability ``rate``, else scale by 1/(1-rate)."""
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in train mode needs a random generator")
    keep = rng.random(x.shape[0]) >= rate
    return ops.scale_samples(x, keep / (1.0 - rate))


def ms_block_forward(x: Tensor, block: BlockSpec, params: BlockParams, train_mode: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """``Z = mix(norm(X)) + X``; ``O = mlp(norm(Z)) + Z``."""
    if x.ndim != 4 or x.shape[-1] != block.channels:
        raise ValueError(f"ms_block_forward: expected {block.channels} channels, got shape {x.shape}")
    h = ops.layer_norm(x, params.norm1_gamma, params.norm1_beta, LN_EPS)
    h = mix_shift_forward(h, block.mixshift, params.mix)
    z = ops.add(x, drop_path(h, block.drop_path_rate, train_mode, rng))
    h = ops.layer_norm(z, params.norm2_gamma, params.norm2_beta, LN_EPS)
    h = ops.channel_linear(h, params.fc1_weight, params.fc1_bias)
    h = ops.gelu(h)
    h = ops.channel_linear(h, params.fc2_weight, params.fc2_bias)
    return ops.add(z, drop_path(h, block.drop_path_rate, train_mode, rng))


def forward_features(model: Model, images: Tensor, train_mode: bool = False,
                     rng: Optional[np.random.Generator] = None, collect: Optional[list] = None) -> Tensor:
    """Run all stages; when ``collect`` is a list the stage outputs are appended to it."""
    spec = model.spec
    if images.ndim != 4 or images.shape[1:] != (spec.image_size, spec.image_size, spec.in_channels):
        raise ValueError(
            f"expected images of shape (n, {spec.image_size}, {spec.image_size}, {spec.in_channels}), "
            f"got {images.shape}")
    x = images
    for st, sp, blocks in zip(spec.stages, model.stages, spec.block_specs()):
        x = patch_embed(x, st.patch_ratio, sp.embed_weight, sp.embed_bias)
        for bs, bp in zip(blocks, sp.blocks):
            x = ms_block_forward(x, bs, bp, train_mode, rng)
        if collect is not None:
            collect.append(x)
    return x


def model_forward(model: Model, images, train_mode: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits of shape ``(n, num_classes)``."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    x = forward_features(model, images, train_mode, rng)
    x = ops.layer_norm(x, model.norm_gamma, model.norm_beta, LN_EPS)
    x = ops.global_avg_pool(x)
    return ops.channel_linear(x, model.head_weight, model.head_bias)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MSMLPCK1"


def save_checkpoint(model: Model, path) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE payload``.

    The header lists ``(name, shape, offset)`` for each tensor; offsets are
    byte positions within the payload.
    """
    entries = []
    offset = 0
    blobs = []
    for name, t in model.named_parameters().items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"spec": model.spec.to_dict(), "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not an msmlp checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    model = build_model(ModelSpec.from_dict(header["spec"]), seed=0)
    params = model.named_parameters()
    if len(header["tensors"]) != len(params):
        raise ValueError("checkpoint tensor list does not match the model")
    for entry in header["tensors"]:
        t = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ValueError(f"{entry['name']}: shape {shape} != {t.shape}")
        count = int(np.prod(shape)) if shape else 1
        t.data = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape).copy()
    return model


__all__ = [
    "BlockSpec", "StageSpec", "ModelSpec", "Model", "BlockParams", "StageParams", "BranchParams",
    "PRESET_NAMES", "preset", "build_model", "patch_embed", "drop_path", "ms_block_forward",
    "forward_features", "model_forward", "save_checkpoint", "load_checkpoint",
]
