"""Regional token mixing by channel-group mixing and shifting.

The input channels are split into ``S`` groups.  Group ``n`` is mixed over an
``r[n] x r[n]`` region with a depthwise (or dense) convolution and then
shifted by ``-d[n]`` tokens along the branch axis, so the region centred
``d[n]`` tokens away from the query lands on the query position.  Group 0
holds the query tokens themselves (``d[0] == 0``).

Two implementations are provided: :func:`mix_shift_branch` built from the
differentiable primitives, and :func:`mix_shift_reference`, a direct
per-token loop used as an oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import ops
from .tensor import Tensor

AXIS_MODES = ("horizontal", "vertical", "dual-sum")
CONV_TYPES = ("dw", "full")
PROJECTIONS = ("none", "post", "pre-post")


@dataclass(frozen=True)
class MixShiftSpec:
    """Shifting size ``S``, relative distances ``d`` and region sizes ``r``.

    ``projection`` controls the optional channel projections around the
    split/mix/shift pipeline: ``none`` (the shifted groups feed the block's
    channel MLP directly), ``post`` or ``pre-post``.
    """

    S: int
    d: tuple
    r: tuple
    axis_mode: str = "dual-sum"
    conv_type: str = "dw"
    projection: str = "none"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(int(v) for v in self.d))
        object.__setattr__(self, "r", tuple(int(v) for v in self.r))
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if len(self.d) != self.S or len(self.r) != self.S:
            raise ValueError(f"len(d)={len(self.d)} and len(r)={len(self.r)} must both equal S={self.S}")
        if self.d[0] != 0:
            raise ValueError("the first group is the query group: d[0] must be 0")
        for rn in self.r:
            if rn < 1 or rn % 2 == 0:
                raise ValueError(f"region sizes must be odd and >= 1, got {self.r}")
        if self.axis_mode not in AXIS_MODES:
            raise ValueError(f"axis_mode must be one of {AXIS_MODES}, got {self.axis_mode!r}")
        if self.conv_type not in CONV_TYPES:
            raise ValueError(f"conv_type must be one of {CONV_TYPES}, got {self.conv_type!r}")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")

    @property
    def axes(self) -> tuple:
        if self.axis_mode == "dual-sum":
            return ("horizontal", "vertical")
        return (self.axis_mode,)

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "d": list(self.d),
            "r": list(self.r),
            "axis_mode": self.axis_mode,
            "conv_type": self.conv_type,
            "projection": self.projection,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MixShiftSpec":
        d = obj["d"]
        return cls(
            S=int(obj.get("S", len(d))),
            d=tuple(d),
            r=tuple(obj["r"]),
            axis_mode=obj.get("axis_mode", "dual-sum"),
            conv_type=obj.get("conv_type", "dw"),
            projection=obj.get("projection", "none"),
            bias=bool(obj.get("bias", True)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MixShiftSpec":
        return cls.from_dict(json.loads(text))


def group_sizes(channels: int, S: int) -> list[int]:
    """Near-equal channel split; the first ``channels % S`` groups get one extra.

    Equal when ``S`` divides ``channels``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if channels < S:
        raise ValueError(f"cannot split {channels} channels into {S} non-empty groups")
    base, extra = divmod(channels, S)
    return [base + (1 if k < extra else 0) for k in range(S)]


def split_channels(x: Tensor, S: int) -> list[Tensor]:
    """Split ``x`` along channels into ``S`` consecutive, disjoint groups."""
    return ops.split_channels(x, group_sizes(x.shape[-1], S))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class BranchParams:
    kernels: list
    biases: list
    pre_weight: Optional[Tensor] = None
    pre_bias: Optional[Tensor] = None
    post_weight: Optional[Tensor] = None
    post_bias: Optional[Tensor] = None

    def named(self, prefix: str = ""):
        out = []
        if self.pre_weight is not None:
            out += [(prefix + "pre.weight", self.pre_weight), (prefix + "pre.bias", self.pre_bias)]
        for k, (w, b) in enumerate(zip(self.kernels, self.biases)):
            out.append((f"{prefix}region.{k}.weight", w))
            if b is not None:
                out.append((f"{prefix}region.{k}.bias", b))
        if self.post_weight is not None:
            out += [(prefix + "post.weight", self.post_weight), (prefix + "post.bias", self.post_bias)]
        return out


@dataclass
class MixShiftParams:
    """Per-branch parameters keyed by axis name."""

    branches: dict = field(default_factory=dict)

    def named(self, prefix: str = ""):
        out = []
        for axis, bp in self.branches.items():
            out += bp.named(f"{prefix}{axis}.")
        return out

    def tensors(self):
        return [t for _, t in self.named()]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std."""
    vals = stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(vals, dtype=dtype).reshape(shape)


def kernel_shape(spec: MixShiftSpec, width: int, r: int) -> tuple:
    return (width, r, r) if spec.conv_type == "dw" else (width, width, r, r)


def init_params(spec: MixShiftSpec, channels: int, rng: np.random.Generator,
                std: float = 0.02, dtype=np.float64) -> MixShiftParams:
    """Truncated-normal weights, zero biases."""
    sizes = group_sizes(channels, spec.S)
    params = MixShiftParams()
    for axis in spec.axes:
        kernels, biases = [], []
        for width, r in zip(sizes, spec.r):
            kernels.append(Tensor(trunc_normal(rng, kernel_shape(spec, width, r), std, dtype), requires_grad=True))
            biases.append(Tensor(np.zeros(width, dtype=dtype), requires_grad=True) if spec.bias else None)
        bp = BranchParams(kernels, biases)
        if spec.projection == "pre-post":
            bp.pre_weight = Tensor(trunc_normal(rng, (channels, channels), std, dtype), requires_grad=True)
            bp.pre_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if spec.projection in ("post", "pre-post"):
            bp.post_weight = Tensor(trunc_normal(rng, (channels, channels), std, dtype), requires_grad=True)
            bp.post_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        params.branches[axis] = bp
    return params


def identity_params(spec: MixShiftSpec, channels: int, dtype=np.float64) -> MixShiftParams:
    """Delta kernels, zero biases and identity projections.

    With these parameters each group is only shifted.
    """
    sizes = group_sizes(channels, spec.S)
    params = MixShiftParams()
    for axis in spec.axes:
        kernels, biases = [], []
        for width, r in zip(sizes, spec.r):
            k = np.zeros(kernel_shape(spec, width, r), dtype=dtype)
            p = (r - 1) // 2
            if spec.conv_type == "dw":
                k[:, p, p] = 1.0
            else:
                k[np.arange(width), np.arange(width), p, p] = 1.0
            kernels.append(Tensor(k, requires_grad=True))
            biases.append(Tensor(np.zeros(width, dtype=dtype), requires_grad=True) if spec.bias else None)
        bp = BranchParams(kernels, biases)
        if spec.projection == "pre-post":
            bp.pre_weight = Tensor(np.eye(channels, dtype=dtype), requires_grad=True)
            bp.pre_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        if spec.projection in ("post", "pre-post"):
            bp.post_weight = Tensor(np.eye(channels, dtype=dtype), requires_grad=True)
            bp.post_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        params.branches[axis] = bp
    return params


def count_params(spec: MixShiftSpec, channels: int) -> int:
    sizes = group_sizes(channels, spec.S)
    per_branch = 0
    for width, r in zip(sizes, spec.r):
        per_branch += int(np.prod(kernel_shape(spec, width, r)))
        if spec.bias:
            per_branch += width
    if spec.projection == "pre-post":
        per_branch += channels * channels + channels
    if spec.projection in ("post", "pre-post"):
        per_branch += channels * channels + channels
    return per_branch * len(spec.axes)


def _check_params(x: Tensor, spec: MixShiftSpec, bp: BranchParams):
    c = x.shape[-1]
    sizes = group_sizes(c, spec.S)
    if len(bp.kernels) != spec.S:
        raise ValueError(f"expected {spec.S} region kernels, got {len(bp.kernels)}")
    for width, r, k in zip(sizes, spec.r, bp.kernels):
        if k.shape != kernel_shape(spec, width, r):
            raise ValueError(f"region kernel shape {k.shape} != {kernel_shape(spec, width, r)} for {c} channels")
    return sizes


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------

def mix_shift_branch(x: Tensor, spec: MixShiftSpec, params: BranchParams, axis="horizontal") -> Tensor:
    """One axis of the operator: project, split, region-mix, shift back, concat, project."""
    ops._check4(x, "mix_shift_branch")
    _check_params(x, spec, params)
    if params.pre_weight is not None:
        x = ops.channel_linear(x, params.pre_weight, params.pre_bias)
    groups = split_channels(x, spec.S)
    conv = ops.depthwise_conv2d if spec.conv_type == "dw" else ops.conv2d
    mixed = []
    for g, k, b, dn in zip(groups, params.kernels, params.biases, spec.d):
        y = conv(g, k, b)
        if dn:
            y = ops.shift2d(y, -dn, axis, allow_vacate=True)
        mixed.append(y)
    out = ops.concat_channels(mixed) if len(mixed) > 1 else mixed[0]
    if params.post_weight is not None:
        out = ops.channel_linear(out, params.post_weight, params.post_bias)
    return out


def mix_shift_forward(x: Tensor, spec: MixShiftSpec, params: MixShiftParams) -> Tensor:
    """Single-axis branch, or the sum of independent horizontal and vertical branches."""
    out = None
    for axis in spec.axes:
        y = mix_shift_branch(x, spec, params.branches[axis], axis)
        out = y if out is None else ops.add(out, y)
    return out


def _token_linear_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, h, wd, _ = x.shape
    out = np.zeros((n, h, wd, w.shape[0]), dtype=x.dtype)
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                out[s, i, j] = w @ x[s, i, j] + b
    return out


def mix_shift_reference(x, spec: MixShiftSpec, params: BranchParams, axis="horizontal") -> np.ndarray:
    """Per-output-token transcription of the mix-and-shift rule.

    For output token ``(i, j)`` and group ``n`` on the vertical axis the
    region centre is ``(i + d[n], j)`` (``(i, j + d[n])`` horizontally).  If
    the centre lies outside the map the group contributes zero; otherwise
    the ``r[n] x r[n]`` window around it is mixed, skipping out-of-range
    tokens.
    """
    xa = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n_b, h, w, c = xa.shape
    sizes = group_sizes(c, spec.S)
    vertical = ops.axis_index(axis) == 1
    if params.pre_weight is not None:
        xa = _token_linear_loop(xa, params.pre_weight.data, params.pre_bias.data)
    y = np.zeros_like(xa)
    start = 0
    for width, dn, rn, k, kb in zip(sizes, spec.d, spec.r, params.kernels, params.biases):
        stop = start + width
        p = (rn - 1) // 2
        kw = k.data
        for s in range(n_b):
            for i in range(h):
                for j in range(w):
                    ci, cj = (i + dn, j) if vertical else (i, j + dn)
                    if not (0 <= ci < h and 0 <= cj < w):
                        continue
                    acc = np.zeros(width) if kb is None else kb.data.astype(np.float64).copy()
                    for a in range(rn):
                        ii = ci + a - p
                        if not 0 <= ii < h:
                            continue
                        for b in range(rn):
                            jj = cj + b - p
                            if not 0 <= jj < w:
                                continue
                            tok = xa[s, ii, jj, start:stop]
                            if spec.conv_type == "dw":
                                acc += kw[:, a, b] * tok
                            else:
                                acc += kw[:, :, a, b] @ tok
                    y[s, i, j, start:stop] = acc
        start = stop
    if params.post_weight is not None:
        y = _token_linear_loop(y, params.post_weight.data, params.post_bias.data)
    return y


def mix_shift_reference_forward(x, spec: MixShiftSpec, params: MixShiftParams) -> np.ndarray:
    out = None
    for axis in spec.axes:
        y = mix_shift_reference(x, spec, params.branches[axis], axis)
        out = y if out is None else out + y
    return out


def multi_shift(x, d, axis="horizontal") -> np.ndarray:
    """Pure multi-offset channel-group shift: group ``n`` moved by ``-d[n]``."""
    xa = np.asarray(x.data if isinstance(x, Tensor) else x)
    ax = ops.axis_index(axis)
    sizes = group_sizes(xa.shape[-1], len(d))
    parts = []
    start = 0
    for width, dn in zip(sizes, d):
        parts.append(ops.shift_array(xa[..., start:start + width], -int(dn), ax))
        start += width
    return np.concatenate(parts, axis=-1)
