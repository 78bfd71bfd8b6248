"""Analytic cost model: token-interaction complexity formulas and exact
per-layer multiply-accumulate / parameter tallies for a :class:`ModelSpec`.

Counting convention: one multiply-accumulate is one FLOP.  Normalisation,
activations, residual additions and bias additions cost nothing; shifts are
free.  A depthwise region kernel costs ``H*W*width*r^2`` per branch, a dense
one ``H*W*width^2*r^2``, a channel projection ``H*W*C_in*C_out``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .mixshift import MixShiftSpec, count_params as mixshift_param_count, group_sizes
from .model import ModelSpec

METHODS = ("MSA", "W-MSA", "F-MSA", "global-mix", "axial-shift", "mix-shift")


@dataclass(frozen=True)
class ComplexityQuery:
    method: str
    H: Optional[int] = None
    W: Optional[int] = None
    C: Optional[int] = None
    M: Optional[int] = None
    S: Optional[int] = None
    r: Optional[Sequence[int]] = None


def _need(q: ComplexityQuery, *names):
    missing = [n for n in names if getattr(q, n) is None]
    if missing:
        raise ValueError(f"{q.method} needs {', '.join(missing)}")


def complexity_formula(q: ComplexityQuery) -> int:
    """Token-interaction cost of one method, constants as printed.

    The axial-shift and mix-shift entries are per-token, per-channel factors
    (``S`` and ``sum r_n^2``), not totals; multiply by ``H*W*C`` for a total.
    """
    m = q.method
    if m == "MSA":
        _need(q, "H", "W", "C")
        return 2 * (q.H * q.W) ** 2 * q.C
    if m == "W-MSA":
        _need(q, "H", "W", "C", "M")
        return 2 * q.M ** 2 * q.H * q.W * q.C
    if m == "F-MSA":
        _need(q, "H", "W", "C", "M", "r")
        s = q.S if q.S is not None else len(q.r)
        return (s + sum(int(v) ** 2 for v in q.r)) * q.M * q.H * q.W * q.C
    if m == "global-mix":
        _need(q, "H", "W", "C")
        return (q.H * q.W) ** 2 * q.C
    if m == "axial-shift":
        _need(q, "S")
        return int(q.S)
    if m == "mix-shift":
        _need(q, "r")
        return sum(int(v) ** 2 for v in q.r)
    raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")


@dataclass
class LayerCost:
    name: str
    macs: int
    params: int


@dataclass
class FlopsReport:
    rows: list = field(default_factory=list)
    image_size: Optional[int] = None
    spatial_mix_macs: int = 0
    spatial_mix_macs_single_axis: int = 0

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def add(self, name: str, macs: int, params: int):
        self.rows.append(LayerCost(name, int(macs), int(params)))

    def summary(self) -> dict:
        return {
            "image_size": self.image_size,
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "spatial_mix_macs": self.spatial_mix_macs,
            "spatial_mix_macs_single_axis": self.spatial_mix_macs_single_axis,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "name", "macs", "params"])
        for i, r in enumerate(self.rows):
            w.writerow([i, r.name, r.macs, r.params])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FlopsReport":
        rep = cls()
        for row in csv.DictReader(io.StringIO(text)):
            rep.add(row["name"], int(row["macs"]), int(row["params"]))
        return rep

    def to_json(self) -> str:
        return json.dumps(self.summary())


def mixshift_macs(spec: MixShiftSpec, h: int, w: int, channels: int, axes: Optional[int] = None) -> int:
    """MACs of the spatial-mixing operator on an ``h x w x channels`` map."""
    sizes = group_sizes(channels, spec.S)
    per_token = 0
    for width, r in zip(sizes, spec.r):
        per_token += width * r * r if spec.conv_type == "dw" else width * width * r * r
    if spec.projection == "pre-post":
        per_token += channels * channels
    if spec.projection in ("post", "pre-post"):
        per_token += channels * channels
    n_axes = len(spec.axes) if axes is None else axes
    return h * w * per_token * n_axes


def _analyze(spec: ModelSpec, image_size: Optional[int] = None) -> FlopsReport:
    size = image_size or spec.image_size
    total_ratio = 1
    for st in spec.stages:
        total_ratio *= st.patch_ratio
    if size % total_ratio:
        raise ValueError(f"image size {size} not divisible by total patch ratio {total_ratio}")
    rep = FlopsReport(image_size=size)
    res = size
    c_in = spec.in_channels
    for i, st in enumerate(spec.stages):
        p, c = st.patch_ratio, st.out_channels
        res //= p
        tokens = res * res
        k = p * p * c_in
        rep.add(f"stages.{i}.embed", tokens * k * c, k * c + c)
        for b in range(st.num_blocks):
            pre = f"stages.{i}.blocks.{b}."
            ms = st.mixshift
            hidden = st.mlp_ratio * c
            rep.add(pre + "norm1", 0, 2 * c)
            mix = mixshift_macs(ms, res, res, c)
            rep.spatial_mix_macs += mix
            rep.spatial_mix_macs_single_axis += mixshift_macs(ms, res, res, c, axes=1)
            rep.add(pre + "mix", mix, mixshift_param_count(ms, c))
            rep.add(pre + "norm2", 0, 2 * c)
            rep.add(pre + "mlp.fc1", tokens * c * hidden, c * hidden + hidden)
            rep.add(pre + "mlp.fc2", tokens * hidden * c, hidden * c + c)
        c_in = c
    rep.add("norm", 0, 2 * c_in)
    rep.add("head", c_in * spec.num_classes, c_in * spec.num_classes + spec.num_classes)
    return rep


def count_flops(spec: ModelSpec, image_size: Optional[int] = None) -> FlopsReport:
    """Exact per-layer MACs (and parameters) at ``image_size`` (default: the spec's)."""
    return _analyze(spec, image_size)


def count_params(spec: ModelSpec) -> FlopsReport:
    """Exact per-layer parameter counts; ``total_params`` equals the built model's size."""
    return _analyze(spec)
