"""Gradient checks and oracle-equivalence sweeps shared by the tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass
from copy import copy
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .mixshift import (
    AXIS_MODES,
    MixShiftParams,
    MixShiftSpec,
    init_params,
    mix_shift_forward,
    mix_shift_reference_forward,
)
from .model import Model, build_model, model_forward, preset
from .tensor import GradTape, Tensor, backward, finite_diff_grad, relative_error
from .train import cross_entropy_loss

GRAD_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence, seed: int = 0, step: float = 1e-5,
              max_coords: Optional[int] = None, floor: float = GRAD_FLOOR) -> float:
    """Worst relative error between tape and central-difference gradients.

    The scalar checked is ``sum(fn(*inputs) * R)`` with a fixed random ``R``
    so that no entry of the gradient vanishes by symmetry.  Differences are
    taken against the unperturbed output before reducing, which keeps
    round-off proportional to the perturbed entries only.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    gen = np.random.default_rng(seed)
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with GradTape() as tape:
        out = fn(*tensors)
    weights = gen.standard_normal(out.shape)
    backward(tape, out, weights)
    worst = 0.0
    for k, t in enumerate(tensors):
        base = [x.data.copy() for x in tensors]

        def f(theta, k=k, base=base):
            args = [Tensor(b) for b in base]
            args[k] = Tensor(theta)
            # subtract the unperturbed output first so untouched entries cancel exactly
            return float(((fn(*args).data - out.data) * weights).sum())

        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = gen.choice(t.size, size=max_coords, replace=False)
        num = finite_diff_grad(f, t.data, step, idx)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        if idx is not None:
            ana, num = ana.reshape(-1)[idx], num.reshape(-1)[idx]
        worst = max(worst, float(relative_error(ana, num, floor).max()))
    return worst


def primitive_cases(rng: np.random.Generator):
    """``(name, fn, inputs)`` triples covering every differentiable primitive."""
    x = rng.standard_normal((2, 5, 6, 3))
    ln_x = rng.standard_normal((2, 3, 4, 5))
    ms = MixShiftSpec(S=3, d=(0, 1, 2), r=(1, 3, 5), axis_mode="dual-sum", projection="pre-post")
    ms_params = init_params(ms, 6, rng, std=0.5)
    ms_x = rng.standard_normal((1, 5, 5, 6))

    def mix(xt, *flat):
        return mix_shift_forward(xt, ms, _swap_params(ms_params, flat))

    return [
        ("add", ops.add, [x, rng.standard_normal(x.shape)]),
        ("shift2d", lambda t: ops.shift2d(t, 2, "vertical"), [x]),
        ("shift2d_h", lambda t: ops.shift2d(t, -3, "horizontal"), [x]),
        ("depthwise_conv2d", ops.depthwise_conv2d,
         [x, rng.standard_normal((3, 3, 3)), rng.standard_normal(3)]),
        ("depthwise_conv2d_r5", ops.depthwise_conv2d, [x, rng.standard_normal((3, 5, 5))]),
        ("conv2d", ops.conv2d, [x, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        ("channel_linear", ops.channel_linear,
         [x, rng.standard_normal((4, 3)), rng.standard_normal(4)]),
        ("layer_norm", lambda t, g, b: ops.layer_norm(t, g, b, 1e-6),
         [ln_x, 1.0 + 0.3 * rng.standard_normal(5), rng.standard_normal(5)]),
        ("gelu", ops.gelu, [3.0 * x]),
        ("global_avg_pool", ops.global_avg_pool, [x]),
        ("patchify", lambda t: ops.patchify(t, 2), [rng.standard_normal((2, 4, 6, 3))]),
        ("split_concat", lambda t: ops.concat_channels(ops.split_channels(t, [1, 2])[::-1]), [x]),
        ("scale_samples", lambda t: ops.scale_samples(t, [0.0, 2.5]), [x]),
        ("cross_entropy", lambda z: cross_entropy_loss(z, [1, 0, 3]), [rng.standard_normal((3, 4))]),
        ("mix_shift", mix, [ms_x] + [t.data for t in ms_params.tensors()]),
    ]


def _swap_params(params, flat):
    """Copy of ``params`` whose tensors are replaced, in order, by ``flat``."""
    it = iter(flat)
    out = MixShiftParams()
    for axis, bp in params.branches.items():
        nb = copy(bp)
        if bp.pre_weight is not None:
            nb.pre_weight, nb.pre_bias = next(it), next(it)
        kernels, biases = [], []
        for b in bp.biases:
            kernels.append(next(it))
            biases.append(next(it) if b is not None else None)
        nb.kernels, nb.biases = kernels, biases
        if bp.post_weight is not None:
            nb.post_weight, nb.post_bias = next(it), next(it)
        out.branches[axis] = nb
    return out


def run_primitive_gradchecks(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in primitive_cases(rng):
        err = gradcheck(fn, inputs, seed=seed)
        results.append(CheckResult(f"grad/{name}", err, tol))
    return results


def model_loss_fn(model: Model, images, labels):
    def loss() -> float:
        return float(cross_entropy_loss(model_forward(model, Tensor(images)), labels).data)
    return loss


def run_model_gradcheck(seed: int = 0, tol: float = 1e-5, samples_per_tensor: int = 10,
                        preset_name: str = "tiny-desk", batch: int = 2, step: float = 1e-5,
                        init_std_scale: float = 10.0) -> list[CheckResult]:
    """End-to-end check: tape gradient vs central differences on sampled scalars.

    Weights are scaled up from their 0.02 init (``init_std_scale``) and norm
    affines / biases randomised so every path carries signal.
    """
    spec = preset(preset_name)
    model = build_model(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in model.named_parameters().items():
        if name.endswith(("gamma",)):
            t.data = 1.0 + 0.2 * rng.standard_normal(t.shape)
        elif name.endswith(("beta", "bias")):
            t.data = 0.1 * rng.standard_normal(t.shape)
        else:
            t.data = t.data * init_std_scale
    images = rng.standard_normal((batch, spec.image_size, spec.image_size, spec.in_channels))
    labels = rng.integers(spec.num_classes, size=batch)

    with GradTape() as tape:
        loss = cross_entropy_loss(model_forward(model, Tensor(images)), labels)
    model.zero_grad()
    backward(tape, loss)
    f = model_loss_fn(model, images, labels)

    results = []
    for name, t in model.named_parameters().items():
        k = min(samples_per_tensor, t.size)
        idx = rng.choice(t.size, size=k, replace=False)
        flat = t.data.reshape(-1)
        ana = t.grad.reshape(-1)[idx]
        num = np.empty(k)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        err = float(relative_error(ana, num, GRAD_FLOOR).max())
        results.append(CheckResult(f"model/{name}", err, tol))
    return results


def random_mixshift_case(rng: np.random.Generator):
    """Random (input, spec, params) for the oracle comparison."""
    S = int(rng.integers(1, 6))
    d = [0] + [int(v) for v in rng.integers(-4, 6, size=S - 1)]
    r = [int(v) for v in rng.choice([1, 3, 5, 7], size=S)]
    axis_mode = str(rng.choice(AXIS_MODES))
    conv_type = "full" if rng.random() < 0.2 else "dw"
    projection = str(rng.choice(["none", "post", "pre-post"]))
    spec = MixShiftSpec(S=S, d=d, r=r, axis_mode=axis_mode, conv_type=conv_type,
                        projection=projection, bias=bool(rng.random() < 0.8))
    c = int(rng.integers(S, S + 8))
    n = int(rng.integers(1, 3))
    h = int(rng.integers(1, 9))
    w = int(rng.integers(1, 9))
    params = init_params(spec, c, rng, std=0.5)
    for t in params.tensors():
        if t.ndim == 1:
            t.data = rng.standard_normal(t.shape)
    x = rng.standard_normal((n, h, w, c))
    return x, spec, params


def run_oracle(cases: int = 200, seed: int = 0, tol: float = 1e-10) -> tuple[int, float]:
    """Compare the composed operator with the per-token loop on random cases.

    Returns ``(cases_run, max_abs_deviation)``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        x, spec, params = random_mixshift_case(rng)
        fast = mix_shift_forward(Tensor(x), spec, params).data
        slow = mix_shift_reference_forward(x, spec, params)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return cases, worst
