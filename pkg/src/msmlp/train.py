"""Desk-scale training: AdamW, cross-entropy, a synthetic image task and the loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import Model, model_forward
from .tensor import GradTape, Tensor, backward, maybe_record


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: OptimState):
    """One AdamW update, in place on ``params`` (arrays or Tensors).

    Weight decay is decoupled: ``theta -= lr * wd * theta`` happens before the
    bias-corrected moment step.  Returns ``(params, state)``.
    """
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(grads) != len(arrays):
        raise ValueError("one gradient per parameter required")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(a)
        if g.shape != a.shape or m.shape != a.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {a.shape}")
        if state.weight_decay:
            a -= state.lr * state.weight_decay * a
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(step: int, total: int, base_lr: float, warmup_frac: float = 0.05, min_lr: float = 0.0) -> float:
    """Linear warm-up over the first ``warmup_frac`` of steps, then cosine decay."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base_lr * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Tape-recording wrapper around :func:`cross_entropy`."""
    loss, grad = cross_entropy(logits.data, labels)
    out = Tensor(np.asarray(loss, dtype=logits.dtype))
    return maybe_record("cross_entropy", out, (logits,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    image_size: int = 32
    num_classes: int = 8
    seed: int = 0
    num_samples: int = 64
    square: int = 8
    jitter: int = 2
    channels: int = 3


def render_sample(task: SyntheticTask, quadrant: int, colour_a: int, colour_b: int,
                  row: int = 0, col: int = 0) -> np.ndarray:
    """One image: a striped square inside ``quadrant``.

    The square is made of two-pixel horizontal stripes that alternate
    between channel ``colour_a`` and channel ``colour_b``.  ``row``/``col``
    offset the square from its default position in the quadrant.
    """
    n, k = task.image_size, task.square
    half = n // 2
    base = (half - k - task.jitter + 1) // 2
    img = np.zeros((n, n, task.channels))
    top = (quadrant // 2) * half + base + row
    left = (quadrant % 2) * half + base + col
    for i in range(k):
        img[top + i, left:left + k, colour_a if (i // 2) % 2 == 0 else colour_b] = 1.0
    return img


def label_of(quadrant: int, colour_a: int, colour_b: int) -> int:
    """Quadrant (coarse cue) times texture parity (whether the stripes differ)."""
    return 2 * quadrant + int(colour_a != colour_b)


def make_synthetic_task(task: SyntheticTask):
    """Images ``(N, size, size, channels)`` and labels ``(N,)``.

    The label pairs a coarse cue (which quadrant holds the square) with a
    fine one (whether the square's stripes alternate colour).  For a fixed
    placement the four colourings satisfy ``x_aa + x_bb == x_ab + x_ba``
    exactly, so the fine cue is an XOR that no linear readout of the pixels
    can separate; it has to be read by mixing neighbouring stripes' tokens.
    """
    if task.num_classes != 8:
        raise ValueError("the synthetic task has exactly 8 classes (4 quadrants x 2 parities)")
    if task.channels < 2:
        raise ValueError("the synthetic task needs at least two colour channels")
    if task.square < 2 or task.square + task.jitter > task.image_size // 2:
        raise ValueError("square (plus jitter) must fit inside a quadrant")
    rng = np.random.default_rng(task.seed)
    # every (quadrant, colours, placement) combination appears equally often
    configs = [
        (q, a, b, row, col)
        for q in range(4) for a in range(2) for b in range(2)
        for row in range(task.jitter) for col in range(task.jitter)
    ]
    reps = -(-task.num_samples // len(configs))
    pool = np.array(configs * reps)
    pool = pool[rng.permutation(len(pool))][:task.num_samples]
    images = np.empty((task.num_samples, task.image_size, task.image_size, task.channels))
    labels = np.empty(task.num_samples, dtype=np.int64)
    for i, (q, a, b, row, col) in enumerate(pool.tolist()):
        images[i] = render_sample(task, q, a, b, row, col)
        labels[i] = label_of(q, a, b)
    return images, labels


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    loss: float
    acc: float
    lr: float


def loss_and_grads(model: Model, images, labels, train_mode: bool = False,
                   rng: Optional[np.random.Generator] = None):
    """Forward + backward; gradients land in each parameter's ``.grad``."""
    with GradTape() as tape:
        logits = model_forward(model, Tensor(images), train_mode, rng)
        loss = cross_entropy_loss(logits, labels)
    model.zero_grad()
    backward(tape, loss)
    return float(loss.data), logits.data


def train_loop(model: Model, images, labels, steps: int, lr: float = 1e-3, weight_decay: float = 0.05,
               batch_size: int = 16, seed: int = 0, warmup_frac: float = 0.05,
               schedule: Optional[Callable[[int, int, float], float]] = None,
               callback: Optional[Callable[[StepMetrics], None]] = None) -> list[StepMetrics]:
    """Minibatch AdamW training with a warm-up + cosine schedule.

    Batches are drawn from a seeded permutation, so two runs with the same
    seed produce identical histories.  Raises ``FloatingPointError`` as soon
    as the loss is not finite.
    """
    rng = np.random.default_rng(seed)
    n = len(labels)
    batch_size = min(batch_size, n)
    state = OptimState(lr=lr, weight_decay=weight_decay)
    params = model.parameters()
    sched = schedule or (lambda s, t, base: cosine_lr(s, t, base, warmup_frac))
    history = []
    order = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        loss, logits = loss_and_grads(model, images[idx], labels[idx], train_mode=True, rng=rng)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step}")
        acc = float((logits.argmax(axis=1) == labels[idx]).mean())
        state.lr = sched(step, steps, lr)
        adamw_step(params, [p.grad for p in params], state)
        m = StepMetrics(step, loss, acc, state.lr)
        history.append(m)
        if callback is not None:
            callback(m)
    return history


def evaluate(model: Model, images, labels, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy in eval mode."""
    losses, correct = [], 0
    for start in range(0, len(labels), batch_size):
        xb, yb = images[start:start + batch_size], labels[start:start + batch_size]
        logits = model_forward(model, Tensor(xb)).data
        loss, _ = cross_entropy(logits, yb)
        losses.append(loss * len(yb))
        correct += int((logits.argmax(axis=1) == yb).sum())
    return float(sum(losses) / len(labels)), correct / len(labels)
