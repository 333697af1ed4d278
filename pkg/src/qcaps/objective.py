"""Spread loss, margin schedule, and prediction readout."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

MARGIN_FLOOR = 0.2
MARGIN_SPAN = 0.79
MARGIN_CEIL = 0.9
MARGIN_RAMP_STEPS = 50_000.0
MARGIN_RAMP_SHIFT = 4.0
MARGIN_ARG_CAP = 10.0


class BadTarget(ValueError):
    """Target class index outside [0, C)."""


def spread_loss(acts, target, m):
    """Sum of squared hinge margins of the target over every other class.

    acts: [C] activations, target: class index, m: margin. Zero exactly
    when the target activation beats every other by at least m.
    """
    acts = np.asarray(acts)
    c = acts.shape[-1]
    if not 0 <= target < c:
        raise BadTarget(f"target {target} outside [0, {c})")
    gap = m - (acts[target] - acts)
    hinge = np.where(gap > 0, gap, 0.0)
    hinge[target] = 0.0
    return float((hinge ** 2).sum())


def spread_loss_nodes(acts, targets, m):
    """Differentiable batched spread loss, mean over the batch.

    acts: Node [B, C]; targets: int array [B]; m: float margin. The hinge
    uses subgradient 0 at the kink.
    """
    b, c = acts.shape
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= c:
        raise BadTarget(f"targets outside [0, {c})")
    onehot = np.zeros((b, c), dtype=acts.dtype)
    onehot[np.arange(b), targets] = 1.0
    a_t = ad.reduce_sum(ad.multiply(acts, ad.constant(onehot)), axis=1, keepdims=True)
    gap = ad.subtract(float(m), ad.subtract(a_t, acts))
    hinge = ad.relu(ad.multiply(gap, ad.constant(1.0 - onehot)))
    return ad.reduce_mean(ad.reduce_sum(ad.square(hinge), axis=1))


def margin_schedule(step, clamp=True):
    """Training margin at a given optimizer step.

    Sigmoid ramp from ~0.214 toward ~0.99, optionally clamped at 0.9 (the
    default); monotone non-decreasing in step either way.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    arg = min(MARGIN_ARG_CAP, step / MARGIN_RAMP_STEPS - MARGIN_RAMP_SHIFT)
    m = MARGIN_FLOOR + MARGIN_SPAN / (1.0 + np.exp(-arg))
    if clamp:
        m = min(m, MARGIN_CEIL)
    return float(m)


def predict(acts):
    """Index of the largest activation; ties break to the lowest index."""
    acts = np.asarray(acts)
    return int(np.argmax(acts, axis=-1)) if acts.ndim == 1 else np.argmax(acts, axis=-1)
