"""Training objectives: perceptual (deep feature) distances, cross entropy,
and their lambda-weighted combination.

The perceptual distance between two inputs is the sum over the six tap
layers of the L2 norm of the activation difference.  The modified variant
runs both inputs through the enhancer, so gradients reach the enhancer
from the noisy and the clean branch alike; the original variant treats the
clean-reference taps as constants and trains on the noisy branch only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dsp import Spectrogram
from .models import TapSet
from .tensor import Tensor


@dataclass
class LossValue:
    """Scalar loss plus its named pieces, for logging and auditing."""

    total: float
    components: dict = field(default_factory=dict)


def _check_taps(a: TapSet, b: TapSet):
    for i, (ta, tb) in enumerate(zip(a, b)):
        sa = ta.shape if isinstance(ta, Tensor) else np.shape(ta)
        sb = tb.shape if isinstance(tb, Tensor) else np.shape(tb)
        if tuple(sa) != tuple(sb):
            raise ValueError(f"tap layer {i}: shapes {tuple(sa)} and {tuple(sb)} differ")


def perceptual_modified(taps_noisy: TapSet, taps_clean: TapSet,
                        layer_scaling: bool = False) -> Tensor:
    """Sum over tap layers of ||noisy activation - clean activation||_2.

    Both tap sets come from enhanced inputs; gradients flow into both
    branches.  ``layer_scaling`` divides each term by sqrt(layer size) for
    scale studies and is off by default.
    """
    _check_taps(taps_noisy, taps_clean)
    total = None
    for ta, tb in zip(taps_noisy, taps_clean):
        term = T.l2norm(ta - tb)
        if layer_scaling:
            term = term * (1.0 / np.sqrt(ta.size))
        total = term if total is None else total + term
    return total


def perceptual_original(taps_enhanced_noisy: TapSet, taps_clean_reference: TapSet,
                        layer_scaling: bool = False) -> Tensor:
    """Same distance, but the clean reference is a constant target.

    The reference taps are detached, so backward touches only the
    enhanced-noisy branch.
    """
    detached = TapSet([t.detach() if isinstance(t, Tensor) else Tensor(t)
                       for t in taps_clean_reference])
    return perceptual_modified(taps_enhanced_noisy, detached, layer_scaling)


def cross_entropy(logits: Tensor, y: int) -> Tensor:
    """-log softmax(logits)[y], max-shifted for stability."""
    flat = logits.data.reshape(-1)
    n = flat.size
    if not 0 <= y < n:
        raise ValueError(f"label {y} out of range for {n} classes")
    shift = flat.max()
    ex = np.exp(flat - shift)
    z = ex.sum()
    loss = np.log(z) + shift - flat[y]
    softmax = ex / z
    shape = logits.shape

    def vjp(g):
        grad = softmax.copy()
        grad[y] -= 1.0
        return ((g * grad).reshape(shape),)

    return Tensor._from_op(np.asarray(loss), (logits,), vjp)


def combined(pcptl, ce, lam: float):
    """lambda * perceptual + (1 - lambda) * cross entropy."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(pcptl, Tensor) or isinstance(ce, Tensor):
        return lam * _as_tensor(pcptl) + (1.0 - lam) * _as_tensor(ce)
    return lam * pcptl + (1.0 - lam) * ce


def euclidean_baseline(s_hat, s) -> Tensor:
    """Plain L2 distance between two spectrograms (the mask-training baseline)."""
    a = _as_tensor(s_hat)
    b = _as_tensor(s)
    if a.shape != b.shape:
        raise ValueError(f"spectrogram shapes {a.shape} and {b.shape} differ")
    return T.l2norm(a - b)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, Spectrogram):
        return Tensor(value.frames)
    return Tensor(value)
