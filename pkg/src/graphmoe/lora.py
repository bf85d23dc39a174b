"""Low-rank adapters over a frozen linear map."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

DEFAULT_ALPHA = 4.0


class FrozenBase:
    """Pre-trained weight ``W`` of shape (out_features, in_features); never trained."""

    def __init__(self, weight):
        self.weight = Tensor(np.array(weight, dtype=np.float64), requires_grad=False)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def __call__(self, x):
        _check_width(x, self.in_features)
        return ag.linear(x, self.weight)


class LoRAAdapter:
    """Rank-``r`` update ``(alpha / r) * B @ A`` with ``A`` (r x I) and ``B`` (O x r).

    ``B`` starts at zero, so a fresh adapter contributes nothing.
    """

    def __init__(self, in_features, out_features, rank, alpha=DEFAULT_ALPHA, rng=None):
        if rank < 1 or rank > min(in_features, out_features):
            raise ConfigError(
                f"LoRA rank must lie in [1, min(I, O)] = [1, {min(in_features, out_features)}], got {rank}"
            )
        if alpha <= 0:
            raise ConfigError(f"LoRA alpha must be positive, got {alpha}")
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / np.sqrt(in_features)
        self.A = Tensor(rng.uniform(-bound, bound, size=(rank, in_features)), requires_grad=True)
        self.B = Tensor(np.zeros((out_features, rank)), requires_grad=True)
        self.rank = int(rank)
        self.alpha = float(alpha)

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def in_features(self):
        return self.A.shape[1]

    @property
    def out_features(self):
        return self.B.shape[0]

    def parameters(self):
        return [self.A, self.B]

    def delta_weight(self):
        return self.scale * (self.B.data @ self.A.data)


def expert_delta(adapter, x):
    """The adapter's contribution ``(alpha / r) * B A x`` for each row of ``x``."""
    _check_width(x, adapter.in_features)
    return ag.scale(ag.linear(ag.linear(x, adapter.A), adapter.B), adapter.scale)


def lora_forward(adapter, base, x):
    """``W x + (alpha / r) B A x`` row-wise; gradients reach only ``A`` and ``B``."""
    if adapter.in_features != base.in_features or adapter.out_features != base.out_features:
        raise ShapeError(
            f"adapter maps {adapter.in_features}->{adapter.out_features} "
            f"but base maps {base.in_features}->{base.out_features}"
        )
    return ag.add(base(x), expert_delta(adapter, x))


def _check_width(x, width):
    if x.shape[-1] != width:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer input {width} (x shape {x.shape})")
