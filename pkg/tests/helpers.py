"""Finite-difference gradient checking and small model fixtures shared by the tests."""
import contextlib

import numpy as np

from graphmoe import autograd as ag

H = 1e-5
REL_TOL = 1e-4
# gradients this small are compared absolutely; central differences carry ~1e-11 noise
ABS_FLOOR = 1e-8


def grad_close(analytic, numeric, rel=REL_TOL, floor=ABS_FLOOR):
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + floor


def sample_entries(params, n, rng):
    """``n`` random (tensor index, flat index) pairs, tensors weighted by size."""
    sizes = np.array([p.data.size for p in params], dtype=float)
    picks = rng.choice(len(params), size=n, p=sizes / sizes.sum())
    return [(int(i), int(rng.integers(params[i].data.size))) for i in picks]


def check_gradients(loss_fn, params, n=20, rng=None, h=H):
    """Compare backward() against central differences at ``n`` sampled scalars.

    ``loss_fn`` must build a fresh scalar Tensor on every call and be a pure
    function of the parameter values. Returns the list of
    (analytic, numeric) pairs; raises AssertionError on the first mismatch.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    loss = loss_fn()
    ag.backward(loss)
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    pairs = []
    for i, j in sample_entries(params, n, rng):
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        with ag.no_grad():
            up = loss_fn().item()
        flat[j] = orig - h
        with ag.no_grad():
            down = loss_fn().item()
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = 0.0 if grads[i] is None else float(grads[i].reshape(-1)[j])
        assert grad_close(analytic, numeric), f"param {i} entry {j}: analytic {analytic!r} vs numeric {numeric!r}"
        pairs.append((analytic, numeric))
    return pairs


@contextlib.contextmanager
def pinned_trackers(layers):
    """Restore every activation tracker on exit, so repeated forwards see the same history."""
    saved = [(layer.tracker.cumulative.copy(), layer.tracker.step_count) for layer in layers]
    try:
        yield
    finally:
        for layer, (cum, steps) in zip(layers, saved):
            layer.tracker.cumulative = cum.copy()
            layer.tracker.step_count = steps


def randomize_adapters(layers, rng, scale=0.3):
    """Give the zero-initialized B matrices nonzero values so adapter gradients are informative."""
    for layer in layers:
        for adapter in layer.experts:
            adapter.B.data = rng.normal(0.0, scale, adapter.B.shape)
