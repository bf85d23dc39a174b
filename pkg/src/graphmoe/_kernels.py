"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``GRAPHMOE_NUMBA`` is
not set to ``0``. Both paths produce bit-identical results: every reduction
runs in the same sequential order.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("GRAPHMOE_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


# --- pure numpy -------------------------------------------------------------


def scatter_add_rows_numpy(out, idx, src):
    """In place ``out[idx[i]] += src[i]`` for every i, in index order."""
    np.add.at(out, idx, src)
    return out


def topk_rows_numpy(probs, k):
    # stable sort on the negated values: equal entries keep ascending index order
    return np.argsort(-probs, axis=1, kind="stable")[:, :k].astype(np.int64)


def argsort_desc_rows_numpy(values):
    return np.argsort(-values, axis=1, kind="stable").astype(np.int64)


def expert_dispatch_numpy(topk_idx, n_experts):
    """Group (token, slot) pairs by expert.

    Returns ``(offsets, tokens, flat_slots)``: the pairs routed to expert j are
    ``tokens[offsets[j]:offsets[j+1]]`` in ascending token order, and
    ``flat_slots`` holds their positions in ``topk_idx.ravel()``.
    """
    flat = topk_idx.ravel()
    order = np.argsort(flat, kind="stable").astype(np.int64)
    counts = np.bincount(flat, minlength=n_experts)
    offsets = np.zeros(n_experts + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    tokens = order // topk_idx.shape[1]
    return offsets, tokens, order


def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, c1, c2, eps):
    """One in-place Adam step on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --- numba ------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _scatter_add_rows_nb(out, idx, src):
        n, m = src.shape
        for i in range(n):
            row = idx[i]
            for j in range(m):
                out[row, j] += src[i, j]

    @_jit
    def _topk_rows_nb(probs, k):
        n, width = probs.shape
        result = np.empty((n, k), dtype=np.int64)
        taken = np.zeros(width, dtype=np.bool_)
        for i in range(n):
            taken[:] = False
            for slot in range(k):
                best = -1
                for j in range(width):
                    if taken[j]:
                        continue
                    # strict > keeps the lower index on ties
                    if best < 0 or probs[i, j] > probs[i, best]:
                        best = j
                taken[best] = True
                result[i, slot] = best
        return result

    @_jit
    def _argsort_desc_rows_nb(values):
        n, width = values.shape
        result = np.empty((n, width), dtype=np.int64)
        for i in range(n):
            # insertion sort: stable, and widths here are small
            for j in range(width):
                result[i, j] = j
            for j in range(1, width):
                cur = result[i, j]
                v = values[i, cur]
                pos = j - 1
                while pos >= 0 and values[i, result[i, pos]] < v:
                    result[i, pos + 1] = result[i, pos]
                    pos -= 1
                result[i, pos + 1] = cur
        return result

    @_jit
    def _expert_dispatch_nb(topk_idx, n_experts):
        n, k = topk_idx.shape
        counts = np.zeros(n_experts, dtype=np.int64)
        for i in range(n):
            for s in range(k):
                counts[topk_idx[i, s]] += 1
        offsets = np.zeros(n_experts + 1, dtype=np.int64)
        for j in range(n_experts):
            offsets[j + 1] = offsets[j] + counts[j]
        fill = offsets[:-1].copy()
        tokens = np.empty(n * k, dtype=np.int64)
        slots = np.empty(n * k, dtype=np.int64)
        for i in range(n):
            for s in range(k):
                e = topk_idx[i, s]
                tokens[fill[e]] = i
                slots[fill[e]] = i * k + s
                fill[e] += 1
        return offsets, tokens, slots

    @_jit
    def _adam_update_nb(param, grad, m, v, lr, beta1, beta2, c1, c2, eps):
        for i in range(param.shape[0]):
            g = grad[i]
            m[i] = m[i] * beta1 + (1.0 - beta1) * g
            v[i] = v[i] * beta2 + (1.0 - beta2) * g * g
            param[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    def adam_update_numba(param, grad, m, v, lr, beta1, beta2, c1, c2, eps):
        _adam_update_nb(param, np.ascontiguousarray(grad), m, v, lr, beta1, beta2, c1, c2, eps)

    def scatter_add_rows_numba(out, idx, src):
        _scatter_add_rows_nb(out, np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(src))
        return out

    def topk_rows_numba(probs, k):
        return _topk_rows_nb(np.ascontiguousarray(probs), int(k))

    def argsort_desc_rows_numba(values):
        return _argsort_desc_rows_nb(np.ascontiguousarray(values))

    def expert_dispatch_numba(topk_idx, n_experts):
        return _expert_dispatch_nb(np.ascontiguousarray(topk_idx, dtype=np.int64), int(n_experts))


# --- dispatch ---------------------------------------------------------------


def scatter_add_rows(out, idx, src):
    """Accumulate rows of ``src`` into ``out`` at row indices ``idx``.

    ``out`` must be 2-D and C-contiguous; trailing dims of higher-rank inputs
    should be flattened by the caller.
    """
    if USE_NUMBA and out.ndim == 2 and out.flags.c_contiguous:
        return scatter_add_rows_numba(out, idx, src)
    return scatter_add_rows_numpy(out, idx, src)


def topk_rows(probs, k):
    """Indices of the k largest entries per row, largest first, lower index on ties."""
    if USE_NUMBA:
        return topk_rows_numba(probs, k)
    return topk_rows_numpy(probs, k)


def argsort_desc_rows(values):
    """Stable descending argsort along the last axis of a 2-D array."""
    if USE_NUMBA:
        return argsort_desc_rows_numba(values)
    return argsort_desc_rows_numpy(values)


def expert_dispatch(topk_idx, n_experts):
    if USE_NUMBA:
        return expert_dispatch_numba(topk_idx, n_experts)
    return expert_dispatch_numpy(topk_idx, n_experts)


def adam_update(param, grad, m, v, lr, beta1, beta2, c1, c2, eps):
    """In-place Adam step; all arrays 1-D float64 and ``param``, ``m``, ``v`` contiguous."""
    if USE_NUMBA:
        return adam_update_numba(param, grad, m, v, lr, beta1, beta2, c1, c2, eps)
    return adam_update_numpy(param, grad, m, v, lr, beta1, beta2, c1, c2, eps)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
