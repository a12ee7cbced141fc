"""Hot numeric kernels with an optional numba JIT path.

One source body implements each kernel.  When numba is importable and the
``STREAMTEMP_NUMBA`` environment variable is not set to ``0``/``false``/``off``,
the public names are compiled with ``@njit``; otherwise the plain numpy
versions run.  Both paths execute the same statements in the same order and
agree to within one unit in the last place (transcendental functions come
from different math libraries, so the final bit may differ; linear algebra is
identical).  Reruns under a fixed backend are bit-reproducible.
``benchmarks/bench_kernels.py`` times the two paths against each other.

Kernels are written time-major and operate on float64 arrays only.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "lstm_layer_forward",
    "lstm_layer_backward",
    "best_split_scan",
    "lstm_layer_forward_py",
    "lstm_layer_backward_py",
    "best_split_scan_py",
]


def _env_wants_numba() -> bool:
    raw = os.environ.get("STREAMTEMP_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "no", "off")


def lstm_layer_forward_py(x, w_x_t, w_h_t, b):
    """Run one LSTM layer over a time-major input block.

    Args:
        x: (T, B, D) layer inputs.
        w_x_t: (D, 4H) input weights, transposed, gate rows stacked in the
            order candidate, forget, input, output.
        w_h_t: (H, 4H) recurrent weights, transposed, same gate order.
        b: (4H,) gate biases.

    Returns:
        (h, c, gates): hidden and cell states of shape (T, B, H) and the
        post-activation gate block of shape (T, B, 4H).  Initial hidden and
        cell states are zero.
    """
    T, B, _ = x.shape
    H = w_h_t.shape[0]
    h = np.zeros((T, B, H))
    c = np.zeros((T, B, H))
    gates = np.zeros((T, B, 4 * H))
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        a = np.dot(x[t], w_x_t) + np.dot(h_prev, w_h_t) + b
        cand = np.tanh(a[:, :H])
        sig = 1.0 / (1.0 + np.exp(-a[:, H:]))
        f = sig[:, :H]
        g = sig[:, H : 2 * H]
        o = sig[:, 2 * H :]
        c_t = f * c_prev + g * cand
        h_t = o * np.tanh(c_t)
        gates[t, :, :H] = cand
        gates[t, :, H:] = sig
        h[t] = h_t
        c[t] = c_t
        h_prev = h_t
        c_prev = c_t
    return h, c, gates


def lstm_layer_backward_py(x, h, c, gates, w_x, w_h, dh_out):
    """Exact reverse-mode gradients for one LSTM layer.

    Args:
        x, h, c, gates: forward-pass tensors as returned by
            :func:`lstm_layer_forward` (x is the layer input).
        w_x: (4H, D) input weights, gate rows stacked candidate/forget/
            input/output.
        w_h: (4H, H) recurrent weights.
        dh_out: (T, B, H) loss gradient arriving at each timestep's hidden
            output from above (output projection or the next layer).

    Returns:
        (dw_x, dw_h, db, dx) where dx is (T, B, D), the gradient w.r.t. the
        layer inputs.
    """
    T, B, D = x.shape
    H = w_h.shape[1]
    dw_x = np.zeros((4 * H, D))
    dw_h = np.zeros((4 * H, H))
    db = np.zeros(4 * H)
    dx = np.zeros((T, B, D))
    zero_state = np.zeros((B, H))
    dh_rec = np.zeros((B, H))
    dc_rec = np.zeros((B, H))
    da = np.zeros((B, 4 * H))
    for t in range(T - 1, -1, -1):
        cand = gates[t, :, :H]
        f = gates[t, :, H : 2 * H]
        g = gates[t, :, 2 * H : 3 * H]
        o = gates[t, :, 3 * H :]
        if t > 0:
            c_prev = c[t - 1]
            h_prev = h[t - 1]
        else:
            c_prev = zero_state
            h_prev = zero_state
        tc = np.tanh(c[t])
        dh_total = dh_out[t] + dh_rec
        dc = dc_rec + dh_total * o * (1.0 - tc * tc)
        da[:, :H] = (dc * g) * (1.0 - cand * cand)
        da[:, H : 2 * H] = (dc * c_prev) * (f * (1.0 - f))
        da[:, 2 * H : 3 * H] = (dc * cand) * (g * (1.0 - g))
        da[:, 3 * H :] = (dh_total * tc) * (o * (1.0 - o))
        da_t = np.ascontiguousarray(da.T)
        dw_x += np.dot(da_t, x[t])
        dw_h += np.dot(da_t, h_prev)
        db += np.sum(da, axis=0)
        dh_rec = np.dot(da, w_h)
        dc_rec = dc * f
        dx[t] = np.dot(da, w_x)
    return dw_x, dw_h, db, dx


def best_split_scan_py(values, y, min_leaf):
    """Best binary split of a sorted feature column by squared-error reduction.

    Args:
        values: feature values sorted ascending.
        y: targets aligned with ``values``.
        min_leaf: minimum row count in each child.

    Returns:
        (split_index, gain): the split sends rows [0, split_index) left and
        the rest right; gain is the reduction in sum of squared errors versus
        the unsplit node.  (-1, 0.0) when no valid split exists.  Ties keep
        the lowest split index.
    """
    n = y.shape[0]
    if n < 2 * min_leaf or n < 2:
        return -1, 0.0
    csum = np.cumsum(y)
    total = csum[n - 1]
    idx = np.arange(1, n)
    left = csum[: n - 1]
    nl = idx.astype(np.float64)
    nr = (n - idx).astype(np.float64)
    score = left * left / nl + (total - left) * (total - left) / nr
    valid = values[1:] != values[: n - 1]
    if min_leaf > 1:
        valid = valid & (idx >= min_leaf) & ((n - idx) >= min_leaf)
    score = np.where(valid, score, -np.inf)
    best = int(np.argmax(score))
    if not np.isfinite(score[best]):
        return -1, 0.0
    gain = score[best] - total * total / n
    if gain <= 0.0:
        return -1, 0.0
    return best + 1, gain


if _env_wants_numba():
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # numba missing: fall back silently
        njit = None
        NUMBA_ENABLED = False
else:
    njit = None
    NUMBA_ENABLED = False

if NUMBA_ENABLED:
    _jit = njit(cache=True)
    lstm_layer_forward = _jit(lstm_layer_forward_py)
    lstm_layer_backward = _jit(lstm_layer_backward_py)
    best_split_scan = _jit(best_split_scan_py)
else:
    lstm_layer_forward = lstm_layer_forward_py
    lstm_layer_backward = lstm_layer_backward_py
    best_split_scan = best_split_scan_py
