"""Fused numeric kernels; single-threaded, bitwise deterministic.

numba keeps the hot attention-sized elementwise chains from making several
full passes over memory.  All kernels operate on the last axis of contiguous
float64 arrays.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _softmax2d(x):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(c):
            out[i, j] *= inv
    return out


@njit(cache=True)
def _softmax2d_bwd(p, g):
    n, c = p.shape
    out = np.empty_like(p)
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += p[i, j] * g[i, j]
        for j in range(c):
            out[i, j] = p[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def _leaky2d(x, slope):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for j in range(c):
            v = x[i, j]
            out[i, j] = v if v > 0.0 else slope * v
    return out


@njit(cache=True)
def _leaky2d_bwd(x, g, slope):
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for j in range(c):
            out[i, j] = g[i, j] if x[i, j] > 0.0 else slope * g[i, j]
    return out


@njit(cache=True)
def _attn_softmax_fwd(scores, bias, scale):
    """softmax(scores * scale + bias) along the last axis; bias broadcasts
    over the query (middle) axis."""
    nb, nq, nk = scores.shape
    out = np.empty_like(scores)
    for b in range(nb):
        for i in range(nq):
            m = scores[b, i, 0] * scale + bias[b, 0]
            for j in range(1, nk):
                v = scores[b, i, j] * scale + bias[b, j]
                if v > m:
                    m = v
            s = 0.0
            for j in range(nk):
                e = np.exp(scores[b, i, j] * scale + bias[b, j] - m)
                out[b, i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(nk):
                out[b, i, j] *= inv
    return out


@njit(cache=True)
def _attn_softmax_bwd(p, g, scale):
    nb, nq, nk = p.shape
    dscores = np.empty_like(p)
    dbias = np.zeros((nb, nk))
    for b in range(nb):
        for i in range(nq):
            dot = 0.0
            for j in range(nk):
                dot += p[b, i, j] * g[b, i, j]
            for j in range(nk):
                t = p[b, i, j] * (g[b, i, j] - dot)
                dscores[b, i, j] = t * scale
                dbias[b, j] += t
    return dscores, dbias


@njit(cache=True)
def _attn_pool_bwd(p, g_pooled, scale):
    """Backward of mean-over-queries(softmax(...)): g_pooled is (nb, nk)."""
    nb, nq, nk = p.shape
    dscores = np.empty_like(p)
    dbias = np.zeros((nb, nk))
    inv = 1.0 / nq
    for b in range(nb):
        for i in range(nq):
            dot = 0.0
            for j in range(nk):
                dot += p[b, i, j] * g_pooled[b, j]
            dot *= inv
            for j in range(nk):
                t = p[b, i, j] * (g_pooled[b, j] * inv - dot)
                dscores[b, i, j] = t * scale
                dbias[b, j] += t
    return dscores, dbias


@njit(cache=True)
def _gat_logits_fwd(left, right, u, efeat, mask, slope, fill):
    """leaky(left_i + right_j + u * efeat_ij) with non-edges set to `fill`.

    Returns (logits, positive-preactivation flags)."""
    n = left.shape[0]
    out = np.empty((n, n))
    pos = np.empty((n, n), dtype=np.bool_)
    for i in range(n):
        li = left[i, 0]
        for j in range(n):
            pre = li + right[j, 0] + u * efeat[i, j]
            p = pre > 0.0
            pos[i, j] = p
            if mask[i, j]:
                out[i, j] = pre if p else slope * pre
            else:
                out[i, j] = fill
    return out, pos


@njit(cache=True)
def _gat_logits_bwd(g, pos, mask, efeat, slope):
    n = g.shape[0]
    dleft = np.zeros((n, 1))
    dright = np.zeros((n, 1))
    du = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if not mask[i, j]:
                continue
            t = g[i, j] if pos[i, j] else slope * g[i, j]
            acc += t
            dright[j, 0] += t
            du += t * efeat[i, j]
        dleft[i, 0] = acc
    return dleft, dright, du


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    return _softmax2d(_rows(x)).reshape(x.shape)


def softmax_lastaxis_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _softmax2d_bwd(_rows(p), _rows(g)).reshape(p.shape)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    if x.ndim == 0:
        v = float(x)
        return np.asarray(v if v > 0.0 else slope * v)
    return _leaky2d(_rows(x), slope).reshape(x.shape)


def leaky_relu_bwd(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    if x.ndim == 0:
        return np.asarray(float(g) if float(x) > 0.0 else slope * float(g))
    return _leaky2d_bwd(_rows(x), _rows(g), slope).reshape(x.shape)


def attn_softmax(scores: np.ndarray, bias: np.ndarray, scale: float) -> np.ndarray:
    return _attn_softmax_fwd(np.ascontiguousarray(scores),
                             np.ascontiguousarray(bias), scale)


def attn_softmax_bwd(p: np.ndarray, g: np.ndarray, scale: float):
    return _attn_softmax_bwd(p, np.ascontiguousarray(g), scale)


def attn_pool_bwd(p: np.ndarray, g_pooled: np.ndarray, scale: float):
    return _attn_pool_bwd(p, np.ascontiguousarray(g_pooled), scale)


def gat_logits(left, right, u, efeat, mask, slope, fill):
    return _gat_logits_fwd(left, right, float(u), efeat, mask, slope, fill)


def gat_logits_bwd(g, pos, mask, efeat, slope):
    return _gat_logits_bwd(np.ascontiguousarray(g), pos, mask, efeat, slope)
