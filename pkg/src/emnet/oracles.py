"""Naive reference implementations used for differential testing.

Deliberately slow loops over plain numpy arrays in float64; nothing here
shares code with the fast paths they check.
"""
import math

import numpy as np


def conv2d_naive(x, w, bias=None, stride=1, padding=0, groups=1):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b, g * cin_g + ci, y, xx] * w[o, ci, di, dj]
                    out[b, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def conv2d_mac_count(x_shape, w_shape, stride=1, padding=0):
    """Count multiply-accumulates by visiting every output element."""
    _, _, h, wd = x_shape
    cout, cin_g, k, _ = w_shape
    macs = 0
    for _o in range(cout):
        for i in range((h + 2 * padding - k) // stride + 1):
            for _j in range((wd + 2 * padding - k) // stride + 1):
                macs += cin_g * k * k
    return macs


def matmul_naive(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def softmax_naive(v):
    e = [math.exp(float(t)) for t in v]
    s = sum(e)
    return np.array([t / s for t in e])


def attention_naive(q, k, v, mask=None):
    """Single-head softmax(q k^T / sqrt(d) + mask) v, row by row."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [float(q[i] @ k[j]) / math.sqrt(d) + (0.0 if mask is None else float(mask[i, j]))
                  for j in range(k.shape[0])]
        m = max(logits)
        wts = softmax_naive([t - m for t in logits])
        out[i] = sum(wts[j] * v[j] for j in range(k.shape[0]))
    return out
