"""Naive reference implementations, written loop by loop on purpose."""

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for i_n in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[0, o, 0, 0]
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[i_n, cc, i * stride + u * dilation,
                                           j * stride + v * dilation] * w[o, cc, u, v])
                    out[i_n, o, i, j] = acc
    return out


def conv_transpose2d(x, w, b=None, stride=2, padding=0):
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    full = np.zeros((n, co, stride * (h - 1) + kh, stride * (wd - 1) + kw), dtype=x.dtype)
    for i_n in range(n):
        for cc in range(c):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for u in range(kh):
                            for v in range(kw):
                                full[i_n, o, i * stride + u, j * stride + v] += \
                                    x[i_n, cc, i, j] * w[cc, o, u, v]
    out = full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]
    if b is not None:
        out = out + b
    return out


def maxpool2x2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for i_n in range(n):
        for cc in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = x[i_n, cc, 2 * i, 2 * j]
                    for u in range(2):
                        for v in range(2):
                            best = max(best, x[i_n, cc, 2 * i + u, 2 * j + v])
                    out[i_n, cc, i, j] = best
    return out


def confusion(sr, gt):
    tp = tn = fp = fn = 0
    for s, g in zip(np.ravel(sr), np.ravel(gt)):
        if s and g:
            tp += 1
        elif s:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn
