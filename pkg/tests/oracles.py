"""Slow, independently written reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np


def dense_sinkhorn(cost, lam, r=None, c=None, iters=5000, tol=1e-13):
    """Plain numpy Sinkhorn in float64, written without reference to the package code."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    r = np.full(n, 1.0 / n) if r is None else np.asarray(r, dtype=np.float64)
    c = np.full(m, 1.0 / m) if c is None else np.asarray(c, dtype=np.float64)
    K = np.exp(-lam * cost)
    a = np.ones(n)
    b = np.ones(m)
    for _ in range(iters):
        a = r / (K @ b)
        b = c / (K.T @ a)
        P = a[:, None] * K * b[None, :]
        if max(abs(P.sum(1) - r).max(), abs(P.sum(0) - c).max()) < tol:
            break
    return a[:, None] * K * b[None, :]


def entropic_objective_loop(plan, cost, lam):
    total = 0.0
    for i in range(plan.shape[0]):
        for j in range(plan.shape[1]):
            p = float(plan[i, j])
            total += p * float(cost[i, j])
            if p > 0:
                total += p * math.log(p) / lam
    return total


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_attention_dense(a, w_q, w_k, w_v):
    """Single-example attention: A'' from a parameter-free self-attention, then the cross term."""
    a = np.asarray(a, dtype=np.float64)
    d = a.shape[1]
    ctx = softmax_rows(a @ a.T / math.sqrt(d)) @ a
    scores = (ctx @ w_q) @ (a @ w_k).T / math.sqrt(w_k.shape[1])
    attn = softmax_rows(scores)
    return attn @ (a @ w_v), attn


def cosine_volume_loop(a, b):
    """a: (C, Ha, Wa), b: (C, Hb, Wb) -> clamped cosine volume via explicit loops."""
    C, ha, wa = a.shape
    _, hb, wb = b.shape
    out = np.zeros((ha, wa, hb, wb))
    for i in range(ha):
        for j in range(wa):
            u = a[:, i, j]
            for k in range(hb):
                for l in range(wb):
                    v = b[:, k, l]
                    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
                    s = 0.0 if nu == 0 or nv == 0 else float(u @ v) / (nu * nv)
                    out[i, j, k, l] = max(s, 0.0)
    return out


def iou_loop(pred, gt):
    inter = union = 0
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        p, g = bool(p), bool(g)
        inter += p and g
        union += p or g
    return 1.0 if union == 0 else inter / union


def bce_loop(p, y, eps=1e-7):
    total = 0.0
    flat_p, flat_y = np.asarray(p).ravel(), np.asarray(y).ravel()
    for pi, yi in zip(flat_p, flat_y):
        pi = min(max(float(pi), eps), 1 - eps)
        total -= yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return total / flat_p.size


def ot_denoise_loop(feature, plan, cost, threshold):
    C, H, W = feature.shape
    out = np.array(feature, dtype=np.float64)
    for i in range(H * W):
        kept = sum(plan[i, j] for j in range(H * W) if cost[i, j] < threshold)
        total = sum(plan[i, j] for j in range(H * W))
        out[:, i // W, i % W] *= kept / total
    return out


def central_difference(fn, tensor, flat_index, h=1e-6):
    """d fn() / d tensor.view(-1)[flat_index] by central differences, restoring the entry afterwards."""
    import torch

    flat = tensor.data.view(-1)
    orig = float(flat[flat_index])
    with torch.no_grad():
        flat[flat_index] = orig + h
        plus = float(fn())
        flat[flat_index] = orig - h
        minus = float(fn())
        flat[flat_index] = orig
    return (plus - minus) / (2 * h)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))
