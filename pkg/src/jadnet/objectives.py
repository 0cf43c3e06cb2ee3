"""Differentiable detector objectives.

A *sanitizer* is any callable ``s(x) -> (x_san, vjp)`` on flat batches where
``vjp(g)`` maps a gradient on ``x_san`` back to ``x``. A plain array may be
passed instead, in which case it is a fixed reference with no gradient path.
"""

from __future__ import annotations

import numpy as np

from .netcore import Network, backward, cross_entropy, record, softmax

D1_GUARD = 1e-12


def _resolve(sanitizer, x):
    if callable(sanitizer):
        return sanitizer(x)
    ref = np.asarray(sanitizer, dtype=np.float64).reshape(x.shape)
    return ref, None


def _layer_out(tape, net, idx):
    # idx == net.n addresses the optional softmax entry appended to the trace
    if idx == net.n:
        return softmax(tape.z[-1])
    return tape.z[idx]


def _inject(upstream, tape, net, idx, g):
    if idx == net.n:
        p = softmax(tape.z[-1])
        g = p * (g - (g * p).sum(axis=1, keepdims=True))
        idx = net.n - 1
    upstream[idx] = upstream[idx] + g if idx in upstream else g


def jad_ratio(net: Network, x, sanitizer, first: int = 0, last: int | None = None,
              guard: float = D1_GUARD):
    """``d_last / max(d_first, guard)`` between x and its sanitized copy, with gradient.

    Layer indices are 0-based; ``last = net.n`` selects the softmax head.
    Returns ``(ratio, grad)`` shaped like the input (per-sample for a batch).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    last = net.n - 1 if last is None else last
    x_san, vjp = _resolve(sanitizer, xb)

    ta, ts = record(net, xb), record(net, x_san)
    e_last = _layer_out(ta, net, last) - _layer_out(ts, net, last)
    e_first = _layer_out(ta, net, first) - _layer_out(ts, net, first)
    d_last = np.linalg.norm(e_last, axis=1)
    d_first = np.linalg.norm(e_first, axis=1)
    denom = np.maximum(d_first, guard)
    ratio = d_last / denom

    safe_last = np.where(d_last > 0, d_last, 1.0)
    g_last = e_last / (safe_last * denom)[:, None] * (d_last > 0)[:, None]
    active = d_first > guard
    safe_first = np.where(active, d_first, 1.0)
    g_first = -e_first * (d_last / (denom**2 * safe_first) * active)[:, None]

    up_a: dict[int, np.ndarray] = {}
    _inject(up_a, ta, net, last, g_last)
    _inject(up_a, ta, net, first, g_first)
    grad = backward(net, ta, up_a)
    if vjp is not None:
        up_s: dict[int, np.ndarray] = {}
        _inject(up_s, ts, net, last, -g_last)
        _inject(up_s, ts, net, first, -g_first)
        grad = grad + vjp(backward(net, ts, up_s))
    if single:
        return float(ratio[0]), grad[0]
    return ratio, grad


def composite(net: Network, x, target, lam: float = 1.0, first: int = 0,
              last: int | None = None):
    """Classical adaptive objective ``CE(g(x), y) - lam * ratio`` and its gradient.

    ``target`` is ``(labels, sanitizer)``.
    """
    labels, sanitizer = target
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    tape = record(net, xb)
    ce, g_logits = cross_entropy(tape.z[-1], labels)
    grad = backward(net, tape, {net.n - 1: g_logits})
    value = ce
    if lam != 0:
        ratio, g_ratio = jad_ratio(net, xb, sanitizer, first, last)
        value = ce - lam * ratio
        grad = grad - lam * g_ratio
    if single:
        return float(value[0]), grad[0]
    return value, grad


def ce_gradient(net: Network, x: np.ndarray, labels) -> np.ndarray:
    tape = record(net, x)
    _, g_logits = cross_entropy(tape.z[-1], labels)
    return backward(net, tape, {net.n - 1: g_logits})
