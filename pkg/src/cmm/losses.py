"""StableMax normalizers and the two task losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ORDERS = (1, 3, 5)


def _poly(x, order: int):
    """Truncated Taylor series of e^x in Horner form."""
    if order == 1:
        return 1 + x
    if order == 3:
        return 1 + x * (1 + 0.5 * x * (1 + x / 3))
    return 1 + x * (1 + 0.5 * x * (1 + x * (1 + x * (1 + x / 5) / 4) / 3))


def _dpoly(x, order: int):
    # derivative of the order-k truncation is the order-(k-1) truncation
    if order == 1:
        return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0
    if order == 3:
        return 1 + x * (1 + 0.5 * x)
    return 1 + x * (1 + 0.5 * x * (1 + x * (1 + x / 4) / 3))


def _check_order(order: int) -> None:
    if order not in ORDERS:
        raise ValueError(f"stablemax order must be one of {ORDERS}, got {order}")


def s_fn(x, order: int = 1):
    """Positive, increasing stand-in for e^x.

    ``p(x)`` for x >= 0 and ``1 / p(-x)`` for x < 0, where p is the order-k
    Taylor polynomial of the exponential.  Works on scalars and arrays.
    """
    _check_order(order)
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    pos = x >= 0
    xp = np.where(pos, x, 0)
    xn = np.where(pos, 0, -x)
    out = np.where(pos, _poly(xp, order), 1 / _poly(xn, order))
    return out.astype(x.dtype) if isinstance(out, np.ndarray) and out.ndim else float(out)


def _ds(x: np.ndarray, order: int) -> np.ndarray:
    x64 = x.astype(np.float64)
    pos = x64 >= 0
    xp = np.where(pos, x64, 0)
    xn = np.where(pos, 0, -x64)
    pn = _poly(xn, order)
    # divide twice so that p(-x)^2 never overflows
    return np.where(pos, _dpoly(xp, order), _dpoly(xn, order) / pn / pn).astype(x.dtype)


def s_tensor(x: Tensor, order: int) -> Tensor:
    _check_order(order)
    return ad.unary(f"s{order}", x, lambda v: s_fn(v, order), lambda v, y: _ds(v, order))


def stablemax(logits: Tensor, order: int = 1) -> Tensor:
    if logits.shape[-1] < 2:
        raise ValueError("stablemax needs at least 2 classes")
    s = s_tensor(logits, order)
    return s / ad.sum(s, axis=-1, keepdims=True)


def lm_loss(logits: Tensor, targets, order: int = 1, pad_token: int | None = None) -> Tensor:
    """Mean over positions of -log stablemax(logits)[target].

    Positions whose target equals ``pad_token`` contribute nothing.
    """
    targets = np.asarray(targets, dtype=np.int64)
    C = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape[:-1]}")
    keep = np.ones(targets.shape, bool) if pad_token is None else targets != pad_token
    live = targets[keep]
    if live.size and (live.min() < 0 or live.max() >= C):
        raise ValueError(f"target out of range [0, {C})")
    targets = np.where(keep, targets, 0)
    s = s_tensor(logits, order)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1, axis=-1)
    s_t = ad.sum(s * onehot, axis=-1)
    nll = ad.log(ad.sum(s, axis=-1)) - ad.log(s_t)
    if pad_token is None:
        return ad.mean(nll)
    mask = keep.astype(logits.dtype)
    n = max(float(mask.sum()), 1.0)
    return ad.sum(nll * mask) * (1.0 / n)


def bce(logit: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits: softplus(q) - t*q."""
    t = np.asarray(target, dtype=logit.dtype)
    return ad.mean(ad.softplus(logit) - logit * t)
