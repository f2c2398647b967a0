"""Hyperspherical repulsion between the samples of a batch."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-12


class DegenerateInput(ValueError):
    pass


def repulsion_loss(Z: Tensor) -> Tensor:
    """Mean squared cosine similarity over ordered pairs i != j.

    Each sample is flattened to R^(S*D) and L2-normalized first, so the loss
    lies in [0, 1] and ignores sign and scale of individual samples.
    """
    B = Z.shape[0]
    if B < 2:
        raise DegenerateInput("repulsion needs at least two samples")
    flat = ad.reshape(Z, (B, -1))
    norms = np.sqrt(np.sum(np.square(flat.data, dtype=np.float64), axis=1))
    if (norms < NORM_EPS).any():
        raise DegenerateInput("sample with (near) zero norm cannot be normalized")
    norm = ad.sqrt(ad.sum(ad.square(flat), axis=1, keepdims=True) + NORM_EPS)
    U = flat / norm
    gram = ad.matmul(U, ad.transpose(U, (1, 0)))
    off = 1.0 - np.eye(B, dtype=Z.dtype)
    return ad.sum(ad.square(gram) * off) * (1.0 / (B * (B - 1)))
