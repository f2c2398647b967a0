"""Per-cell softmax regression on the one-hot grid.

A deliberately weak reference point for calibrating accuracy thresholds: each
output cell sees the whole one-hot input through one linear map and nothing
else, so constraint propagation is out of reach.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import CmmConfig
from .losses import lm_loss
from .net import ModelParams
from .train import OptState, optimizer_step


def _one_hot(X: np.ndarray, vocab: int) -> np.ndarray:
    return np.eye(vocab)[X].reshape(len(X), -1)


def _logits(X, W: Tensor, b: Tensor, S: int, v_in: int, v_out: int) -> Tensor:
    return ad.reshape(ad.linear(Tensor(_one_hot(X, v_in)), W, b), (len(X), S, v_out))


def fit_logistic(
    X: np.ndarray, Y: np.ndarray, vocab_in: int, vocab_out: int,
    epochs: int = 30, lr: float = 1e-2, batch_size: int = 256, seed: int = 0,
) -> dict:
    """Adam on the order-5 StableMax cross-entropy; returns the weight arrays."""
    S = X.shape[1]
    cfg = CmmConfig(D=8, S=S, vocab_in=vocab_in, vocab_out=vocab_out, dtype="float64")
    W = Tensor(np.zeros((S * vocab_in, S * vocab_out)), requires_grad=True)
    b = Tensor(np.zeros(S * vocab_out), requires_grad=True)
    params = ModelParams(cfg, {"W": W, "b": b})
    opt = OptState(kind="adamw", lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(len(X))
        for lo in range(0, len(X), batch_size):
            idx = perm[lo:lo + batch_size]
            with Tape() as tape:
                loss = lm_loss(_logits(X[idx], W, b, S, vocab_in, vocab_out), Y[idx], 5)
            tape.backward(loss)
            optimizer_step(opt, params, {"W": W.grad, "b": b.grad})
            params.zero_grad()
    return {"W": W.data.copy(), "b": b.data.copy(), "vocab_in": vocab_in, "vocab_out": vocab_out}


def predict_logistic(model: dict, X: np.ndarray) -> np.ndarray:
    S = X.shape[1]
    z = _one_hot(X, model["vocab_in"]) @ model["W"] + model["b"]
    return z.reshape(len(X), S, model["vocab_out"]).argmax(-1)
