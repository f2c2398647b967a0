"""Algebraic GradNorm: closed-form loss-weight balancing.

All controller arithmetic is float64 regardless of model precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor

CLAMP_LO, CLAMP_HI = 0.1, 10.0
NORM_EPS = 1e-12
LOSS_FLOOR = 1e-8


class ControllerError(ValueError):
    pass


@dataclass
class GradNormState:
    terms: list[str]
    lam: np.ndarray
    L0: np.ndarray | None = None
    alpha: float = 1.5
    rho: float = 0.9
    t_reset: int = 1000
    period: int = 1
    step: int = 0
    last_norms: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def create(cls, terms: Sequence[str], alpha=1.5, rho=0.9, t_reset=1000, period=1) -> "GradNormState":
        n = len(terms)
        return cls(list(terms), np.ones(n), None, alpha, rho, t_reset, period)

    @property
    def weights(self) -> dict[str, float]:
        return {t: float(v) for t, v in zip(self.terms, self.lam)}

    def to_dict(self) -> dict:
        return {
            "terms": self.terms,
            "lam": [float(v) for v in self.lam],
            "L0": None if self.L0 is None else [float(v) for v in self.L0],
            "alpha": self.alpha,
            "rho": self.rho,
            "t_reset": self.t_reset,
            "period": self.period,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradNormState":
        return cls(
            list(d["terms"]),
            np.array(d["lam"], dtype=np.float64),
            None if d["L0"] is None else np.array(d["L0"], dtype=np.float64),
            d["alpha"],
            d["rho"],
            d["t_reset"],
            d["period"],
            d["step"],
        )


def gradnorm_update(state: GradNormState, losses, grad_norms) -> GradNormState:
    """One controller update from per-term losses and raw gradient norms.

    G_n = lam_n * ||grad L_n||; targets are mean(G) * r_n^alpha with r_n the
    loss ratio L_n / L0_n relative to its mean.  The per-term factor
    target / G is clamped to [0.1, 10], the weights renormalized to sum to N
    and blended into the old weights with factor rho.
    """
    L = np.asarray(losses, dtype=np.float64)
    g = np.asarray(grad_norms, dtype=np.float64)
    if not (np.isfinite(L).all() and np.isfinite(g).all()) or (L < 0).any() or (g < 0).any():
        raise ControllerError("losses and gradient norms must be finite and >= 0")
    if state.L0 is None:
        state.L0 = np.maximum(L, LOSS_FLOOR)
    if (state.L0 <= 0).any():
        raise ControllerError("reference losses must be > 0")
    n = len(state.terms)
    G = state.lam * g
    G_bar = G.mean()
    ratio = L / state.L0
    r = ratio / ratio.mean() if ratio.mean() > 0 else np.ones(n)
    target = G_bar * r ** state.alpha
    factor = np.clip(target / (G + NORM_EPS), CLAMP_LO, CLAMP_HI)
    tmp = state.lam * factor
    lam_hat = tmp * (n / tmp.sum())
    state.lam = state.rho * state.lam + (1 - state.rho) * lam_hat
    # restore the exact simplex sum lost to rounding in the blend
    state.lam *= n / state.lam.sum()
    state.last_norms = g
    state.step += 1
    return state


def soft_reset(state: GradNormState, current_losses) -> GradNormState:
    """Blend the reference losses halfway toward the current ones."""
    cur = np.maximum(np.asarray(current_losses, dtype=np.float64), LOSS_FLOOR)
    if state.L0 is None:
        state.L0 = cur
    else:
        state.L0 = 0.5 * state.L0 + 0.5 * cur
    return state


def per_term_grad_norms(tape: Tape, loss_terms: Sequence[Tensor], layer: Tensor) -> np.ndarray:
    """||d L_n / d layer||_2 for each term, one restricted reverse pass each.

    A term with no dependence on ``layer`` gets norm 0.
    """
    out = np.zeros(len(loss_terms))
    for i, term in enumerate(loss_terms):
        if not term.requires_grad:
            continue
        (g,) = tape.gradients(term, [layer])
        out[i] = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
    return out
