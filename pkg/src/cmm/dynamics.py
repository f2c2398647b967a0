"""Latent recursion as discrete, NODE and NSDE updates, plus stability terms.

The update network is passed around as a plain callable ``f(u) -> Tensor``
so the same code runs against the model or against hand-built maps in tests.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

F = Callable[[Tensor], Tensor]

TRAJECTORY_HEADER = ("step", "dist_to_final", "lag2_delta", "equil_residual", "mean_jac_diag")


@dataclass
class LatentState:
    z_H: Tensor
    z_L: Tensor

    def detached(self) -> "LatentState":
        return LatentState(ad.detach(self.z_H), ad.detach(self.z_L))


@dataclass
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.sigma > 0


def apply_noise(z: Tensor, noise: NoiseSpec, rngs: Sequence[np.random.Generator] | None) -> Tensor:
    """Additive ``z + sigma*zeta`` or multiplicative ``z * (1 + sigma*zeta)``.

    ``rngs`` holds one generator per batch row so each slot draws from its own
    stream.
    """
    if not noise.active:
        return z
    if rngs is None or len(rngs) != z.shape[0]:
        raise ValueError("one rng per batch row is required for noisy steps")
    zeta = np.stack([r.standard_normal(z.shape[1:], dtype=np.float64) for r in rngs])
    zeta = (noise.sigma * zeta).astype(z.dtype)
    if noise.kind == "additive":
        return z + zeta
    return z * (1 + zeta)


def l_step(state: LatentState, x_hat: Tensor, f: F, noise: NoiseSpec = NoiseSpec(), rngs=None) -> Tensor:
    return apply_noise(f(state.z_H + state.z_L + x_hat), noise, rngs)


def h_step(state: LatentState, f: F, noise: NoiseSpec = NoiseSpec(), rngs=None) -> Tensor:
    return apply_noise(f(state.z_H + state.z_L), noise, rngs)


def cycle(state: LatentState, x_hat: Tensor, f: F, n_l: int, noise: NoiseSpec, rngs, trace=None) -> LatentState:
    z_H, z_L = state.z_H, state.z_L
    for _ in range(n_l):
        z_L = l_step(LatentState(z_H, z_L), x_hat, f, noise, rngs)
        if trace is not None:
            trace.append(("l", ad._tape() is not None))
    z_H = h_step(LatentState(z_H, z_L), f, noise, rngs)
    if trace is not None:
        trace.append(("h", ad._tape() is not None))
    return LatentState(z_H, z_L)


def rollout(
    x_hat: Tensor,
    carry: LatentState,
    model,
    n_h: int,
    n_l: int,
    grad_mode: str = "train",
    noise: NoiseSpec = NoiseSpec(),
    rngs=None,
    trace: list | None = None,
):
    """Run ``n_h`` cycles of ``n_l`` L-steps and one H-step.

    In train mode the first ``n_h - 1`` cycles run without recording and
    their result is detached, so only the final cycle carries adjoints.
    Returns ``(detached carry, logits, q_logits, live final state)``.
    """
    if grad_mode not in ("train", "eval"):
        raise ValueError(f"grad_mode must be 'train' or 'eval', got {grad_mode!r}")
    state = carry
    with ad.no_grad():
        for _ in range(n_h - 1):
            state = cycle(state, x_hat, model.f, n_l, noise, rngs, trace)
    state = state.detached()
    if grad_mode == "train":
        state = cycle(state, x_hat, model.f, n_l, noise, rngs, trace)
    else:
        with ad.no_grad():
            state = cycle(state, x_hat, model.f, n_l, noise, rngs, trace)
    logits = model.head(state.z_H)
    q = model.q(state.z_H)
    return state.detached(), logits, q, state


def euler_node_step(z: Tensor, x_hat: Tensor, f: Callable[[Tensor, Tensor], Tensor], dt: float) -> Tensor:
    """One explicit Euler step of dz/dt = F(z, x) - z.

    Written as ``(1 - dt) z + dt F`` so that dt = 1 reproduces the discrete
    update exactly.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    return z * (1.0 - dt) + f(z, x_hat) * dt


def equilibrium_residual(state: LatentState, f: F, target_kind: str = "z_H", x_hat: Tensor | None = None) -> Tensor:
    """mean[(detach(c) - F(c + z_L))^2] with c = z_H or c = x_hat."""
    if target_kind == "z_H":
        c = state.z_H
    elif target_kind == "x_hat":
        if x_hat is None:
            raise ValueError("x_hat required for target_kind='x_hat'")
        c = x_hat
    else:
        raise ValueError(f"unknown target_kind {target_kind!r}")
    diff = ad.detach(c) - f(c + state.z_L)
    return ad.mean(ad.square(diff))


def mean_jacobian_diag(
    f: F,
    point: Tensor,
    probes: int = 1,
    eps: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hutchinson estimate of (1/K) tr(dF/dz) at ``point`` (K = elements per sample).

    Each probe v is Rademacher; Jv is the central difference
    (F(z + eps v) - F(z - eps v)) / (2 eps), built from ordinary ops so the
    result stays differentiable in the network weights.  The point itself is
    treated as a constant.  Averaged over the batch axis as well.
    """
    if probes < 1 or eps <= 0:
        raise ValueError("probes >= 1 and eps > 0 required")
    rng = np.random.default_rng(0) if rng is None else rng
    base = ad.detach(point).data
    K = base.size
    total = None
    for _ in range(probes):
        v = (rng.integers(0, 2, size=base.shape) * 2 - 1).astype(base.dtype)
        plus = f(Tensor(base + eps * v))
        minus = f(Tensor(base - eps * v))
        est = ad.sum((plus - minus) * (v / (2 * eps))) * (1.0 / K)
        total = est if total is None else total + est
    return total * (1.0 / probes)


def rh_stable_penalty(mu) -> Tensor:
    """ReLU(mu - 1)^2: zero when the mean Jacobian diagonal is below one."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.float64(mu))
    return ad.square(ad.relu(mu - 1.0))


def rh_unstable_penalty(mu) -> Tensor:
    """ReLU(1 - mu)^2: zero when the mean Jacobian diagonal is above one."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.float64(mu))
    return ad.square(ad.relu(1.0 - mu))


def analyze_trajectory(
    f: F,
    x_hat: Tensor,
    init: LatentState,
    steps: int,
    n_l: int = 1,
    noise: NoiseSpec = NoiseSpec(),
    rngs=None,
    jac_eps: float = 1e-3,
    seed: int = 0,
) -> list[tuple]:
    """Integrate ``steps`` discrete steps and tabulate convergence diagnostics.

    A step is one L-update, with an H-update after every ``n_l`` of them.
    Row i holds the distance of z_H(i) to z_H(steps), ||z_L(i) - z_L(i-2)||
    (nan for i = 1), the equilibrium residual and the mean Jacobian diagonal.
    """
    if steps < 3:
        raise ValueError("steps must be >= 3")
    rng = np.random.default_rng(seed)
    hs, ls = [], [init.z_L.data]
    resid, mus = [], []
    z_H, z_L = init.z_H, init.z_L
    with ad.no_grad():
        for i in range(1, steps + 1):
            z_L = l_step(LatentState(z_H, z_L), x_hat, f, noise, rngs)
            if i % n_l == 0:
                z_H = h_step(LatentState(z_H, z_L), f, noise, rngs)
            st = LatentState(z_H, z_L)
            hs.append(z_H.data)
            ls.append(z_L.data)
            resid.append(float(equilibrium_residual(st, f).data))
            mus.append(float(mean_jacobian_diag(f, z_H + z_L, 1, jac_eps, rng).data))
    final = hs[-1].astype(np.float64)
    rows = []
    for i in range(1, steps + 1):
        dist = float(np.linalg.norm(hs[i - 1].astype(np.float64) - final))
        lag2 = float(np.linalg.norm(ls[i].astype(np.float64) - ls[i - 2])) if i >= 2 else float("nan")
        rows.append((i, dist, lag2, resid[i - 1], mus[i - 1]))
    return rows


def trajectory_csv(rows, fh: io.TextIOBase | None = None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue() if fh is None else ""
