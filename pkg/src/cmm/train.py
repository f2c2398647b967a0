"""Deep supervision with fused batch/segment iteration, ACT halting,
gradient accumulation, optimizers and weight EMA."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericFailure, Tape, Tensor
from .config import TERMS, CmmConfig
from .dynamics import (
    LatentState,
    NoiseSpec,
    equilibrium_residual,
    mean_jacobian_diag,
    rh_stable_penalty,
    rh_unstable_penalty,
    rollout,
)
from .gradnorm import GradNormState, gradnorm_update, per_term_grad_norms, soft_reset
from .losses import bce, lm_loss
from .net import Model, ModelParams
from .repulsion import repulsion_loss

log = logging.getLogger(__name__)


class SegmentFailure(ArithmeticError):
    """A loss term produced a non-finite value; ``term`` names it."""

    def __init__(self, term: str, cause: NumericFailure):
        super().__init__(f"loss term '{term}' failed: {cause}")
        self.term = term
        self.cause = cause


@dataclass
class LossReport:
    losses: dict[str, float]
    weights: dict[str, float]
    total: float
    n_active: int
    n_correct: int
    n_halted: int
    grad_norms: dict[str, float] | None = None


# ---------------------------------------------------------------------------
# ACT


def act_decide(q_logits, m: int, m_min: int, m_max: int, variant: str = "trm_halt") -> bool:
    """True for halt.  ``q_logits`` is a scalar (trm) or (halt, continue) pair (hrm)."""
    if m < 1:
        raise ValueError("segment counter starts at 1")
    if m >= m_max:
        return True
    q = np.asarray(q_logits, dtype=np.float64).reshape(-1)
    if variant == "trm_halt":
        wants = q[0] > 0
    else:
        wants = q[0] > q[1]
    return bool(wants and m >= m_min)


def q_targets(q_next, correct: bool, m: int, m_max: int) -> tuple[float, float]:
    """Q-learning targets (halt, continue) from next-segment Q-values (probabilities)."""
    q_halt, q_cont = (float(v) for v in np.asarray(q_next).reshape(-1)[:2])
    g_halt = 1.0 if correct else 0.0
    g_cont = q_halt if m >= m_max else max(q_halt, q_cont)
    return g_halt, g_cont


def sample_m_min(rng: np.random.Generator, m_max: int, eps_explore: float) -> int:
    if m_max >= 2 and rng.random() < eps_explore:
        return int(rng.integers(2, m_max + 1))
    return 1


# ---------------------------------------------------------------------------
# segment


def segment_terms(
    model: Model,
    tokens: np.ndarray,
    targets: np.ndarray,
    carry: LatentState,
    cfg: CmmConfig,
    terms: list[str],
    m: np.ndarray | None = None,
    rngs=None,
    probe_rng: np.random.Generator | None = None,
):
    """Forward one supervision segment inside the caller's tape.

    Returns ``(term_values, new_carry, logits, q, correct)``.
    """
    noise = NoiseSpec(cfg.noise_kind, cfg.sigma)
    x_hat = model.embed(tokens)
    new_carry, logits, q, live = rollout(x_hat, carry, model, cfg.N_H, cfg.N_L, "train", noise, rngs)
    preds = logits.data.argmax(axis=-1)
    correct = (preds == targets).all(axis=1)
    B = tokens.shape[0]
    probe_rng = np.random.default_rng(0) if probe_rng is None else probe_rng
    out: dict[str, Tensor] = {}
    for name in terms:
        try:
            if name == "lm":
                out[name] = lm_loss(logits, targets, cfg.stablemax_order, cfg.pad_token)
            elif name == "bce":
                if cfg.act_variant == "trm_halt":
                    out[name] = bce(ad.reshape(q, (B,)), correct)
                else:
                    out[name] = _hrm_bce(model, x_hat, new_carry, q, correct, m, cfg)
            elif name in ("rep_x", "rep_z"):
                if B < 2:
                    continue
                out[name] = repulsion_loss(x_hat if name == "rep_x" else live.z_H)
            elif name == "equil_z":
                out[name] = equilibrium_residual(live, model.f, "z_H")
            elif name == "equil_x":
                out[name] = equilibrium_residual(live, model.f, "x_hat", x_hat)
            elif name == "rh_stable_z":
                mu = mean_jacobian_diag(model.f, live.z_H + live.z_L, cfg.jac_probes, cfg.jac_eps, probe_rng)
                out[name] = rh_stable_penalty(mu)
            elif name == "rh_unstable_x":
                mu = mean_jacobian_diag(model.f, x_hat + live.z_L, cfg.jac_probes, cfg.jac_eps, probe_rng)
                out[name] = rh_unstable_penalty(mu)
            else:
                raise ValueError(f"unknown loss term {name!r}")
        except NumericFailure as e:
            raise SegmentFailure(name, e) from e
    return out, new_carry, logits, q, correct


def _hrm_bce(model, x_hat, new_carry, q, correct, m, cfg):
    B = q.shape[0]
    m = np.ones(B, dtype=np.int64) if m is None else m
    with ad.no_grad():
        _, _, q_next, _ = rollout(ad.detach(x_hat), new_carry, model, cfg.N_H, cfg.N_L, "eval")
    probs = 1 / (1 + np.exp(-q_next.data.astype(np.float64)))
    tg = np.array([q_targets(probs[b], bool(correct[b]), int(m[b]), cfg.M_max) for b in range(B)])
    # column selection as a tiny matmul keeps the op set small
    qh = ad.linear(q, Tensor(np.array([[1.0], [0.0]], dtype=q.dtype)))
    qc = ad.linear(q, Tensor(np.array([[0.0], [1.0]], dtype=q.dtype)))
    return (bce(ad.reshape(qh, (B,)), tg[:, 0]) + bce(ad.reshape(qc, (B,)), tg[:, 1])) * 0.5


def supervision_segment(
    model: Model,
    tokens: np.ndarray,
    targets: np.ndarray,
    carry: LatentState,
    cfg: CmmConfig,
    weights: dict[str, float],
    m: np.ndarray | None = None,
    rngs=None,
    probe_rng=None,
    norm_layer: Tensor | None = None,
):
    """Forward, weighted total loss and backward into the parameter grads.

    Returns ``(new_carry, report, q_logits, correct)``; the carry is detached.
    When ``norm_layer`` is given, per-term gradient norms w.r.t. it are
    measured with restricted reverse passes before the main backward.
    """
    names = [t for t in TERMS if weights.get(t, 0.0) != 0.0]
    with Tape() as tape:
        terms, new_carry, logits, q, correct = segment_terms(
            model, tokens, targets, carry, cfg, names, m, rngs, probe_rng
        )
        total = None
        for name, val in terms.items():
            wv = val * weights[name]
            total = wv if total is None else total + wv
    norms = None
    if norm_layer is not None:
        vals = per_term_grad_norms(tape, [terms[n] for n in terms], norm_layer)
        norms = dict(zip(terms, (float(v) for v in vals)))
    tape.backward(total)
    report = LossReport(
        losses={k: float(v.data) for k, v in terms.items()},
        weights={k: float(weights[k]) for k in terms},
        total=float(total.data),
        n_active=int(tokens.shape[0]),
        n_correct=int(correct.sum()),
        n_halted=0,
        grad_norms=norms,
    )
    return new_carry, report, q.data, correct


# ---------------------------------------------------------------------------
# optimizer and EMA


@dataclass
class OptState:
    kind: str = "adam_atan2"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_beta: float = 0.999
    schedule: dict = field(default_factory=lambda: {"kind": "constant"})
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0

    @classmethod
    def from_config(cls, cfg: CmmConfig) -> "OptState":
        o = cfg.optim
        return cls(o.kind, o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.ema_beta, dict(o.schedule))

    def lr_at(self, step: int) -> float:
        """Constant, or two-phase exponential decay lr -> lr_mid -> lr_end."""
        s = self.schedule
        if s.get("kind", "constant") == "constant":
            return self.lr
        mid_step, end_step = s["mid_step"], s["end_step"]
        if step <= mid_step:
            return self.lr * (s["lr_mid"] / self.lr) ** (step / mid_step)
        if step <= end_step:
            frac = (step - mid_step) / max(end_step - mid_step, 1)
            return s["lr_mid"] * (s["lr_end"] / s["lr_mid"]) ** frac
        return s["lr_end"]


def optimizer_step(opt: OptState, params: ModelParams, grads: dict[str, np.ndarray], frozen=()) -> bool:
    """AdamW or Adam-atan2 with bias correction; returns False when skipped.

    Non-finite gradients skip the step entirely (moments untouched).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            opt.skipped += 1
            log.warning("non-finite gradient in %s; optimizer step %d skipped", name, opt.step + 1)
            return False
    opt.step += 1
    t = opt.step
    lr = opt.lr_at(t)
    bc1 = 1 - opt.beta1**t
    bc2 = 1 - opt.beta2**t
    for name, p in params:
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if opt.kind == "adamw":
            upd = m_hat / (np.sqrt(v_hat) + opt.eps)
        else:
            upd = np.arctan2(m_hat, np.sqrt(v_hat))
        if opt.weight_decay:
            upd = upd + opt.weight_decay * p.data
        p.data -= (lr * upd).astype(p.data.dtype)
    return True


def ema_update(theta_ema: np.ndarray, theta: np.ndarray, beta: float) -> np.ndarray:
    if not 0 <= beta < 1:
        raise ValueError("EMA beta must lie in [0, 1)")
    return (beta * theta_ema + (1 - beta) * theta).astype(theta_ema.dtype)


def freeze_embeddings(params: ModelParams, epoch: int, after_epoch: int | float | None) -> set[str]:
    """Names excluded from the update; embedding grads are zeroed once frozen."""
    if after_epoch is None or epoch < after_epoch:
        return set()
    emb = params.tensors["embed"]
    if emb.grad is not None:
        emb.grad = np.zeros_like(emb.grad)
    return {"embed"}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: ModelParams, X: np.ndarray, Y: np.ndarray, batch_size: int = 256, halting: bool = True) -> dict:
    """Eval-mode rollout with ACT halting (M_min = 1, no noise).

    The prediction of each sample is the one at the segment where it halted.
    """
    cfg = params.cfg
    model = Model(params)
    preds = np.zeros_like(Y)
    used = np.zeros(len(X), dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, len(X), batch_size):
            xb = X[lo:lo + batch_size]
            n = len(xb)
            x_hat = model.embed(xb)
            z_H, z_L = x_hat.data.copy(), np.zeros_like(x_hat.data)
            done = np.zeros(n, dtype=bool)
            for m in range(1, cfg.M_max + 1):
                act = np.nonzero(~done)[0]
                if len(act) == 0:
                    break
                carry = LatentState(Tensor(z_H[act]), Tensor(z_L[act]))
                new, logits, q, _ = rollout(Tensor(x_hat.data[act]), carry, model, cfg.N_H, cfg.N_L, "eval")
                z_H[act], z_L[act] = new.z_H.data, new.z_L.data
                p = logits.data.argmax(axis=-1)
                for j, b in enumerate(act):
                    stop = act_decide(q.data[j], m, 1, cfg.M_max, cfg.act_variant) if halting else m >= cfg.M_max
                    if stop:
                        done[b] = True
                        preds[lo + b] = p[j]
                        used[lo + b] = m
    eq = preds == Y
    return {
        "exact": float(eq.all(axis=1).mean()),
        "token": float(eq.mean()),
        "mean_segments": float(used.mean()),
        "preds": preds,
    }


def final_latents(params: ModelParams, X: np.ndarray, segments: int | None = None) -> np.ndarray:
    """z_H after ``segments`` noise-free segments (M_max by default), no halting."""
    cfg = params.cfg
    model = Model(params)
    with ad.no_grad():
        x_hat = model.embed(X)
        state = LatentState(Tensor(x_hat.data.copy()), Tensor(np.zeros_like(x_hat.data)))
        for _ in range(segments or cfg.M_max):
            state, *_ = rollout(x_hat, state, model, cfg.N_H, cfg.N_L, "eval")
    return state.z_H.data


def latent_cosine(Z: np.ndarray) -> float:
    """Mean off-diagonal squared cosine between flattened samples."""
    with ad.no_grad():
        return float(repulsion_loss(Tensor(np.asarray(Z, dtype=np.float64))).data)


# ---------------------------------------------------------------------------
# fused training loop


class Loader:
    """Seeded per-epoch permutation of sample indices with a resumable cursor."""

    def __init__(self, n: int, seed: int, epoch: int = 0, pos: int = 0):
        self.n, self.seed, self.epoch, self.pos = n, seed, epoch, pos
        self._perm = self._permutation(epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 7, epoch]).permutation(self.n)

    def next(self) -> int | None:
        if self.pos >= self.n:
            return None
        i = int(self._perm[self.pos])
        self.pos += 1
        return i

    def new_epoch(self) -> None:
        self.epoch += 1
        self.pos = 0
        self._perm = self._permutation(self.epoch)

    def state(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


class CarrySlots:
    """Per-slot latent state, segment counter, halted flag and bound sample."""

    def __init__(self, cfg: CmmConfig):
        B, S, D = cfg.batch_size, cfg.S, cfg.D
        dt = np.dtype(cfg.dtype)
        self.z_H = np.zeros((B, S, D), dt)
        self.z_L = np.zeros((B, S, D), dt)
        self.m = np.zeros(B, np.int64)
        self.m_min = np.ones(B, np.int64)
        self.halted = np.ones(B, bool)
        self.sample = np.full(B, -1, np.int64)
        self.rngs = [_rng(cfg.seed, 1, b) for b in range(B)]


class Trainer:
    """Owns parameters, EMA, optimizer, AlgGradNorm state and carry slots."""

    def __init__(self, cfg: CmmConfig, X: np.ndarray, Y: np.ndarray, params: ModelParams | None = None):
        self.cfg = cfg
        self.X = np.asarray(X, dtype=np.int64)
        self.Y = np.asarray(Y, dtype=np.int64)
        if self.X.shape[1] != cfg.S or self.Y.shape != self.X.shape:
            raise ValueError(f"data shape {self.X.shape}/{self.Y.shape} does not match S={cfg.S}")
        self.params = params if params is not None else ModelParams.init(cfg)
        self.model = Model(self.params)
        self.ema = {k: t.data.copy() for k, t in self.params}
        self.opt = OptState.from_config(cfg)
        self.gradnorm: GradNormState | None = None
        if cfg.gradnorm.enabled:
            g = cfg.gradnorm
            self.gradnorm = GradNormState.create(cfg.active_terms(), g.alpha, g.rho, g.t_reset, g.period)
        self.slots = CarrySlots(cfg)
        self.loader = Loader(len(self.X), cfg.seed)
        self.act_rng = _rng(cfg.seed, 2)
        self.probe_rng = _rng(cfg.seed, 3)
        self.step = 0
        self.inner_k = 0
        self.seg_since_step = 0
        self.segments = 0
        self._pending: list[LossReport] = []
        self.on_step: Callable[[dict], None] | None = None
        self.eval_data: tuple[np.ndarray, np.ndarray] | None = None
        self.last_eval: dict | None = None
        self._t0 = time.perf_counter()

    # -- weights -------------------------------------------------------------

    def current_weights(self) -> dict[str, float]:
        if self.gradnorm is not None:
            return self.gradnorm.weights
        return {t: float(self.cfg.lambdas[t]) for t in self.cfg.active_terms()}

    def ema_params(self) -> ModelParams:
        return ModelParams(self.cfg, {k: Tensor(v.copy(), name=k) for k, v in self.ema.items()})

    # -- slots ---------------------------------------------------------------

    def _bind(self, slot: int, sample: int) -> None:
        s = self.slots
        with ad.no_grad():
            x_hat = self.model.embed(self.X[sample:sample + 1]).data[0]
        s.z_H[slot] = x_hat
        s.z_L[slot] = 0
        s.m[slot] = 0
        s.halted[slot] = False
        s.sample[slot] = sample
        s.m_min[slot] = sample_m_min(self.act_rng, self.cfg.M_max, self.cfg.eps_explore)

    def _refill(self) -> bool:
        """Bind fresh samples to halted slots; False when the loader ran dry."""
        for b in np.nonzero(self.slots.halted)[0]:
            i = self.loader.next()
            if i is None:
                return False
            self._bind(int(b), i)
        return True

    # -- one segment ---------------------------------------------------------

    def run_segment(self) -> LossReport:
        cfg, s = self.cfg, self.slots
        idx = np.nonzero(~s.halted)[0]
        samples = s.sample[idx]
        m_next = s.m[idx] + 1
        carry = LatentState(Tensor(s.z_H[idx]), Tensor(s.z_L[idx]))
        due = self.gradnorm is not None and self.seg_since_step == 0 and self.step % self.gradnorm.period == 0
        layer = self.params.last_shared_layer() if due else None
        new, report, q, correct = supervision_segment(
            self.model,
            self.X[samples],
            self.Y[samples],
            carry,
            cfg,
            self.current_weights(),
            m=m_next,
            rngs=[s.rngs[b] for b in idx],
            probe_rng=self.probe_rng,
            norm_layer=layer,
        )
        s.z_H[idx] = new.z_H.data
        s.z_L[idx] = new.z_L.data
        s.m[idx] = m_next
        halted = 0
        for j, b in enumerate(idx):
            if act_decide(q[j], int(s.m[b]), int(s.m_min[b]), cfg.M_max, cfg.act_variant):
                s.halted[b] = True
                halted += 1
        report.n_halted = halted
        self.segments += 1
        return report

    # -- optimizer step ------------------------------------------------------

    def _apply_step(self) -> dict:
        n = self.seg_since_step
        grads = {}
        for name, p in self.params:
            if p.grad is not None:
                grads[name] = p.grad / n if n > 1 else p.grad
        frozen = freeze_embeddings(self.params, self.loader.epoch, self.cfg.freeze_embed_after)
        if "embed" in grads and frozen:
            grads["embed"] = np.zeros_like(grads["embed"])
        optimizer_step(self.opt, self.params, grads, frozen)
        self.params.zero_grad()
        beta = self.opt.ema_beta
        for name, p in self.params:
            if name not in frozen:
                self.ema[name] = ema_update(self.ema[name], p.data, beta)
        reports, self._pending = self._pending, []
        if self.gradnorm is not None:
            self._update_gradnorm(reports)
        self.step += 1
        self.seg_since_step = 0
        rec = self._record(reports)
        cfg = self.cfg
        if cfg.eval_every and self.eval_data is not None and self.step % cfg.eval_every == 0:
            res = evaluate(self.ema_params(), *self.eval_data, batch_size=max(cfg.batch_size, 64))
            self.last_eval = {k: v for k, v in res.items() if k != "preds"}
            rec["eval_exact"] = res["exact"]
            rec["eval_token"] = res["token"]
            rec["eval_mean_segments"] = res["mean_segments"]
        if self.on_step is not None:
            self.on_step(rec)
        return rec

    def _update_gradnorm(self, reports: list[LossReport]) -> None:
        gn = self.gradnorm
        first = next((r for r in reports if r.grad_norms is not None), None)
        if first is None:
            return
        losses = [first.losses.get(t, 0.0) for t in gn.terms]
        norms = [first.grad_norms.get(t, 0.0) for t in gn.terms]
        if gn.L0 is not None and gn.step > 0 and gn.step % gn.t_reset == 0:
            soft_reset(gn, losses)
        gradnorm_update(gn, losses, norms)

    def _record(self, reports: list[LossReport]) -> dict:
        n_act = sum(r.n_active for r in reports) or 1
        terms = sorted({k for r in reports for k in r.losses})
        losses = {t: float(np.mean([r.losses[t] for r in reports if t in r.losses])) for t in terms}
        rec = {
            "step": self.step,
            "epoch": self.loader.epoch,
            "segments": len(reports),
            "losses": losses,
            "total": float(np.mean([r.total for r in reports])) if reports else 0.0,
            "lambdas": self.current_weights(),
            "grad_norms": next((r.grad_norms for r in reports if r.grad_norms is not None), None),
            "train_exact": sum(r.n_correct for r in reports) / n_act,
            "halted_frac": sum(r.n_halted for r in reports) / n_act,
            "lr": self.opt.lr_at(self.opt.step),
            "wall_time": time.perf_counter() - self._t0,
        }
        return rec

    # -- fused loop ----------------------------------------------------------

    def fused_epoch(self, max_steps: int | None = None) -> list[dict]:
        """Iterate batches until the loader is exhausted (or ``max_steps``).

        Each batch iteration refills halted slots and then runs up to
        ``N_accum`` segments on the active slots; the optimizer fires after
        every ``N_grad`` segments.  Exhausting the loader flushes any partial
        accumulation and starts the next epoch.
        """
        cfg = self.cfg
        records = []
        while max_steps is None or self.step < max_steps:
            if self.inner_k == 0 or self.inner_k >= cfg.N_accum or self.slots.halted.all():
                self.inner_k = 0
                if not self._refill():
                    if self.seg_since_step:
                        records.append(self._apply_step())
                    self.loader.new_epoch()
                    return records
                if self.slots.halted.all():
                    self.loader.new_epoch()
                    return records
            report = self.run_segment()
            self._pending.append(report)
            self.inner_k += 1
            self.seg_since_step += 1
            if self.seg_since_step >= cfg.N_grad:
                records.append(self._apply_step())
        return records

    def train(self, steps: int) -> list[dict]:
        records = []
        while self.step < steps:
            records.extend(self.fused_epoch(max_steps=steps))
        return records

    def evaluate(self, X, Y, use_ema: bool = True, batch_size: int = 256) -> dict:
        params = self.ema_params() if use_ema else self.params
        return evaluate(params, np.asarray(X), np.asarray(Y), batch_size)


def wall_free(rec: dict) -> dict:
    """Metrics record without the wall-clock field (for determinism checks)."""
    return {k: v for k, v in rec.items() if k != "wall_time"}


def lr_decay_factor(step: int, half_life: int) -> float:
    return math.pow(0.5, step / half_life)
