"""``cmm`` command-line entry point.

Exit codes: 0 success, 1 input or config error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, tasks
from .autodiff import NumericFailure, Tape, Tensor
from .config import TERMS, CmmConfig, ConfigError
from .dynamics import (
    LatentState,
    NoiseSpec,
    analyze_trajectory,
    mean_jacobian_diag,
    rh_stable_penalty,
    rh_unstable_penalty,
    rollout,
    trajectory_csv,
)
from .net import InputError, Model, ModelParams
from .train import SegmentFailure, Trainer, evaluate, segment_terms

log = logging.getLogger("cmm")

GRADCHECK_TOL = 1e-4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# threads


def thread_limit():
    """Pin BLAS threads to CMM_THREADS when set."""
    n = os.environ.get("CMM_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


# ---------------------------------------------------------------------------
# data helpers


def load_data(path: str | Path, cfg: CmmConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    insts = tasks.read_jsonl(path)
    if not insts:
        raise UsageError(f"{path}: no instances")
    X, Y = tasks.as_arrays(insts)
    if cfg is not None:
        if X.shape[1] != cfg.S:
            raise UsageError(f"{path}: sequence length {X.shape[1]} does not match config S={cfg.S}")
        if X.max() >= cfg.vocab_in or X.min() < 0:
            raise UsageError(f"{path}: input tokens outside [0, {cfg.vocab_in})")
        if Y.max() >= cfg.vocab_out or Y.min() < 0:
            raise UsageError(f"{path}: target tokens outside [0, {cfg.vocab_out})")
    return X, Y


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(
    task: str, count: int, seed: int, out_path: str, size: int | None = None, clues=None, exclude: str | None = None
) -> int:
    kw = {}
    if exclude:
        kw["exclude"] = {inst.digest() for inst in tasks.read_jsonl(exclude)}
    if task == "maze" and size is not None:
        kw["n"] = size
    if task == "shidoku" and clues is not None:
        kw["clue_range"] = clues
    if count < 1:
        raise UsageError("--count must be >= 1")
    try:
        n = tasks.write_jsonl(tasks.generate(task, count, seed, **kw), out_path)
    except OSError as e:
        raise UsageError(f"cannot write {out_path}: {e}") from e
    print(n)
    return n


def cmd_train(
    config_path: str,
    data_path: str,
    out_dir: str,
    steps: int | None = None,
    seed: int | None = None,
    resume: str | None = None,
    eval_path: str | None = None,
) -> dict:
    cfg = CmmConfig.load(config_path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    X, Y = load_data(data_path, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume:
        tr = checkpoint.load(resume, X, Y)
        cfg = tr.cfg
    else:
        tr = Trainer(cfg, X, Y)
    if eval_path:
        tr.eval_data = load_data(eval_path, cfg)
    steps = steps if steps is not None else 1000
    metrics_path = out / "metrics.jsonl"
    best = {"exact": -1.0}
    fh = open(metrics_path, "a" if resume else "w")

    def on_step(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
        if "eval_exact" in rec:
            checkpoint.save(tr, out / "latest.ckpt")
            if rec["eval_exact"] > best["exact"]:
                best["exact"] = rec["eval_exact"]
                checkpoint.save(tr, out / "best.ckpt")

    tr.on_step = on_step
    try:
        tr.train(steps)
    finally:
        fh.close()
    checkpoint.save(tr, out / "latest.ckpt")
    if best["exact"] < 0:
        checkpoint.save(tr, out / "best.ckpt")
    summary = {"step": tr.step, "epoch": tr.loader.epoch, "segments": tr.segments, "last_eval": tr.last_eval}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_eval(ckpt: str, data_path: str, use_ema: bool = True) -> dict:
    params = checkpoint.load_params(ckpt, "ema" if use_ema else "param")
    X, Y = load_data(data_path, params.cfg)
    res = evaluate(params, X, Y, batch_size=max(params.cfg.batch_size, 64))
    report = {"n": int(len(X)), "exact": res["exact"], "token": res["token"], "mean_segments": res["mean_segments"]}
    print(json.dumps(report, sort_keys=True))
    return report


def _gradcheck_setup(seed: int = 0):
    cfg = CmmConfig(
        D=8, S=4, vocab_in=5, vocab_out=5, N_H=2, N_L=2, N_super=4, batch_size=2,
        sigma=0.01, noise_kind="additive", dtype="float64", seed=seed,
    )
    params = ModelParams.init(cfg, seed)
    # lift the zero-initialized heads so every path carries gradient
    rng = np.random.default_rng(seed + 1)
    for name, t in params:
        if name in ("head_w", "head_b", "q_w", "q_b") or ".tok_b" in name or ".ch_b" in name:
            t.data[...] = rng.normal(0, 0.3, t.data.shape)
    tokens = np.array([[1, 0, 3, 2], [0, 4, 1, 0]])
    targets = np.array([[1, 2, 3, 4], [3, 4, 1, 2]])
    carry = (rng.normal(0, 1, (2, 4, 8)), rng.normal(0, 1, (2, 4, 8)))
    return cfg, params, tokens, targets, carry


def gradcheck_table(coords_per_tensor: int = 6, seed: int = 0) -> list[tuple[str, float, bool]]:
    """Finite-difference check of every loss term and the weighted total.

    Float64, D=8, S=4, B=2, with additive noise; each RNG is re-seeded per
    evaluation so all perturbed evaluations see the same noise draws.
    """
    cfg, params, tokens, targets, (cz_H, cz_L) = _gradcheck_setup(seed)
    model = Model(params)
    pick = np.random.default_rng(seed + 2)
    coord_sets = {
        name: pick.choice(t.data.size, size=min(coords_per_tensor, t.data.size), replace=False) for name, t in params
    }

    def fresh_carry(requires_grad=False):
        return LatentState(Tensor(cz_H.copy(), requires_grad), Tensor(cz_L.copy(), requires_grad))

    def run(names, c, order=None):
        c2 = cfg if order is None else cfg.replace(stablemax_order=order)
        rngs = [np.random.default_rng([seed, 9, b]) for b in range(2)]
        return segment_terms(model, tokens, targets, c, c2, names, rngs=rngs, probe_rng=np.random.default_rng(seed + 3))

    def term_fn(name, order=None):
        def f():
            out, *_ = run([name], fresh_carry(), order)
            return out[name]
        return f

    def total_fn():
        out, *_ = run(list(TERMS), fresh_carry())
        tot = None
        for k, v in out.items():
            wv = v * cfg.lambdas[k]
            tot = wv if tot is None else tot + wv
        return tot

    def mu_fn(which):
        def f():
            x_hat = model.embed(tokens)
            rngs = [np.random.default_rng([seed, 9, b]) for b in range(2)]
            noise = NoiseSpec(cfg.noise_kind, cfg.sigma)
            _, _, _, live = rollout(x_hat, fresh_carry(), model, cfg.N_H, cfg.N_L, "train", noise, rngs)
            point = live.z_H + live.z_L if which == "z" else x_hat + live.z_L
            return mean_jacobian_diag(model.f, point, cfg.jac_probes, cfg.jac_eps, np.random.default_rng(seed + 3))
        return f

    checks = [(f"lm_stablemax{k}", term_fn("lm", k)) for k in (1, 3, 5)]
    checks += [(t, term_fn(t)) for t in TERMS if t != "lm"]
    checks += [("mean_jac_diag_z", mu_fn("z")), ("mean_jac_diag_x", mu_fn("x"))]
    # at init mu sits within ~1e-3 of one, so the penalties are (near) inactive;
    # shifting mu exercises their active branches through the real mu path
    checks += [
        ("rh_stable_z_active", lambda: rh_stable_penalty(mu_fn("z")() + 0.5)),
        ("rh_unstable_x_active", lambda: rh_unstable_penalty(mu_fn("x")() - 0.5)),
        ("total", total_fn),
    ]
    rows = []
    for label, fn in checks:
        worst = 0.0
        for name, t in params:
            worst = max(worst, ad.finite_diff_check(fn, t, h=1e-4, coords=coord_sets[name]))
        rows.append((label, worst, worst < GRADCHECK_TOL))
    # carry enters through detach: its adjoint must be exactly zero
    c = fresh_carry(True)
    with Tape() as tape:
        out, *_ = run(list(TERMS), c)
        tot = None
        for k, v in out.items():
            tot = v if tot is None else tot + v
    g = tape.gradients(tot, [c.z_H, c.z_L])
    drift = float(max(np.abs(x).max() for x in g))
    rows.append(("carry_detached", drift, drift == 0.0))
    return rows


def cmd_gradcheck() -> bool:
    rows = gradcheck_table()
    width = max(len(r[0]) for r in rows)
    print(f"{'term':<{width}}  max_rel_err  result")
    for name, err, ok in rows:
        print(f"{name:<{width}}  {err:11.3e}  {'PASS' if ok else 'FAIL'}")
    return all(ok for _, _, ok in rows)


def cmd_analyze(ckpt: str, data_path: str, sample_index: int, steps: int, out_csv: str, seed: int = 0) -> list:
    params = checkpoint.load_params(ckpt, "ema")
    cfg = params.cfg
    X, _ = load_data(data_path, cfg)
    if not 0 <= sample_index < len(X):
        raise UsageError(f"--sample {sample_index} out of range [0, {len(X)})")
    model = Model(params)
    with ad.no_grad():
        x_hat = model.embed(X[sample_index:sample_index + 1])
    init = LatentState(Tensor(x_hat.data.copy()), Tensor(np.zeros_like(x_hat.data)))
    noise = NoiseSpec(cfg.noise_kind, cfg.sigma)
    rngs = [np.random.default_rng([seed, 11])]
    rows = analyze_trajectory(model.f, x_hat, init, steps, cfg.N_L, noise, rngs, cfg.jac_eps, seed)
    with open(out_csv, "w", newline="") as fh:
        trajectory_csv(rows, fh)
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def _clues(s: str) -> tuple[int, int]:
    lo, hi = (int(v) for v in s.split(","))
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmm", description="Contraction-mapping recursive reasoning models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a puzzle dataset (JSONL)")
    g.add_argument("--task", choices=["shidoku", "maze"], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=None, help="maze side length (odd, 5..15)")
    g.add_argument("--clues", type=_clues, default=None, help="shidoku clue range lo,hi")
    g.add_argument("--exclude", default=None, help="skip instances already present in this JSONL")

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--ckpt", default=None, help="resume from this checkpoint")
    t.add_argument("--eval-data", default=None, help="held-out JSONL for periodic evaluation")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA")

    sub.add_parser("gradcheck", help="finite-difference check of all loss terms")

    a = sub.add_parser("analyze", help="trajectory diagnostics as CSV")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--steps", type=int, default=32)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            if args.cmd == "gen-data":
                cmd_gen_data(args.task, args.count, args.seed, args.out, args.size, args.clues, args.exclude)
            elif args.cmd == "train":
                cmd_train(args.config, args.data, args.out, args.steps, args.seed, args.ckpt, args.eval_data)
            elif args.cmd == "eval":
                cmd_eval(args.ckpt, args.data, not args.raw)
            elif args.cmd == "gradcheck":
                return 0 if cmd_gradcheck() else 2
            elif args.cmd == "analyze":
                cmd_analyze(args.ckpt, args.data, args.sample, args.steps, args.out, args.seed)
    except (NumericFailure, SegmentFailure) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (UsageError, InputError, checkpoint.CheckpointError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

