"""The shared recursive network, input embedding, output head and Q-head."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import CmmConfig

INIT_STD = 0.02


class InputError(ValueError):
    pass


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # resample outside +-2 std
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def block_shapes(cfg: CmmConfig) -> dict[str, tuple[int, ...]]:
    D, S = cfg.D, cfg.S
    shapes: dict[str, tuple[int, ...]] = {"norm_t": (D,)}
    if cfg.mixer == "mlp":
        Sh = S * cfg.token_expand
        shapes.update(tok_w1=(S, Sh), tok_b1=(Sh,), tok_w2=(Sh, S), tok_b2=(S,))
    else:
        shapes.update(attn_q=(D, D), attn_k=(D, D), attn_v=(D, D), attn_o=(D, D))
    Dh = D * cfg.D_expand
    shapes.update(norm_c=(D,), ch_w1=(D, Dh), ch_b1=(Dh,), ch_w2=(Dh, D), ch_b2=(D,))
    return shapes


def param_shapes(cfg: CmmConfig) -> dict[str, tuple[int, ...]]:
    """Unique trainable tensors in manifest order."""
    nq = 2 if cfg.act_variant == "hrm_q" else 1
    shapes = {"embed": (cfg.vocab_in, cfg.D)}
    n_blocks = 1 if cfg.identical_layers else 2
    for i in range(n_blocks):
        for k, s in block_shapes(cfg).items():
            shapes[f"block{i}.{k}"] = s
    if cfg.out_norm:
        shapes["out_norm"] = (cfg.D,)
    shapes.update(
        head_w=(cfg.D, cfg.vocab_out), head_b=(cfg.vocab_out,), q_w=(cfg.D, nq), q_b=(nq,)
    )
    return shapes


def count_params(cfg: CmmConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


class ModelParams:
    """Named parameter tensors.

    With ``identical_layers`` the second block slot resolves to the first
    block's tensors, so both blocks share one parameter set.
    """

    def __init__(self, cfg: CmmConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: CmmConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dtype = np.dtype(cfg.dtype)
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.split(".")[-1]
            if leaf.startswith("norm") or leaf == "out_norm":
                arr = np.ones(shape, dtype)
            elif name in ("head_w", "q_w") or leaf.startswith(("tok_b", "ch_b")) or name in ("head_b", "q_b"):
                arr = np.zeros(shape, dtype)
            else:
                arr = _trunc_normal(rng, shape, INIT_STD, dtype)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        if self.cfg.identical_layers and name.startswith("block1."):
            name = "block0." + name[len("block1."):]
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def last_shared_layer(self) -> Tensor:
        """Channel-mix output weights of the last block (the GradNorm probe layer)."""
        return self["block1.ch_w2"]


def _act(cfg: CmmConfig, x: Tensor) -> Tensor:
    return ad.tanh(x) if cfg.activation == "tanh" else ad.silu(x)


def embed(tokens, params: ModelParams) -> Tensor:
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_in):
        raise InputError(f"token out of range [0, {cfg.vocab_in})")
    return ad.take_rows(params["embed"], tokens) * math.sqrt(cfg.D)


def _token_mix(u: Tensor, params: ModelParams, pre: str) -> Tensor:
    cfg = params.cfg
    h = ad.rms_norm(u, params[pre + "norm_t"])
    if cfg.mixer == "mlp":
        h = ad.transpose(h, (0, 2, 1))
        h = ad.linear(h, params[pre + "tok_w1"], params[pre + "tok_b1"])
        h = ad.linear(_act(cfg, h), params[pre + "tok_w2"], params[pre + "tok_b2"])
        return ad.transpose(h, (0, 2, 1))
    return _attention(h, params, pre)


def _attention(h: Tensor, params: ModelParams, pre: str) -> Tensor:
    cfg = params.cfg
    B, S, D = h.shape
    nh, dh = cfg.n_heads, cfg.D // cfg.n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(h, params[pre + "attn_q"]))
    k = heads(ad.linear(h, params[pre + "attn_k"]))
    v = heads(ad.linear(h, params[pre + "attn_v"]))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    # shift by a constant row max; softmax is invariant to it
    shift = Tensor(scores.data.max(axis=-1, keepdims=True))
    e = ad.exp(scores - shift)
    att = e / ad.sum(e, axis=-1, keepdims=True)
    o = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
    return ad.linear(ad.reshape(o, (B, S, D)), params[pre + "attn_o"])


def _channel_mix(u: Tensor, params: ModelParams, pre: str) -> Tensor:
    cfg = params.cfg
    h = ad.rms_norm(u, params[pre + "norm_c"])
    h = ad.linear(h, params[pre + "ch_w1"], params[pre + "ch_b1"])
    return ad.linear(_act(cfg, h), params[pre + "ch_w2"], params[pre + "ch_b2"])


def block(u: Tensor, params: ModelParams, index: int) -> Tensor:
    pre = f"block{index}."
    u = u + _token_mix(u, params, pre)
    return u + _channel_mix(u, params, pre)


def f_net(state_sum: Tensor, params: ModelParams) -> Tensor:
    """The shared update network: two pre-normalized mixer blocks with residuals.

    With ``out_norm`` the result is RMS-normalized, which bounds the latent
    scale; without it the residual path makes repeated application grow.
    """
    y = block(block(state_sum, params, 0), params, 1)
    if params.cfg.out_norm:
        y = ad.rms_norm(y, params["out_norm"])
    return y


def output_head(z_H: Tensor, params: ModelParams) -> Tensor:
    return ad.linear(z_H, params["head_w"], params["head_b"])


def q_head(z_H: Tensor, params: ModelParams) -> Tensor:
    """Mean-pool over the sequence, then an affine map; raw logits."""
    return ad.linear(ad.mean(z_H, axis=1), params["q_w"], params["q_b"])


class Model:
    """Config plus parameters with the network entry points bound."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.cfg = params.cfg

    def embed(self, tokens) -> Tensor:
        return embed(tokens, self.params)

    def f(self, u: Tensor) -> Tensor:
        return f_net(u, self.params)

    def head(self, z_H: Tensor) -> Tensor:
        return output_head(z_H, self.params)

    def q(self, z_H: Tensor) -> Tensor:
        return q_head(z_H, self.params)
