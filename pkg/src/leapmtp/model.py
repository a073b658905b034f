"""Minimal decoder-only transformer with leap prediction heads, in numpy.

The backbone is a plain pre-norm GPT: learned token + absolute position
embeddings, blocks of (LayerNorm -> multi-head attention -> residual,
LayerNorm -> 4x GELU MLP -> residual), and a final LayerNorm. Three choices
matter for everything built on top:

* positions are explicit per-token indices, so tree-verification batches can
  place several candidate tokens at the same position;
* the attention mask is an arbitrary boolean (query x key) matrix, so the
  same forward pass serves causal decoding and ancestor-only tree masks;
* ``forward`` never mutates the cache it is given. It returns a new
  ``KvCache`` extended with the rows it computed, and the caller decides
  whether to keep it. Rejected speculative tokens therefore leave no trace.

Output heads: head 1 is the bare unembedding. Heads 2..n each apply a
residual SiLU block, ``z' = z + silu(W z + b)``, followed by their own
unembedding matrix. Fresh heads start with W = 0, b = 0 and a copy of the
base unembedding, so before training every head reproduces the base head's
logits exactly.

Training-mode forward/backward (batched, plain causal) is separate from the
cached inference path; it records a tape of intermediates and returns
parameter gradients for a caller-supplied d(hidden).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

__all__ = [
    "ModelConfig",
    "KvCache",
    "PredictionHead",
    "TransformerLM",
    "causal_mask",
    "init_heads",
    "head_logits",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_attn_heads: int = 4
    max_positions: int = 1024
    n_pred_heads: int = 4
    leap_stride: int = 2

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.n_attn_heads != 0:
            raise ValueError("d_model must be divisible by n_attn_heads")
        if self.n_pred_heads < 1:
            raise ValueError("n_pred_heads must be >= 1")
        if self.leap_stride < 1:
            raise ValueError("leap_stride must be >= 1")
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_attn_heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape map for every parameter tensor of a model."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_positions, d),
        "ln_f.gain": (d,),
        "ln_f.bias": (d,),
        "unembed": (v, d),
    }
    for layer in range(config.n_layers):
        p = f"blocks.{layer}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.w_qkv"] = (d, 3 * d)
        shapes[p + "attn.b_qkv"] = (3 * d,)
        shapes[p + "attn.w_out"] = (d, d)
        shapes[p + "attn.b_out"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.w_in"] = (d, 4 * d)
        shapes[p + "mlp.b_in"] = (4 * d,)
        shapes[p + "mlp.w_out"] = (4 * d, d)
        shapes[p + "mlp.b_out"] = (d,)
    for head in range(2, config.n_pred_heads + 1):
        shapes[f"heads.{head}.w"] = (d, d)
        shapes[f"heads.{head}.b"] = (d,)
        shapes[f"heads.{head}.w_out"] = (v, d)
    return shapes


def backbone_param_names(config: ModelConfig) -> list[str]:
    """Backbone + base head parameters (everything except heads 2..n)."""
    return [n for n in param_shapes(config) if not n.startswith("heads.")]


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KvCache:
    """Per-layer key/value rows for all committed positions.

    Immutable by convention: ``extended``/``truncated`` return new caches and
    never touch the arrays of the old one, so a speculative forward pass can
    be discarded by dropping the cache it returned.
    """

    keys: tuple[np.ndarray, ...]    # each (n_attn_heads, length, head_dim)
    values: tuple[np.ndarray, ...]
    length: int

    @classmethod
    def empty(cls, config: ModelConfig, dtype=np.float32) -> "KvCache":
        shape = (config.n_attn_heads, 0, config.head_dim)
        zeros = tuple(np.zeros(shape, dtype=dtype) for _ in range(config.n_layers))
        return cls(keys=zeros, values=zeros, length=0)

    def extended(self, new_keys, new_values) -> "KvCache":
        keys = tuple(
            np.concatenate([k, nk], axis=1) for k, nk in zip(self.keys, new_keys)
        )
        values = tuple(
            np.concatenate([v, nv], axis=1) for v, nv in zip(self.values, new_values)
        )
        return KvCache(keys=keys, values=values, length=self.length + new_keys[0].shape[1])

    def truncated(self, length: int) -> "KvCache":
        if not 0 <= length <= self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        keys = tuple(k[:, :length].copy() for k in self.keys)
        values = tuple(v[:, :length].copy() for v in self.values)
        return KvCache(keys=keys, values=values, length=length)


def causal_mask(n_queries: int, cache_len: int = 0, dtype=bool) -> np.ndarray:
    """(q, j) allowed iff key j is at or before the query's position."""
    total = cache_len + n_queries
    q = np.arange(n_queries)[:, None]
    j = np.arange(total)[None, :]
    return (j <= cache_len + q).astype(dtype)


# ---------------------------------------------------------------------------
# Prediction heads
# ---------------------------------------------------------------------------


@dataclass
class PredictionHead:
    """One output head. ``w is None`` marks the base head (bare unembedding);
    extra heads apply the residual SiLU block before their unembedding."""

    head_index: int
    w_out: np.ndarray           # (vocab, d_model)
    w: np.ndarray | None = None  # (d_model, d_model)
    b: np.ndarray | None = None  # (d_model,)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def head_logits(hidden: np.ndarray, head: PredictionHead) -> np.ndarray:
    """Unnormalized vocabulary logits: w_out @ (z + silu(w z + b)).

    The base head skips the residual block. ``hidden`` may be (T, d) or
    (B, T, d); logits keep the leading shape with vocab last.
    """
    if hidden.shape[-1] != head.w_out.shape[1]:
        raise ValueError(
            f"hidden dim {hidden.shape[-1]} does not match head dim {head.w_out.shape[1]}"
        )
    if head.w is None:
        z = hidden
    else:
        z = hidden + _silu(hidden @ head.w.T + head.b)
    return z @ head.w_out.T


def init_heads(base_unembedding: np.ndarray, config: ModelConfig) -> list[PredictionHead]:
    """Head 1 shares the base unembedding (same array, not a copy); heads
    2..n get zero blocks and their own copy of it, so every head initially
    reproduces the base head bit for bit."""
    vocab, d = base_unembedding.shape
    if vocab != config.vocab_size or d != config.d_model:
        raise ValueError("base unembedding shape does not match config")
    heads = [PredictionHead(head_index=1, w_out=base_unembedding)]
    for index in range(2, config.n_pred_heads + 1):
        heads.append(
            PredictionHead(
                head_index=index,
                w_out=base_unembedding.copy(),
                w=np.zeros((d, d), dtype=base_unembedding.dtype),
                b=np.zeros(d, dtype=base_unembedding.dtype),
            )
        )
    return heads


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, aux):
    xhat, inv = aux
    dims = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=dims)
    dbias = np.sum(dy, axis=dims)
    dxhat = dy * gain
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean1 - xhat * mean2)
    return dx, dgain, dbias


def _gelu(x):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, phi


def _gelu_backward(dy, x, phi):
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (phi + x * pdf)


class TransformerLM:
    """Decoder-only language model with ``n_pred_heads`` output heads."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "TransformerLM":
        """Seeded GPT-2 style init; extra heads start as exact base-head clones.

        Randomness is consumed in a fixed name order, and head parameters are
        derived (zeros / a copy of the unembedding) rather than drawn, so the
        backbone init is bit-identical across different n_pred_heads.
        """
        rng = np.random.default_rng(seed)
        std = 0.02
        resid_std = std / math.sqrt(2.0 * config.n_layers)
        params: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(config).items():
            if name.startswith("heads."):
                continue
            if name.endswith(("bias", "b_qkv", "b_out", "b_in")):
                arr = np.zeros(shape)
            elif name.endswith("gain"):
                arr = np.ones(shape)
            elif name.endswith(("attn.w_out", "mlp.w_out")):
                arr = rng.normal(0.0, resid_std, size=shape)
            else:
                arr = rng.normal(0.0, std, size=shape)
            params[name] = arr.astype(dtype)
        for head in init_heads(params["unembed"], config)[1:]:
            params[f"heads.{head.head_index}.w"] = head.w
            params[f"heads.{head.head_index}.b"] = head.b
            params[f"heads.{head.head_index}.w_out"] = head.w_out
        return cls(config, params, dtype=dtype)

    def astype(self, dtype) -> "TransformerLM":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return TransformerLM(self.config, params, dtype=dtype)

    def copy(self) -> "TransformerLM":
        return TransformerLM(
            self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype
        )

    @property
    def heads(self) -> list[PredictionHead]:
        """Prediction heads as views over the parameter dict (no copies)."""
        heads = [PredictionHead(head_index=1, w_out=self.params["unembed"])]
        for i in range(2, self.config.n_pred_heads + 1):
            heads.append(
                PredictionHead(
                    head_index=i,
                    w=self.params[f"heads.{i}.w"],
                    b=self.params[f"heads.{i}.b"],
                    w_out=self.params[f"heads.{i}.w_out"],
                )
            )
        return heads

    # -- cached inference path ----------------------------------------------

    def forward(
        self,
        tokens: np.ndarray,
        positions: np.ndarray,
        mask: np.ndarray,
        cache: KvCache | None = None,
    ) -> tuple[np.ndarray, KvCache]:
        """Run ``tokens`` against ``cache`` and return (hidden rows, extended cache).

        ``mask`` is boolean (len(tokens), cache.length + len(tokens)); entry
        (q, j) allows query q to attend to key j. The input cache is not
        modified; commit by keeping the returned cache (or a truncation of
        it), discard by dropping it.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        if cache is None:
            cache = KvCache.empty(cfg, dtype=self.dtype)
        t = len(tokens)
        if len(positions) != t:
            raise ValueError("tokens and positions must have equal length")
        if t == 0:
            raise ValueError("forward needs at least one token")
        if np.any(positions < 0) or np.any(positions >= cfg.max_positions):
            raise ValueError("position index out of range")
        if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
            raise ValueError("token id out of range")
        total = cache.length + t
        mask = np.asarray(mask)
        if mask.shape != (t, total):
            raise ValueError(f"mask shape {mask.shape} != ({t}, {total})")
        if not mask.any(axis=1).all():
            raise ValueError("every query must attend to at least one key")

        p = self.params
        scale = 1.0 / math.sqrt(cfg.head_dim)
        x = p["tok_emb"][tokens] + p["pos_emb"][positions]
        neg_inf = np.array(-np.inf, dtype=x.dtype)
        new_keys, new_values = [], []
        for layer in range(cfg.n_layers):
            pre = f"blocks.{layer}."
            h, _ = _layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            qkv = h @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            # (heads, t, head_dim)
            q = q.reshape(t, cfg.n_attn_heads, cfg.head_dim).transpose(1, 0, 2)
            k = k.reshape(t, cfg.n_attn_heads, cfg.head_dim).transpose(1, 0, 2)
            v = v.reshape(t, cfg.n_attn_heads, cfg.head_dim).transpose(1, 0, 2)
            k_all = np.concatenate([cache.keys[layer], k], axis=1)
            v_all = np.concatenate([cache.values[layer], v], axis=1)
            scores = np.einsum("hqd,hkd->hqk", q, k_all) * scale
            scores = np.where(mask[None, :, :], scores, neg_inf)
            scores -= scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=-1, keepdims=True)
            ctx = np.einsum("hqk,hkd->hqd", att, v_all)
            ctx = ctx.transpose(1, 0, 2).reshape(t, cfg.d_model)
            x = x + ctx @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"]

            h, _ = _layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            inner = h @ p[pre + "mlp.w_in"] + p[pre + "mlp.b_in"]
            act, _ = _gelu(inner)
            x = x + act @ p[pre + "mlp.w_out"] + p[pre + "mlp.b_out"]
            new_keys.append(k)
            new_values.append(v)

        hidden, _ = _layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        if not np.isfinite(hidden).all():
            raise FloatingPointError("non-finite activation in final hidden states")
        return hidden, cache.extended(new_keys, new_values)

    # -- training path (batched, plain causal, with tape) --------------------

    def train_forward(self, batch: np.ndarray) -> tuple[np.ndarray, dict]:
        """Full-sequence causal forward over a (B, T) batch.

        Returns post-final-norm hidden states (B, T, d) and the tape of
        intermediates that ``train_backward`` consumes.
        """
        cfg = self.config
        p = self.params
        batch = np.asarray(batch, dtype=np.int64)
        bsz, t = batch.shape
        if t > cfg.max_positions:
            raise ValueError("sequence longer than max_positions")
        scale = 1.0 / math.sqrt(cfg.head_dim)
        positions = np.arange(t)

        x = p["tok_emb"][batch] + p["pos_emb"][positions][None, :, :]
        causal = np.tril(np.ones((t, t), dtype=bool))
        neg_inf = np.array(-np.inf, dtype=x.dtype)
        tape: dict = {"batch": batch, "positions": positions, "layers": []}
        for layer in range(cfg.n_layers):
            pre = f"blocks.{layer}."
            x_in = x
            h1, ln1_aux = _layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            qkv = h1 @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"]
            q, k, v = np.split(qkv, 3, axis=-1)
            q = q.reshape(bsz, t, cfg.n_attn_heads, cfg.head_dim).transpose(0, 2, 1, 3)
            k = k.reshape(bsz, t, cfg.n_attn_heads, cfg.head_dim).transpose(0, 2, 1, 3)
            v = v.reshape(bsz, t, cfg.n_attn_heads, cfg.head_dim).transpose(0, 2, 1, 3)
            scores = q @ k.swapaxes(-1, -2) * scale
            scores = np.where(causal[None, None, :, :], scores, neg_inf)
            scores -= scores.max(axis=-1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=-1, keepdims=True)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
            attn_out = ctx @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"]
            x_mid = x_in + attn_out

            h2, ln2_aux = _layer_norm(x_mid, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            inner = h2 @ p[pre + "mlp.w_in"] + p[pre + "mlp.b_in"]
            act, gelu_phi = _gelu(inner)
            x = x_mid + act @ p[pre + "mlp.w_out"] + p[pre + "mlp.b_out"]

            tape["layers"].append(
                dict(
                    h1=h1, ln1_aux=ln1_aux, q=q, k=k, v=v, att=att, ctx=ctx,
                    x_mid=x_mid, h2=h2, ln2_aux=ln2_aux, inner=inner, act=act,
                    gelu_phi=gelu_phi,
                )
            )
        hidden, lnf_aux = _layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        if not np.isfinite(hidden).all():
            raise FloatingPointError("non-finite activation in final hidden states")
        tape["x_final"] = x
        tape["lnf_aux"] = lnf_aux
        return hidden, tape

    def train_backward(self, tape: dict, dhidden: np.ndarray) -> dict[str, np.ndarray]:
        """Backprop d(loss)/d(hidden) through the backbone; returns grads
        keyed like ``params`` (backbone names only)."""
        cfg = self.config
        p = self.params
        grads: dict[str, np.ndarray] = {}
        bsz, t, _ = dhidden.shape
        scale = 1.0 / math.sqrt(cfg.head_dim)

        dx, dg, db = _layer_norm_backward(dhidden, p["ln_f.gain"], tape["lnf_aux"])
        grads["ln_f.gain"] = dg
        grads["ln_f.bias"] = db

        for layer in reversed(range(cfg.n_layers)):
            pre = f"blocks.{layer}."
            tl = tape["layers"][layer]

            # MLP branch
            dact = dx @ p[pre + "mlp.w_out"].T
            grads[pre + "mlp.w_out"] = (
                tl["act"].reshape(-1, 4 * cfg.d_model).T @ dx.reshape(-1, cfg.d_model)
            )
            grads[pre + "mlp.b_out"] = dx.sum(axis=(0, 1))
            dinner = _gelu_backward(dact, tl["inner"], tl["gelu_phi"])
            grads[pre + "mlp.w_in"] = (
                tl["h2"].reshape(-1, cfg.d_model).T @ dinner.reshape(-1, 4 * cfg.d_model)
            )
            grads[pre + "mlp.b_in"] = dinner.sum(axis=(0, 1))
            dh2 = dinner @ p[pre + "mlp.w_in"].T
            dx_mid, dg, db = _layer_norm_backward(dh2, p[pre + "ln2.gain"], tl["ln2_aux"])
            grads[pre + "ln2.gain"] = dg
            grads[pre + "ln2.bias"] = db
            dx_mid = dx_mid + dx  # residual

            # attention branch
            dctx = dx_mid @ p[pre + "attn.w_out"].T
            grads[pre + "attn.w_out"] = (
                tl["ctx"].reshape(-1, cfg.d_model).T @ dx_mid.reshape(-1, cfg.d_model)
            )
            grads[pre + "attn.b_out"] = dx_mid.sum(axis=(0, 1))
            dctx = dctx.reshape(bsz, t, cfg.n_attn_heads, cfg.head_dim).transpose(0, 2, 1, 3)
            att, q, k, v = tl["att"], tl["q"], tl["k"], tl["v"]
            datt = dctx @ v.swapaxes(-1, -2)
            dv = att.swapaxes(-1, -2) @ dctx
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            dq = dscores @ k * scale
            dk = dscores.swapaxes(-1, -2) @ q * scale
            dqkv = np.concatenate(
                [
                    g.transpose(0, 2, 1, 3).reshape(bsz, t, cfg.d_model)
                    for g in (dq, dk, dv)
                ],
                axis=-1,
            )
            grads[pre + "attn.w_qkv"] = (
                tl["h1"].reshape(-1, cfg.d_model).T @ dqkv.reshape(-1, 3 * cfg.d_model)
            )
            grads[pre + "attn.b_qkv"] = dqkv.sum(axis=(0, 1))
            dh1 = dqkv @ p[pre + "attn.w_qkv"].T
            dx_in, dg, db = _layer_norm_backward(dh1, p[pre + "ln1.gain"], tl["ln1_aux"])
            grads[pre + "ln1.gain"] = dg
            grads[pre + "ln1.bias"] = db
            dx = dx_in + dx_mid  # residual

        grads["tok_emb"] = np.zeros_like(p["tok_emb"])
        np.add.at(grads["tok_emb"], tape["batch"].reshape(-1), dx.reshape(-1, cfg.d_model))
        grads["pos_emb"] = np.zeros_like(p["pos_emb"])
        np.add.at(grads["pos_emb"], tape["positions"], dx.sum(axis=0))
        return grads
