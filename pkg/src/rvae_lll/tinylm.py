"""Tiny GPT-style causal language model with an adapter hook between blocks."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import Tensor

# An adapter receives the hidden state [B, T, d] leaving block ``adapter_position``
# and returns (replacement hidden state, auxiliary output).
Adapter = Callable[[Tensor], "tuple[Tensor, object]"]


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 128
    adapter_position: int | None = 2
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("ModelConfig.d_model must be divisible by n_heads")
        if self.adapter_position is not None and not 0 <= self.adapter_position <= self.n_layers:
            raise ValueError(f"ModelConfig.adapter_position must lie in [0, {self.n_layers}]")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    dt = np.dtype(cfg.dtype)
    d = cfg.d_model

    def w(name, shape):
        return name, Tensor(nc.normal_init(rng, shape, 0.02, dt), requires_grad=True, name=name)

    def const(name, shape, value):
        return name, Tensor(np.full(shape, value, dtype=dt), requires_grad=True, name=name)

    items = [w("wte", (cfg.vocab_size, d)), w("wpe", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"h{i}."
        items += [
            const(p + "ln1.g", (d,), 1.0),
            const(p + "ln1.b", (d,), 0.0),
            w(p + "attn.wqkv", (d, 3 * d)),
            const(p + "attn.bqkv", (3 * d,), 0.0),
            w(p + "attn.wo", (d, d)),
            const(p + "attn.bo", (d,), 0.0),
            const(p + "ln2.g", (d,), 1.0),
            const(p + "ln2.b", (d,), 0.0),
            w(p + "mlp.w1", (d, 4 * d)),
            const(p + "mlp.b1", (4 * d,), 0.0),
            w(p + "mlp.w2", (4 * d, d)),
            const(p + "mlp.b2", (d,), 0.0),
        ]
    items += [const("ln_f.g", (d,), 1.0), const("ln_f.b", (d,), 0.0)]
    return dict(items)


_MASKS: dict[int, np.ndarray] = {}


def _causal(t: int) -> np.ndarray:
    m = _MASKS.get(t)
    if m is None:
        m = _MASKS[t] = np.tril(np.ones((t, t), dtype=bool))
    return m


def _attention(params, p: str, x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    qkv = nc.linear(x, params[p + "wqkv"], params[p + "bqkv"])
    qkv = qkv.reshape(b, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nc.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = nc.softmax(scores, mask=_causal(t))
    out = nc.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return nc.linear(out, params[p + "wo"], params[p + "bo"])


def _block(params, i: int, h: Tensor, n_heads: int) -> Tensor:
    p = f"h{i}."
    a = nc.layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
    h = h + _attention(params, p + "attn.", a, n_heads)
    m = nc.layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
    m = nc.linear(nc.gelu(nc.linear(m, params[p + "mlp.w1"], params[p + "mlp.b1"])), params[p + "mlp.w2"], params[p + "mlp.b2"])
    return h + m


def check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"expected a non-empty token sequence, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0]
        raise ValueError(f"unknown token id {int(bad)} (vocab_size {cfg.vocab_size})")
    return tokens


def lm_forward(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    tokens,
    adapter: Adapter | None = None,
) -> tuple[Tensor, object]:
    """Logits [B, T, vocab] for ``tokens`` ([T] or [B, T]) plus the adapter's aux output.

    A 1-D input yields logits of shape [T, vocab].
    """
    single = np.ndim(tokens) == 1
    ids = check_tokens(cfg, tokens)
    t = ids.shape[1]
    h = nc.embedding(params["wte"], ids) + params["wpe"][:t]
    aux = None
    for i in range(cfg.n_layers + 1):
        if adapter is not None and i == cfg.adapter_position:
            h, aux = adapter(h)
        if i < cfg.n_layers:
            h = _block(params, i, h, cfg.n_heads)
    h = nc.layernorm(h, params["ln_f.g"], params["ln_f.b"])
    # output projection tied to the token embedding
    logits = nc.matmul(h, params["wte"].transpose(1, 0))
    if single:
        logits = logits[0]
    return logits, aux


def lm_nll(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean negative log-likelihood over the active positions of ``loss_mask``."""
    return nc.cross_entropy(logits, np.asarray(targets), loss_mask)


def greedy_decode(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    prefix,
    stop_token: int,
    max_new: int,
    adapter: Adapter | None = None,
) -> list[int]:
    """Append argmax tokens to ``prefix`` until ``stop_token`` or ``max_new`` steps."""
    return decode_batch(cfg, params, [list(prefix)], stop_token, max_new, adapter)[0]


def decode_batch(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    prefixes: list[list[int]],
    stop_token: int,
    max_new: int,
    adapter: Adapter | None = None,
    pad_token: int = 0,
    rng: np.random.Generator | None = None,
    top_k: int = 1,
) -> list[list[int]]:
    """Decode several prefixes at once (right padded, causal masking keeps rows independent).

    ``top_k == 1`` is greedy decoding; larger values sample from the ``top_k``
    most likely tokens using ``rng``.
    """
    if not prefixes:
        return []
    for p in prefixes:
        if len(p) == 0:
            raise ValueError("decode: prefix must be non-empty")
        if len(p) > cfg.max_seq_len:
            raise ValueError(f"decode: prefix length {len(p)} exceeds max_seq_len {cfg.max_seq_len}")
    if top_k > 1 and rng is None:
        raise ValueError("decode: sampling requires an rng")
    n = len(prefixes)
    lengths = np.array([len(p) for p in prefixes])
    cap = int(min(cfg.max_seq_len, lengths.max() + max_new))
    buf = np.full((n, cap), pad_token, dtype=np.int64)
    for i, p in enumerate(prefixes):
        buf[i, : len(p)] = p
    limit = np.minimum(lengths + max_new, cfg.max_seq_len)
    done = lengths >= limit
    while not done.all():
        live = np.flatnonzero(~done)
        width = int(lengths[live].max())
        logits, _ = lm_forward(cfg, params, buf[live, :width], adapter)
        last = logits.data[np.arange(len(live)), lengths[live] - 1]
        if top_k > 1:
            nxt = _sample_top_k(last, top_k, rng)
        else:
            # first maximum, i.e. ties go to the lowest token id
            nxt = np.argmax(last, axis=-1)
        for j, row in enumerate(live):
            tok = int(nxt[j])
            buf[row, lengths[row]] = tok
            lengths[row] += 1
            if tok == stop_token or lengths[row] >= limit[row]:
                done[row] = True
    return [buf[i, : lengths[i]].tolist() for i in range(n)]


def _sample_top_k(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    k = min(k, logits.shape[-1])
    # stable sort so ties resolve toward lower ids
    top = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    vals = np.take_along_axis(logits, top, axis=-1).astype(np.float64)
    probs = np.exp(vals - vals.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.random(len(logits))
    choice = (probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
    choice = np.minimum(choice, k - 1)
    return top[np.arange(len(logits)), choice]
