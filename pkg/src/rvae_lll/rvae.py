"""Weighted residual VAE adapter (optionally conditional) and its free-bits objective.

    mu      = LN(relu(enc_mu(LN(h))))
    sigma   = relu(enc_sigma(LN(h))) + SIGMA_FLOOR
    z       = mu + sigma * eps            (train)   |   mu   (eval)
    h_out   = (1 - alpha) * dec(z) + alpha * h
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from .numcore import Tensor

SIGMA_FLOOR = 1e-4
COND_DIM = 16
PREFIX = "rvae."
RECON_MODES = ("mse", "task-nll")


@dataclass
class RvaeConfig:
    d_model: int = 64
    latent_dim: int = 100
    alpha: float = 0.5
    rho: float = 0.2
    conditional: bool = False
    n_conditions: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("RvaeConfig.alpha must lie in [0, 1]")
        if self.latent_dim < 1:
            raise ValueError("RvaeConfig.latent_dim must be >= 1")
        if self.rho < 0:
            raise ValueError("RvaeConfig.rho must be >= 0")
        if self.conditional and self.n_conditions < 1:
            raise ValueError("conditional RvaeConfig needs n_conditions >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: RvaeConfig, rng: np.random.Generator, dtype="float64") -> dict[str, Tensor]:
    dt = np.dtype(dtype)
    d, k = cfg.d_model, cfg.latent_dim
    dec_in = k + (COND_DIM if cfg.conditional else 0)
    shapes = {
        "ln_in.g": ((d,), 1.0),
        "ln_in.b": ((d,), 0.0),
        "enc_mu.w": ((d, k), None),
        "enc_mu.b": ((k,), 0.0),
        "enc_sigma.w": ((d, k), None),
        "enc_sigma.b": ((k,), 0.0),
        "ln_mu.g": ((k,), 1.0),
        "ln_mu.b": ((k,), 0.0),
        "dec.w": ((dec_in, d), None),
        "dec.b": ((d,), 0.0),
    }
    if cfg.conditional:
        shapes["cond_embed"] = ((cfg.n_conditions, COND_DIM), None)
        shapes["cond_shift"] = ((cfg.n_conditions, d), None)
    params = {}
    for name, (shape, fill) in shapes.items():
        data = nc.normal_init(rng, shape, 0.02, dt) if fill is None else np.full(shape, fill, dtype=dt)
        params[PREFIX + name] = Tensor(data, requires_grad=True, name=PREFIX + name)
    return params


@dataclass
class RvaeOutput:
    h_in: Tensor
    h_out: Tensor
    mu: Tensor
    sigma: Tensor
    z: Tensor
    decoded: Tensor


def _condition_ids(cfg: RvaeConfig, condition, lead: tuple[int, ...]) -> np.ndarray | None:
    if not cfg.conditional:
        if condition is not None:
            raise ValueError("condition given to an unconditional adapter")
        return None
    if condition is None:
        raise ValueError("conditional adapter requires a condition")
    cond = np.asarray(condition, dtype=np.int64)
    if cond.min() < 0 or cond.max() >= cfg.n_conditions:
        raise ValueError(f"condition index {int(cond.max())} out of range for n_conditions={cfg.n_conditions}")
    if cond.ndim == 0:
        return np.full(lead, int(cond), dtype=np.int64)
    # one condition per batch row, shared across positions
    return np.broadcast_to(cond.reshape(cond.shape + (1,) * (len(lead) - cond.ndim)), lead)


def rvae_forward(
    cfg: RvaeConfig,
    params: dict[str, Tensor],
    h_in: Tensor,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    condition=None,
    noise: np.ndarray | None = None,
) -> RvaeOutput:
    """Run the adapter on ``h_in`` ([..., d_model]).

    In train mode the noise comes from ``noise`` when given (for frozen-noise
    gradient checks), otherwise from ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown adapter mode {mode!r}")
    if not np.all(np.isfinite(h_in.data)):
        raise ValueError("adapter input contains non-finite values")
    p = {k[len(PREFIX):]: v for k, v in params.items() if k.startswith(PREFIX)}
    lead = h_in.shape[:-1]
    cond = _condition_ids(cfg, condition, lead)

    x = nc.layernorm(h_in, p["ln_in.g"], p["ln_in.b"])
    if cond is not None:
        x = x + nc.embedding(p["cond_shift"], cond)
    mu = nc.layernorm(nc.relu(nc.linear(x, p["enc_mu.w"], p["enc_mu.b"])), p["ln_mu.g"], p["ln_mu.b"])
    sigma = nc.relu(nc.linear(x, p["enc_sigma.w"], p["enc_sigma.b"])) + SIGMA_FLOOR
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ValueError("train mode needs rng or noise")
            noise = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = mu + sigma * noise
    else:
        z = mu
    dec_in = z if cond is None else nc.concat([z, nc.embedding(p["cond_embed"], cond)], axis=-1)
    decoded = nc.linear(dec_in, p["dec.w"], p["dec.b"])
    if cfg.alpha == 1.0:
        h_out = h_in
    elif cfg.alpha == 0.0:
        h_out = decoded
    else:
        h_out = h_in * cfg.alpha + decoded * (1.0 - cfg.alpha)
    return RvaeOutput(h_in, h_out, mu, sigma, z, decoded)


def _masked_position_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over all leading (position) axes, keeping the last axis."""
    lead_axes = tuple(range(x.data.ndim - 1))
    if mask is None:
        return nc.mean(x, axis=lead_axes)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask selects no positions")
    w = mask[..., None].astype(x.dtype)
    return nc.tsum(x * w, axis=lead_axes) * (1.0 / count)


def kl_per_dimension(mu: Tensor, sigma: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) per latent dimension, averaged over positions."""
    mu, sigma = nc.as_tensor(mu), nc.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("kl_per_dimension: sigma must be strictly positive")
    s2 = nc.square(sigma)
    kl = (nc.square(mu) + s2 - nc.log(s2) - 1.0) * 0.5
    return _masked_position_mean(kl, mask)


def free_bits_kl(kl_per_dim: Tensor, rho: float) -> Tensor:
    """Sum over dimensions of max(rho, kl_i)."""
    kl = nc.as_tensor(kl_per_dim)
    return _hinge_sum(kl, rho, axis=None)


def _hinge_sum(kl: Tensor, rho: float, axis) -> Tensor:
    # rho * d + sum of excesses: floored dimensions add exact zeros, so a
    # fully floored vector sums to rho * d without rounding drift
    d = kl.shape[-1]
    return nc.tsum(nc.maximum(kl, rho) - rho, axis=axis) + rho * d


def recon_mse(out: RvaeOutput, mask: np.ndarray | None = None) -> Tensor:
    err = nc.square(out.decoded - out.h_in)
    return nc.mean(_masked_position_mean(err, mask))


def rvae_aux_loss(
    out: RvaeOutput,
    recon_mode: str = "mse",
    rho: float = 0.2,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """VAE objective with free bits; returns (total, recon_term, kl_term).

    ``task-nll`` leaves reconstruction to the downstream task loss, so its
    recon term is zero.
    """
    if recon_mode not in RECON_MODES:
        raise ValueError(f"unknown recon_mode {recon_mode!r}; expected one of {RECON_MODES}")
    kl = free_bits_kl(kl_per_dimension(out.mu, out.sigma, mask), rho)
    if recon_mode == "mse":
        recon = recon_mse(out, mask)
        return recon + kl, recon, kl
    zero = Tensor(np.zeros((), dtype=kl.dtype))
    return kl, zero, kl


def grouped_aux_loss(
    out: RvaeOutput,
    recon_mode: str,
    rho: float,
    valid: np.ndarray,
    groups: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Per-group (recon_term, free_bits_kl) for a [B, T, d] batch.

    ``groups`` is a [K, B] boolean row-membership matrix; group k averages
    over the valid positions of its rows. Same values as calling
    :func:`rvae_aux_loss` once per group, but the elementwise work is shared.
    """
    if recon_mode not in RECON_MODES:
        raise ValueError(f"unknown recon_mode {recon_mode!r}; expected one of {RECON_MODES}")
    if np.any(out.sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    dt = out.mu.dtype
    valid_f = np.asarray(valid, dtype=dt)[..., None]
    counts = (np.asarray(groups, dtype=dt) * np.asarray(valid, dtype=dt).sum(axis=1)).sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("a group selects no positions")
    w = Tensor(np.asarray(groups, dtype=dt) / counts[:, None])
    s2 = nc.square(out.sigma)
    kl = (nc.square(out.mu) + s2 - nc.log(s2) - 1.0) * 0.5
    kl_rows = nc.tsum(kl * valid_f, axis=1)  # [B, latent]
    kl_dims = nc.matmul(w, kl_rows)  # [K, latent]
    fb = _hinge_sum(kl_dims, rho, axis=1)
    if recon_mode == "mse":
        err = nc.square(out.decoded - out.h_in)
        err_rows = nc.tsum(err * valid_f, axis=(1, 2))
        recon = nc.matmul(w, err_rows) * (1.0 / out.h_in.shape[-1])
    else:
        recon = Tensor(np.zeros(len(counts), dtype=dt))
    return recon, fb


class RvaeAdapter:
    """Callable hook for :func:`tinylm.lm_forward` that records the adapter output."""

    def __init__(self, cfg: RvaeConfig, params, mode="train", rng=None, condition=None, noise=None):
        self.cfg, self.params, self.mode = cfg, params, mode
        self.rng, self.condition, self.noise = rng, condition, noise
        self.output: RvaeOutput | None = None

    def __call__(self, h: Tensor):
        self.output = rvae_forward(self.cfg, self.params, h, self.mode, self.rng, self.condition, self.noise)
        return self.output.h_out, self.output
