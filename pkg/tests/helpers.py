"""Small configurations that train in seconds, for unit and integration tests."""

from __future__ import annotations

from rvae_lll.config import RunConfig


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        d_model=8,
        n_layers=2,
        n_heads=2,
        max_seq_len=48,
        dtype="float64",
        latent_dim=4,
        epochs_per_task=2,
        alt_turns=1,
        batch_size=8,
        n_train=12,
        n_test=6,
        max_gen_len=30,
        order=["cls", "slot"],
        gammas=[0.5],
        seeds=[0],
        orders=["cls-slot"],
        variants=["baseline"],
    )
    base.update(overrides)
    return RunConfig(**base)
