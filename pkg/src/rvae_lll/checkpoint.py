"""Checkpoints: one ``.npz`` holding arrays plus a JSON header.

Layout inside the archive:

    header        uint8 bytes of a JSON document (format, digest, label, optimizer scalars, RNG states, extra)
    p/<name>      parameter arrays
    m/<name>      AdamW first moments
    v/<name>      AdamW second moments
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .llltrain import Trainer
from .numcore import AdamWState

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    digest: str
    label: str
    config: dict
    params: dict[str, np.ndarray]
    opt: AdamWState
    rng_state: dict
    task_step: int = 0
    task_steps: int = 0
    extra: dict = field(default_factory=dict)


def snapshot(trainer: Trainer, digest: str, label: str, config: dict, extra: dict | None = None) -> Checkpoint:
    """Copy everything needed to continue ``trainer`` bit-for-bit."""
    o = trainer.opt
    opt = AdamWState(
        lr=o.lr,
        beta1=o.beta1,
        beta2=o.beta2,
        eps=o.eps,
        weight_decay=o.weight_decay,
        step=o.step,
        m={k: a.copy() for k, a in o.m.items()},
        v={k: a.copy() for k, a in o.v.items()},
        t=dict(o.t),
    )
    return Checkpoint(
        digest=digest,
        label=label,
        config=config,
        params={k: p.data.copy() for k, p in trainer.params.items()},
        opt=opt,
        rng_state=trainer.streams.state(),
        task_step=trainer.task_step,
        task_steps=trainer.task_steps,
        extra=dict(extra or {}),
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically (temp file + rename) so a crash never leaves half a checkpoint."""
    o = ckpt.opt
    header = {
        "format_version": FORMAT_VERSION,
        "config_digest": ckpt.digest,
        "stage_label": ckpt.label,
        "config": ckpt.config,
        "optimizer": {
            "lr": o.lr,
            "beta1": o.beta1,
            "beta2": o.beta2,
            "eps": o.eps,
            "weight_decay": o.weight_decay,
            "step": o.step,
            "t": o.t,
        },
        "rng_state": ckpt.rng_state,
        "task_step": ckpt.task_step,
        "task_steps": ckpt.task_steps,
        "extra": ckpt.extra,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"p/{k}": a for k, a in ckpt.params.items()})
    arrays.update({f"m/{k}": a for k, a in o.m.items()})
    arrays.update({f"v/{k}": a for k, a in o.v.items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["header"].tobytes().decode())
            arrays = {k: z[k] for k in z.files if k != "header"}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')!r}")

    def group(prefix):
        return {k[len(prefix) :]: a for k, a in arrays.items() if k.startswith(prefix)}

    o = header["optimizer"]
    opt = AdamWState(
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        eps=o["eps"],
        weight_decay=o["weight_decay"],
        step=o["step"],
        m=group("m/"),
        v=group("v/"),
        t={k: int(n) for k, n in o["t"].items()},
    )
    return Checkpoint(
        digest=header["config_digest"],
        label=header["stage_label"],
        config=header["config"],
        params=group("p/"),
        opt=opt,
        rng_state=header["rng_state"],
        task_step=header["task_step"],
        task_steps=header["task_steps"],
        extra=header["extra"],
    )


def restore(trainer: Trainer, ckpt: Checkpoint, digest: str | None = None) -> None:
    """Load ``ckpt`` into ``trainer``; refuses when ``digest`` differs from the checkpoint's."""
    if digest is not None and digest != ckpt.digest:
        raise CheckpointError(f"config digest mismatch: checkpoint {ckpt.digest[:12]}, run {digest[:12]}")
    missing = set(trainer.params) ^ set(ckpt.params)
    if missing:
        raise CheckpointError(f"parameter sets differ: {sorted(missing)[:5]}")
    for k, p in trainer.params.items():
        a = ckpt.params[k]
        if a.shape != p.data.shape or a.dtype != p.data.dtype:
            raise CheckpointError(f"parameter {k!r}: checkpoint has {a.shape}/{a.dtype}, model {p.data.shape}/{p.data.dtype}")
        p.data[...] = a
    o = ckpt.opt
    trainer.opt = AdamWState(
        lr=o.lr,
        beta1=o.beta1,
        beta2=o.beta2,
        eps=o.eps,
        weight_decay=o.weight_decay,
        step=o.step,
        m={k: a.copy() for k, a in o.m.items()},
        v={k: a.copy() for k, a in o.v.items()},
        t=dict(o.t),
    )
    trainer.streams.set_state(ckpt.rng_state)
    trainer.task_step = ckpt.task_step
    trainer.task_steps = ckpt.task_steps
