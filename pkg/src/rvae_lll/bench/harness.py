"""Single runs, the order x gamma x seed x variant grid, and one-axis sweeps."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .. import llltrain
from ..config import ConfigError, RunConfig
from ..llltrain import RunResult, StreamState, TaskData, Trainer
from ..taskfmt import Vocab
from . import tasks as toy

log = logging.getLogger(__name__)

ALL_ORDERS = [list(p) for p in itertools.permutations(toy.TASK_NAMES)]
SWEEP_AXES = ("adapter_position", "latent_dim", "alt_mode")
FIXED_ORDER = ["cls", "span", "slot"]


def parse_order(text: str) -> list[str]:
    names = [n for n in text.replace(">", "-").split("-") if n]
    bad = [n for n in names if n not in toy.TASK_NAMES]
    if bad or len(set(names)) != len(names) or not names:
        raise ConfigError(f"orders: bad task order {text!r}; use names from {toy.TASK_NAMES} joined by '-'")
    return names


def expand_orders(specs: list[str]) -> list[list[str]]:
    out: list[list[str]] = []
    for s in specs:
        for order in ALL_ORDERS if s == "all" else [parse_order(s)]:
            if order not in out:
                out.append(order)
    return out


def order_label(order: list[str]) -> str:
    return "-".join(order)


def build_tasks(cfg: RunConfig) -> tuple[Vocab, list[TaskData]]:
    vocab = toy.toy_vocab()
    by_name = {t.name: t for t in toy.toy_tasks(cfg.data_seed)}
    unknown = [n for n in cfg.order if n not in by_name]
    if unknown:
        raise ConfigError(f"order: unknown task {unknown[0]!r}")
    data = []
    for name in cfg.order:
        t = by_name[name]
        train, test = t.split(cfg.n_train, cfg.n_test)
        data.append(TaskData(t.id, t.name, train, test, t.metric))
    return vocab, data


def build_trainer(cfg: RunConfig, vocab: Vocab) -> Trainer:
    # condition slots cover every toy task id, whatever the order
    rc = cfg.rvae_config(len(toy.TASK_NAMES)) if cfg.adapter_position is not None else None
    return Trainer(cfg.model_config(len(vocab)), rc, cfg.lll_config(), vocab)


def run_single(
    cfg: RunConfig,
    on_epoch: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[StreamState, str, Trainer], None] | None = None,
    trainer: Trainer | None = None,
    state: StreamState | None = None,
) -> RunResult:
    vocab, data = build_tasks(cfg)
    trainer = trainer or build_trainer(cfg, vocab)
    hook = None if on_checkpoint is None else (lambda st, kind: on_checkpoint(st, kind, trainer))
    res = llltrain.train_stream(data, trainer, cfg.variant or "custom", on_epoch, hook, state)
    res.config = {**cfg.semantic_dict(), "config_digest": cfg.digest()}
    return res


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    variant: str
    gamma: float
    seed: int
    order: tuple[str, ...]


def grid_cells(cfg: RunConfig) -> list[Cell]:
    orders = expand_orders(cfg.orders)
    return [
        Cell(v, float(g), int(s), tuple(o))
        for v in cfg.variants
        for g in cfg.gammas
        for s in cfg.seeds
        for o in orders
    ]


def cell_config(base: RunConfig, cell: Cell) -> RunConfig:
    cfg = base.with_variant(cell.variant)
    return cfg.replace(gamma=cell.gamma, seed=cell.seed, order=list(cell.order))


def _run_cell(args: tuple[dict, Cell]) -> dict:
    base, cell = args
    cfg = cell_config(RunConfig(**base), cell)
    start = time.process_time()
    res = run_single(cfg)
    return {**run_record(res, cfg), "cpu_seconds": time.process_time() - start}


def run_record(res: RunResult, cfg: RunConfig) -> dict:
    """One structured record per run with the full config inlined."""
    final_corr = [r["correspondence_rate"] for r in res.replay[-1]] if res.replay else []
    return {
        "variant": cfg.variant,
        "gamma": cfg.gamma,
        "seed": cfg.seed,
        "order": order_label(cfg.order),
        "final_scores": res.final_scores,
        "average": res.average,
        "stage_scores": res.stage_scores,
        "replay": res.replay,
        "final_correspondence": final_corr,
        "loss_curves": res.loss_curves,
        "config": res.config,
        "config_digest": cfg.digest(),
    }


def _done_records(path: Path) -> dict[str, dict]:
    done = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["config_digest"]] = rec
    return done


def run_grid(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run every (variant, gamma, seed, order) cell; returns the run records.

    Each finished cell is appended to ``grid.jsonl`` immediately, and cells
    already present there (same config digest) are not rerun, so an
    interrupted grid resumes where it stopped. The summary table is rewritten
    after every cell.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / "grid.jsonl"
    done = _done_records(jsonl)
    cells = grid_cells(cfg)
    todo = [c for c in cells if cell_config(cfg, c).digest() not in done]
    records = dict(done)

    def finish(rec):
        records[rec["config_digest"]] = rec
        with open(jsonl, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        ordered = [records[cell_config(cfg, c).digest()] for c in cells if cell_config(cfg, c).digest() in records]
        write_grid_table(out / "grid.tsv", ordered)
        if progress:
            progress(rec)

    base = cfg.to_dict()
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for rec in pool.map(_run_cell, [(base, c) for c in todo]):
                finish(rec)
    else:
        for c in todo:
            finish(_run_cell((base, c)))
    return [records[cell_config(cfg, c).digest()] for c in cells]


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def summarize_grid(records: list[dict]) -> list[dict]:
    """Rows per (variant, gamma): pooled over seeds, then one row per seed.

    ``std`` is across task orders (population std of the per-order means).
    """
    rows = []
    keys = sorted({(r["variant"], r["gamma"]) for r in records}, key=lambda k: (k[1], k[0]))
    for variant, gamma in keys:
        group = [r for r in records if r["variant"] == variant and r["gamma"] == gamma]
        seeds = sorted({r["seed"] for r in group})
        for seed in [None] + seeds:
            sel = [r for r in group if seed is None or r["seed"] == seed]
            orders = sorted({r["order"] for r in sel})
            per_order = {o: _mean([r["average"] for r in sel if r["order"] == o]) for o in orders}
            corr = [c for r in sel for c in r["final_correspondence"]]
            rows.append(
                {
                    "variant": variant,
                    "gamma": gamma,
                    "seed": "pooled" if seed is None else seed,
                    "runs": len(sel),
                    "per_order": per_order,
                    "average": _mean(list(per_order.values())),
                    "std": float(np.std(list(per_order.values()))),
                    "correspondence": _mean(corr),
                    "correspondence_min": min((c for c in corr if c is not None), default=None),
                }
            )
    return rows


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    return f"{x:.2f}" if isinstance(x, float) else str(x)


def write_grid_table(path: str | Path, records: list[dict]) -> None:
    rows = summarize_grid(records)
    orders = sorted({o for r in rows for o in r["per_order"]})
    digests = sorted({r["config_digest"] for r in records})
    lines = [
        "# average = mean over orders of the seed-averaged order score; std = population std across orders",
        "# correspondence = mean (and min) parse_pseudo correspondence of the final stage's replay per previous task",
        "# config_digests=" + ",".join(d[:12] for d in digests),
        "\t".join(["variant", "gamma", "seed", "runs", *orders, "average", "std", "correspondence", "correspondence_min"]),
    ]
    for r in rows:
        cells = [r["variant"], _fmt(r["gamma"]), str(r["seed"]), str(r["runs"])]
        cells += [_fmt(r["per_order"].get(o)) for o in orders]
        cells += [_fmt(r["average"]), _fmt(r["std"]), _fmt(r["correspondence"]), _fmt(r["correspondence_min"])]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def sweep_config(base: RunConfig, axis: str, value, repeat: int) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep_axis: must be one of {SWEEP_AXES}, got {axis!r}")
    changes: dict = {"order": list(FIXED_ORDER), "seed": base.seed + repeat}
    if axis == "adapter_position":
        if not isinstance(value, int) or not 0 <= value <= base.n_layers:
            raise ConfigError(f"sweep_values: adapter position {value!r} outside [0, {base.n_layers}]")
        changes["adapter_position"] = value
    elif axis == "latent_dim":
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"sweep_values: latent dim {value!r} must be an integer >= 1")
        changes["latent_dim"] = value
    else:
        if value not in llltrain.MODES:
            raise ConfigError(f"sweep_values: alt mode {value!r} not in {llltrain.MODES}")
        changes["mode"] = value
    if base.adapter_position is None and "adapter_position" not in changes:
        changes["adapter_position"] = RunConfig.adapter_position
    return base.replace(**changes)


def _run_sweep_point(args: tuple[dict, str, object, int]) -> dict:
    base, axis, value, repeat = args
    cfg = sweep_config(RunConfig(**base), axis, value, repeat)
    start = time.process_time()
    rec = run_record(run_single(cfg), cfg)
    rec.update({"axis": axis, "value": value, "repeat": repeat, "cpu_seconds": time.process_time() - start})
    return rec


def sweep(
    cfg: RunConfig,
    axis: str | None = None,
    values: list | None = None,
    repeats: int | None = None,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """``repeats`` seeds per value on the fixed order cls -> span -> slot; mean and std across seeds."""
    axis = axis or cfg.sweep_axis
    values = list(cfg.sweep_values if values is None else values)
    repeats = repeats or cfg.repeats
    for v in values:
        sweep_config(cfg, axis, v, 0)  # validate everything before the first run
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl = out / "sweep.jsonl"
    done = _done_records(jsonl)
    points = [(v, r) for v in values for r in range(repeats)]
    records = dict(done)

    def finish(rec):
        records[rec["config_digest"]] = rec
        with open(jsonl, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        have = [records[d] for d in (sweep_config(cfg, axis, v, r).digest() for v, r in points) if d in records]
        write_sweep_table(out / "sweep.tsv", have, axis, values)
        if progress:
            progress(rec)

    base = cfg.to_dict()
    todo = [(base, axis, v, r) for v, r in points if sweep_config(cfg, axis, v, r).digest() not in done]
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            for rec in pool.map(_run_sweep_point, todo):
                finish(rec)
    else:
        for t in todo:
            finish(_run_sweep_point(t))
    return [records[sweep_config(cfg, axis, v, r).digest()] for v, r in points]


def summarize_sweep(records: list[dict], values: list) -> list[dict]:
    rows = []
    for v in values:
        sel = [r for r in records if r["value"] == v]
        if not sel:
            continue
        avgs = [r["average"] for r in sel]
        rows.append(
            {
                "value": v,
                "runs": len(sel),
                "mean": float(np.mean(avgs)),
                "std": float(np.std(avgs)),
                "per_task": {t: float(np.mean([r["final_scores"][t] for r in sel])) for t in FIXED_ORDER},
            }
        )
    return rows


def write_sweep_table(path: str | Path, records: list[dict], axis: str, values: list) -> None:
    lines = [
        f"# sweep over {axis} on order {order_label(FIXED_ORDER)}; mean and population std across seeds",
        "# config_digests=" + ",".join(sorted(r["config_digest"][:12] for r in records)),
        "\t".join([axis, "runs", *FIXED_ORDER, "mean", "std"]),
    ]
    for r in summarize_sweep(records, values):
        lines.append(
            "\t".join([str(r["value"]), str(r["runs"]), *(_fmt(r["per_task"][t]) for t in FIXED_ORDER), _fmt(r["mean"]), _fmt(r["std"])])
        )
    Path(path).write_text("\n".join(lines) + "\n")
