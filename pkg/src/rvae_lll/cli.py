"""Command-line entry point: train, eval, generate, grid, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ck
from . import config as C
from .bench import harness
from .llltrain import StreamState, generate_pseudo, parse_generated

log = logging.getLogger("rvae_lll")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file (every field has a default)")
    p.add_argument("--gamma", type=float, help="replay sampling ratio")
    p.add_argument("--mode", help="training mode: naive, alt_m1, alt_m1_rev, alt_m1_star, alt")
    p.add_argument("--turns", type=int, help="ALT turns M")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help="baseline, +id, rvae, rvae-id, rcvae, rcvae-id")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes for grid/sweep")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")


def _config_from_args(args) -> C.RunConfig:
    overrides: dict = {}
    for text in args.set:
        k, v = C.parse_assignment(text)
        overrides[k] = v
    flag_map = {"gamma": "gamma", "mode": "mode", "turns": "alt_turns", "seed": "seed", "variant": "variant",
                "out": "out_dir", "workers": "workers"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return C.load(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rvae-lll", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    # -v is accepted after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train one task stream")
    _add_config_args(t)
    t.add_argument("--resume", help="checkpoint to continue from (config digest must match)")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on task test splits")
    e.add_argument("checkpoint")
    e.add_argument("--tasks", help="comma-separated task names or ids (default: all tasks in the run order)")

    g = sub.add_parser("generate", parents=[common], help="decode pseudo samples from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--task", required=True, help="task name or id")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--output", help="JSONL file for the samples (default: next to the checkpoint)")

    gr = sub.add_parser("grid", parents=[common], help="order x gamma x seed x variant grid")
    _add_config_args(gr)

    sw = sub.add_parser("sweep", parents=[common], help="one-axis sweep on the fixed order cls-span-slot")
    _add_config_args(sw)
    sw.add_argument("--axis", help="adapter_position, latent_dim or alt_mode")
    sw.add_argument("--values", help="comma-separated values")
    sw.add_argument("--repeats", type=int)
    return p


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    digest = cfg.digest()
    out = Path(cfg.out_dir)
    ckdir = out / "checkpoints"
    log_path = out / "log.jsonl"

    vocab, _ = harness.build_tasks(cfg)
    trainer = harness.build_trainer(cfg, vocab)
    state = None
    lines_done = 0
    if args.resume:
        saved = ck.load(args.resume)
        if saved.digest != digest:
            raise C.ConfigError(
                f"refusing to resume: checkpoint config digest {saved.digest[:12]} differs from this run's {digest[:12]}"
            )
        ck.restore(trainer, saved, digest)
        state = StreamState.from_dict(saved.extra["stream"])
        lines_done = saved.extra["log_lines"]
        kept = log_path.read_text().splitlines(keepends=True)[:lines_done] if log_path.exists() else []
        if len(kept) != lines_done:
            raise RuntimeError(f"run log {log_path} has fewer lines than the checkpoint recorded")
        log_path.write_text("".join(kept))
    else:
        out.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    # the effective config goes to disk before any training
    _write_json(out / "config.json", {**cfg.to_dict(), "config_digest": digest})

    counter = {"lines": lines_done}

    def on_epoch(rec: dict) -> None:
        rec = {**rec, "config_digest": digest}
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        counter["lines"] += 1
        if rec["phase"] == "eval":
            log.info("stage %d (%s) scores %s", rec["stage"], rec["task"], rec["scores"])
        else:
            log.info("stage %d epoch %d %s loss %.4f", rec["stage"], rec["epoch"], rec["phase"], rec["loss_total"])

    def on_checkpoint(st: StreamState, kind: str, tr) -> None:
        label = f"stage{st.stage}-epoch{st.epoch}" if kind == "epoch" else f"stage{st.stage}"
        extra = {"stream": st.to_dict(), "log_lines": counter["lines"]}
        snap = ck.snapshot(tr, digest, label, cfg.semantic_dict(), extra)
        ck.save(snap, ckdir / "last.npz")
        if kind == "stage":
            ck.save(snap, ckdir / f"stage{st.stage}.npz")

    res = harness.run_single(cfg, on_epoch, on_checkpoint, trainer, state)
    (out / "result.json").write_text(res.to_json() + "\n")
    print(json.dumps({"final_scores": res.final_scores, "average": res.average, "out_dir": str(out)}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / generate
# ---------------------------------------------------------------------------


def _load_run(path: str):
    try:
        saved = ck.load(path)
    except ck.CheckpointError as e:
        raise UsageError(str(e)) from None
    cfg = C.from_dict(saved.config)
    vocab, tasks = harness.build_tasks(cfg)
    trainer = harness.build_trainer(cfg, vocab)
    ck.restore(trainer, saved)
    return saved, cfg, vocab, tasks, trainer


def _resolve_task(text: str, tasks) -> object:
    for t in tasks:
        if text == t.name or text == str(t.task_id):
            return t
    known = ", ".join(f"{t.name} (id {t.task_id})" for t in tasks)
    raise UsageError(f"unknown task {text!r}; known tasks: {known}")


def cmd_eval(args) -> int:
    saved, cfg, vocab, tasks, trainer = _load_run(args.checkpoint)
    chosen = tasks if not args.tasks else [_resolve_task(x.strip(), tasks) for x in args.tasks.split(",") if x.strip()]
    scores = {t.name: trainer.evaluate(t.test, t.metric) for t in chosen}
    print(json.dumps({"checkpoint": saved.label, "config_digest": saved.digest, "scores": scores}, sort_keys=True))
    return EXIT_OK


def _format_rate(corresponding: int, accepted: int) -> str:
    if accepted == 0:
        return "correspondence: n/a (no well-formed samples)"
    rate = corresponding / accepted
    return f"correspondence: {corresponding}/{accepted} = {rate:.3f} ({100 * rate:.1f}%)"


def cmd_generate(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    saved, cfg, vocab, tasks, trainer = _load_run(args.checkpoint)
    task = _resolve_task(args.task, [t for t in tasks])
    output = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(f".generated.{task.name}.jsonl")
    seqs = generate_pseudo(trainer, task.task_id, args.count) if args.count else []
    accepted = corresponding = 0
    records = []
    for i, seq in enumerate(seqs):
        parsed = parse_generated(seq, vocab)
        words = vocab.words(seq)
        if parsed is None:
            status, sample = "malformed", None
        else:
            sample, corr = parsed
            accepted += 1
            corresponding += corr
            status = "ok" if corr else "wrong-task"
        records.append({"index": i, "status": status, "text": " ".join(words), "sample": sample and sample.to_record()})
        print(f"{i:4d}  {status:<10}  {' '.join(words)}")
    summary = _format_rate(corresponding, accepted)
    print(f"task {task.name} (id {task.task_id}): {accepted}/{len(seqs)} well-formed; {summary}")
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w") as fh:
        for r in records:
            fh.write(json.dumps({**r, "config_digest": saved.digest}, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid / sweep
# ---------------------------------------------------------------------------


def _progress(rec: dict) -> None:
    log.info("%s gamma=%s seed=%s order=%s -> %.2f", rec["variant"], rec["gamma"], rec["seed"], rec["order"], rec["average"])


def cmd_grid(args) -> int:
    cfg = _config_from_args(args)
    harness.expand_orders(cfg.orders)
    records = harness.run_grid(cfg, progress=_progress)
    for row in harness.summarize_grid(records):
        if row["seed"] == "pooled":
            corr = "n/a" if row["correspondence"] is None else f"{row['correspondence']:.3f}"
            print(f"{row['variant']:<9} gamma={row['gamma']:<5} average={row['average']:.2f} std={row['std']:.2f} correspondence={corr}")
    print(f"results: {Path(cfg.out_dir) / 'grid.tsv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    axis = args.axis or cfg.sweep_axis
    values = None
    if args.values:
        values = []
        for v in args.values.split(","):
            try:
                values.append(json.loads(v))
            except json.JSONDecodeError:
                values.append(v.strip())
    records = harness.sweep(cfg, axis, values, args.repeats, progress=_progress)
    for row in harness.summarize_sweep(records, values or cfg.sweep_values):
        print(f"{axis}={row['value']}: mean={row['mean']:.2f} std={row['std']:.2f} (n={row['runs']})")
    print(f"results: {Path(cfg.out_dir) / 'sweep.tsv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "grid": cmd_grid, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (C.ConfigError, UsageError, ck.CheckpointError) as e:
        print(f"rvae-lll {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"rvae-lll {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
