"""Lifelong training engine: composite loss, generative replay, ALT phases, task streams."""

from __future__ import annotations

import enum
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from . import rvae as rv
from . import tinylm
from .metrics import SCORERS
from .numcore import AdamWState, Tensor
from .taskfmt import (
    EncodedExample,
    Sample,
    Vocab,
    encode_id,
    encode_lm,
    encode_qa,
    pad_batch,
    parse_pseudo,
    qa_prompt,
    task_token,
)

log = logging.getLogger(__name__)

MODES = ("naive", "alt_m1", "alt_m1_rev", "alt_m1_star", "alt")
LR_SCHEDULES = ("constant", "linear")
# how the frozen adapter runs while only the backbone trains
BACKBONE_PHASE_ADAPTER = ("mean", "sample", "bypass")


class TrainPhase(str, enum.Enum):
    BACKBONE_ONLY = "backbone_only"
    JOINT = "joint"
    ADAPTER_ONLY = "adapter_only"


@dataclass
class LllConfig:
    lambda_lm: float = 0.25
    beta_id: float = 0.5
    gamma: float = 0.2
    epochs_per_task: int = 24
    alt_turns: int = 3
    mode: str = "alt"
    use_id_task: bool = True
    recon_mode: str = "mse"
    batch_size: int = 32
    seed: int = 0
    lr: float = 3e-3
    weight_decay: float = 0.01
    alt_joint_second_half: bool = False
    use_task_token: bool = True
    gen_top_k: int = 20
    max_gen_len: int = 40
    max_answer_len: int = 8
    grad_clip: float | None = 1.0
    fresh_optimizer: bool = True
    lr_schedule: str = "constant"
    backbone_phase_adapter: str = "mean"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alt_turns < 1:
            raise ValueError("alt_turns must be >= 1")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.mode == "alt" and self.epochs_per_task % (2 * self.alt_turns):
            raise ValueError("epochs_per_task must be divisible by 2 * alt_turns in alt mode")
        if self.mode in ("alt_m1", "alt_m1_rev", "alt_m1_star") and self.epochs_per_task % 2:
            raise ValueError("epochs_per_task must be even in the M=1 alt modes")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.recon_mode not in rv.RECON_MODES:
            raise ValueError(f"recon_mode must be one of {rv.RECON_MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.backbone_phase_adapter not in BACKBONE_PHASE_ADAPTER:
            raise ValueError(f"backbone_phase_adapter must be one of {BACKBONE_PHASE_ADAPTER}")


def phase_for_epoch(epoch: int, cfg: LllConfig) -> TrainPhase:
    n = cfg.epochs_per_task
    if not 0 <= epoch < n:
        raise ValueError(f"epoch {epoch} outside [0, {n})")
    if cfg.mode == "naive":
        return TrainPhase.JOINT
    first_half = epoch < n // 2
    if cfg.mode == "alt_m1":
        return TrainPhase.BACKBONE_ONLY if first_half else TrainPhase.JOINT
    if cfg.mode == "alt_m1_rev":
        return TrainPhase.JOINT if first_half else TrainPhase.BACKBONE_ONLY
    if cfg.mode == "alt_m1_star":
        return TrainPhase.BACKBONE_ONLY if first_half else TrainPhase.ADAPTER_ONLY
    turn = n // cfg.alt_turns
    if epoch % turn < turn // 2:
        return TrainPhase.BACKBONE_ONLY
    return TrainPhase.JOINT if cfg.alt_joint_second_half else TrainPhase.ADAPTER_ONLY


def pseudo_count(gamma: float, t: int, d_t: int) -> int:
    """Pseudo samples per previous task before training task ``t`` (1-based)."""
    if t < 2:
        raise ValueError("pseudo_count needs t >= 2")
    if gamma < 0 or d_t < 0:
        raise ValueError("gamma and d_t must be non-negative")
    # decimal reading of gamma avoids floor(28.999999...) style off-by-one
    return int(Fraction(str(gamma)) * d_t // (t - 1))


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

STREAMS = ("init", "shuffle", "noise", "generation")


class RngStreams:
    """Independent named generators derived from one run seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.gens = {
            name: np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
            for name in STREAMS
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def set_state(self, state: dict) -> None:
        for name, s in state.items():
            self.gens[name].bit_generator.state = s


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


class LllModel:
    """Backbone + optional adapter parameters in one flat name -> Tensor map."""

    def __init__(self, model_cfg: tinylm.ModelConfig, rvae_cfg: rv.RvaeConfig | None, rng: np.random.Generator):
        self.cfg = model_cfg
        self.rvae_cfg = rvae_cfg if model_cfg.adapter_position is not None else None
        self.params = tinylm.init_params(model_cfg, rng)
        if self.rvae_cfg is not None:
            if self.rvae_cfg.d_model != model_cfg.d_model:
                raise ValueError("adapter d_model must match the backbone")
            self.params.update(rv.init_params(self.rvae_cfg, rng, model_cfg.dtype))

    @property
    def has_adapter(self) -> bool:
        return self.rvae_cfg is not None

    @property
    def conditional(self) -> bool:
        return self.has_adapter and self.rvae_cfg.conditional

    @property
    def null_condition(self) -> int:
        # the last condition slot means "task identity not observed"
        return self.rvae_cfg.n_conditions - 1

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith(rv.PREFIX)]

    def adapter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(rv.PREFIX)]

    def adapter(self, mode: str, rng=None, condition=None, noise=None):
        if not self.has_adapter:
            return None
        if self.conditional and condition is None:
            condition = self.null_condition
        if not self.conditional:
            condition = None
        return rv.RvaeAdapter(self.rvae_cfg, self.params, mode, rng, condition, noise)


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    valid: np.ndarray
    kinds: np.ndarray  # per row: "QA" | "LM" | "ID"
    task_ids: np.ndarray


def build_batch(samples: list[Sample], vocab: Vocab, cfg: LllConfig, max_len: int | None = None) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    enc: list[EncodedExample] = [encode_qa(s, vocab, max_len) for s in samples]
    enc += [encode_lm(s, vocab, cfg.use_task_token, max_len) for s in samples]
    if cfg.use_id_task:
        enc += [encode_id(s, vocab, max_len) for s in samples]
    inputs, targets, mask, valid = pad_batch(enc, vocab.pad)
    return Batch(inputs, targets, mask, valid, np.array([e.kind for e in enc]), np.array([e.task_id for e in enc]))


def _row_conditions(model: LllModel, batch: Batch) -> np.ndarray | None:
    if not model.conditional:
        return None
    # only the LM rows observe the task identity
    return np.where(batch.kinds == "LM", batch.task_ids, model.null_condition)


def composite_loss(
    model: LllModel,
    batch: Batch,
    cfg: LllConfig,
    phase: TrainPhase = TrainPhase.JOINT,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """L = L_QA + lambda L_LM + beta L_ID, each task term carrying its own VAE term.

    The VAE terms are present only when an adapter exists and the phase
    trains it.
    """
    weights = {"QA": 1.0, "LM": cfg.lambda_lm, "ID": cfg.beta_id if cfg.use_id_task else 0.0}
    kinds = [k for k in ("QA", "LM", "ID") if (batch.kinds == k).any()]
    if not kinds:
        raise ValueError("empty batch")
    conds = _row_conditions(model, batch)
    how = cfg.backbone_phase_adapter if phase == TrainPhase.BACKBONE_ONLY else "sample"
    if how == "bypass":
        adapter = None
    elif how == "mean":
        # the adapter is frozen here, so its sampling noise would only perturb the backbone
        adapter = model.adapter("eval", condition=conds)
    else:
        adapter = model.adapter("train", rng, conds, noise)
    logits, aux = tinylm.lm_forward(model.cfg, model.params, batch.inputs, adapter)

    # one fused NLL: per-position weights fold in the task weight and the per-task mean
    pos_w = np.zeros(batch.inputs.shape, dtype=logits.dtype)
    rows = np.stack([batch.kinds == k for k in kinds])
    parts = {"qa": 0.0, "lm": 0.0, "id": 0.0, "kl": 0.0, "recon": 0.0}
    masks = [batch.loss_mask & r[:, None] for r in rows]
    for k, m in zip(kinds, masks):
        pos_w[m] = weights[k] / m.sum()
    total, nll = nc.weighted_nll(logits, batch.targets, pos_w, return_positions=True)
    for k, m in zip(kinds, masks):
        parts[k.lower()] = float(nll[m].mean())

    if model.has_adapter and phase != TrainPhase.BACKBONE_ONLY:
        w = np.array([weights[k] for k in kinds], dtype=logits.dtype)
        recon, kl = rv.grouped_aux_loss(aux, cfg.recon_mode, model.rvae_cfg.rho, batch.valid, rows)
        total = total + nc.tsum((recon + kl) * w)
        parts["kl"] = float(w @ kl.data)
        parts["recon"] = float(w @ recon.data)
    parts["total"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


class Trainer:
    def __init__(
        self,
        model_cfg: tinylm.ModelConfig,
        rvae_cfg: rv.RvaeConfig | None,
        cfg: LllConfig,
        vocab: Vocab,
    ):
        if model_cfg.adapter_position is None and cfg.mode != "naive":
            raise ValueError(f"mode {cfg.mode!r} needs an adapter; use mode='naive' without one")
        self.cfg, self.vocab = cfg, vocab
        self.streams = RngStreams(cfg.seed)
        self.model = LllModel(model_cfg, rvae_cfg, self.streams["init"])
        self.opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.task_steps = 0  # optimizer steps planned for the current task
        self.task_step = 0

    def start_task(self, n_samples: int) -> None:
        """Reset the per-task optimizer and learning-rate schedule."""
        if self.cfg.fresh_optimizer:
            self.opt = AdamWState(lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        per_epoch = -(-n_samples // self.cfg.batch_size)
        self.task_steps = per_epoch * self.cfg.epochs_per_task
        self.task_step = 0

    def current_lr(self) -> float:
        if self.cfg.lr_schedule == "constant" or not self.task_steps:
            return self.cfg.lr
        return self.cfg.lr * max(0.0, 1.0 - self.task_step / self.task_steps)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params

    def trainable(self, phase: TrainPhase) -> list[str]:
        if phase == TrainPhase.BACKBONE_ONLY:
            return self.model.backbone_names()
        if phase == TrainPhase.ADAPTER_ONLY:
            return self.model.adapter_names()
        return list(self.params)

    def step(self, samples: list[Sample], phase: TrainPhase) -> dict[str, float]:
        names = set(self.trainable(phase))
        for n, p in self.params.items():
            p.requires_grad = n in names
            p.grad = None
        batch = build_batch(samples, self.vocab, self.cfg, self.model.cfg.max_seq_len)
        graph = nc.Graph()
        with graph:
            loss, parts = composite_loss(self.model, batch, self.cfg, phase, self.streams["noise"])
        graph.backward(loss)
        grads = {n: self.params[n].grad for n in names if self.params[n].grad is not None}
        if self.cfg.grad_clip:
            nc.clip_grad_norm(grads, self.cfg.grad_clip)
        self.opt.lr = self.current_lr()
        nc.adamw_step(self.params, grads, self.opt, names)
        self.task_step += 1
        for p in self.params.values():
            p.grad = None
            p.requires_grad = True
        return parts

    def train_epoch(self, data: list[Sample], phase: TrainPhase) -> dict[str, float]:
        order = self.streams["shuffle"].permutation(len(data))
        sums: dict[str, float] = {}
        n = 0
        bs = self.cfg.batch_size
        for start in range(0, len(data), bs):
            parts = self.step([data[i] for i in order[start : start + bs]], phase)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        return {k: v / n for k, v in sums.items()}

    # -- inference -------------------------------------------------------

    def answer(self, samples: list[Sample], batch_size: int = 256) -> list[list[str]]:
        """Greedy answers (eval-mode adapter) for the QA prompts of ``samples``."""
        out: list[list[str]] = []
        adapter = self.model.adapter("eval")
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            prompts = [qa_prompt(s, self.vocab) for s in chunk]
            seqs = tinylm.decode_batch(
                self.model.cfg, self.params, prompts, self.vocab.eos, self.cfg.max_answer_len + 1, adapter, self.vocab.pad
            )
            for p, seq in zip(prompts, seqs):
                gen = seq[len(p) :]
                if self.vocab.eos in gen:
                    gen = gen[: gen.index(self.vocab.eos)]
                out.append(self.vocab.words(gen))
        return out

    def evaluate(self, samples: list[Sample], metric: str) -> float:
        scorer = SCORERS[metric]
        preds = self.answer(samples)
        return 100.0 * float(np.mean([scorer(p, s.answer) for p, s in zip(preds, samples)]))


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@dataclass
class TaskReplay:
    task_id: int
    requested: int
    samples: list[Sample] = field(default_factory=list)
    attempts: int = 0
    rejected: int = 0
    corresponding: int = 0

    @property
    def shortfall(self) -> int:
        return self.requested - len(self.samples)

    @property
    def parse_rate(self) -> float | None:
        return len(self.samples) / self.attempts if self.attempts else None

    @property
    def correspondence_rate(self) -> float | None:
        return self.corresponding / len(self.samples) if self.samples else None

    def summary(self) -> dict:
        return {
            "task": self.task_id,
            "requested": self.requested,
            "accepted": len(self.samples),
            "attempts": self.attempts,
            "rejected": self.rejected,
            "corresponding": self.corresponding,
            "shortfall": self.shortfall,
            "parse_rate": self.parse_rate,
            "correspondence_rate": self.correspondence_rate,
        }


@dataclass
class ReplayPlan:
    tasks: list[TaskReplay] = field(default_factory=list)

    @property
    def samples(self) -> list[Sample]:
        return [s for t in self.tasks for s in t.samples]

    def summary(self) -> list[dict]:
        return [t.summary() for t in self.tasks]


def generate_pseudo(trainer: Trainer, task_id: int, n: int) -> list[list[int]]:
    """Decode ``n`` sequences from the [TASK_k] prefix."""
    vocab, cfg = trainer.vocab, trainer.cfg
    model = trainer.model
    adapter = model.adapter("eval", condition=task_id if model.conditional else None)
    prefix = [vocab.id(task_token(task_id))]
    max_new = min(cfg.max_gen_len, model.cfg.max_seq_len - 1)
    return tinylm.decode_batch(
        model.cfg,
        model.params,
        [prefix] * n,
        vocab.eos,
        max_new,
        adapter,
        vocab.pad,
        rng=trainer.streams["generation"],
        top_k=cfg.gen_top_k,
    )


def parse_generated(seq: list[int], vocab: Vocab) -> tuple[Sample, bool] | None:
    """parse_pseudo, but a sequence cut off by the length cap (no [EOS]) is malformed."""
    if not seq or seq[-1] != vocab.eos:
        return None
    return parse_pseudo(seq, vocab)


def generate_replay(trainer: Trainer, task_ids: list[int], counts: list[int], max_attempt_factor: int = 3) -> ReplayPlan:
    """Generate, parse and filter pseudo samples; shortfalls are recorded, never raised."""
    plan = ReplayPlan()
    vocab = trainer.vocab
    for k, count in zip(task_ids, counts):
        if count == 0:
            continue
        rec = TaskReplay(k, count)
        budget = max_attempt_factor * count
        while len(rec.samples) < count and rec.attempts < budget:
            n = min(count - len(rec.samples), budget - rec.attempts)
            for seq in generate_pseudo(trainer, k, n):
                rec.attempts += 1
                parsed = parse_generated(seq, vocab)
                if parsed is None or len(rec.samples) >= count:
                    rec.rejected += parsed is None
                    continue
                sample, corresponding = parsed
                rec.samples.append(sample)
                rec.corresponding += corresponding
        plan.tasks.append(rec)
    return plan


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    task_id: int
    name: str
    train: list[Sample]
    test: list[Sample]
    metric: str


@dataclass
class RunResult:
    order: list[str]
    gamma: float
    seed: int
    variant: str
    final_scores: dict[str, float]
    average: float
    stage_scores: list[dict[str, float]]
    replay: list[list[dict]]
    loss_curves: list[list[float]]
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text))

    def correspondence(self) -> list[dict[str, float | None]]:
        """Per stage: previous-task name -> correspondence rate."""
        out = []
        for stage, reps in enumerate(self.replay):
            out.append({self.order[r["task_position"]]: r["correspondence_rate"] for r in reps})
        return out


EpochHook = Callable[[dict], None]


@dataclass
class StreamState:
    """Where a task stream stands; enough to resume it after any epoch."""

    stage: int = 0  # index of the task in progress
    epoch: int = 0  # next epoch to run within that task
    data: list[Sample] | None = None  # task data + replay for the current stage
    replay: list[list[dict]] = field(default_factory=list)
    curves: list[list[float]] = field(default_factory=list)
    stage_scores: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epoch": self.epoch,
            "data": None if self.data is None else [s.to_record() for s in self.data],
            "replay": self.replay,
            "curves": self.curves,
            "stage_scores": self.stage_scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StreamState":
        data = None if d["data"] is None else [Sample.from_record(r) for r in d["data"]]
        return cls(d["stage"], d["epoch"], data, d["replay"], d["curves"], d["stage_scores"])


def train_stream(
    tasks: list[TaskData],
    trainer: Trainer,
    variant: str = "",
    on_epoch: EpochHook | None = None,
    on_checkpoint: Callable[[StreamState, str], None] | None = None,
    state: StreamState | None = None,
) -> RunResult:
    """Train ``trainer`` on ``tasks`` in order with generative replay and return the run summary.

    ``on_epoch`` receives one log record per epoch and per evaluation.
    ``on_checkpoint(state, kind)`` fires after every epoch (kind "epoch") and
    after every finished task (kind "stage"); passing a saved ``state`` back
    in resumes the stream from that point.
    """
    if not tasks:
        raise ValueError("train_stream needs at least one task")
    cfg = trainer.cfg
    st = state or StreamState()
    while st.stage < len(tasks):
        t = st.stage
        task = tasks[t]
        if st.data is None:
            if not task.train:
                raise ValueError(f"task {task.name} has no training data")
            data = list(task.train)
            reps: list[dict] = []
            if t >= 1:
                prev = [tk.task_id for tk in tasks[:t]]
                count = pseudo_count(cfg.gamma, t + 1, len(task.train))
                plan = generate_replay(trainer, prev, [count] * len(prev))
                data += plan.samples
                for pos, rec in enumerate(plan.summary()):
                    rec["task_position"] = pos
                    reps.append(rec)
                log.info("stage %d: replay %s", t + 1, [(r["task"], r["accepted"], r["requested"]) for r in reps])
            st.data = data
            st.replay.append(reps)
            st.curves.append([])
            trainer.start_task(len(data))
        for epoch in range(st.epoch, cfg.epochs_per_task):
            phase = phase_for_epoch(epoch, cfg)
            parts = trainer.train_epoch(st.data, phase)
            st.curves[-1].append(parts["total"])
            st.epoch = epoch + 1
            if on_epoch:
                on_epoch(
                    {
                        "stage": t + 1,
                        "task": task.name,
                        "epoch": epoch,
                        "phase": phase.value,
                        "n_train": len(st.data),
                        **{f"loss_{k}": v for k, v in parts.items()},
                    }
                )
            if on_checkpoint:
                on_checkpoint(st, "epoch")
        scores = {tk.name: trainer.evaluate(tk.test, tk.metric) for tk in tasks[: t + 1]}
        st.stage_scores.append(scores)
        if on_epoch:
            on_epoch({"stage": t + 1, "task": task.name, "epoch": None, "phase": "eval", "scores": scores})
        st.stage, st.epoch, st.data = t + 1, 0, None
        if on_checkpoint:
            on_checkpoint(st, "stage")
        log.info("stage %d (%s): %s", t + 1, task.name, scores)
    final = st.stage_scores[-1]
    return RunResult(
        order=[tk.name for tk in tasks],
        gamma=cfg.gamma,
        seed=cfg.seed,
        variant=variant,
        final_scores=final,
        average=float(np.mean(list(final.values()))),
        stage_scores=st.stage_scores,
        replay=st.replay,
        loss_curves=st.curves,
    )
