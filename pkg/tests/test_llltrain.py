import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rvae_lll import checkpoint, llltrain, tinylm
from rvae_lll import numcore as nc
from rvae_lll.bench import harness
from rvae_lll.bench import tasks as toy
from rvae_lll.llltrain import LllConfig, StreamState, TrainPhase
from rvae_lll.taskfmt import encode_qa, pad_batch

from . import oracles
from .helpers import tiny_config

B, J, A = TrainPhase.BACKBONE_ONLY, TrainPhase.JOINT, TrainPhase.ADAPTER_ONLY


def phases(**kw):
    cfg = LllConfig(**kw)
    return [llltrain.phase_for_epoch(e, cfg) for e in range(cfg.epochs_per_task)]


# -- phase schedule ----------------------------------------------------------------


def test_alt3_pattern_over_24_epochs():
    assert phases(mode="alt", alt_turns=3, epochs_per_task=24) == ([B] * 4 + [A] * 4) * 3


def test_alt1_and_m1_modes():
    assert phases(mode="alt", alt_turns=1, epochs_per_task=24) == [B] * 12 + [A] * 12
    assert phases(mode="alt_m1", epochs_per_task=24) == [B] * 12 + [J] * 12
    assert phases(mode="alt_m1_rev", epochs_per_task=24) == [J] * 12 + [B] * 12
    assert phases(mode="alt_m1_star", epochs_per_task=24) == [B] * 12 + [A] * 12
    assert phases(mode="naive", epochs_per_task=24) == [J] * 24


def test_joint_second_half_reading():
    assert phases(mode="alt", alt_turns=3, epochs_per_task=24, alt_joint_second_half=True) == ([B] * 4 + [J] * 4) * 3


@given(st.integers(1, 5), st.integers(1, 4), st.sampled_from(["alt", "alt_m1", "alt_m1_rev", "alt_m1_star"]))
def test_half_of_epochs_are_backbone_only(m, k, mode):
    n = 2 * m * k
    ps = phases(mode=mode, alt_turns=m, epochs_per_task=n)
    assert len(ps) == n and ps.count(B) == n // 2


def test_phase_errors():
    with pytest.raises(ValueError, match="outside"):
        llltrain.phase_for_epoch(24, LllConfig())
    with pytest.raises(ValueError, match="divisible"):
        LllConfig(mode="alt", alt_turns=3, epochs_per_task=20)
    with pytest.raises(ValueError, match="mode"):
        LllConfig(mode="sometimes")


# -- pseudo counts -------------------------------------------------------------------


def test_pseudo_count_examples():
    assert llltrain.pseudo_count(0.2, 3, 1000) == 100
    assert llltrain.pseudo_count(0.01, 2, 500) == 5
    assert llltrain.pseudo_count(0.0, 3, 1000) == 0
    # 0.29 * 100 is 28.999999999999996 in binary floating point
    assert llltrain.pseudo_count(0.29, 2, 100) == 29
    with pytest.raises(ValueError, match="t >= 2"):
        llltrain.pseudo_count(0.2, 1, 100)


@given(st.integers(0, 100), st.integers(2, 6), st.integers(0, 2000))
def test_pseudo_count_matches_bruteforce(g100, t, d):
    gamma = g100 / 100
    assert llltrain.pseudo_count(gamma, t, d) == oracles.pseudo_count_bruteforce(gamma, t, d)


@given(st.integers(0, 100), st.integers(2, 6), st.integers(0, 2000))
def test_pseudo_count_is_floor_of_rational(g100, t, d):
    assert llltrain.pseudo_count(g100 / 100, t, d) == int(Fraction(g100, 100) * d / (t - 1))


# -- composite loss --------------------------------------------------------------------


def setup(cfg=None, **kw):
    cfg = cfg or tiny_config(**kw)
    vocab, tasks = harness.build_tasks(cfg)
    trainer = harness.build_trainer(cfg, vocab)
    return cfg, vocab, tasks, trainer


def frozen_noise(trainer, batch):
    return np.random.default_rng(7).standard_normal(batch.inputs.shape + (trainer.model.rvae_cfg.latent_dim,))


def test_degenerate_weights_give_plain_qa_nll():
    cfg, vocab, tasks, tr = setup(adapter_position=None, mode="naive", lambda_lm=0.0, beta_id=0.0)
    samples = tasks[0].train[:5]
    batch = llltrain.build_batch(samples, vocab, tr.cfg)
    loss, parts = llltrain.composite_loss(tr.model, batch, tr.cfg)
    inputs, targets, mask, _ = pad_batch([encode_qa(s, vocab) for s in samples], vocab.pad)
    logits, _ = tinylm.lm_forward(tr.model.cfg, tr.params, inputs)
    plain = float(tinylm.lm_nll(logits, targets, mask).data)
    assert float(loss.data) == pytest.approx(plain, abs=1e-12)
    assert parts["qa"] == pytest.approx(plain, abs=1e-12)


@pytest.mark.parametrize("phase", [B, J, A])
def test_breakdown_recombines(phase):
    cfg, vocab, tasks, tr = setup()
    batch = llltrain.build_batch(tasks[1].train[:6], vocab, tr.cfg)
    loss, p = llltrain.composite_loss(tr.model, batch, tr.cfg, phase, noise=frozen_noise(tr, batch))
    c = tr.cfg
    rebuilt = p["qa"] + c.lambda_lm * p["lm"] + c.beta_id * p["id"] + p["kl"] + p["recon"]
    assert float(loss.data) == pytest.approx(rebuilt, abs=1e-12)
    if phase == B:
        assert p["kl"] == p["recon"] == 0.0
    else:
        assert p["kl"] > 0


def test_alpha_one_task_nll_adds_only_free_bits():
    cfg, vocab, tasks, tr = setup(alpha=1.0, recon_mode="task-nll")
    batch = llltrain.build_batch(tasks[0].train[:4], vocab, tr.cfg)
    noise = frozen_noise(tr, batch)
    with_vae, p = llltrain.composite_loss(tr.model, batch, tr.cfg, J, noise=noise)
    naive, q = llltrain.composite_loss(tr.model, batch, tr.cfg, B)
    assert (p["qa"], p["lm"], p["id"]) == (q["qa"], q["lm"], q["id"])
    assert p["recon"] == 0.0
    assert float(with_vae.data) == pytest.approx(float(naive.data) + p["kl"], abs=1e-12)


@given(st.floats(0, 2), st.floats(0, 2))
def test_loss_linear_in_task_weights(lam, beta):
    cfg, vocab, tasks, tr = setup()
    batch = llltrain.build_batch(tasks[0].train[:3], vocab, tr.cfg)
    noise = frozen_noise(tr, batch)

    def loss(lam, beta):
        c = llltrain.LllConfig(**{**tr.cfg.__dict__, "lambda_lm": lam, "beta_id": beta})
        return float(llltrain.composite_loss(tr.model, batch, c, J, noise=noise)[0].data)

    base = loss(0.0, 0.0)
    d_lam = loss(1.0, 0.0) - base
    d_beta = loss(0.0, 1.0) - base
    assert loss(lam, beta) == pytest.approx(base + lam * d_lam + beta * d_beta, abs=1e-10)


def test_without_id_task_drops_id_rows():
    cfg, vocab, tasks, tr = setup(use_id_task=False)
    batch = llltrain.build_batch(tasks[0].train[:3], vocab, tr.cfg)
    assert set(batch.kinds) == {"QA", "LM"}
    _, p = llltrain.composite_loss(tr.model, batch, tr.cfg, J, noise=frozen_noise(tr, batch))
    assert p["id"] == 0.0


def test_composite_loss_fd_through_backbone_and_adapter():
    cfg, vocab, tasks, tr = setup()
    batch = llltrain.build_batch(tasks[0].train[:2], vocab, tr.cfg)
    noise = frozen_noise(tr, batch)
    report = nc.finite_diff_check(
        lambda: llltrain.composite_loss(tr.model, batch, tr.cfg, J, noise=noise)[0],
        tr.params,
        tolerance=1e-4,
        coords_per_param=3,
        rng=np.random.default_rng(0),
    )
    assert report.passed, report.max_rel_error


def backbone_phase_loss(how, noise_seed, **kw):
    cfg, vocab, tasks, tr = setup(backbone_phase_adapter=how, **kw)
    batch = llltrain.build_batch(tasks[0].train[:4], vocab, tr.cfg)
    noise = np.random.default_rng(noise_seed).standard_normal(batch.inputs.shape + (cfg.latent_dim,))
    return float(llltrain.composite_loss(tr.model, batch, tr.cfg, B, noise=noise)[0].data)


def test_backbone_phase_mean_adapter_ignores_noise():
    assert backbone_phase_loss("mean", 1) == backbone_phase_loss("mean", 2)
    assert backbone_phase_loss("sample", 1) != backbone_phase_loss("sample", 2)


def test_backbone_phase_bypass_skips_adapter():
    # an identity adapter (alpha = 1) is indistinguishable from no adapter
    assert backbone_phase_loss("bypass", 1, alpha=1.0) == backbone_phase_loss("mean", 1, alpha=1.0)
    assert backbone_phase_loss("bypass", 1, alpha=0.3) != backbone_phase_loss("mean", 1, alpha=0.3)


def test_backbone_phase_adapter_validated():
    with pytest.raises(ValueError, match="backbone_phase_adapter"):
        LllConfig(backbone_phase_adapter="dropout")


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        llltrain.build_batch([], None, LllConfig())


def test_adapter_modes_need_adapter():
    with pytest.raises(ValueError, match="needs an adapter"):
        setup(adapter_position=None, mode="alt")


# -- parameter freezing -------------------------------------------------------------------


def snapshot(tr, names):
    return {n: tr.params[n].data.copy() for n in names}


@pytest.mark.parametrize("phase,frozen", [(B, "adapter"), (A, "backbone")])
def test_phase_freezes_bitwise(phase, frozen):
    cfg, vocab, tasks, tr = setup()
    names = tr.model.adapter_names() if frozen == "adapter" else tr.model.backbone_names()
    moving = tr.model.backbone_names() if frozen == "adapter" else tr.model.adapter_names()
    before, other = snapshot(tr, names), snapshot(tr, moving)
    tr.start_task(12)
    tr.train_epoch(tasks[0].train, phase)
    assert all(np.array_equal(before[n], tr.params[n].data) for n in names)
    assert any(not np.array_equal(other[n], tr.params[n].data) for n in moving)


def test_joint_moves_both_groups():
    cfg, vocab, tasks, tr = setup()
    before = snapshot(tr, tr.params)
    tr.start_task(12)
    tr.train_epoch(tasks[0].train, J)
    for group in (tr.model.adapter_names(), tr.model.backbone_names()):
        assert any(not np.array_equal(before[n], tr.params[n].data) for n in group)


def test_linear_schedule_decays_to_zero():
    cfg, vocab, tasks, tr = setup(lr_schedule="linear")
    tr.start_task(16)
    assert tr.task_steps == 4 and tr.current_lr() == tr.cfg.lr
    tr.task_step = 4
    assert tr.current_lr() == 0.0


# -- replay ---------------------------------------------------------------------------------


def test_zero_counts_give_empty_plan():
    cfg, vocab, tasks, tr = setup()
    assert llltrain.generate_replay(tr, [0, 1], [0, 0]).tasks == []


def test_untrained_model_records_rejections():
    cfg, vocab, tasks, tr = setup()
    plan = llltrain.generate_replay(tr, [0], [5])
    (rec,) = plan.tasks
    assert rec.attempts <= 15 and len(rec.samples) <= 5
    assert rec.rejected == rec.attempts - len(rec.samples)
    assert rec.summary()["requested"] == 5


def test_parse_generated_requires_eos():
    vocab = harness.build_tasks(tiny_config())[0]
    seq = vocab.ids(["[TASK_0]", "good"] + list(toy.QUESTIONS["cls"]) + ["[ANS]", "positive"])
    assert llltrain.parse_generated(seq, vocab) is None
    parsed = llltrain.parse_generated(seq + [vocab.eos], vocab)
    assert parsed is not None and parsed[1]


# -- streams ----------------------------------------------------------------------------------


def run_stream(cfg, **kw):
    log = []
    res = harness.run_single(cfg, on_epoch=log.append, **kw)
    return res, log


def test_replay_mixing_preserves_counts():
    cfg = tiny_config(gamma=0.5)
    res, log = run_stream(cfg)
    epoch2 = [r for r in log if r["stage"] == 2 and r["phase"] != "eval"]
    accepted = sum(r["accepted"] for r in res.replay[1])
    assert res.replay[0] == []
    assert res.replay[1][0]["requested"] == llltrain.pseudo_count(0.5, 2, cfg.n_train)
    assert all(r["n_train"] == cfg.n_train + accepted for r in epoch2)


def test_stream_reproducible_bytewise():
    cfg = tiny_config(variant="rvae", adapter_position=1, mode="alt")
    a, la = run_stream(cfg)
    b, lb = run_stream(cfg)
    assert a.to_json() == b.to_json()
    assert json.dumps(la) == json.dumps(lb)


def test_stream_log_records():
    cfg = tiny_config()
    res, log = run_stream(cfg)
    evals = [r for r in log if r["phase"] == "eval"]
    assert [r["stage"] for r in evals] == [1, 2]
    assert set(evals[1]["scores"]) == {"cls", "slot"}
    assert len(res.loss_curves) == 2 and all(len(c) == 2 for c in res.loss_curves)
    assert res.final_scores == res.stage_scores[-1]


def test_resume_mid_stage_matches_uninterrupted():
    cfg = tiny_config(mode="alt", variant="rvae")
    full, full_log = run_stream(cfg)
    saved = {}

    def grab(st, kind, trainer):
        if kind == "epoch" and st.stage == 1 and st.epoch == 1:
            saved["state"] = json.dumps(st.to_dict())
            saved["ckpt"] = checkpoint.snapshot(trainer, cfg.digest(), "mid", cfg.to_dict())

    run_stream(cfg, on_checkpoint=grab)
    vocab, _ = harness.build_tasks(cfg)
    fresh = harness.build_trainer(cfg, vocab)
    checkpoint.restore(fresh, saved["ckpt"], cfg.digest())
    state = StreamState.from_dict(json.loads(saved["state"]))
    resumed, tail = run_stream(cfg, trainer=fresh, state=state)
    assert resumed.to_json() == full.to_json()
    assert tail == full_log[-len(tail) :]
