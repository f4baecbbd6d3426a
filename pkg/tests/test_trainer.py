import json
import math

import numpy as np
import pytest

from bayes_eprop import NetworkConfig, nll_of_trial
from bayes_eprop import trainer
from bayes_eprop.network import ConfigurationError
from bayes_eprop.trainer import (CHECKPOINT_VERSION, METRIC_FIELDS, Checkpoint, CheckpointError,
                                 NumericalError, RunConfig, evaluate, init_state,
                                 likelihood_gradients, load_checkpoint, probe_uncertainty,
                                 save_checkpoint, train, train_epoch)
from bayes_eprop.variational import PHI_MIN


def small_cfg(**train_kw):
    kw = dict(batch_size=4, v_samples=2, epochs=3)
    kw.update(train_kw)
    return RunConfig(network=NetworkConfig(n_rec=12)).with_train(**kw)


def _same_params(a, b):
    for (g, x), (_, y) in zip(a.mean.items(), b.mean.items()):
        assert np.array_equal(x, y), g
    for (g, x), (_, y) in zip(a.std.items(), b.std.items()):
        assert np.array_equal(x, y), g


# --- likelihood ------------------------------------------------------------

def test_nll_zero_logit_is_log2():
    assert nll_of_trial(np.zeros(5), 1.0, np.array([0, 0, 1, 1, 1])) == pytest.approx(math.log(2))
    assert nll_of_trial(np.zeros(5), 0.0, np.ones(5)) == pytest.approx(math.log(2))


def test_nll_symmetry_and_perfect_prediction(rng):
    y = rng.normal(0, 3, 8)
    mask = (rng.random(8) < 0.6).astype(float)
    mask[0] = 1
    assert nll_of_trial(y, 1.0, mask) == pytest.approx(nll_of_trial(-y, 0.0, mask), abs=1e-15)
    assert nll_of_trial(np.full(4, 1e6), 1.0, np.ones(4)) == pytest.approx(math.exp(-30), rel=1e-6)
    # only masked steps matter
    y2 = y.copy()
    y2[mask == 0] = 123.0
    assert nll_of_trial(y2, 1.0, mask) == nll_of_trial(y, 1.0, mask)


def test_nll_requires_scored_steps():
    with pytest.raises(ValueError):
        nll_of_trial(np.zeros(3), 1.0, np.zeros(3))


# --- configuration ---------------------------------------------------------

def test_run_config_round_trip_and_validation():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict({}) == cfg
    assert cfg.train.learning_rate == 5e-4 and cfg.train.batch_size == 20
    assert cfg.train.v_samples == 5 and cfg.train.epochs == 5000
    assert cfg.prior.psi == 0.01 and cfg.network.n_rec == 100
    with pytest.raises(ConfigurationError, match="unknown"):
        RunConfig.from_dict({"learning_rat": 1.0})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"n_in": 12})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"feedback_mode": "symmetric"})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"v_samples": 0})


# --- one update --------------------------------------------------------------

def test_zero_learning_rate_leaves_params_unchanged():
    cfg = small_cfg(learning_rate=0.0)
    params, fb = init_state(cfg)
    new, rec = train_epoch(params, fb, cfg, 0)
    _same_params(params, new)
    assert rec.epoch == 1
    for f in ("p_correct_up", "p_correct_down", "ema_p_up_given_up", "ema_p_up_given_down"):
        assert 0.0 <= getattr(rec, f) <= 1.0
    assert rec.mean_nll > 0 and rec.kl_forward > 0


def test_without_kl_the_mean_follows_the_likelihood_gradient():
    cfg = small_cfg(kl_scale=0.0)
    params, fb = init_state(cfg)
    g_mean, g_std, _ = likelihood_gradients(params, fb, cfg, 0)
    new, _ = train_epoch(params, fb, cfg, 0)
    lr = cfg.train.learning_rate
    for (g, m0), (_, m1), (_, d) in zip(params.mean.items(), new.mean.items(), g_mean.items()):
        np.testing.assert_array_equal(m1, m0 - lr * d)
    for (g, s0), (_, s1), (_, d) in zip(params.std.items(), new.std.items(), g_std.items()):
        expect = s0 - lr * d
        if g == "w_rec":
            np.fill_diagonal(expect, 0.0)
        np.testing.assert_array_equal(s1, expect)


def test_ema_recursion_is_exact():
    cfg = small_cfg(epochs=4)
    recs = []
    train(cfg, on_epoch=recs.append)
    c = cfg.train.ema_coeff
    prev_uu = prev_ud = 0.5
    for r in recs:
        assert r.ema_p_up_given_up == c * prev_uu + (1 - c) * r.p_correct_up
        assert r.ema_p_up_given_down == c * prev_ud + (1 - c) * (1 - r.p_correct_down)
        prev_uu, prev_ud = r.ema_p_up_given_up, r.ema_p_up_given_down


def test_feedback_fixed_and_diagonals_zero():
    cfg = small_cfg(epochs=3)
    _, fb0 = init_state(cfg)
    ckpt = train(cfg)
    np.testing.assert_array_equal(ckpt.feedback.b, fb0.b)
    assert not np.diag(ckpt.params.mean.w_rec).any()
    assert not np.diag(ckpt.params.std.w_rec).any()
    assert np.all(np.abs(ckpt.params.std.w_in) >= PHI_MIN)


def test_doubling_samples_with_repeated_draws_keeps_gradient(monkeypatch):
    original = trainer.rng_for

    def repeat_noise(seed, *key):
        # sample v and v + 2 share one weight draw
        if key and key[0] == trainer._NOISE:
            key = key[:3] + (key[3] % 2,)
        return original(seed, *key)

    monkeypatch.setattr(trainer, "rng_for", repeat_noise)
    base = small_cfg(v_samples=2)
    params, fb = init_state(base)
    trials = trainer.generate_batch(base.task, 4, np.random.default_rng(5))
    g2m, g2s, _ = likelihood_gradients(params, fb, base, 0, trials)
    g4m, g4s, _ = likelihood_gradients(params, fb, base.with_train(v_samples=4), 0, trials)
    for (g, a), (_, b) in zip(g2m.items(), g4m.items()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14, err_msg=g)
    for (g, a), (_, b) in zip(g2s.items(), g4s.items()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14, err_msg=g)


def test_mean_reduction_rescales_sum_reduction():
    cfg = small_cfg()
    params, fb = init_state(cfg)
    trials = trainer.generate_batch(cfg.task, 4, np.random.default_rng(2))
    # every trial has exactly three scored steps
    gs, _, _ = likelihood_gradients(params, fb, cfg, 0, trials)
    gm, _, _ = likelihood_gradients(params, fb, cfg.with_train(likelihood_reduction="mean"), 0,
                                    trials)
    for (g, a), (_, b) in zip(gs.items(), gm.items()):
        np.testing.assert_allclose(b * 3 * 4, a, rtol=1e-10, atol=1e-15, err_msg=g)


def test_non_finite_state_aborts_with_group_name():
    cfg = small_cfg()
    params, fb = init_state(cfg)
    params.mean.w_out[0, 0] = np.inf
    with pytest.raises(NumericalError, match="w_"):
        train_epoch(params, fb, cfg, 0)


def test_training_is_deterministic():
    cfg = small_cfg(epochs=3, seed=7)
    a, b = [], []
    ca, cb = train(cfg, on_epoch=a.append), train(cfg, on_epoch=b.append)
    assert a == b
    _same_params(ca.params, cb.params)
    c = []
    train(cfg.with_train(seed=8), on_epoch=c.append)
    assert c != a


# --- evaluation and probing --------------------------------------------------

def test_untrained_zero_mean_params_score_chance():
    cfg = small_cfg()
    params, _ = init_state(cfg)
    for _, m in params.mean.items():
        m[...] = 0.0
    ev = evaluate(params, cfg, 1000, seed=3)
    assert 0.45 <= ev.accuracy <= 0.55
    assert 0.0 <= ev.p_correct_up <= 1.0 and 0.0 <= ev.p_correct_down <= 1.0
    assert ev.n_trials == 1000


def test_evaluate_with_perfect_stub_classifier():
    cfg = small_cfg()
    params, _ = init_state(cfg)
    ev = evaluate(params, cfg, 200, classifier=lambda rs: [r.target for r in rs])
    assert ev.accuracy == 1.0 and ev.p_correct_up == 1.0 and ev.p_correct_down == 1.0
    with pytest.raises(ValueError):
        evaluate(params, cfg, 0)


def test_collapsed_posterior_has_no_spread():
    cfg = small_cfg()
    params, _ = init_state(cfg)
    for _, s in params.std.items():
        s[...] = PHI_MIN
    params.clamp()
    res = probe_uncertainty(params, cfg, 100, seed=1)
    for v in res.report().values():
        assert 0.0 <= v < 1e-2
    assert set(res.quantiles) == {"up", "down", "both"}
    assert res.samples["up"].shape == (100, len(res.scored))
    with pytest.raises(ValueError):
        probe_uncertainty(params, cfg, 99)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(epochs=2, feedback_mode="weight_transport")
    ckpt = train(cfg)
    path = tmp_path / "ck.json"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    _same_params(ckpt.params, back.params)
    np.testing.assert_array_equal(back.feedback.b, ckpt.feedback.b)
    assert back.feedback.mode == "weight_transport"
    assert back.config == cfg and back.epoch == 2
    assert back.last_metrics == ckpt.last_metrics
    assert back.rng_state == {"seed": 0, "next_epoch": 2}
    doc = json.loads(path.read_text())
    assert doc["version"] == CHECKPOINT_VERSION
    assert doc["mean"]["w_in"]["shape"] == [12, 30]
    assert np.array_equal(np.array(doc["mean"]["w_in"]["data"]), ckpt.params.mean.w_in.ravel())


def test_checkpoint_errors(tmp_path):
    ckpt = Checkpoint(*init_state(small_cfg()), small_cfg(), 0)
    path = tmp_path / "ck.json"
    save_checkpoint(path, ckpt)
    text = path.read_text()
    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "trunc.json")
    doc = json.loads(text)
    doc["version"] = CHECKPOINT_VERSION + 1
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    del doc["std"]
    doc["version"] = CHECKPOINT_VERSION
    (tmp_path / "k.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "k.json")


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = small_cfg(seed=11)
    full_recs = []
    full = train(cfg, epochs=3, on_epoch=full_recs.append)
    part_recs = []
    first = train(cfg, epochs=2, on_epoch=part_recs.append)
    save_checkpoint(tmp_path / "ck.json", first)
    resumed = train(cfg, epochs=1, start=load_checkpoint(tmp_path / "ck.json"),
                    on_epoch=part_recs.append)
    assert resumed.epoch == 3
    assert part_recs == full_recs
    _same_params(full.params, resumed.params)


def test_metric_row_order():
    cfg = small_cfg()
    params, fb = init_state(cfg)
    _, rec = train_epoch(params, fb, cfg, 0)
    row = rec.row()
    assert len(row) == len(METRIC_FIELDS) == 8
    assert row[0] == "1" and float(row[1]) == rec.mean_nll
