import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayes_eprop import (ConfigurationError, NetworkConfig, NeuronState, WeightSet,
                         decay_factors, run_trial, step_neurons)


def test_decay_factors_default_constants():
    alpha, rho, kappa = decay_factors(NetworkConfig())
    assert alpha == pytest.approx(0.0820850, abs=1e-7)
    assert rho == pytest.approx(0.9753099, abs=1e-7)
    assert kappa == pytest.approx(math.exp(-2.5))


def test_decay_factor_unit_ratio():
    alpha, _, _ = decay_factors(NetworkConfig(dt_ms=20.0))
    assert alpha == pytest.approx(math.exp(-1))


@pytest.mark.parametrize("kw", [dict(n_rec=0), dict(n_in=0), dict(dt_ms=0.0),
                                dict(tau_m_ms=-1.0), dict(tau_out_ms=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        NetworkConfig(**kw)


def _single(config=None):
    config = config or NetworkConfig(n_rec=1, n_in=1)
    return config, WeightSet.zeros(config), NeuronState.zeros(config)


def test_membrane_decay_without_drive():
    cfg, w, s = _single()
    s.v[:] = 1.0
    out = step_neurons(s, w, np.zeros(1), cfg)
    assert out.v[0] == pytest.approx(0.08209, abs=1e-5)
    assert out.z[0] == 0


def test_input_spike_crosses_threshold():
    cfg, w, s = _single()
    w.w_in[0, 0] = 1.5
    out = step_neurons(s, w, np.ones(1), cfg)
    assert out.v[0] == 1.5
    assert out.z[0] == 1


def test_zero_fixed_point():
    cfg = NetworkConfig(n_rec=5, n_in=3)
    out = step_neurons(NeuronState.zeros(cfg), WeightSet.zeros(cfg), np.zeros(3), cfg)
    for arr in (out.v, out.a, out.z, out.y):
        assert not arr.any()


def test_reset_by_subtraction_and_adaptation_jump():
    cfg, w, s = _single()
    s.v[:] = 0.7
    s.z[:] = 1.0
    s.a[:] = 0.5
    w.w_in[0, 0] = 0.25
    alpha, rho, _ = decay_factors(cfg)
    out = step_neurons(s, w, np.ones(1), cfg)
    assert out.v[0] == pytest.approx(alpha * 0.7 + 0.25 - cfg.v_base, abs=1e-15)
    assert out.a[0] == pytest.approx(rho * 0.5 + cfg.beta_inc, abs=1e-15)


def test_dimension_mismatch():
    cfg = NetworkConfig(n_rec=3, n_in=2)
    with pytest.raises(ConfigurationError):
        step_neurons(NeuronState.zeros(cfg), WeightSet.zeros(cfg), np.zeros(3), cfg)
    with pytest.raises(ConfigurationError):
        run_trial(WeightSet.zeros(cfg), np.zeros((4, 5)), cfg)
    bad = WeightSet(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        step_neurons(NeuronState.zeros(cfg), bad, np.zeros(2), cfg)


def test_bias_only_readout_geometric_series(rng):
    cfg = NetworkConfig(n_rec=4, n_in=3)
    w = WeightSet.zeros(cfg)
    w.b_out[:] = 0.7
    traj = run_trial(w, (rng.random((12, 3)) < 0.5).astype(float), cfg)
    _, _, kappa = decay_factors(cfg)
    t = np.arange(1, 13)
    np.testing.assert_allclose(traj.outputs[:, 0], 0.7 * (1 - kappa ** t) / (1 - kappa),
                               rtol=1e-14)


def test_empty_raster():
    cfg = NetworkConfig(n_rec=4, n_in=3)
    traj = run_trial(WeightSet.zeros(cfg), np.zeros((0, 3)), cfg)
    assert len(traj) == 0 and traj.outputs.shape == (0, 1)


def test_run_trial_deterministic(rng):
    cfg = NetworkConfig(n_rec=6, n_in=4)
    w = WeightSet(rng.normal(0, 1, (6, 4)), rng.normal(0, 0.5, (6, 6)),
                  rng.normal(0, 1, (1, 6)), rng.normal(0, 1, 1))
    x = (rng.random((20, 4)) < 0.3).astype(float)
    a, b = run_trial(w, x, cfg), run_trial(w, x, cfg)
    for f in ("spikes", "voltages", "thresholds", "outputs", "pseudo_derivs"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert set(np.unique(a.spikes)) <= {0.0, 1.0}
    assert a.pseudo_derivs.min() >= 0 and a.pseudo_derivs.max() <= 0.3


def test_recurrent_diagonal_zeroed(rng):
    w = WeightSet(np.ones((3, 2)), rng.normal(size=(3, 3)) + 5, np.ones((1, 3)), np.zeros(1))
    assert not np.diag(w.w_rec).any()
    assert not np.diag(w.copy().w_rec).any()
    assert not np.diag(w.map(lambda a: a + 1.0).w_rec).any()


def test_linear_regime_matches_convolution(rng):
    # unreachable threshold: the membrane is a pure first-order filter of the input current
    cfg = NetworkConfig(n_rec=3, n_in=4, v_base=1e9)
    alpha, _, _ = decay_factors(cfg)
    w = WeightSet(rng.normal(size=(3, 4)), rng.normal(size=(3, 3)), np.zeros((1, 3)),
                  np.zeros(1))
    x = (rng.random((10, 4)) < 0.5).astype(float)
    traj = run_trial(w, x, cfg)
    assert not traj.spikes.any()
    current = x @ w.w_in.T
    kernel = alpha ** np.arange(10)
    for j in range(3):
        expected = np.convolve(current[:, j], kernel)[:10]
        np.testing.assert_allclose(traj.voltages[:, j], expected, atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adaptation_decays_between_spikes_and_jumps_at_spikes(seed):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(n_rec=5, n_in=3)
    _, rho, _ = decay_factors(cfg)
    w = WeightSet(rng.normal(0, 1.5, (5, 3)), rng.normal(0, 0.5, (5, 5)),
                  rng.normal(size=(1, 5)), np.zeros(1))
    state = NeuronState.zeros(cfg)
    for _ in range(25):
        nxt = step_neurons(state, w, (rng.random(3) < 0.4).astype(float), cfg)
        np.testing.assert_allclose(nxt.a, rho * state.a + cfg.beta_inc * state.z, rtol=0,
                                   atol=1e-14)
        assert np.all(nxt.a >= 0)
        quiet = state.z == 0
        assert np.all(nxt.a[quiet] <= state.a[quiet])
        assert not np.diag(w.w_rec).any()
        state = nxt
