"""Online e-prop gradients for adaptive-threshold LIF networks.

The loss gradient for a synapse ``j <- i`` is approximated as
``sum_t L_j(t) * ebar_ji(t)``: an instantaneous learning signal times a
filtered eligibility trace that can be updated forward in time.

Functions here operate on one simulation at a time and are the readable
reference. :mod:`bayes_eprop._kernels` holds the batched version the
trainer uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BROADCAST_ALIGNMENT = "broadcast_alignment"
WEIGHT_TRANSPORT = "weight_transport"
FEEDBACK_MODES = (BROADCAST_ALIGNMENT, WEIGHT_TRANSPORT)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def pseudo_derivative(v, A, v_base=1.0, gamma_pd=0.3):
    """Piecewise-linear surrogate for dz/dv, peaked at threshold, zero beyond one ``v_base``."""
    v = np.asarray(v, dtype=np.float64)
    return gamma_pd * np.maximum(0.0, 1.0 - np.abs(v - A) / v_base)


@dataclass
class EligibilityState:
    """Traces for one weight group, shape ``(n_post, n_pre)``."""

    eps_v: np.ndarray
    eps_a: np.ndarray
    e_bar: np.ndarray
    grad_acc: np.ndarray
    recurrent: bool = False

    @classmethod
    def zeros(cls, n_post: int, n_pre: int, recurrent: bool = False) -> "EligibilityState":
        z = np.zeros((n_post, n_pre))
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), recurrent)

    def gradient(self) -> np.ndarray:
        g = self.grad_acc.copy()
        if self.recurrent:
            np.fill_diagonal(g, 0.0)
        return g


@dataclass(frozen=True)
class FeedbackWeights:
    b: np.ndarray
    mode: str = BROADCAST_ALIGNMENT

    def __post_init__(self):
        if self.mode not in FEEDBACK_MODES:
            raise ValueError(f"unknown feedback mode {self.mode!r}")
        b = np.array(self.b, dtype=np.float64)
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @classmethod
    def random(cls, n_rec: int, n_out: int, rng: np.random.Generator,
               mode: str = BROADCAST_ALIGNMENT) -> "FeedbackWeights":
        """Fixed Gaussian feedback with standard deviation ``1/sqrt(n_rec)``."""
        return cls(rng.normal(0.0, 1.0 / np.sqrt(n_rec), size=(n_rec, n_out)), mode)


def update_eligibility(elig: EligibilityState, presyn, h_prev, h_now,
                       alpha, rho, kappa, beta_inc) -> EligibilityState:
    presyn = np.asarray(presyn, dtype=np.float64)
    hp = np.asarray(h_prev, dtype=np.float64)[:, None]
    hn = np.asarray(h_now, dtype=np.float64)[:, None]
    eps_a = hp * elig.eps_v + (rho - hp * beta_inc) * elig.eps_a
    eps_v = alpha * elig.eps_v + presyn[None, :]
    e = hn * (eps_v - beta_inc * eps_a)
    e_bar = kappa * elig.e_bar + e
    return EligibilityState(eps_v, eps_a, e_bar, elig.grad_acc, elig.recurrent)


def output_error(y, y_star, mask):
    """Masked cross-entropy residual ``mask * (sigmoid(y) - y_star)``."""
    if not mask:
        return np.zeros_like(np.asarray(y, dtype=np.float64))
    return sigmoid(y) - np.asarray(y_star, dtype=np.float64)


def learning_signal(y, y_star, mask, fb: FeedbackWeights, w_out) -> np.ndarray:
    err = output_error(y, y_star, mask)
    if fb.mode == WEIGHT_TRANSPORT:
        return np.asarray(w_out).T @ err
    return fb.b @ err


def accumulate_gradient(elig: EligibilityState, L) -> EligibilityState:
    grad = elig.grad_acc + np.asarray(L, dtype=np.float64)[:, None] * elig.e_bar
    return EligibilityState(elig.eps_v, elig.eps_a, elig.e_bar, grad, elig.recurrent)


@dataclass
class ReadoutGradient:
    w_out: np.ndarray
    b_out: np.ndarray


def readout_gradient(z_filtered, err, acc: ReadoutGradient | None = None) -> ReadoutGradient:
    """Add one step of the exact readout gradient to ``acc`` (or start a new one)."""
    z_filtered = np.asarray(z_filtered, dtype=np.float64)
    err = np.atleast_1d(np.asarray(err, dtype=np.float64))
    gw = np.outer(err, z_filtered)
    if acc is None:
        return ReadoutGradient(gw, err.copy())
    return ReadoutGradient(acc.w_out + gw, acc.b_out + err)


def eprop_trial(weights, spikes, target, mask, fb: FeedbackWeights, config,
                gamma_pd=0.3, spike_fn=None, state=None):
    """Simulate one trial and return ``(Trajectory, gradient WeightSet)``.

    Straightforward composition of the step functions above. ``target`` is a
    scalar (or length-``n_out`` vector) and ``mask`` a length-``T`` 0/1 array.
    """
    from .network import (NeuronState, Trajectory, WeightSet, decay_factors,
                          heaviside_spike, step_neurons)

    spike_fn = heaviside_spike if spike_fn is None else spike_fn
    spikes = np.asarray(spikes, dtype=np.float64)
    T = spikes.shape[0]
    n, n_in, n_out = config.n_rec, config.n_in, config.n_out
    alpha, rho, kappa = decay_factors(config)
    y_star = np.broadcast_to(np.asarray(target, dtype=np.float64), (n_out,))

    state = NeuronState.zeros(config) if state is None else state
    el_in = EligibilityState.zeros(n, n_in)
    el_rec = EligibilityState.zeros(n, n, recurrent=True)
    readout = ReadoutGradient(np.zeros((n_out, n)), np.zeros(n_out))
    z_filt = np.zeros(n)
    h_prev = np.zeros(n)
    traj = Trajectory(*(np.zeros((T, n)) for _ in range(3)), np.zeros((T, n_out)),
                      np.zeros((T, n)))
    for t in range(T):
        z_before = state.z
        state = step_neurons(state, weights, spikes[t], config, spike_fn)
        A = config.v_base + state.a
        h = pseudo_derivative(state.v, A, config.v_base, gamma_pd)
        el_in = update_eligibility(el_in, spikes[t], h_prev, h, alpha, rho, kappa, config.beta_inc)
        el_rec = update_eligibility(el_rec, z_before, h_prev, h, alpha, rho, kappa,
                                    config.beta_inc)
        z_filt = kappa * z_filt + state.z
        m = bool(mask[t])
        L = learning_signal(state.y, y_star, m, fb, weights.w_out)
        el_in = accumulate_gradient(el_in, L)
        el_rec = accumulate_gradient(el_rec, L)
        if m:
            readout = readout_gradient(z_filt, output_error(state.y, y_star, m), readout)
        h_prev = h
        traj.spikes[t], traj.voltages[t], traj.thresholds[t] = state.z, state.v, A
        traj.outputs[t], traj.pseudo_derivs[t] = state.y, h
    grad = WeightSet(el_in.gradient(), el_rec.gradient(), readout.w_out, readout.b_out)
    return traj, grad
