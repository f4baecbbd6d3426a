"""Discrete-time recurrent network of adaptive-threshold LIF neurons.

State update for one clock tick (``z`` are the spikes of the previous tick)::

    v' = alpha * v + W_in x + W_rec z - v_base * z
    a' = rho * a + beta_inc * z
    z' = (v' >= v_base + a')
    y' = kappa * y + W_out z' + b_out

The readout ``y`` is a leaky scalar logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUPS = ("w_in", "w_rec", "w_out", "b_out")


class ConfigurationError(ValueError):
    """Raised for invalid configuration values or mismatched array shapes."""


@dataclass(frozen=True)
class NetworkConfig:
    n_rec: int = 100
    n_in: int = 30
    n_out: int = 1
    dt_ms: float = 50.0
    tau_m_ms: float = 20.0
    tau_a_ms: float = 2000.0
    tau_out_ms: float = 20.0
    v_base: float = 1.0
    beta_inc: float = 2.0

    def __post_init__(self):
        for name in ("n_rec", "n_in", "n_out"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("dt_ms", "tau_m_ms", "tau_a_ms", "tau_out_ms"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if not self.v_base > 0:
            raise ConfigurationError("v_base must be strictly positive")
        if self.beta_inc < 0:
            raise ConfigurationError("beta_inc must be nonnegative")


def decay_factors(config: NetworkConfig) -> tuple[float, float, float]:
    """Per-step decay factors ``(alpha, rho, kappa)`` for membrane, threshold and readout."""
    alpha = float(np.exp(-config.dt_ms / config.tau_m_ms))
    rho = float(np.exp(-config.dt_ms / config.tau_a_ms))
    kappa = float(np.exp(-config.dt_ms / config.tau_out_ms))
    return alpha, rho, kappa


@dataclass
class WeightSet:
    """All synaptic weights of one network. ``w_rec`` has a zero diagonal."""

    w_in: np.ndarray
    w_rec: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "WeightSet":
        return cls(**{g: np.zeros(s) for g, s in group_shapes(config).items()})

    def __post_init__(self):
        for g in GROUPS:
            setattr(self, g, np.asarray(getattr(self, g), dtype=np.float64))
        np.fill_diagonal(self.w_rec, 0.0)

    def items(self):
        return ((g, getattr(self, g)) for g in GROUPS)

    def map(self, fn, *others: "WeightSet") -> "WeightSet":
        """Apply ``fn`` group-wise, passing matching groups of ``others`` as extra args."""
        return WeightSet(**{g: fn(a, *(getattr(o, g) for o in others)) for g, a in self.items()})

    def copy(self) -> "WeightSet":
        return self.map(np.copy)

    def check(self, config: NetworkConfig) -> None:
        for g, shape in group_shapes(config).items():
            if getattr(self, g).shape != shape:
                raise ConfigurationError(
                    f"{g} has shape {getattr(self, g).shape}, expected {shape}")


def group_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    return {
        "w_in": (config.n_rec, config.n_in),
        "w_rec": (config.n_rec, config.n_rec),
        "w_out": (config.n_out, config.n_rec),
        "b_out": (config.n_out,),
    }


@dataclass
class NeuronState:
    v: np.ndarray
    a: np.ndarray
    z: np.ndarray
    y: np.ndarray

    @classmethod
    def zeros(cls, config: NetworkConfig) -> "NeuronState":
        n = config.n_rec
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(config.n_out))


def threshold(state: NeuronState, config: NetworkConfig) -> np.ndarray:
    return config.v_base + state.a


@dataclass
class Trajectory:
    spikes: np.ndarray
    voltages: np.ndarray
    thresholds: np.ndarray
    outputs: np.ndarray
    pseudo_derivs: np.ndarray

    def __len__(self):
        return self.spikes.shape[0]


def heaviside_spike(v: np.ndarray, A: np.ndarray) -> np.ndarray:
    return (v >= A).astype(np.float64)


def step_neurons(state: NeuronState, weights: WeightSet, x_t: np.ndarray,
                 config: NetworkConfig, spike_fn=heaviside_spike) -> NeuronState:
    """Advance the network by one clock tick.

    ``spike_fn(v, A)`` produces the new spikes; the default is the hard
    threshold. Other choices are only for differentiable test oracles.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (config.n_in,):
        raise ConfigurationError(f"input has shape {x_t.shape}, expected ({config.n_in},)")
    if state.v.shape != (config.n_rec,) or state.y.shape != (config.n_out,):
        raise ConfigurationError("neuron state does not match network config")
    weights.check(config)
    alpha, rho, kappa = decay_factors(config)

    v = alpha * state.v + weights.w_in @ x_t + weights.w_rec @ state.z - config.v_base * state.z
    a = rho * state.a + config.beta_inc * state.z
    z = spike_fn(v, config.v_base + a)
    y = kappa * state.y + weights.w_out @ z + weights.b_out
    return NeuronState(v, a, z, y)


def run_trial(weights: WeightSet, spikes: np.ndarray, config: NetworkConfig,
              state: NeuronState | None = None, gamma_pd: float = 0.3,
              spike_fn=heaviside_spike) -> Trajectory:
    """Simulate one trial given a ``(T, n_in)`` input raster."""
    from .eprop import pseudo_derivative

    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.ndim != 2 or spikes.shape[1] != config.n_in:
        raise ConfigurationError(
            f"raster has shape {spikes.shape}, expected (T, {config.n_in})")
    T, n = spikes.shape[0], config.n_rec
    out = Trajectory(np.zeros((T, n)), np.zeros((T, n)), np.zeros((T, n)),
                     np.zeros((T, config.n_out)), np.zeros((T, n)))
    state = NeuronState.zeros(config) if state is None else state
    for t in range(T):
        state = step_neurons(state, weights, spikes[t], config, spike_fn)
        A = config.v_base + state.a
        out.spikes[t] = state.z
        out.voltages[t] = state.v
        out.thresholds[t] = A
        out.outputs[t] = state.y
        out.pseudo_derivs[t] = pseudo_derivative(state.v, A, config.v_base, gamma_pd)
    return out
