"""Mean-field Gaussian posterior over every weight of the network.

Each weight is ``theta = mean + std * eps`` with ``eps ~ N(0, 1)``. ``std``
is a *signed* standard deviation: only its square enters the density, so a
negative value is as good as its absolute value.

Two KL numbers are tracked. :func:`kl_paper` is the closed form the
training rule was derived from; :func:`kl_forward` is the textbook
``KL(q || p)`` for a zero-mean isotropic Gaussian prior. Training follows
:func:`prior_grad_mean` / :func:`prior_grad_std`, which are not the
gradient of a single one of them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import GROUPS, ConfigurationError, NetworkConfig, WeightSet, group_shapes

PHI_MIN = 1e-4


class InvalidStateError(ValueError):
    """Variational parameters outside their valid domain."""


@dataclass(frozen=True)
class PriorConfig:
    psi: float = 0.01  # prior variance, 1/H for H=100

    def __post_init__(self):
        if not self.psi > 0:
            raise ConfigurationError("prior variance psi must be > 0")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.psi))


@dataclass
class VariationalParams:
    mean: WeightSet
    std: WeightSet

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.mean.copy(), self.std.copy())

    def clamp(self, phi_min: float = PHI_MIN) -> None:
        """Enforce ``|std| >= phi_min`` in place, keeping the sign; zero the recurrent diagonals."""
        for _, s in self.std.items():
            small = np.abs(s) < phi_min
            s[small] = np.where(s[small] < 0, -phi_min, phi_min)
        np.fill_diagonal(self.mean.w_rec, 0.0)
        np.fill_diagonal(self.std.w_rec, 0.0)


def init_params(config: NetworkConfig, prior: PriorConfig, rng: np.random.Generator,
                std_scale: float = 0.5, input_gain: float = 1.0) -> VariationalParams:
    """Means ~ N(0, 1/fan_in) (readout bias starts at 0); stds = ``std_scale * sqrt(psi)``.

    ``input_gain`` multiplies the spread of the input-weight means.
    """
    shapes = group_shapes(config)
    fan_in = {"w_in": config.n_in, "w_rec": config.n_rec, "w_out": config.n_rec}
    gain = {"w_in": input_gain, "w_rec": 1.0, "w_out": 1.0}
    mean = {g: rng.normal(0.0, gain[g] / np.sqrt(fan_in[g]), size=shapes[g])
            for g in ("w_in", "w_rec", "w_out")}
    mean["b_out"] = np.zeros(shapes["b_out"])
    std = {g: np.full(shapes[g], std_scale * prior.std) for g in GROUPS}
    params = VariationalParams(WeightSet(**mean), WeightSet(**std))
    params.clamp()
    return params


@dataclass
class WeightSample:
    theta: WeightSet
    noise: WeightSet


def sample_weights(params: VariationalParams, rng: np.random.Generator) -> WeightSample:
    noise = WeightSet(**{g: rng.standard_normal(m.shape) for g, m in params.mean.items()})
    theta = params.mean.map(lambda m, s, e: m + s * e, params.std, noise)
    return WeightSample(theta, noise)


def _synapses(params: VariationalParams):
    """Yield ``(mean, std)`` flat arrays per group, recurrent diagonal removed."""
    for g in GROUPS:
        m, s = getattr(params.mean, g), getattr(params.std, g)
        if g == "w_rec":
            off = ~np.eye(m.shape[0], dtype=bool)
            m, s = m[off], s[off]
        yield m.ravel(), s.ravel()


def _check_std(s: np.ndarray, phi_min: float) -> None:
    if s.size and np.min(np.abs(s)) < phi_min:
        raise InvalidStateError(f"|std| below phi_min={phi_min}")


def kl_paper(params: VariationalParams, prior: PriorConfig, phi_min: float = PHI_MIN) -> float:
    """``1/2 * sum(std^2/psi + psi/std^2 + mean^2/std^2)`` over all synapses."""
    total = 0.0
    for m, s in _synapses(params):
        _check_std(s, phi_min)
        s2 = s * s
        total += np.sum(s2 / prior.psi + prior.psi / s2 + m * m / s2)
    return 0.5 * float(total)


def kl_forward(params: VariationalParams, prior: PriorConfig, phi_min: float = PHI_MIN) -> float:
    """KL(q || N(0, psi)) summed over all synapses."""
    total = 0.0
    for m, s in _synapses(params):
        _check_std(s, phi_min)
        total += np.sum((s * s + m * m) / (2 * prior.psi) - np.log(np.abs(s) / prior.std) - 0.5)
    return float(total)


def prior_grad_mean(mean, std, phi_min: float = PHI_MIN):
    """KL pseudo-gradient for a mean: ``mean / std**2``. Elementwise, purely local."""
    std = np.asarray(std, dtype=np.float64)
    _check_std(np.atleast_1d(std), phi_min)
    return np.asarray(mean, dtype=np.float64) / (std * std)


def prior_grad_std(std, psi, phi_min: float = PHI_MIN):
    """KL pseudo-gradient for a signed std: ``std * (1/psi - 1/std**2)``."""
    std = np.asarray(std, dtype=np.float64)
    _check_std(np.atleast_1d(std), phi_min)
    return std * (1.0 / psi - 1.0 / (std * std))


def prior_gradients(params: VariationalParams, prior: PriorConfig) -> tuple[WeightSet, WeightSet]:
    """Prior pseudo-gradients for every parameter; the absent self-connections get 0."""
    std = params.std.copy()
    np.fill_diagonal(std.w_rec, 1.0)
    gm = params.mean.map(prior_grad_mean, std)
    gs = std.map(lambda s: prior_grad_std(s, prior.psi))
    return gm, gs


def chain_to_variational(grad_theta: WeightSet, noise: WeightSet) -> tuple[WeightSet, WeightSet]:
    """Reparameterization chain rule: d/dmean = g, d/dstd = g * eps."""
    return grad_theta.copy(), grad_theta.map(np.multiply, noise)


def elbo_estimate(nll_samples, kl_value: float) -> float:
    nll = np.asarray(nll_samples, dtype=np.float64).ravel()
    if nll.size == 0:
        raise ValueError("need at least one likelihood sample")
    return float(np.mean(nll) + kl_value)


def sample_outputs(params: VariationalParams, spikes: np.ndarray, config: NetworkConfig,
                   n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Readout trajectories under ``n_samples`` posterior draws, shape ``(n_samples, T, n_out)``."""
    from ._kernels import simulate_batch
    from .network import decay_factors

    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.ndim != 2 or spikes.shape[1] != config.n_in:
        raise ConfigurationError(f"raster has shape {spikes.shape}, expected (T, {config.n_in})")
    draws = [sample_weights(params, rng).theta for _ in range(n_samples)]
    stack = {g: np.stack([getattr(d, g) for d in draws]) for g in GROUPS}
    T = spikes.shape[0]
    alpha, rho, kappa = decay_factors(config)
    y, *_ = simulate_batch(
        np.broadcast_to(spikes, (n_samples,) + spikes.shape).copy(), np.zeros((n_samples, T)),
        np.zeros((n_samples, config.n_out)), stack["w_in"], stack["w_rec"], stack["w_out"],
        stack["b_out"], np.zeros((n_samples, config.n_rec, config.n_out)),
        alpha, rho, kappa, config.v_base, config.beta_inc, 0.3, False)
    return y


def posterior_predictive(params: VariationalParams, spikes: np.ndarray, config: NetworkConfig,
                         n_samples: int, rng: np.random.Generator,
                         quantiles=(0.1, 0.5, 0.9), return_samples: bool = False):
    """Per-step readout quantiles over independent posterior draws.

    Returns an array ``(len(quantiles), T)`` for the first readout unit
    (linear interpolation between order statistics), plus the raw
    ``(n_samples, T)`` trajectories if ``return_samples``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    y = sample_outputs(params, spikes, config, n_samples, rng)[:, :, 0]
    q = np.quantile(y, quantiles, axis=0, method="linear") if len(y[0]) else \
        np.zeros((len(quantiles), 0))
    return (q, y) if return_samples else q
