"""Minibatch variational training with e-prop likelihood gradients.

One epoch = one parameter update on a freshly generated minibatch. Every
(trial, posterior sample) pair is simulated with its own weight draw; the
random stream of each pair is derived from ``(seed, epoch, trial, sample)``
so the result does not depend on evaluation order or thread count.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .eprop import FEEDBACK_MODES, WEIGHT_TRANSPORT, FeedbackWeights, sigmoid
from .network import GROUPS, ConfigurationError, NetworkConfig, WeightSet, decay_factors
from .task import BOTH, DOWN, UP, TaskConfig, generate_batch, generate_trial, make_trial
from .variational import (PHI_MIN, PriorConfig, VariationalParams, chain_to_variational,
                          init_params, kl_forward, kl_paper, posterior_predictive,
                          prior_gradients, sample_weights)

log = logging.getLogger(__name__)

LOGIT_CLIP = 30.0
CHECKPOINT_VERSION = 1

# stream tags for derived random generators
_INIT, _FEEDBACK, _BATCH, _NOISE, _EVAL, _PROBE = range(6)


class NumericalError(ArithmeticError):
    """A gradient or parameter became non-finite."""


class CheckpointError(ValueError):
    """Checkpoint file is missing, malformed or of another version."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 20
    v_samples: int = 5
    epochs: int = 5000
    kl_scale: float = 1e-3
    feedback_mode: str = "broadcast_alignment"
    seed: int = 0
    ema_coeff: float = 0.95
    gamma_pd: float = 0.3
    init_std_scale: float = 0.5
    init_input_gain: float = 3.0
    likelihood_reduction: str = "sum"

    def __post_init__(self):
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ConfigurationError(f"feedback_mode must be one of {FEEDBACK_MODES}")
        if self.batch_size < 1 or self.v_samples < 1:
            raise ConfigurationError("batch_size and v_samples must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.learning_rate < 0 or self.kl_scale < 0:
            raise ConfigurationError("learning_rate and kl_scale must be nonnegative")
        if not 0.0 <= self.ema_coeff < 1.0:
            raise ConfigurationError("ema_coeff must lie in [0, 1)")
        if self.likelihood_reduction not in ("sum", "mean"):
            raise ConfigurationError("likelihood_reduction must be 'sum' or 'mean'")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"
    run_name: str = "run"

    _SECTIONS = ("network", "task", "prior", "train")

    def __post_init__(self):
        if self.network.n_in != self.task.n_channels:
            raise ConfigurationError(
                f"n_in={self.network.n_in} but the task has {self.task.n_channels} channels")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from a flat mapping of field names; unknown keys are rejected."""
        owners = {}
        for sec, typ in zip(cls._SECTIONS, (NetworkConfig, TaskConfig, PriorConfig, TrainConfig)):
            for f in fields(typ):
                owners[f.name] = (sec, typ)
        parts = {s: {} for s in cls._SECTIONS}
        top = {}
        for key, value in data.items():
            if key in ("out_dir", "run_name"):
                top[key] = str(value)
            elif key in owners:
                parts[owners[key][0]][key] = value
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        try:
            built = {s: t(**parts[s]) for s, t in
                     zip(cls._SECTIONS, (NetworkConfig, TaskConfig, PriorConfig, TrainConfig))}
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        return cls(**built, **top)

    def to_dict(self) -> dict:
        out = {}
        for s in self._SECTIONS:
            out.update(asdict(getattr(self, s)))
        out["out_dir"], out["run_name"] = self.out_dir, self.run_name
        return out

    def with_train(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)


METRIC_FIELDS = ("epoch", "mean_nll", "kl_paper", "kl_forward", "p_correct_up",
                 "p_correct_down", "ema_p_up_given_up", "ema_p_up_given_down")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    mean_nll: float
    kl_paper: float
    kl_forward: float
    p_correct_up: float
    p_correct_down: float
    ema_p_up_given_up: float
    ema_p_up_given_down: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def init_state(cfg: RunConfig) -> tuple[VariationalParams, FeedbackWeights]:
    t = cfg.train
    params = init_params(cfg.network, cfg.prior, rng_for(t.seed, _INIT), t.init_std_scale,
                         t.init_input_gain)
    fb = FeedbackWeights.random(cfg.network.n_rec, cfg.network.n_out,
                                rng_for(t.seed, _FEEDBACK), t.feedback_mode)
    return params, fb


def nll_of_trial(outputs, target, mask) -> float:
    """Mean Bernoulli negative log-likelihood of the readout logit over masked steps."""
    mask = np.asarray(mask) != 0
    if not mask.any():
        raise ValueError("trial has no scored steps")
    y = np.clip(np.asarray(outputs, dtype=np.float64).reshape(len(mask), -1)[mask, 0],
                -LOGIT_CLIP, LOGIT_CLIP)
    # -log sigmoid(y) = logaddexp(0, -y)
    nll = target * np.logaddexp(0.0, -y) + (1.0 - target) * np.logaddexp(0.0, y)
    return float(np.mean(nll))


def _pad_batch(rasters, n_in):
    T = max(len(r) for r in rasters)
    x = np.zeros((len(rasters), T, n_in))
    mask = np.zeros((len(rasters), T))
    for k, r in enumerate(rasters):
        x[k, :len(r)] = r.spikes
        mask[k, :len(r)] = r.loss_mask
    return x, mask


def simulate(thetas: list[WeightSet], x, mask, targets, feedback, cfg: RunConfig, want_grad=True):
    """Run the batched kernel; ``feedback`` is ``(S, H, K)``."""
    net = cfg.network
    alpha, rho, kappa = decay_factors(net)
    stack = {g: np.stack([getattr(th, g) for th in thetas]) for g in GROUPS}
    return _kernels.simulate_batch(
        x, mask, targets, stack["w_in"], stack["w_rec"], stack["w_out"], stack["b_out"],
        np.ascontiguousarray(feedback), alpha, rho, kappa, net.v_base, net.beta_inc,
        cfg.train.gamma_pd, want_grad)


def _feedback_stack(thetas, fb: FeedbackWeights):
    if fb.mode == WEIGHT_TRANSPORT:
        return np.stack([th.w_out.T for th in thetas])
    return np.broadcast_to(fb.b, (len(thetas),) + fb.b.shape)


def _check_finite(ws: WeightSet, what: str) -> None:
    for g, a in ws.items():
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite {what} in weight group {g!r}")


def _ema(prev: float, x: float, coeff: float) -> float:
    return coeff * prev + (1.0 - coeff) * x


def likelihood_gradients(params: VariationalParams, fb: FeedbackWeights, cfg: RunConfig,
                         epoch: int, trials=None):
    """E-prop gradient of the minibatch NLL, averaged over posterior samples.

    With ``likelihood_reduction="sum"`` the minibatch log-likelihood is the
    sum over trials and scored steps; with ``"mean"`` each trial contributes
    its mean over scored steps and trials are averaged.

    Returns ``(grad_mean, grad_std, per_sim)`` where ``per_sim`` holds the
    NLL, class and mean recall probability of every simulation.
    """
    t = cfg.train
    if trials is None:
        trials = generate_batch(cfg.task, t.batch_size, rng_for(t.seed, _BATCH, epoch))
    rasters = [r for _, r in trials for _ in range(t.v_samples)]
    samples = [sample_weights(params, rng_for(t.seed, _NOISE, epoch, i, v))
               for i in range(len(trials)) for v in range(t.v_samples)]
    thetas = [s.theta for s in samples]
    x, mask = _pad_batch(rasters, cfg.network.n_in)
    targets = np.array([[r.target] for r in rasters], dtype=np.float64)
    y, _, g_in, g_rec, g_out, g_b = simulate(thetas, x, mask, targets,
                                             _feedback_stack(thetas, fb), cfg)
    n_scored = mask.sum(axis=1)
    S = len(rasters)
    if t.likelihood_reduction == "sum":
        w = np.full(S, 1.0 / t.v_samples)
    else:
        w = 1.0 / (n_scored * S)
    per = {"w_in": g_in, "w_rec": g_rec, "w_out": g_out, "b_out": g_b}
    grad_mean = WeightSet(**{g: np.tensordot(w, a, axes=(0, 0)) for g, a in per.items()})
    grad_std = WeightSet(**{
        g: np.tensordot(w, a * np.stack([getattr(s.noise, g) for s in samples]), axes=(0, 0))
        for g, a in per.items()})

    nll = np.array([nll_of_trial(y[k], rasters[k].target, mask[k]) for k in range(S)])
    p_up = np.array([np.mean(sigmoid(np.clip(y[k, mask[k] != 0, 0], -LOGIT_CLIP, LOGIT_CLIP)))
                     for k in range(S)])
    is_up = targets[:, 0] == 1.0
    return grad_mean, grad_std, {"nll": nll, "p_up": p_up, "is_up": is_up}


def train_epoch(params: VariationalParams, fb: FeedbackWeights, cfg: RunConfig, epoch: int,
                prev: MetricsRecord | None = None) -> tuple[VariationalParams, MetricsRecord]:
    """One minibatch update. ``prev`` carries the EMA state (None starts it at 0.5)."""
    t = cfg.train
    g_lik_m, g_lik_s, sims = likelihood_gradients(params, fb, cfg, epoch)
    _check_finite(g_lik_m, "likelihood gradient")
    _check_finite(g_lik_s, "likelihood gradient")
    g_kl_m, g_kl_s = prior_gradients(params, cfg.prior)
    _check_finite(g_kl_m, "prior gradient")
    _check_finite(g_kl_s, "prior gradient")

    lr, ks = t.learning_rate, t.kl_scale
    mean = params.mean.map(lambda p, gl, gk: p - lr * (gl + ks * gk), g_lik_m, g_kl_m)
    std = params.std.map(lambda p, gl, gk: p - lr * (gl + ks * gk), g_lik_s, g_kl_s)
    new = VariationalParams(mean, std)
    new.clamp()
    _check_finite(new.mean, "mean parameter")
    _check_finite(new.std, "std parameter")

    ema_uu = prev.ema_p_up_given_up if prev else 0.5
    ema_ud = prev.ema_p_up_given_down if prev else 0.5
    up, p = sims["is_up"], sims["p_up"]
    # a class missing from the batch leaves its EMA untouched
    p_cu = float(p[up].mean()) if up.any() else ema_uu
    p_cd = float(1.0 - p[~up].mean()) if (~up).any() else 1.0 - ema_ud
    rec = MetricsRecord(
        epoch=epoch + 1,
        mean_nll=float(sims["nll"].mean()),
        kl_paper=kl_paper(new, cfg.prior),
        kl_forward=kl_forward(new, cfg.prior),
        p_correct_up=p_cu,
        p_correct_down=p_cd,
        ema_p_up_given_up=_ema(ema_uu, p_cu, t.ema_coeff),
        ema_p_up_given_down=_ema(ema_ud, 1.0 - p_cd, t.ema_coeff),
    )
    return new, rec


def recall_probability(params: VariationalParams, rasters, cfg: RunConfig, rng_key) -> np.ndarray:
    """Mean P(up) over the scored window, one posterior draw per raster."""
    thetas = [sample_weights(params, rng_for(cfg.train.seed, *rng_key, k)).theta
              for k in range(len(rasters))]
    x, mask = _pad_batch(rasters, cfg.network.n_in)
    S = len(rasters)
    y, *_ = simulate(thetas, x, mask, np.zeros((S, cfg.network.n_out)),
                     np.zeros((S, cfg.network.n_rec, cfg.network.n_out)), cfg, want_grad=False)
    return np.array([np.mean(sigmoid(np.clip(y[k, mask[k] != 0, 0], -LOGIT_CLIP, LOGIT_CLIP)))
                     for k in range(S)])


@dataclass(frozen=True)
class Evaluation:
    p_correct_up: float
    p_correct_down: float
    accuracy: float
    n_trials: int


def evaluate(params: VariationalParams, cfg: RunConfig, n_trials: int, seed: int | None = None,
             classifier=None) -> Evaluation:
    """Score fresh trials, one posterior draw each.

    ``classifier(rasters) -> P(up) array`` replaces the network (test stubs).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    seed = cfg.train.seed if seed is None else seed
    rng = rng_for(seed, _EVAL)
    trials = [generate_trial(cfg.task, rng) for _ in range(n_trials)]
    rasters = [r for _, r in trials]
    if classifier is None:
        probs = []
        for start in range(0, n_trials, 250):
            probs.append(recall_probability(params, rasters[start:start + 250],
                                            cfg.with_train(seed=seed), (_EVAL, 1, start)))
        p = np.concatenate(probs)
    else:
        p = np.asarray(classifier(rasters), dtype=np.float64)
    up = np.array([r.target == 1.0 for r in rasters])
    correct = np.where(up, p > 0.5, p < 0.5)
    return Evaluation(
        p_correct_up=float(p[up].mean()) if up.any() else float("nan"),
        p_correct_down=float(1.0 - p[~up].mean()) if (~up).any() else float("nan"),
        accuracy=float(correct.mean()),
        n_trials=n_trials,
    )


@dataclass
class ProbeResult:
    spread_up: float
    spread_down: float
    spread_both: float
    quantiles: dict  # kind -> (3, T) array of q10, q50, q90
    samples: dict  # kind -> (n_samples, T) raw readout trajectories
    scored: np.ndarray  # (T,) 0/1 mask shared by all three probes

    def report(self) -> dict:
        return {"spread_up": self.spread_up, "spread_down": self.spread_down,
                "spread_both": self.spread_both}


def probe_uncertainty(params: VariationalParams, cfg: RunConfig, n_samples: int,
                      seed: int | None = None, delay: int | None = None) -> ProbeResult:
    """Posterior-predictive spread (q90 - q10, averaged over the scored window) for Up/Down/Both."""
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    seed = cfg.train.seed if seed is None else seed
    task = cfg.task
    rng = rng_for(seed, _PROBE)
    if delay is None:
        delay = (task.delay_min_steps + task.delay_max_steps) // 2
    cue_fire = rng.integers(0, task.cue_steps, size=task.n_cue_channels)
    quant, samples, spreads = {}, {}, {}
    scored = None
    for k, kind in enumerate((UP, DOWN, BOTH)):
        _, raster = make_trial(task, kind, delay, cue_fire)
        q, y = posterior_predictive(params, raster.spikes, cfg.network, n_samples,
                                    rng_for(seed, _PROBE, 1, k), return_samples=True)
        scored = raster.loss_mask
        quant[kind], samples[kind] = q, y
        spreads[kind] = float(np.mean((q[2] - q[0])[scored != 0]))
    return ProbeResult(spreads[UP], spreads[DOWN], spreads[BOTH], quant, samples, scored)


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    params: VariationalParams
    feedback: FeedbackWeights
    config: RunConfig
    epoch: int
    last_metrics: MetricsRecord | None = None

    @property
    def rng_state(self) -> dict:
        # every random stream is derived from (seed, stream tag, epoch, ...)
        return {"seed": int(self.config.train.seed), "next_epoch": int(self.epoch)}


def _flat(ws: WeightSet) -> dict:
    return {g: {"shape": list(a.shape), "data": a.ravel(order="C").tolist()} for g, a in ws.items()}


def _unflat(d: dict) -> WeightSet:
    return WeightSet(**{g: np.array(d[g]["data"], dtype=np.float64).reshape(d[g]["shape"])
                        for g in GROUPS})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "mean": _flat(ckpt.params.mean),
        "std": _flat(ckpt.params.std),
        "feedback": {"mode": ckpt.feedback.mode, "shape": list(ckpt.feedback.b.shape),
                     "data": ckpt.feedback.b.ravel().tolist()},
        "last_metrics": asdict(ckpt.last_metrics) if ckpt.last_metrics else None,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r} "
            f"!= {CHECKPOINT_VERSION}")
    try:
        cfg = RunConfig.from_dict(doc["config"])
        params = VariationalParams(_unflat(doc["mean"]), _unflat(doc["std"]))
        fbd = doc["feedback"]
        fb = FeedbackWeights(np.array(fbd["data"], dtype=np.float64).reshape(fbd["shape"]),
                             fbd["mode"])
        lm = MetricsRecord(**doc["last_metrics"]) if doc.get("last_metrics") else None
        return Checkpoint(params, fb, cfg, int(doc["epoch"]), lm)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc


def train(cfg: RunConfig, epochs: int | None = None, start: Checkpoint | None = None,
          on_epoch=None) -> Checkpoint:
    """Run ``epochs`` updates (default ``cfg.train.epochs``), optionally resuming ``start``."""
    _kernels.configure_threads()
    if start is None:
        params, fb = init_state(cfg)
        first, prev = 0, None
    else:
        params, fb, first, prev = start.params, start.feedback, start.epoch, start.last_metrics
    epochs = cfg.train.epochs if epochs is None else epochs
    for ep in range(first, first + epochs):
        params, prev = train_epoch(params, fb, cfg, ep, prev)
        if on_epoch is not None:
            on_epoch(prev)
        if (ep + 1) % 100 == 0:
            log.info("epoch %d nll=%.4f p(up|up)=%.3f p(up|down)=%.3f", prev.epoch,
                     prev.mean_nll, prev.ema_p_up_given_up, prev.ema_p_up_given_down)
    return Checkpoint(params, fb, cfg, first + epochs, prev)
