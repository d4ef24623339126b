"""Per-observation pose fitting with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diff import TotalObjective
from .evaluate import keypoints_from_transforms
from .geometry import SingularTransformError, identity_params, params_to_transforms
from .losses import LossBreakdown, LossConfig, _maps_array

logger = logging.getLogger(__name__)

PATIENCE = 5


class FitError(RuntimeError):
    def __init__(self, message, iteration=None, part=None):
        super().__init__(message)
        self.iteration = iteration
        self.part = part


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 2000
    convergence_tol: float = 1e-8
    seed: int = 0
    init_noise: float = 0.0
    lr_final: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    resolution: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.init_noise < 0:
            raise ValueError("init_noise must be non-negative")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ValueError("lr_final must be positive")

    def learning_rate_at(self, iteration: int) -> float:
        """Geometric decay from ``learning_rate`` to ``lr_final`` over ``max_iters``; constant if unset."""
        if self.lr_final is None or self.max_iters < 2:
            return self.learning_rate
        frac = min(iteration, self.max_iters - 1) / (self.max_iters - 1)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        d = dict(d)
        loss = d.pop("loss", None)
        if isinstance(loss, dict):
            d["loss"] = LossConfig(**loss)
        elif loss is not None:
            d["loss"] = loss
        return cls(**d)


# Tuned for single-image fitting of synthetic targets; see README.
SYNTHETIC_PROFILE = dict(learning_rate=2e-2, lr_final=1e-3, max_iters=600,
                         loss=LossConfig(lambda1=1.0, lambda2=1.0, recon_features="pool:1,2,4,8,16,32"))


def synthetic_fit_config(**overrides) -> FitConfig:
    return replace(FitConfig(**SYNTHETIC_PROFILE), **overrides)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, config: FitConfig, learning_rate: float | None = None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and optimizer state must be aligned")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient entries")
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1 ** step)
    v_hat = v / (1.0 - config.beta2 ** step)
    lr = config.learning_rate if learning_rate is None else learning_rate
    new = params - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new, AdamState(m, v, step)


@dataclass
class FitResult:
    transforms: list
    keypoints: list
    loss_trace: list
    converged: bool
    iterations_used: int
    best_iteration: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([t.params for t in self.transforms])

    @property
    def final_loss(self) -> LossBreakdown:
        return self.loss_trace[self.best_iteration]


def fit_pose(template, target, config: FitConfig = FitConfig()) -> FitResult:
    """Minimize the weighted objective over all part transforms, starting from the canonical pose."""
    t = _maps_array(target)
    if t.ndim != 3 or t.shape[0] != template.n_parts:
        raise ValueError(f"target must have {template.n_parts} channels, got shape {t.shape}")
    if t.shape[1] != config.resolution or t.shape[2] != config.resolution:
        raise ValueError(f"target resolution {t.shape[1]}x{t.shape[2]} does not match {config.resolution}")
    objective = TotalObjective(template, t, config.loss)

    params = identity_params(template.n_parts)
    if config.init_noise > 0:
        params = params + np.random.default_rng(config.seed).normal(0.0, config.init_noise, params.size)
    state = AdamState.zeros(params.size)
    trace: list[LossBreakdown] = []
    best_params, best_total, best_iter = params, np.inf, 0
    converged, quiet = False, 0

    for it in range(config.max_iters):
        try:
            breakdown, grad = objective.evaluate(params)
        except SingularTransformError as exc:
            raise FitError(f"singular transform for part {exc.part!r} at iteration {it}",
                           iteration=it, part=exc.part) from exc
        if not np.isfinite(breakdown.total) or not np.all(np.isfinite(grad)):
            raise FitError(f"non-finite loss at iteration {it}", iteration=it)
        trace.append(breakdown)
        if breakdown.total < best_total:
            best_params, best_total, best_iter = params, breakdown.total, it
        if it > 0 and abs(trace[-2].total - breakdown.total) < config.convergence_tol:
            quiet += 1
            if quiet >= PATIENCE:
                converged = True
                break
        else:
            quiet = 0
        if it == config.max_iters - 1:
            break
        params, state = adam_step(params, grad, state, config, config.learning_rate_at(it))

    transforms = params_to_transforms(best_params)
    logger.debug("fit finished after %d iterations, best total %.3e at %d", len(trace), best_total, best_iter)
    return FitResult(transforms, keypoints_from_transforms(template, transforms), trace,
                     converged, len(trace), best_iter)
