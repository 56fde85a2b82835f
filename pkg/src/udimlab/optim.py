"""First-order base optimizers and the SAM / SAGM / GAM sharpness steppers.

Every stepper follows the same recipe: build a descent direction from one or
more gradient evaluations, then hand it to :func:`base_step`, which adds the
weight-decay term and applies SGD or adam-lite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn_core import GRAD_TOL, directional_grad_diff, grad_params, loss, loss_and_grad, shifted

BASES = ("sgd", "adam")
DECAY_KINDS = ("norm", "squared")
EPS_MODES = ("unit", "printed")


@dataclass
class OptimizerConfig:
    base: str = "adam"
    learning_rate: float = 1e-2
    rho: float = 0.05
    alpha: float = 0.001
    weight_decay: float = 0.0
    # "norm": lambda*||theta||_2 (subgradient theta/||theta||); "squared": lambda/2*||theta||^2
    decay_kind: str = "norm"
    # "unit": ||eps*|| = rho; "printed": rho * g / ||g||^2
    eps_mode: str = "unit"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}, got {self.base!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.rho >= 0:
            raise ValueError("rho must be >= 0")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.decay_kind not in DECAY_KINDS:
            raise ValueError(f"decay_kind must be one of {DECAY_KINDS}")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")


@dataclass
class OptState:
    """Adam moment buffers; unused by SGD."""
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class StepReport:
    pre_loss: float
    post_loss: float
    eps_norm: float = 0.0
    degenerate: bool = False
    grad: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class SharpGrad:
    """Descent direction of a sharpness objective, before weight decay."""
    grad: np.ndarray
    loss: float
    eps_norm: float = 0.0
    degenerate: bool = False
    extra: dict = field(default_factory=dict)


def sam_epsilon(grad: np.ndarray, rho: float, mode: str = "unit"):
    """Closed-form first-order ascent perturbation. Returns ``(eps, degenerate)``."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    norm = float(np.linalg.norm(grad))
    if norm < GRAD_TOL:
        return np.zeros_like(grad), True
    if mode == "unit":
        return rho * (grad / norm), False
    if mode == "printed":
        return rho * grad / (norm * norm), False
    raise ValueError(f"unknown eps mode {mode!r}")


def weight_decay_grad(theta: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
    if cfg.decay_kind == "squared":
        return cfg.weight_decay * theta
    norm = np.linalg.norm(theta)
    if norm == 0.0:
        return np.zeros_like(theta)
    return cfg.weight_decay * (theta / norm)


def weight_decay_value(theta: np.ndarray, cfg: OptimizerConfig) -> float:
    norm = float(np.linalg.norm(theta))
    if cfg.decay_kind == "squared":
        return 0.5 * cfg.weight_decay * norm * norm
    return cfg.weight_decay * norm


def base_step(m, grad: np.ndarray, cfg: OptimizerConfig, state: OptState | None = None,
              batch=None) -> StepReport:
    """Apply one SGD / adam-lite update with weight decay.

    ``state`` carries Adam moments across calls; a fresh one is used when
    omitted. ``batch`` (optional) is only used to fill the report's losses.
    """
    if grad.shape != m.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {m.theta.shape}")
    pre = loss(m, batch) if batch is not None else float("nan")
    g = grad
    if cfg.weight_decay > 0:
        g = g + weight_decay_grad(m.theta, cfg)
    if cfg.base == "sgd":
        m.theta -= cfg.learning_rate * g
    else:
        state = OptState() if state is None else state
        if state.m is None:
            state.m = np.zeros_like(m.theta)
            state.v = np.zeros_like(m.theta)
        state.step += 1
        state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
        state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * (g * g)
        mhat = state.m / (1 - cfg.beta1 ** state.step)
        vhat = state.v / (1 - cfg.beta2 ** state.step)
        m.theta -= cfg.learning_rate * (mhat / (np.sqrt(vhat) + cfg.adam_eps))
    if not np.all(np.isfinite(m.theta)):
        raise FloatingPointError("non-finite parameters after base step")
    post = loss(m, batch) if batch is not None else float("nan")
    return StepReport(pre_loss=pre, post_loss=post, grad=g)


# -- sharpness directions ----------------------------------------------------

def erm_grad(m, batch, cfg: OptimizerConfig) -> SharpGrad:
    value, g = loss_and_grad(m, batch)
    return SharpGrad(grad=g, loss=value)


def sam_grad(m, batch, cfg: OptimizerConfig) -> SharpGrad:
    value, g = loss_and_grad(m, batch)
    if cfg.rho == 0:
        return SharpGrad(grad=g, loss=value)
    eps, degenerate = sam_epsilon(g, cfg.rho, cfg.eps_mode)
    if degenerate:
        return SharpGrad(grad=g, loss=value, degenerate=True)
    with shifted(m, eps):
        g_adv = grad_params(m, batch)
    return SharpGrad(grad=g_adv, loss=value, eps_norm=float(np.linalg.norm(eps)),
                     extra={"eps": eps})


def sagm_grad(m, batch, cfg: OptimizerConfig) -> SharpGrad:
    """Gradient of L(theta) + L(theta + rho*g/||g|| - alpha*g), displacement frozen."""
    value, g = loss_and_grad(m, batch)
    norm = float(np.linalg.norm(g))
    if norm < GRAD_TOL:
        return SharpGrad(grad=g, loss=value, degenerate=True)
    if cfg.rho == 0 and cfg.alpha == 0:
        shift = None
    else:
        shift = cfg.rho * (g / norm) - cfg.alpha * g
    if shift is None:
        g_adv = g.copy()
    else:
        with shifted(m, shift):
            g_adv = grad_params(m, batch)
    eps_norm = 0.0 if shift is None else float(np.linalg.norm(shift))
    return SharpGrad(grad=g + g_adv, loss=value, eps_norm=eps_norm,
                     extra={"perturbed_grad": g_adv, "shift": shift})


def gam_grad(m, batch, cfg: OptimizerConfig, delta: float = 1e-3) -> SharpGrad:
    """Gradient of L(theta) + rho * max_{||e||<=rho} ||grad L(theta + e)||.

    The inner max takes one normalized ascent step on ||grad L||; the ascent
    direction and the penalty gradient both come from finite-difference HVPs.
    """
    value, g = loss_and_grad(m, batch)
    if cfg.rho == 0:
        return SharpGrad(grad=g, loss=value, extra={"max_grad_norm": float(np.linalg.norm(g))})
    if np.linalg.norm(g) < GRAD_TOL:
        return SharpGrad(grad=g, loss=value, degenerate=True)
    ascent = directional_grad_diff(m, batch, g, delta)
    a_norm = float(np.linalg.norm(ascent))
    if a_norm < GRAD_TOL:
        return SharpGrad(grad=g, loss=value, degenerate=True)
    eps = cfg.rho * (ascent / a_norm)
    with shifted(m, eps):
        g_far = grad_params(m, batch)
        far_norm = float(np.linalg.norm(g_far))
        if far_norm < GRAD_TOL:
            penalty = np.zeros_like(g)
        else:
            penalty = directional_grad_diff(m, batch, g_far, delta)
    return SharpGrad(grad=g + cfg.rho * penalty, loss=value, eps_norm=cfg.rho,
                     extra={"max_grad_norm": far_norm, "eps": eps})


SHARPNESS = {"erm": erm_grad, "sam": sam_grad, "sagm": sagm_grad, "gam": gam_grad}


def sharp_step(kind: str, m, batch, cfg: OptimizerConfig, state: OptState | None = None) -> StepReport:
    sg = SHARPNESS[kind](m, batch, cfg)
    rep = base_step(m, sg.grad, cfg, state)
    rep.pre_loss = sg.loss
    rep.post_loss = loss(m, batch)
    rep.eps_norm = sg.eps_norm
    rep.degenerate = sg.degenerate
    rep.extra.update({k: v for k, v in sg.extra.items() if np.isscalar(v)})
    return rep


def sam_step(m, batch, cfg: OptimizerConfig, state: OptState | None = None) -> StepReport:
    return sharp_step("sam", m, batch, cfg, state)


def sagm_step(m, batch, cfg: OptimizerConfig, state: OptState | None = None) -> StepReport:
    return sharp_step("sagm", m, batch, cfg, state)


def gam_step(m, batch, cfg: OptimizerConfig, state: OptState | None = None) -> StepReport:
    return sharp_step("gam", m, batch, cfg, state)
