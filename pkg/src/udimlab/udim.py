"""Inconsistency-aware data perturbation, gradient-variance matching and training.

One UDIM iteration on a source batch D:

1. perturb every instance along the input gradient of
   ``loss(x) + rho' * ||grad_theta loss(x)||`` to get a twin batch D~;
2. descend on  sharpness(D) + lambda1 * (rho' * ||grad L_D~|| + ||Var G_D~ - Var G_D||)
   plus weight decay, where G are per-sample classifier-head gradients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .domains import DomainDataset, merge
from .nn_core import (GRAD_TOL, Mlp, _head_grads, batch_input_grad_of_param_grad_norm,
                      directional_grad_diff, grad_params, loss, mlp_init, softmax)
from .optim import (SHARPNESS, OptimizerConfig, OptState, StepReport, base_step, sharp_step,
                    weight_decay_value)

PERTURB_MODES = ("normalized", "unnormalized")
METHODS = ("erm", "sam", "sagm", "gam", "udim_sam", "udim_sagm", "udim_gam")


@dataclass
class UdimConfig:
    """Scalars of the method.

    ``rho`` and ``lambda2`` override the optimizer config's ``rho`` and
    ``weight_decay`` during training so a single place owns them.
    ``gamma`` is analysis-only.
    """
    rho: float = 0.05
    rho_prime: float = 0.05
    rho_x: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 0.0
    gamma: float = 0.1
    warmup_fraction: float = 0.5
    perturb_mode: str = "normalized"
    base_sharpness: str = "sam"
    fd_delta: float = 1e-3
    half_batch: bool = False

    def __post_init__(self):
        for name in ("rho", "rho_prime", "rho_x", "lambda1", "lambda2", "gamma", "fd_delta"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite value >= 0, got {v!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must satisfy 0 <= p < 1, got {self.warmup_fraction}")
        if self.perturb_mode not in PERTURB_MODES:
            raise ValueError(f"perturb_mode must be one of {PERTURB_MODES}")
        if self.base_sharpness not in ("sam", "sagm", "gam"):
            raise ValueError("base_sharpness must be sam, sagm or gam")

    def optimizer(self, opt: OptimizerConfig) -> OptimizerConfig:
        return replace(opt, rho=self.rho, weight_decay=self.lambda2)


@dataclass
class ModelSpec:
    layer_dims: list
    loss_kind: str = "ce"
    activation: str = "tanh"

    def build(self, seed: int) -> Mlp:
        return mlp_init(self.layer_dims, self.loss_kind, seed, self.activation)


@dataclass
class PerturbedBatch:
    originals: DomainDataset
    perturbed: DomainDataset
    norms: np.ndarray
    degenerate: np.ndarray


def perturb_batch(m: Mlp, batch: DomainDataset, cfg: UdimConfig) -> PerturbedBatch:
    X, y = batch.inputs, batch.labels
    if len(batch) == 0:
        raise ValueError("empty batch")
    if cfg.rho_x == 0:
        return PerturbedBatch(batch, batch.with_inputs(X.copy()), np.zeros(len(batch)),
                              np.zeros(len(batch), dtype=bool))
    d = m.input_grads(X, y)
    if cfg.rho_prime != 0:
        dn, _ = batch_input_grad_of_param_grad_norm(m, X, y, cfg.fd_delta)
        d = d + cfg.rho_prime * dn
    dnorm = np.linalg.norm(d, axis=1)
    degenerate = dnorm < GRAD_TOL
    if cfg.perturb_mode == "normalized":
        step = cfg.rho_x * d / np.where(degenerate, 1.0, dnorm)[:, None]
    else:
        step = cfg.rho_x * d
    step[degenerate] = 0.0
    Xt = X + step
    return PerturbedBatch(batch, batch.with_inputs(Xt, f"{batch.domain_id}~"),
                          np.linalg.norm(step, axis=1), degenerate)


def _head_pass(m: Mlp, batch: DomainDataset):
    X = m._check_inputs(batch.inputs)
    y = m._check_labels(batch.labels, X.shape[0])
    acts, logits, layers = m._forward(X)
    return acts, logits, layers, y, _head_grads(m, acts[-1], logits, y)


def _variance_backward(m: Mlp, acts, logits, layers, y, gs, upstream) -> np.ndarray:
    """Gradient over theta of <upstream, Var(G)> through the closed-form head gradients."""
    n = y.shape[0]
    z = acts[-1]
    C, k = m.n_classes, z.shape[1]
    U = (2.0 / (n - 1)) * (gs.samples - gs.mean) * upstream
    A = U[:, :C * k].reshape(n, C, k)
    a = U[:, C * k:]
    r = gs.samples[:, C * k:]
    d_r = np.einsum("bck,bk->bc", A, z) + a
    d_z = np.einsum("bck,bc->bk", A, r)
    if m.loss_kind == "ce":
        p = softmax(logits)
        d_logits = p * d_r - p * np.sum(p * d_r, axis=1, keepdims=True)
    else:
        d_logits = d_r
    g, _ = m._backward(acts, layers, d_logits, d_features=d_z)
    return g


def variance_gap(m: Mlp, source: DomainDataset, perturbed: DomainDataset, with_grad: bool = True):
    """``||Var(G_perturbed) - Var(G_source)||_2`` and its exact gradient over all parameters."""
    if len(source) < 2 or len(perturbed) < 2:
        raise ValueError("gradient variance needs at least 2 instances per batch")
    ps = _head_pass(m, source)
    pp = _head_pass(m, perturbed)
    diff = pp[-1].variance - ps[-1].variance
    gap = float(np.linalg.norm(diff))
    if not with_grad:
        return gap, None
    if gap == 0.0:
        return gap, np.zeros_like(m.theta)
    s = diff / gap
    g = _variance_backward(m, *pp, s) - _variance_backward(m, *ps, s)
    return gap, g


def inconsistency_loss(m: Mlp, source: DomainDataset, perturbed: DomainDataset, cfg: UdimConfig):
    """Returns ``(value, breakdown)`` of rho'*||grad L_D~|| + ||Var G_D~ - Var G_D||."""
    if len(source) < 2 or len(perturbed) < 2:
        raise ValueError("inconsistency loss needs at least 2 instances per batch")
    g_t = grad_params(m, perturbed)
    gn = cfg.rho_prime * float(np.linalg.norm(g_t))
    vm, _ = variance_gap(m, source, perturbed, with_grad=False)
    breakdown = {
        "grad_norm_term": gn,
        "var_match_term": vm,
        "loss_gap": loss(m, perturbed) - loss(m, source),
    }
    return gn + vm, breakdown


def _check_finite(**parts):
    for name, value in parts.items():
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values in {name}")


def udim_step(m: Mlp, batch: DomainDataset, cfg: UdimConfig, opt: OptimizerConfig,
              state: OptState | None = None) -> StepReport:
    if len(batch) < 2:
        raise ValueError("udim_step needs a batch of at least 2 instances")
    opt = cfg.optimizer(opt)
    sg = SHARPNESS[cfg.base_sharpness](m, batch, opt)
    _check_finite(sharpness_gradient=sg.grad)
    pb = perturb_batch(m, batch, cfg)
    _check_finite(perturbed_inputs=pb.perturbed.inputs)

    g_t = grad_params(m, pb.perturbed)
    gt_norm = float(np.linalg.norm(g_t))
    if cfg.rho_prime > 0 and gt_norm > GRAD_TOL:
        gn_grad = directional_grad_diff(m, pb.perturbed, g_t, cfg.fd_delta)
    else:
        gn_grad = np.zeros_like(g_t)
    vm, vm_grad = variance_gap(m, batch, pb.perturbed)
    _check_finite(grad_norm_gradient=gn_grad, variance_gradient=vm_grad)

    total = sg.grad
    if cfg.lambda1 != 0 and not sg.degenerate:
        total = sg.grad + cfg.lambda1 * (cfg.rho_prime * gn_grad + vm_grad)
    wd = weight_decay_value(m.theta, opt)
    gap = loss(m, pb.perturbed) - sg.loss
    rep = base_step(m, total, opt, state)
    rep.pre_loss = sg.loss
    rep.post_loss = loss(m, batch)
    rep.eps_norm = sg.eps_norm
    rep.degenerate = sg.degenerate
    rep.extra.update({
        "sam_loss": sg.loss,
        "grad_norm_term": cfg.rho_prime * gt_norm,
        "var_match_term": vm,
        "loss_gap": gap,
        "weight_decay": wd,
        "perturbed_degenerate": int(pb.degenerate.sum()),
        "eps": sg.extra.get("eps"),
        "perturbed": pb.perturbed,
    })
    return rep


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    COLUMNS = ("iter", "phase", "sam_loss", "grad_norm_term", "var_match_term", "loss_gap",
               "weight_decay", "domain", "accuracy")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["iter"], r["phase"]] + [_fmt(r.get(c)) for c in self.COLUMNS[2:7]]
                           + ["", ""])
            for e in self.evals:
                w.writerow([e["iter"], "eval", "", "", "", "", "", e["domain"], _fmt(e["accuracy"])])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def split_method(method: str) -> tuple[str, bool]:
    """``"udim_sagm"`` -> ``("sagm", True)``; ``"sam"`` -> ``("sam", False)``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method.startswith("udim_"):
        return method[len("udim_"):], True
    return method, False


def train(model_spec: ModelSpec, domains: list[DomainDataset], cfg: UdimConfig,
          opt: OptimizerConfig, iters: int, seed: int, method: str | None = None,
          batch_size: int = 64, eval_sets: dict | None = None, eval_every: int = 0):
    """Train one model; returns ``(model, TrainLog)``.

    The first ``floor(p * iters)`` iterations run the base sharpness stepper;
    the rest run :func:`udim_step`. Plain baselines (``erm``/``sam``/...) use
    their stepper throughout. Batches are drawn without replacement within a
    batch from ``default_rng([seed, 1])``; init uses ``seed`` directly, so runs
    of different methods with one seed see identical batches.
    Checkpoints (iteration, parameters) are stored at every evaluation.
    """
    if not domains:
        raise ValueError("need at least one source domain")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    method = method or f"udim_{cfg.base_sharpness}"
    sharp, use_udim = split_method(method)
    if use_udim:
        cfg = replace(cfg, base_sharpness=sharp)
    source = domains[0] if len(domains) == 1 else merge(domains)
    m = model_spec.build(seed)
    if m.n_inputs != source.dim:
        raise ValueError(f"model expects {m.n_inputs} inputs, data has {source.dim}")
    opt_eff = cfg.optimizer(opt)
    state = OptState()
    rng = np.random.default_rng([seed, 1])
    n = len(source)
    B = min(batch_size, n)
    warmup = math.floor(cfg.warmup_fraction * iters) if use_udim else iters
    log = TrainLog()
    eval_sets = eval_sets or {}

    def evaluate(t):
        for name, d in eval_sets.items():
            log.evals.append({"iter": t, "domain": name, "accuracy": m.accuracy(d.inputs, d.labels)})
        log.checkpoints.append((t, m.theta.copy()))

    for t in range(iters):
        in_warmup = t < warmup
        size = B if (in_warmup or not cfg.half_batch) else max(2, B // 2)
        idx = np.sort(rng.choice(n, size=size, replace=False))
        batch = source.subset(idx)
        if in_warmup:
            rep = sharp_step(sharp, m, batch, opt_eff, state)
            row = {"iter": t, "phase": "warmup" if use_udim else "base", "sam_loss": rep.pre_loss,
                   "weight_decay": weight_decay_value(m.theta, opt_eff)}
        else:
            rep = udim_step(m, batch, cfg, opt, state)
            row = {"iter": t, "phase": "udim", **{k: rep.extra[k] for k in (
                "sam_loss", "grad_norm_term", "var_match_term", "loss_gap", "weight_decay")}}
        log.rows.append(row)
        if eval_every and ((t + 1) % eval_every == 0 or t + 1 == iters):
            evaluate(t + 1)
    return m, log
