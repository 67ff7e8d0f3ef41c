"""Stochastic primal-dual training of the two-tier policy.

Each iteration draws one scenario (or a mini-batch), takes an Adam step on
the per-scenario Lagrangian ``l(pi) + lam' g(pi)`` and then a projected
ascent step on the multipliers evaluated at the updated parameters, with
dual step ``mu0 / (k + 1) ** decay``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DivergenceError
from .policy import Architecture, init_params, inverter_setpoints, vjp

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
DIVERGENCE_DUAL = 1e12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    primal_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dual_step: float = 1.0
    dual_decay: float = 0.5
    batch_size: int = 1
    reshuffle: bool = True
    seed: int = 0
    freeze_dual: bool = False
    record_dual: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not (self.primal_lr > 0 and self.dual_step > 0 and self.eps > 0 and self.dual_decay >= 0):
            raise ContractError("learning rates and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, theta):
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


class _Objective:
    """Cached per-scenario terms over inverter coordinates."""

    def __init__(self, model, arch, scenarios):
        if len(scenarios) == 0:
            raise ContractError("scenario set is empty")
        s = model.sens
        idx = arch.inverter_index
        self.idx = idx
        self.R_cols = np.ascontiguousarray(s.R[:, idx])
        self.X_cols = np.ascontiguousarray(s.X[:, idx])
        self.R_ss = self.R_cols[idx]
        self.v_lo = model.limits.v_lo
        self.v_hi = model.limits.v_hi
        ctxs = [model.context(sc.z) for sc in scenarios]
        self.y = np.array([c.y for c in ctxs])
        self.b = np.array([c.b for c in ctxs])
        self.b_s = np.ascontiguousarray(self.b[:, idx])
        self.w_u = [np.ascontiguousarray(sc.w_u, dtype=float) for sc in scenarios]
        self.w_local = [np.ascontiguousarray(sc.w_local, dtype=float) for sc in scenarios]
        self.n = s.n

    def loss(self, k, q):
        return float(q @ self.R_ss @ q - self.b_s[k] @ q)

    def g(self, k, q):
        v = self.X_cols @ q + self.y[k]
        return np.concatenate([v - self.v_hi, self.v_lo - v])

    def cotangent(self, k, q, lam):
        n = self.n
        return 2.0 * (self.R_ss @ q) - self.b_s[k] + self.X_cols.T @ (lam[:n] - lam[n:])

    def grad(self, params, k, lam):
        q = inverter_setpoints(params, self.w_u[k], self.w_local[k])
        return vjp(params, self.w_u[k], self.w_local[k], self.cotangent(k, q, lam))[1]


def lagrangian(params, lam, scenarios, model):
    """Sample average of ``l(pi(w^k), z^k) + lam' g(pi(w^k), z^k)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ContractError("multipliers must be nonnegative")
    obj = _Objective(model, params.arch, scenarios)
    total = 0.0
    for k in range(len(scenarios)):
        q = inverter_setpoints(params, obj.w_u[k], obj.w_local[k])
        total += obj.loss(k, q) + lam @ obj.g(k, q)
    return total / len(scenarios)


def grad_theta(params, lam, scenario, model):
    """Gradient of the per-scenario Lagrangian integrand with respect to ``theta``.

    Equals ``J' (2 R pi - b + X (lam_up - lam_lo))`` with ``J`` the policy Jacobian.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ContractError("multipliers must be nonnegative")
    return _Objective(model, params.arch, [scenario]).grad(params, 0, lam)


def primal_step(theta, state, grad, cfg, where=""):
    """One Adam update; returns new ``(theta, state)`` without mutating the inputs."""
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient{' at ' + where if where else ''}")
    t = state.t + 1
    with np.errstate(over="ignore", invalid="ignore"):
        m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
        raise DivergenceError(f"Adam moments overflowed{' at ' + where if where else ''}")
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    theta = theta - cfg.primal_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return theta, AdamState(m, v, t)


def dual_step_size(k, cfg):
    return cfg.dual_step / (k + 1.0) ** cfg.dual_decay


def dual_step(lam, g, k, cfg):
    """``max(0, lam + mu(k) g)`` where ``g`` is evaluated at the updated parameters."""
    return np.maximum(0.0, lam + dual_step_size(k, cfg) * g)


@dataclass
class EpochRecord:
    epoch: int
    avg_loss: float
    avg_max_g: float
    violations: int
    lambda_max: float
    complementarity: float = 0.0


@dataclass
class TrainingTrace:
    epochs: list = field(default_factory=list)
    dual_history: np.ndarray | None = None
    order: list = field(default_factory=list)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "avg_loss", "avg_max_g", "violations", "lambda_max"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.avg_loss), repr(r.avg_max_g), r.violations, repr(r.lambda_max)])

    def dual_to_csv(self, path):
        if self.dual_history is None:
            return
        n2 = self.dual_history.shape[1]
        n = n2 // 2
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration"] + [f"up_{i + 1}" for i in range(n)] + [f"lo_{i + 1}" for i in range(n)])
            for k, row in enumerate(self.dual_history):
                w.writerow([k] + [repr(float(x)) for x in row])


@dataclass
class TrainResult:
    params: object
    dual: np.ndarray
    trace: TrainingTrace


def evaluate_set(params, obj):
    """Mean loss, mean constraint vector and count of scenarios with a violated limit."""
    K = len(obj.w_u)
    losses = np.empty(K)
    gs = np.empty((K, 2 * obj.n))
    for k in range(K):
        q = inverter_setpoints(params, obj.w_u[k], obj.w_local[k])
        losses[k] = obj.loss(k, q)
        gs[k] = obj.g(k, q)
    return float(losses.mean()), gs.mean(axis=0), int(np.sum(np.any(gs > 0, axis=1)))


def train(scenarios, params, model, cfg=None, dual0=None):
    """Run ``cfg.epochs`` passes of stochastic primal-dual updates.

    ``params`` is either a starting PolicyParams or an Architecture, in which
    case parameters are drawn by ``init_params(arch, cfg.seed)``.
    ``dual0`` defaults to zeros.  With ``cfg.freeze_dual`` the multipliers
    stay at ``dual0`` (penalty-method training).
    """
    cfg = cfg or TrainConfig()
    if isinstance(params, Architecture):
        params = init_params(params, cfg.seed)
    obj = _Objective(model, params.arch, scenarios)
    K = len(scenarios)
    n = model.n
    lam = np.zeros(2 * n) if dual0 is None else np.asarray(dual0, dtype=float).copy()
    if lam.shape != (2 * n,) or np.any(lam < 0):
        raise ContractError("initial multipliers must be a nonnegative 2N-vector")
    theta = params.theta.copy()
    state = AdamState.zeros_like(theta)
    arch = params.arch
    cur = params.copy()
    trace = TrainingTrace()
    n_batches = -(-K // cfg.batch_size)
    history = np.empty((cfg.epochs * n_batches, 2 * n)) if cfg.record_dual else None
    it = 0
    order = np.arange(K)
    for epoch in range(cfg.epochs):
        if epoch == 0 or cfg.reshuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(K)
        trace.order.append(order.tolist())
        for start in range(0, K, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            cur.theta = theta
            grad = np.zeros_like(theta)
            for k in batch:
                grad += obj.grad(cur, k, lam)
            grad /= len(batch)
            theta, state = primal_step(
                theta, state, grad, cfg, where=f"epoch {epoch}, iteration {it}, scenario {int(batch[0])}"
            )
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"non-finite parameters at iteration {it}", trace)
            if not cfg.freeze_dual:
                cur.theta = theta
                g = np.zeros(2 * n)
                for k in batch:
                    g += obj.g(k, inverter_setpoints(cur, obj.w_u[k], obj.w_local[k]))
                with np.errstate(over="ignore", invalid="ignore"):
                    lam = dual_step(lam, g / len(batch), it, cfg)
                if not np.all(np.isfinite(lam)) or lam.max() > DIVERGENCE_DUAL:
                    trace.dual_history = history[:it] if history is not None else None
                    raise DivergenceError(f"multipliers blew up at iteration {it} (max {lam.max():.3g})", trace)
            if history is not None:
                history[it] = lam
            it += 1
        cur.theta = theta
        avg_loss, avg_g, viol = evaluate_set(cur, obj)
        rec = EpochRecord(
            epoch + 1, avg_loss, float(avg_g.max()), viol, float(lam.max()), float(np.max(np.abs(lam * avg_g)))
        )
        trace.epochs.append(rec)
        logger.debug("epoch %d loss %.6g max avg g %.3g lambda max %.4g", rec.epoch, avg_loss, rec.avg_max_g, rec.lambda_max)
        if not np.isfinite(avg_loss) or abs(avg_loss) > DIVERGENCE_LOSS:
            trace.dual_history = history[:it] if history is not None else None
            raise DivergenceError(f"average loss {avg_loss:.3g} at epoch {epoch + 1}", trace)
    trace.dual_history = history
    out = type(params)(arch, theta, dict(params.metadata))
    return TrainResult(out, lam, trace)
