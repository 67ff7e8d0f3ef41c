"""Reference controllers: per-scenario OPF, the unparameterized optimal policy, and no control.

All solvers work on the inverter coordinates only; buses without an
inverter have ``qbar = 0`` and their setpoint is fixed at zero.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DivergenceError, InfeasibleError

logger = logging.getLogger(__name__)

PSD_TOL = -1e-10
QP_TOL = 1e-8
QP_MAX_ITER = 100_000


@dataclass
class QPInstance:
    """``min q'Rq - b'q + lam' g(q)`` over ``|q_n| <= qbar_n`` for one scenario."""

    R: np.ndarray
    X: np.ndarray
    b: np.ndarray
    y: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    qbar: np.ndarray

    def __post_init__(self):
        n = np.shape(self.b)[0]
        for name in ("R", "X"):
            if np.shape(getattr(self, name)) != (n, n):
                raise ContractError(f"{name} must be {n}x{n}")
        for name in ("y", "v_lo", "v_hi", "qbar"):
            if np.shape(getattr(self, name)) != (n,):
                raise ContractError(f"{name} must have length {n}")
        if np.any(self.qbar < 0):
            raise ContractError("qbar must be nonnegative")
        self.active = np.flatnonzero(self.qbar > 0)
        S = self.active
        self.R_ss = np.ascontiguousarray(self.R[np.ix_(S, S)])
        eig = np.linalg.eigvalsh(self.R) if n else np.zeros(0)
        if eig.size and eig.min() < PSD_TOL:
            raise ContractError(f"R is not positive semidefinite (min eigenvalue {eig.min():.3g})")
        lmax = np.linalg.eigvalsh(self.R_ss).max() if S.size else 0.0
        self.step = 1.0 / (2.0 * lmax + 1e-12)
        self.H = np.ascontiguousarray(2.0 * self.R_ss)
        self.X_cols = np.ascontiguousarray(self.X[:, S])

    @classmethod
    def from_scenario(cls, model, z):
        ctx = model.context(z)
        return cls(
            model.sens.R,
            model.sens.X,
            ctx.b,
            ctx.y,
            model.limits.v_lo,
            model.limits.v_hi,
            model.topology.qbar,
        )

    @property
    def n(self):
        return self.b.shape[0]

    def linear_term(self, lam=None):
        """Linear coefficient over the active coordinates: ``-b + X (lam_up - lam_lo)``."""
        c = -self.b[self.active]
        if lam is not None:
            n = self.n
            c = c + self.X_cols.T @ (lam[:n] - lam[n:])
        return np.ascontiguousarray(c)

    def objective(self, q, lam=None):
        val = q @ self.R @ q - self.b @ q
        if lam is not None:
            val += lam @ self.g(q)
        return float(val)

    def g(self, q):
        v = self.X @ q + self.y
        return np.concatenate([v - self.v_hi, self.v_lo - v])

    def expand(self, q_active):
        q = np.zeros(self.n)
        q[self.active] = q_active
        return q


def solve_box_qp(inst, lam=None, x0=None, tol=QP_TOL, max_iter=QP_MAX_ITER, full_output=False, record=False):
    """Minimize the (optionally dualized) scenario objective over the inverter box.

    Projected gradient with step ``1 / (2 lambda_max(R_SS))`` on the inverter
    block ``R_SS``.  Stops when ``max |q - clip(q - grad)| < tol``.

    Returns the full N-vector ``q``; with ``full_output`` also a dict with
    ``iterations``, ``residual``, ``converged`` and, when ``record`` is set,
    the objective value after every iteration under ``trace``.
    """
    if lam is not None:
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (2 * inst.n,) or np.any(lam < 0):
            raise ContractError("lam must be a nonnegative 2N-vector")
    S = inst.active
    c = inst.linear_term(lam)
    hi = np.ascontiguousarray(inst.qbar[S])
    lo = -hi
    x = np.zeros(S.size) if x0 is None else np.ascontiguousarray(np.asarray(x0, dtype=float)[S])
    trace = None
    if S.size == 0:
        x, it, res = x, 0, 0.0
    elif record:
        trace = [float(x @ inst.R_ss @ x + c @ x)]
        it, res = 0, np.inf
        while it < max_iter:
            x, step_it, res = _kernels.box_qp(inst.H, c, lo, hi, x, inst.step, tol, 1)
            if step_it == 0:
                break
            it += 1
            trace.append(float(x @ inst.R_ss @ x + c @ x))
    else:
        x, it, res = _kernels.box_qp(inst.H, c, lo, hi, x, inst.step, tol, max_iter)
    converged = res < tol
    if not converged:
        warnings.warn(f"box QP hit the iteration cap ({it}) with residual {res:.3g}", RuntimeWarning, stacklevel=2)
    q = inst.expand(x)
    if full_output:
        info = {"iterations": int(it), "residual": float(res), "converged": bool(converged)}
        if trace is not None:
            info["trace"] = trace
        return q, info
    return q


def no_control(z):
    """Unit power factor: every inverter injects zero reactive power."""
    return np.zeros(z.n)


# --------------------------------------------------------------------------
# deterministic OPF


@dataclass
class OPFResult:
    q: np.ndarray
    dual: np.ndarray
    active: list
    iterations: int
    kkt_residual: float
    feasible: bool


def _dual_lipschitz(inst):
    """Lipschitz constant of the dual gradient, ``||A R_SS^-1 A'|| / 2`` with ``A = [X_S; -X_S]``."""
    S = inst.active
    if S.size == 0:
        return 1.0
    # A R^-1 A' has the same nonzero spectrum as R^-1 A'A = 2 R^-1 X_S'X_S
    m = np.linalg.solve(inst.R_ss, 2.0 * inst.X_cols.T @ inst.X_cols)
    return max(float(np.max(np.abs(np.linalg.eigvals(m)))) / 2.0, 1e-12)


def deterministic_opf(z, model, tol=1e-8, max_iter=100_000, dual_bound=1e8, inner_tol=1e-11):
    """Solve the per-scenario OPF exactly by accelerated projected ascent on the dual.

    The inner minimization over the box is ``solve_box_qp``.  Ascent uses
    the step ``1/L`` with ``L`` the Lipschitz constant of the dual gradient
    and adaptive restart.  Stops when ``max |lam - [lam + g]_+| < tol``.

    Infeasibility is detected heuristically: the dual iterate exceeds
    ``dual_bound`` while the worst constraint stays positive.  The raised
    InfeasibleError carries the last primal iterate in ``.q``.
    """
    inst = QPInstance.from_scenario(model, z)
    n = inst.n
    step = 1.0 / _dual_lipschitz(inst)
    lam = np.zeros(2 * n)
    mom = lam.copy()
    t = 1.0
    q = solve_box_qp(inst, lam, tol=inner_tol)
    g = inst.g(q)
    res = float(np.max(np.abs(lam - np.maximum(lam + g, 0.0))))
    it = 0
    while res >= tol and it < max_iter:
        qm = solve_box_qp(inst, mom, x0=q, tol=inner_tol)
        gm = inst.g(qm)
        lam_new = np.maximum(mom + step * gm, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # restart momentum when the step points against the last move
        if gm @ (lam_new - lam) < 0:
            t_new = 1.0
            mom = lam_new
        else:
            mom = np.maximum(lam_new + ((t - 1.0) / t_new) * (lam_new - lam), 0.0)
        lam, t = lam_new, t_new
        q = solve_box_qp(inst, lam, x0=qm, tol=inner_tol)
        g = inst.g(q)
        res = float(np.max(np.abs(lam - np.maximum(lam + g, 0.0))))
        it += 1
        if lam.max() > dual_bound:
            err = InfeasibleError(
                f"dual iterate exceeded {dual_bound:g} with max constraint {g.max():.3g} pu; OPF looks infeasible"
            )
            err.q = q
            raise err
    if res >= tol:
        warnings.warn(f"deterministic OPF stopped after {it} iterations with KKT residual {res:.3g}", RuntimeWarning, stacklevel=2)
    active = [
        (int(i % n) + 1, "upper" if i < n else "lower") for i in np.flatnonzero(lam > 0)
    ]
    return OPFResult(q, lam, active, it, res, bool(g.max() <= 1e-6))


# --------------------------------------------------------------------------
# optimal policy by dual decomposition


@dataclass(frozen=True)
class DualDecompConfig:
    iterations: int = 3000
    dual_step: float = 1.0
    dual_decay: float = 0.5
    inner_tol: float = QP_TOL

    def __post_init__(self):
        if self.iterations < 1 or not self.dual_step > 0 or self.dual_decay < 0:
            raise ContractError("invalid dual decomposition settings")


@dataclass
class OptimalPolicyState:
    dual: np.ndarray
    setpoints: np.ndarray
    iterations: int
    dual_history: np.ndarray
    residual_history: np.ndarray
    loss_history: np.ndarray = field(default=None)


def dual_decomposition(scenarios, model, cfg=None):
    """Setpoints solving the sample-average stochastic OPF with one shared multiplier vector.

    Each iteration solves every scenario's box QP for the current
    multipliers, then takes ``lam <- [lam + mu(k) avg_k g(q^k, z^k)]_+``
    with ``mu(k) = mu0 / (k + 1) ** decay``.
    """
    cfg = cfg or DualDecompConfig()
    if len(scenarios) == 0:
        raise ContractError("scenario set is empty")
    insts = [QPInstance.from_scenario(model, s.z) for s in scenarios]
    n = model.n
    lam = np.zeros(2 * n)
    qs = np.zeros((len(insts), n))
    lam_hist, res_hist, loss_hist = [], [], []
    it = 0
    for it in range(cfg.iterations):
        for k, inst in enumerate(insts):
            qs[k] = solve_box_qp(inst, lam, x0=qs[k], tol=cfg.inner_tol)
        g_avg = np.mean([inst.g(q) for inst, q in zip(insts, qs)], axis=0)
        loss = float(np.mean([inst.objective(q) for inst, q in zip(insts, qs)]))
        if not np.isfinite(loss) or abs(loss) > 1e6:
            raise DivergenceError(f"dual decomposition diverged at iteration {it} (loss {loss:.3g})")
        res_hist.append(float(max(0.0, g_avg.max())))
        loss_hist.append(loss)
        lam_new = np.maximum(0.0, lam + cfg.dual_step / (it + 1.0) ** cfg.dual_decay * g_avg)
        lam_hist.append(lam_new)
        if np.array_equal(lam_new, lam):
            # stationary: inner solutions would not change either
            lam = lam_new
            break
        lam = lam_new
    else:
        for k, inst in enumerate(insts):
            qs[k] = solve_box_qp(inst, lam, x0=qs[k], tol=cfg.inner_tol)
    return OptimalPolicyState(
        lam, qs, it + 1, np.array(lam_hist), np.array(res_hist), np.array(loss_hist)
    )
