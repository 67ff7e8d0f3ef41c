"""Pure-numpy reference versions of the hot kernels.

Signatures match ``_core.pyx``.  ``layout`` is an int64 table with one row
per dense layer: ``(n_in, n_out, tanh?, weight_offset, bias_offset)``.
Rows ``[0, n_util)`` are the utility sub-network; inverter ``m`` owns rows
``n_util + m * n_inv + [0, n_inv)``.
"""

import numpy as np

# largest double below 1; keeps tanh outputs strictly inside (-1, 1)
TANH_MAX = float(np.nextafter(1.0, 0.0))


def _rows(layout):
    return [tuple(r) for r in np.asarray(layout).tolist()]


def _net_forward(theta, rows, x):
    hs = [x]
    for nin, nout, act, wo, bo in rows:
        a = theta[wo : wo + nin * nout].reshape(nout, nin) @ hs[-1] + theta[bo : bo + nout]
        hs.append(np.clip(np.tanh(a), -TANH_MAX, TANH_MAX) if act else a)
    return hs


def _net_backward(theta, rows, hs, g, grad):
    for j in range(len(rows) - 1, -1, -1):
        nin, nout, act, wo, bo = rows[j]
        if act:
            g = g * (1.0 - hs[j + 1] ** 2)
        grad[wo : wo + nin * nout] += np.outer(g, hs[j]).ravel()
        grad[bo : bo + nout] += g
        g = theta[wo : wo + nin * nout].reshape(nout, nin).T @ g
    return g


def forward(theta, layout, n_util, n_inv, w_u, w_local, qbar):
    """Return ``(u, q)`` with ``q[m] = qbar[m] * tanh(...)`` for each inverter."""
    rows = _rows(layout)
    u = _net_forward(theta, rows[:n_util], w_u)[-1]
    m_count = w_local.shape[0]
    q = np.empty(m_count)
    for m in range(m_count):
        sub = rows[n_util + m * n_inv : n_util + (m + 1) * n_inv]
        out = _net_forward(theta, sub, np.concatenate([u, w_local[m]]))[-1]
        q[m] = qbar[m] * out[0]
    return u, q


def vjp(theta, layout, n_util, n_inv, w_u, w_local, qbar, cot):
    """Return ``(q, grad)`` where ``grad = (dq/dtheta)^T cot``."""
    rows = _rows(layout)
    util_rows = rows[:n_util]
    hu = _net_forward(theta, util_rows, w_u)
    u = hu[-1]
    d_u = u.shape[0]
    grad = np.zeros(theta.shape[0])
    du = np.zeros(d_u)
    m_count = w_local.shape[0]
    q = np.empty(m_count)
    for m in range(m_count):
        sub = rows[n_util + m * n_inv : n_util + (m + 1) * n_inv]
        hs = _net_forward(theta, sub, np.concatenate([u, w_local[m]]))
        q[m] = qbar[m] * hs[-1][0]
        gin = _net_backward(theta, sub, hs, np.array([cot[m] * qbar[m]]), grad)
        du += gin[:d_u]
    _net_backward(theta, util_rows, hu, du, grad)
    return q, grad


def box_qp(H, c, lo, hi, x0, step, tol, max_iter):
    """Projected gradient on ``0.5 x'Hx + c'x`` over ``lo <= x <= hi``.

    Returns ``(x, iterations, residual)`` where the residual is
    ``max |x - clip(x - grad)|`` at the returned point.
    """
    x = np.clip(x0, lo, hi)
    it = 0
    while True:
        grad = H @ x + c
        res = float(np.max(np.abs(x - np.clip(x - grad, lo, hi)), initial=0.0))
        if res < tol or it >= max_iter:
            return x, it, res
        x = np.clip(x - step * grad, lo, hi)
        it += 1
