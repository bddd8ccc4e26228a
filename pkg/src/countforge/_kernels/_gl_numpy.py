"""Pure-numpy solver core for the unbalanced entropic transport loss.

Minimizes, over plans P >= 0 with log-domain scaling iterations,

    <C, P> + eps * sum(P * (log P - 1))
    + tau * ||P 1_m - a||_2^2 + tau * ||P^T 1_n - 1_m||_1

The dual block updates are exact: the column step has a closed form
clamped to [-tau, tau] (conjugate of the L1 penalty is a box constraint),
the row step solves eps*w + 2*tau*exp(w) = eps*log(k_i) + 2*tau*a_i per
row by a safeguarded Newton iteration in w = log(row mass).  All kernel
arithmetic stays in log space; exp(-C/eps) underflows long before any
quantity handled here does.
"""

from __future__ import annotations

import numpy as np

_NEWTON_STEPS = 60
_W_MAX = 709.0  # exp() overflow guard


def _logsumexp(arr: np.ndarray, axis: int) -> np.ndarray:
    mx = arr.max(axis=axis, keepdims=True)
    out = np.log(np.exp(arr - mx).sum(axis=axis)) + mx.squeeze(axis=axis)
    return out


def solve(
    C: np.ndarray,
    a: np.ndarray,
    eps: float,
    tau: float,
    max_iters: int,
    tol: float,
):
    """Returns (objective, plan, iterations, converged); requires m >= 1."""
    n, m = C.shape
    u = np.zeros(n)
    v = np.zeros(m)
    Ce = C / eps
    two_tau = 2.0 * tau
    obj_prev = np.inf
    obj = np.inf
    P = np.zeros((n, m))
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        # column block: unconstrained optimum enforces unit column mass,
        # then the L1 conjugate box clamps the potential at +-tau
        logq = _logsumexp(u[:, None] / eps - Ce, axis=0)
        v = np.clip(-eps * logq, -tau, tau)

        # row block: Newton in w = log(row mass)
        L = _logsumexp(v[None, :] / eps - Ce, axis=1)
        c = eps * L + two_tau * a
        w = np.minimum(c / eps, 0.0)
        for _ in range(_NEWTON_STEPS):
            ew = np.exp(w)
            h = eps * w + two_tau * ew - c
            if np.all(np.abs(h) <= 1e-13 * np.maximum(1.0, np.abs(c))):
                break
            w = np.minimum(w - h / (eps + two_tau * ew), _W_MAX)
        u = eps * (w - L)

        logP = (u[:, None] + v[None, :]) / eps - Ce
        P = np.exp(logP)
        rows = P.sum(axis=1)
        cols = P.sum(axis=0)
        obj = float(
            (C * P).sum()
            + eps * (P * (logP - 1.0)).sum()
            + tau * ((rows - a) ** 2).sum()
            + tau * np.abs(cols - 1.0).sum()
        )
        if abs(obj - obj_prev) <= tol * max(1.0, abs(obj)):
            converged = True
            break
        obj_prev = obj
    return obj, P, iters, converged
