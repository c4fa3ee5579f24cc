"""Compiled RK4 kernel for long runs.

Mirrors ``dynamics._Stepper.rhs`` combined with ``controller.Controller.stage``
(or the open loop) for a piecewise-constant MPC output. The interpreted
route stays the reference; tests compare the two.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

OK = 0
NON_FINITE = 1


@njit(cache=True)
def delta_at(t, pieces):
    for k in range(pieces.shape[0]):
        s = pieces[k, 0]
        e = pieces[k, 1]
        if (s < t and t <= e) or (k == 0 and t == s):
            if pieces[k, 3] == 0.0:
                return pieces[k, 2]
            return pieces[k, 2] * math.sin(pieces[k, 4] * (t - pieces[k, 5]))
    return 0.0


@njit(cache=True)
def stage(t, y, net, law, dy, om, atl, alpha, uhat, p):
    D, b, E, M, p_nom, dmask, pieces = net
    ctrl, safe, eps, tau, lo, hi, tlo, thi, glo, ghi, u_in, active, has_bl, has_tl = law
    m, n = D.shape
    d = delta_at(t, pieces)
    for i in range(n):
        p[i] = p_nom[i] * (1.0 + d) if (dmask[i] > 0.0 and d != 0.0) else p_nom[i]
    torque = p.copy()
    for j in range(m):
        fl = b[j] * math.sin(y[j])
        for i in range(n):
            if D[j, i] != 0.0:
                torque[i] -= D[j, i] * fl
    # y layout: lam (m), omega on inertial buses, alpha_bl (n)
    nI = 0
    for i in range(n):
        if M[i] > 0.0:
            nI += 1
    off_al = m + nI
    k = m
    for i in range(n):
        bl = y[off_al + i] if (active and has_bl) else 0.0
        atl[i] = 0.0
        if M[i] > 0.0:
            om[i] = y[k]
            k += 1
        else:
            q = torque[i] + bl
            om[i] = q / E[i]
            if active and has_tl and safe[i] > 0.0:
                w = min(max(om[i], lo[i]), hi[i])
                om[i] = w
                atl[i] = E[i] * w - q
    for i in range(n):
        bl = y[off_al + i] if (active and has_bl) else 0.0
        if active and has_tl and safe[i] > 0.0 and M[i] > 0.0:
            w = om[i]
            v = E[i] * w - torque[i] - bl
            if w > thi[i]:
                atl[i] = min(0.0, ghi[i] * (hi[i] - w) / (w - thi[i]) + v)
            elif w < tlo[i]:
                atl[i] = max(0.0, glo[i] * (lo[i] - w) / (tlo[i] - w) + v)
        alpha[i] = atl[i] + bl
        if active and has_bl and ctrl[i] > 0.0:
            bound = eps[i] * abs(bl)
            uhat[i] = min(max(u_in[i], -bound), bound)
            dy[off_al + i] = -bl / tau[i] - om[i] + uhat[i]
        else:
            uhat[i] = 0.0
            dy[off_al + i] = 0.0
    for j in range(m):
        acc = 0.0
        for i in range(n):
            if D[j, i] != 0.0:
                acc += D[j, i] * om[i]
        dy[j] = acc
    k = m
    for i in range(n):
        if M[i] > 0.0:
            dy[k] = (torque[i] - E[i] * om[i] + alpha[i]) / M[i]
            k += 1


@njit(cache=True)
def run_chunk(y, k0, k1, dt, every, net, law, row, t_log, logs):
    """Advance ``y`` from step ``k0`` to ``k1``; logs stage-1 values when ``k % every == 0``.

    ``logs`` holds (lam, omega, alpha_bl, alpha_tl, alpha, u_in, u_hat, p).
    Returns ``(row, status)``.
    """
    L_lam, L_om, L_bl, L_tl, L_al, L_u, L_uh, L_p = logs
    m = L_lam.shape[1]
    n = L_om.shape[1]
    ny = y.shape[0]
    u_in = law[10]
    active = law[11]
    has_bl = law[12]
    k1v = np.empty(ny)
    k2v = np.empty(ny)
    k3v = np.empty(ny)
    k4v = np.empty(ny)
    tmp = np.empty(ny)
    om = np.empty(n)
    atl = np.empty(n)
    alpha = np.empty(n)
    uhat = np.empty(n)
    p = np.empty(n)
    half = 0.5 * dt
    for k in range(k0, k1):
        t = k * dt
        stage(t, y, net, law, k1v, om, atl, alpha, uhat, p)
        if k % every == 0:
            t_log[row] = t
            for j in range(m):
                L_lam[row, j] = y[j]
            for i in range(n):
                L_om[row, i] = om[i]
                L_bl[row, i] = y[ny - n + i]
                L_tl[row, i] = atl[i]
                L_al[row, i] = alpha[i]
                L_u[row, i] = u_in[i] if (active and has_bl) else 0.0
                L_uh[row, i] = uhat[i]
                L_p[row, i] = p[i]
            row += 1
        for q in range(ny):
            tmp[q] = y[q] + half * k1v[q]
        stage(t + half, tmp, net, law, k2v, om, atl, alpha, uhat, p)
        for q in range(ny):
            tmp[q] = y[q] + half * k2v[q]
        stage(t + half, tmp, net, law, k3v, om, atl, alpha, uhat, p)
        for q in range(ny):
            tmp[q] = y[q] + dt * k3v[q]
        stage(t + dt, tmp, net, law, k4v, om, atl, alpha, uhat, p)
        ok = True
        for q in range(ny):
            y[q] = y[q] + (dt / 6.0) * (k1v[q] + 2.0 * k2v[q] + 2.0 * k3v[q] + k4v[q])
            if not math.isfinite(y[q]):
                ok = False
        if not ok:
            return row, NON_FINITE
    return row, OK


def pack_net(ops, disturbance, net) -> tuple:
    if disturbance is not None and disturbance.buses and disturbance.pieces:
        pieces = np.array(
            [[q.start, q.stop, q.amplitude, 0.0 if q.shape == "const" else 1.0, q.rate, q.shift] for q in disturbance.pieces],
            dtype=np.float64,
        )
        dmask = np.zeros(ops.n)
        dmask[list(disturbance.buses)] = 1.0
    else:
        pieces = np.zeros((0, 6))
        dmask = np.zeros(ops.n)
    return (
        np.ascontiguousarray(ops.D, dtype=np.float64), ops.b.astype(np.float64), ops.E.astype(np.float64),
        ops.M.astype(np.float64), np.array(net.injection, dtype=np.float64), dmask, pieces,
    )


def open_loop_args(n: int) -> tuple:
    z = np.zeros(n)
    one = np.ones(n)
    return (z, z, z, one, -one, one, -one, one, one, one, z, 0, 0, 0)
