"""Compiled per-path loops for the surface simulators.

All kernels are pure functions of their array arguments and release the GIL,
so path chunks can be processed on worker threads.
"""
import math

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def hjm_mult_run(lam, zeta, b_levels, b_idx, dW, k0, dt, slots,
                 rows, tails, neg_mass, diag, surv, neg_count, cols, colvals):
    """Advance forward hazards lam[p, :] from node k0 over dW.shape[1] steps.

    For each node k0 + kk (kk = 0..K) records the diagonal density, the
    survival S_t, the cells ``cols[p, :]`` (sorted) into ``colvals`` and,
    when ``slots[kk] >= 0``, the full density row.  ``lam`` and ``zeta``
    are updated in place and hold the final state.
    """
    B, K = dW.shape
    N = lam.shape[1]
    L = b_levels.shape[0]
    C = cols.shape[1]
    fac = np.empty(L)
    for p in range(B):
        for kk in range(K + 1):
            k = k0 + kk
            if C > 0:
                acc = 0.0
                c = 0
                for j in range(N):
                    lj = max(lam[p, j], 0.0)
                    while c < C and cols[p, c] == j:
                        colvals[p, c, kk] = -math.exp(-acc * dt) * math.expm1(-lj * dt) / dt
                        c += 1
                    if c == C:
                        break
                    acc += lj
            slot = slots[kk]
            if slot >= 0:
                cum = 0.0
                neg = 0.0
                for j in range(N):
                    lj = lam[p, j]
                    s_j = math.exp(-cum * dt)
                    if lj < 0.0:
                        neg += s_j * (math.exp(-lj * dt) - 1.0)
                        lj = 0.0
                    rows[p, slot, j] = -s_j * math.expm1(-lj * dt) / dt
                    cum += lj
                tails[p, slot] = math.exp(-cum * dt)
                neg_mass[p, slot] = neg
            if kk == K:
                s = 0.0
                for j in range(N):
                    lj = lam[p, j]
                    if j < k and lj > 0.0:
                        s += lj
                    if lj < 0.0:
                        neg_count[p] += 1
                S = math.exp(-s * dt)
                surv[p, kk] = S
                if k < N:
                    lk = max(lam[p, k], 0.0)
                    diag[p, kk] = -S * math.expm1(-lk * dt) / dt
                else:
                    diag[p, kk] = np.nan
                break
            w = dW[p, kk]
            for l in range(L):
                bl = b_levels[l]
                fac[l] = math.exp(bl * w - 0.5 * bl * bl * dt)
            s = 0.0
            lk = 0.0
            cum = 0.0
            for j in range(N):
                lj = lam[p, j]
                if lj < 0.0:
                    neg_count[p] += 1
                if j < k:
                    if lj > 0.0:
                        s += lj
                elif j == k:
                    lk = max(lj, 0.0)
                l = b_idx[j]
                psi = -b_levels[l] * zeta[p, j]
                inc = psi * dt
                # cell average of Psi keeps sum_j psi*Psi*dtheta = Psi^2/2 exact
                psibar = cum + 0.5 * inc
                cum += inc
                lam[p, j] = lj + psi * (psibar * dt - w)
                zeta[p, j] *= fac[l]
            S = math.exp(-s * dt)
            surv[p, kk] = S
            if k < N:
                diag[p, kk] = -S * math.expm1(-lk * dt) / dt
            else:
                diag[p, kk] = np.nan


@nb.njit(cache=True, nogil=True)
def cox_outer(x, Lam, xi, mu, phi, sig_eps, dt, diag, surv, xs, Ls):
    """Exact OU stepping of x with piecewise-constant intensity exp(x).

    ``xi`` holds standard normals per step.  Writes the diagonal density and
    survival at every node plus the state (x, Lambda) at every node.
    """
    B, K = xi.shape
    for p in range(B):
        xp = x[p]
        lp = Lam[p]
        for kk in range(K + 1):
            S = math.exp(-lp)
            lam = math.exp(xp)
            surv[p, kk] = S
            diag[p, kk] = -S * math.expm1(-lam * dt) / dt
            xs[p, kk] = xp
            Ls[p, kk] = lp
            if kk < K:
                lp += lam * dt
                xp = mu + (xp - mu) * phi + sig_eps * xi[p, kk]
        x[p] = xp
        Lam[p] = lp


@nb.njit(cache=True, nogil=True)
def cox_inner(x0, L0, z, mu, phi, sig_eps, dt, cells, tails, se):
    """Nested conditional density of a Cox time on the remaining cells.

    From the state (x0[p], L0[p]) at node k, averages the cell masses of
    ``z.shape[1]`` inner continuations.  ``cells[p, j]`` is the estimate for
    cell k + j; ``se[p]`` the largest standard error over cells and tail.
    """
    B, m, n = z.shape
    acc = np.empty(n)
    acc2 = np.empty(n)
    for p in range(B):
        acc[:] = 0.0
        acc2[:] = 0.0
        tl = 0.0
        tl2 = 0.0
        for i in range(m):
            xp = x0[p]
            lp = L0[p]
            for j in range(n):
                lam = math.exp(xp)
                v = -math.exp(-lp) * math.expm1(-lam * dt) / dt
                acc[j] += v
                acc2[j] += v * v
                lp += lam * dt
                xp = mu + (xp - mu) * phi + sig_eps * z[p, i, j]
            v = math.exp(-lp)
            tl += v
            tl2 += v * v
        worst = 0.0
        for j in range(n):
            mean = acc[j] / m
            cells[p, j] = mean
            if m > 1:
                var = max(acc2[j] / m - mean * mean, 0.0) * m / (m - 1)
                worst = max(worst, math.sqrt(var / m) * dt)
        mean = tl / m
        tails[p] = mean
        if m > 1:
            var = max(tl2 / m - mean * mean, 0.0) * m / (m - 1)
            worst = max(worst, math.sqrt(var / m))
        se[p] = worst
