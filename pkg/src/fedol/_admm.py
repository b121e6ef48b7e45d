"""Compiled inner loop of the fusion ADMM.

Splitting: ``Gamma = B`` carries the sparsity penalty and
``delta_kl = beta_k - beta_l`` the fusion penalty. Scaled duals are ``W``
(for ``Gamma``) and ``U`` (for ``delta``). All state arrays are updated in
place so the caller can warm-start the next call.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def admm_loop(B_bar, lam1, lam2, a, rho_q, th, max_iter, tol_p, tol_d, Gam, W, Dl, U, pi, pj):
    p, K = B_bar.shape
    P = pi.shape[0]
    c = rho_q + th + th * K
    coupling = th / (rho_q + th)
    firm = 1.0 - 1.0 / (a * th)
    B = np.empty((p, K))
    rhs = np.empty((p, K))
    z = np.empty(p)
    primal = np.inf
    dual = np.inf
    for it in range(1, max_iter + 1):
        for r in range(p):
            for k in range(K):
                rhs[r, k] = rho_q * B_bar[r, k] + th * (Gam[r, k] - W[r, k])
        for q in range(P):
            for r in range(p):
                v = th * (Dl[r, q] - U[r, q])
                rhs[r, pi[q]] += v
                rhs[r, pj[q]] -= v
        for r in range(p):
            s = 0.0
            for k in range(K):
                s += rhs[r, k]
            for k in range(K):
                B[r, k] = (rhs[r, k] + coupling * s) / c

        primal = 0.0
        dgam = 0.0
        for r in range(p):
            for k in range(K):
                v = B[r, k] + W[r, k]
                g = v
                if lam1 > 0.0 and abs(v) <= a * lam1:
                    m = abs(v) - lam1 / th
                    g = math.copysign(m / firm, v) if m > 0.0 else 0.0
                dgam = max(dgam, abs(g - Gam[r, k]))
                rg = B[r, k] - g
                W[r, k] += rg
                primal = max(primal, abs(rg))
                Gam[r, k] = g

        ddel = 0.0
        for q in range(P):
            nz = 0.0
            for r in range(p):
                z[r] = B[r, pi[q]] - B[r, pj[q]] + U[r, q]
                nz += z[r] * z[r]
            nz = math.sqrt(nz)
            scale = 1.0
            if nz <= a * lam2:
                scale = max(1.0 - lam2 / (th * nz), 0.0) / firm if nz > 0.0 else 0.0
            rr = 0.0
            dd = 0.0
            for r in range(p):
                new = z[r] * scale
                res = B[r, pi[q]] - B[r, pj[q]] - new
                U[r, q] += res
                rr += res * res
                dd += (new - Dl[r, q]) ** 2
                Dl[r, q] = new
            primal = max(primal, math.sqrt(rr))
            ddel = max(ddel, math.sqrt(dd))
        dual = th * max(dgam, ddel)
        if primal <= tol_p and dual <= tol_d:
            return it, True, primal, dual
    return max_iter, False, primal, dual
