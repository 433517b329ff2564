"""Compiled per-sample sweep for squared tensor-train layers.

Mirrors ``SirtLayer._sweep_numpy`` one sample at a time, which avoids the
per-call array overhead that dominates when the cross requests many small
batches. Cores are packed into zero-padded arrays; zero padding leaves every
contraction unchanged.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_LOG_CLIP = 700.0


def pack_layer(whitened, cores, nodes):
    """Zero-padded (d, rmax, nmax, rmax) arrays plus per-dim node counts."""
    d = len(cores)
    rmax = max(max(c.shape[0], c.shape[2]) for c in cores)
    nmax = max(len(x) for x in nodes)
    W = np.zeros((d, rmax, nmax, rmax))
    C = np.zeros((d, rmax, nmax, rmax))
    X = np.zeros((d, nmax))
    nn = np.zeros(d, dtype=np.int64)
    for k in range(d):
        rl, n, rr = cores[k].shape
        W[k, :rl, :n, :rr] = whitened[k]
        C[k, :rl, :n, :rr] = cores[k]
        X[k, :n] = nodes[k]
        X[k, n:] = nodes[k][-1]
        nn[k] = n
    return W, C, X, nn


@njit(cache=True)
def sweep(W, C, X, nn, log_tau, log_tail, data, inverse, upto, newton_iters, cdf_tol):
    m = data.shape[0]
    rmax = W.shape[1]
    nmax = W.shape[2]
    out = np.empty((m, upto))
    logf = np.zeros(m)
    for p in range(m):
        L = np.zeros(rmax)
        L[0] = 1.0
        s = 0.0
        a2 = np.empty(nmax)
        ab = np.empty(nmax)
        cum = np.empty(nmax)
        Wv = np.empty((nmax, rmax))
        Lnew = np.empty(rmax)
        acc = 0.0
        for k in range(upto):
            n = nn[k]
            for j in range(n):
                for b in range(rmax):
                    v = 0.0
                    for a in range(rmax):
                        v += L[a] * W[k, a, j, b]
                    Wv[j, b] = v
            for j in range(n):
                v = 0.0
                for b in range(rmax):
                    v += Wv[j, b] * Wv[j, b]
                a2[j] = v
            for j in range(n - 1):
                v = 0.0
                for b in range(rmax):
                    v += Wv[j, b] * Wv[j + 1, b]
                ab[j] = v
            lte = log_tau + log_tail[k] - 2.0 * s
            te = np.exp(min(lte, _LOG_CLIP))
            run = 0.0
            for j in range(n - 1):
                h = X[k, j + 1] - X[k, j]
                run += h * ((a2[j] + ab[j] + a2[j + 1]) / 3.0 + te)
                cum[j] = run
            total = cum[n - 2]
            xk = data[p, k]
            if inverse:
                target = xk * total
                i = 0
                while i < n - 2 and cum[i] < target:
                    i += 1
                before = cum[i - 1] if i > 0 else 0.0
                cell = cum[i] - before
                h = X[k, i + 1] - X[k, i]
                A = a2[i]
                B = a2[i + 1]
                AB = ab[i]
                rem = min(max(target - before, 0.0), cell)
                lo = 0.0
                hi = 1.0
                t = rem / cell if cell > 0 else 0.5
                tol = cdf_tol * total
                for _ in range(newton_iters):
                    t2 = t * t
                    t3 = t2 * t
                    val = h * (A * (t - t2 + t3 / 3.0) + AB * (t2 - 2.0 * t3 / 3.0)
                               + B * t3 / 3.0 + te * t) - rem
                    if abs(val) <= tol:
                        break
                    if val > 0:
                        hi = t
                    else:
                        lo = t
                    der = h * (A * (1 - t) ** 2 + 2 * AB * t * (1 - t) + B * t2 + te)
                    tn = t - val / der if der != 0 else np.nan
                    if not np.isfinite(tn) or tn <= lo or tn >= hi:
                        tn = 0.5 * (lo + hi)
                    t = tn
                t = min(max(t, 0.0), 1.0)
                out[p, k] = min(X[k, i] + t * h, X[k, n - 1])
            else:
                i = np.searchsorted(X[k, :n], xk, side="right") - 1
                i = min(max(i, 0), n - 2)
                h = X[k, i + 1] - X[k, i]
                t = min(max((xk - X[k, i]) / h, 0.0), 1.0)
                A = a2[i]
                B = a2[i + 1]
                AB = ab[i]
                before = cum[i - 1] if i > 0 else 0.0
                t2 = t * t
                t3 = t2 * t
                mass = h * (A * (t - t2 + t3 / 3.0) + AB * (t2 - 2.0 * t3 / 3.0)
                            + B * t3 / 3.0 + te * t)
                out[p, k] = min(max((before + mass) / total, 0.0), 1.0)
            w2 = A * (1 - t) ** 2 + 2 * AB * t * (1 - t) + B * t * t
            acc += np.log(max(w2, 0.0) + te) - np.log(total)
            nrm = 0.0
            for b in range(rmax):
                v = 0.0
                for a in range(rmax):
                    v += L[a] * ((1 - t) * C[k, a, i, b] + t * C[k, a, i + 1, b])
                Lnew[b] = v
                nrm += v * v
            nrm = np.sqrt(nrm)
            if nrm > 0:
                for b in range(rmax):
                    L[b] = Lnew[b] / nrm
                s += np.log(nrm)
            else:
                for b in range(rmax):
                    L[b] = 0.0
                s -= _LOG_CLIP
        logf[p] = acc
    return out, logf
