"""Pure numpy implementations of the backfitting kernels.

Signatures mirror the compiled module ``_ckernels`` exactly so the two are
interchangeable at import time.
"""
import numpy as np


def margin_sum(key, values, size):
    return np.bincount(key, weights=values, minlength=size).astype(np.float64, copy=False)


def block_update(key, w, u, z, beta, mu):
    """One Gauss-Seidel block step, in place on ``beta`` and ``mu``.

    Returns the largest absolute coefficient change.
    """
    s = np.bincount(key, weights=w * mu, minlength=beta.shape[0])
    delta = np.zeros_like(beta)
    pos = z > 0
    delta[pos] = (u[pos] - s[pos]) / z[pos]
    beta += delta
    mu += delta[key]
    if delta.size == 0:
        return 0.0
    return float(np.max(np.abs(delta)))


def gather_add(out, beta, key):
    out += beta[key]


def wpls_objective(y, n, mu, prior, lam):
    r = y - mu
    total = float(np.dot(n * r, r))
    if lam != 0.0:
        d = mu - prior
        total += lam * float(np.dot(d, d))
    return total
