"""Compiled inner loops for single-site Metropolis.

Random numbers are drawn by the caller (numpy ``Generator``) and passed in, so
the stream, and therefore every result, depends only on the seed and never on
how work is split across threads.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def metropolis_block(phi, wm, mu, lam, a, free, widths, normals, uniforms, accepted, out, thin):
    """Run ``normals.shape[0]`` sweeps over the ``free`` sites in order.

    ``phi`` is updated in place. If ``thin > 0`` the state after every
    ``thin``-th sweep is copied into consecutive rows of ``out``.
    """
    n_sweeps = normals.shape[0]
    n_free = free.shape[0]
    v = phi.shape[0]
    row = 0
    for s in range(n_sweeps):
        for k in range(n_free):
            i = free[k]
            old = phi[i]
            new = old + widths[k] * normals[s, k]
            h = 0.0
            for j in range(v):
                h += wm[i, j] * phi[j]
            d = new - old
            o2 = old * old
            n2 = new * new
            ds = -d * h + mu[i] * (n2 - o2) + lam[i] * (n2 * n2 - o2 * o2) - a[i] * d
            if ds <= 0.0 or uniforms[s, k] < math.exp(-ds):
                phi[i] = new
                accepted[k] += 1
        if thin > 0 and (s + 1) % thin == 0:
            for j in range(v):
                out[row, j] = phi[j]
            row += 1
    return row


def warmup():
    """Trigger compilation with a tiny problem."""
    phi = np.zeros(2)
    metropolis_block(
        phi,
        np.zeros((2, 2)),
        np.ones(2),
        np.ones(2),
        np.zeros(2),
        np.arange(2, dtype=np.int64),
        np.ones(2),
        np.zeros((1, 2)),
        np.ones((1, 2)),
        np.zeros(2, dtype=np.int64),
        np.zeros((1, 2)),
        1,
    )
