"""Fused loops for the two per-iteration hot spots of the sampler."""

import numpy as np
from numba import njit


@njit(cache=True)
def sample_allocations(item_ll, logpi, V, xi, z, use_outcome, u):
    """Draw c_i from softmax_k(item_ll[i, k] + logpi[k] - (z_i - v_i'xi_k)^2 / 2).

    ``u`` holds one uniform per individual; inverse-CDF selection.
    """
    n, K = item_ll.shape
    q = V.shape[1]
    out = np.empty(n, dtype=np.int64)
    buf = np.empty(K)
    for i in range(n):
        best = -np.inf
        for k in range(K):
            val = item_ll[i, k] + logpi[k]
            if use_outcome:
                eta = 0.0
                for col in range(q):
                    eta += V[i, col] * xi[k, col]
                r = z[i] - eta
                val -= 0.5 * r * r
            buf[k] = val
            if val > best:
                best = val
        if not np.isfinite(best):
            return out, i
        total = 0.0
        for k in range(K):
            d = buf[k] - best
            # exp(-60) is below double resolution relative to the max term
            buf[k] = np.exp(d) if d > -60.0 else 0.0
            total += buf[k]
        target = u[i] * total
        acc = 0.0
        chosen = K - 1
        for k in range(K):
            acc += buf[k]
            if target < acc:
                chosen = k
                break
        out[i] = chosen
    return out, -1


@njit(cache=True)
def weighted_cell_counts(cell, c, w, n_cells, K):
    """counts[cell[i, j], c_i] += w_i over all individuals and items."""
    n, J = cell.shape
    counts = np.zeros((n_cells, K))
    for i in range(n):
        k = c[i]
        wi = w[i]
        for j in range(J):
            counts[cell[i, j], k] += wi
    return counts
