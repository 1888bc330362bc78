"""Central finite-difference probes for gradient and Jacobian checking."""

from __future__ import annotations

import numpy as np


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x (1-D array)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of vector-valued f at x.

    Returns J with J[i, j] = d f_i / d x_j.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def rel_err(approx, exact, floor=1e-12):
    """Relative error ||approx - exact|| / max(||exact||, floor)."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    denom = max(float(np.linalg.norm(exact)), floor)
    return float(np.linalg.norm(approx - exact)) / denom
