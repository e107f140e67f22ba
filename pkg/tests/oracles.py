"""Independent reference implementations used only as test oracles.

These deliberately avoid the library code paths (and numpy.linalg.svd,
which backs the production SVD): singular values come from a hand-rolled
one-sided Jacobi sweep, quantization codes from literal nearest-neighbor
loops, and attention from the direct definition.
"""

import math

import numpy as np


def jacobi_svd(m, sweeps: int = 60, tol: float = 1e-14):
    """One-sided Jacobi SVD: returns (u, sigma, vt) with sigma descending.

    Orthogonalizes the columns of m by plane rotations; reliable for the
    small dense matrices used in tests.
    """
    a = np.array(m, dtype=np.float64)
    rows, cols = a.shape
    transposed = False
    if rows < cols:
        a = a.T
        rows, cols = cols, rows
        transposed = True

    v = np.eye(cols)
    for _ in range(sweeps):
        off = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                apq = float(a[:, p] @ a[:, q])
                app = float(a[:, p] @ a[:, p])
                aqq = float(a[:, q] @ a[:, q])
                off = max(off, abs(apq) / math.sqrt(app * aqq) if app * aqq > 0 else 0.0)
                if apq == 0.0:
                    continue
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ap = a[:, p].copy()
                a[:, p] = c * ap - s * a[:, q]
                a[:, q] = s * ap + c * a[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off < tol:
            break

    sigma = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-sigma)
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    for j in range(cols):
        if sigma[j] > 0:
            u[:, j] = a[:, j] / sigma[j]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def singular_values(m) -> np.ndarray:
    return jacobi_svd(m)[1]


def nearest_level_codes(block, levels):
    """Literal nearest-neighbor search; ties resolve to the lower index."""
    codes = []
    for value in block:
        best_idx, best_dist = 0, abs(value - levels[0])
        for i in range(1, len(levels)):
            dist = abs(value - levels[i])
            if dist < best_dist:
                best_idx, best_dist = i, dist
        codes.append(best_idx)
    return codes


def int8_codes(block, scale):
    """Brute-force nearest int8 code for each element."""
    codes = []
    for value in block:
        best_code, best_err = -127, abs(value - (-127) * scale / 127.0)
        for code in range(-126, 128):
            err = abs(value - code * scale / 127.0)
            if err < best_err:
                best_code, best_err = code, err
        codes.append(best_code)
    return codes


def reference_attention(q, k, v):
    """Direct definition, computed row by row with python loops."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n, d = q.shape
    m = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = np.array([float(q[i] @ k[j]) / math.sqrt(d) for j in range(m)])
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum()
        for j in range(m):
            out[i] += weights[j] * v[j]
    return out


def brute_force_placement(layers, devices, estimate):
    """Enumerate every assignment; returns (best_latency, best_assignment).

    Memory-feasible assignments only; None when nothing fits. Ties keep the
    lexicographically smallest device-index tuple.
    """
    import itertools

    n = len(layers)
    best = None
    best_assign = None
    for assign in itertools.product(range(len(devices)), repeat=n):
        used = {}
        ok = True
        for i, d in enumerate(assign):
            used[d] = used.get(d, 0) + layers[i].weight_bytes
            if used[d] > devices[d].memory_bytes:
                ok = False
                break
        if not ok:
            continue
        latency = estimate(list(assign), layers, devices)
        key = (latency, assign)
        if best is None or key < (best, best_assign):
            best, best_assign = latency, assign
    if best is None:
        return None, None
    return best, list(best_assign)
