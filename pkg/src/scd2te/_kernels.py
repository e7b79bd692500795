"""Compiled inner loops for convolutional sparse coding.

Geometry conventions shared by all kernels:

* atoms are stored as ``(side, side, count)`` with the filter centred on the
  pixel that owns the code, radius ``r = side // 2``;
* ``rmap``/``cmap`` map padded coordinates ``0 .. n + 2r - 1`` back into the
  image under symmetric reflection without edge repetition (numpy's
  ``mode="reflect"``), so stamping through them is the exact adjoint of patch
  extraction.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def reflect_index(k, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    k = k % period
    if k < 0:
        k += period
    if k >= n:
        k = period - k
    return k


@njit(cache=True, nogil=True)
def reflect_map(n, r):
    out = np.empty(n + 2 * r, dtype=np.int64)
    for k in range(n + 2 * r):
        out[k] = reflect_index(k - r, n)
    return out


@njit(cache=True, nogil=True)
def folded_norms2(atoms, weight, uniform, rmap, cmap):
    """Squared norm of every weighted, folded atom placement ``W p_i^T d_k``.

    ``uniform`` asserts that ``weight`` is all ones, enabling the interior
    shortcut.
    """
    h, w = weight.shape
    side = atoms.shape[0]
    c = atoms.shape[2]
    r = side // 2
    out = np.empty((h, w, c))
    base = np.zeros(c)
    for k in range(c):
        s = 0.0
        for u in range(side):
            for v in range(side):
                s += atoms[u, v, k] * atoms[u, v, k]
        base[k] = s
    scratch = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            interior = uniform and i >= r and i < h - r and j >= r and j < w - r
            for k in range(c):
                if interior:
                    out[i, j, k] = base[k]
                    continue
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        scratch[pu, cmap[j + v]] += atoms[u, v, k]
                s = 0.0
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        pv = cmap[j + v]
                        val = scratch[pu, pv] * weight[pu, pv]
                        scratch[pu, pv] = 0.0
                        if val != 0.0:
                            s += val * val
                out[i, j, k] = s
    return out


@njit(cache=True, nogil=True)
def objective(res, codes, lam):
    return 0.5 * np.sum(res * res) + lam * np.sum(np.abs(codes))


@njit(cache=True, nogil=True)
def cd_sweeps(atoms, lam, codes, res, weight, norms2, frozen, max_iters, tol, rmap, cmap):
    """Cyclic coordinate descent over (pixel, atom) with exact line minimisation.

    ``codes`` and ``res`` (= weight * (x - reconstruction)) are updated in
    place; ``weight`` is a 0/1 mask restricting the data term.
    Returns the objective before the first sweep followed by one value per
    completed sweep.
    """
    h, w, c = codes.shape
    side = atoms.shape[0]
    r = side // 2
    trace = np.empty(max_iters + 1)
    trace[0] = objective(res, codes, lam)
    n_done = 0
    for it in range(max_iters):
        changed = 0
        for i in range(h):
            for j in range(w):
                interior = i >= r and i < h - r and j >= r and j < w - r
                for k in range(c):
                    if frozen[i, j, k]:
                        continue
                    n2 = norms2[i, j, k]
                    if n2 <= 0.0:
                        continue
                    corr = 0.0
                    if interior:
                        for u in range(side):
                            for v in range(side):
                                corr += atoms[u, v, k] * res[i - r + u, j - r + v]
                    else:
                        for u in range(side):
                            pu = rmap[i + u]
                            for v in range(side):
                                corr += atoms[u, v, k] * res[pu, cmap[j + v]]
                    a = codes[i, j, k]
                    z = a + corr / n2
                    thr = lam / n2
                    if z > thr:
                        anew = z - thr
                    elif z < -thr:
                        anew = z + thr
                    else:
                        anew = 0.0
                    delta = anew - a
                    if delta == 0.0:
                        continue
                    changed += 1
                    codes[i, j, k] = anew
                    if interior:
                        for u in range(side):
                            for v in range(side):
                                y = i - r + u
                                x = j - r + v
                                res[y, x] -= delta * atoms[u, v, k] * weight[y, x]
                    else:
                        for u in range(side):
                            pu = rmap[i + u]
                            for v in range(side):
                                pv = cmap[j + v]
                                res[pu, pv] -= delta * atoms[u, v, k] * weight[pu, pv]
        n_done = it + 1
        cur = objective(res, codes, lam)
        prev = trace[it]
        trace[it + 1] = cur
        if changed == 0:
            break
        if prev - cur <= tol * max(abs(prev), 1e-300):
            break
    return trace[: n_done + 1]


@njit(cache=True, nogil=True)
def stamp(codes, atoms, rmap, cmap):
    """Superpose every ``a_{i,k} d_k`` at its pixel, folding by reflection."""
    h, w, c = codes.shape
    side = atoms.shape[0]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                a = codes[i, j, k]
                if a == 0.0:
                    continue
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        out[pu, cmap[j + v]] += a * atoms[u, v, k]
    return out


@njit(cache=True, nogil=True)
def correlations(res, atoms, rmap, cmap):
    """``<p_i^T d_k, res>`` for every pixel and atom."""
    h, w = res.shape
    side = atoms.shape[0]
    c = atoms.shape[2]
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                s = 0.0
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        s += atoms[u, v, k] * res[pu, cmap[j + v]]
                out[i, j, k] = s
    return out


@njit(cache=True, nogil=True)
def code_residual_products(codes, res, side, rmap, cmap):
    """Sum over pixels of ``a_{i,k} * p_i res``; the negated atom gradient."""
    h, w, c = codes.shape
    out = np.zeros((side, side, c))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                a = codes[i, j, k]
                if a == 0.0:
                    continue
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        out[u, v, k] += a * res[pu, cmap[j + v]]
    return out


@njit(cache=True, nogil=True)
def atom_normal_equations(codes, target, weight, k, side):
    """Normal equations of ``min_f sum_p weight_p (target_p - (a_k * f)_p)^2``.

    Only pixels with non-zero weight whose full window lies inside the grid
    contribute, so no boundary folding is involved.
    """
    h, w, _ = codes.shape
    r = side // 2
    n = side * side
    hess = np.zeros((n, n))
    rhs = np.zeros(n)
    idx = np.empty(n, dtype=np.int64)
    val = np.empty(n)
    for py in range(r, h - r):
        for px in range(r, w - r):
            if weight[py, px] == 0.0:
                continue
            m = 0
            for u in range(side):
                for v in range(side):
                    a = codes[py - u + r, px - v + r, k]
                    if a != 0.0:
                        idx[m] = u * side + v
                        val[m] = a
                        m += 1
            t = target[py, px]
            for q in range(m):
                rhs[idx[q]] += val[q] * t
                for q2 in range(m):
                    hess[idx[q], idx[q2]] += val[q] * val[q2]
    return hess, rhs


@njit(cache=True, nogil=True)
def stamp_components(codes, atoms, rmap, cmap):
    """Per-atom superposition: channel k holds ``sum_i p_i^T d_k a_{i,k}``."""
    h, w, c = codes.shape
    side = atoms.shape[0]
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            for k in range(c):
                a = codes[i, j, k]
                if a == 0.0:
                    continue
                for u in range(side):
                    pu = rmap[i + u]
                    for v in range(side):
                        out[pu, cmap[j + v], k] += a * atoms[u, v, k]
    return out
