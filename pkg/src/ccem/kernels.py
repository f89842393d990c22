"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time: set CCEM_NO_NUMBA=1 (or leave numba
uninstalled) to force the numpy path. Both backends implement the same
formulas so results agree to the last ulp or two; the projection kernels agree
exactly because they perform the identical sequence of sorts, cumulative sums
and divisions per row.

Everything here is stateless and operates on float64 arrays.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("CCEM_NO_NUMBA", "") == ""

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        USE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _softplus_np(x):
    # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    # stable two-branch form sharing exp(-|x|) with softplus
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus_sigmoid_np(x):
    e = np.exp(-np.abs(x))
    sp = np.maximum(x, 0.0) + np.log1p(e)
    sg = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return sp, sg


def _project_simplex_rows_np(v):
    """Euclidean projection of each row of v onto the probability simplex.

    Sort-and-threshold: tau is the largest value such that sum(max(v-tau,0))=1.
    Returns (projection, active mask). The active mask is the face identified
    by the forward pass and is what the VJP differentiates through.
    """
    b, d = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    cs = np.cumsum(u, axis=1)
    k = np.arange(1, d + 1, dtype=np.float64)
    cond = u * k > (cs - 1.0)
    # rho = last index where cond holds (cond[0] always holds)
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = (cs[np.arange(b), rho] - 1.0) / (rho + 1.0)
    out = np.maximum(v - tau[:, None], 0.0)
    return out, out > 0.0


def _project_relaxed_simplex_rows_np(v):
    """Projection onto {y in [0,1]^d : sum(y) <= 1}, row-wise.

    If the box clamp already satisfies the sum constraint it is the projection
    (the constraints are separable there); otherwise the sum=1 face is active
    and the answer coincides with the simplex projection (entries of a simplex
    point never exceed 1 unless d == 1, and for d == 1 the clamp branch wins
    whenever v <= 1).

    Returns (projection, active mask, simplex branch flag per row).
    """
    clamped = np.clip(v, 0.0, 1.0)
    need_simplex = clamped.sum(axis=1) > 1.0
    out = clamped.copy()
    # clamp branch: active where the projection moved off neither bound,
    # limit-from-below convention keeps the upper kink (v == 1) active
    active = (v > 0.0) & (v <= 1.0)
    if np.any(need_simplex):
        sub, sub_active = _project_simplex_rows_np(v[need_simplex])
        out[need_simplex] = sub
        active[need_simplex] = sub_active
    return out, active, need_simplex


def _adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    """Decoupled-weight-decay Adam step, in place on (p, m, v)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


def _scatter_add_rows_np(out, idx, mask, g):
    """out[b, idx[k, j]] += g[b*K + k, j] * mask[k, j].

    Adjoint of the padded scope gather. out is (B, d), idx/mask are (K, dmax),
    g is (B*K, dmax).
    """
    bsz, d = out.shape
    kk, dmax = idx.shape
    gm = g.reshape(bsz, kk, dmax) * mask[None, :, :]
    flat = idx.ravel()
    np.add.at(out, (slice(None), flat), gm.reshape(bsz, kk * dmax))
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _softplus_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            a = xi if xi > 0.0 else 0.0
            out[i] = a + np.log1p(np.exp(-abs(xi)))
        return out.reshape(x.shape)

    @njit(cache=True)
    def _sigmoid_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            e = np.exp(-abs(xi))
            if xi >= 0.0:
                out[i] = 1.0 / (1.0 + e)
            else:
                out[i] = e / (1.0 + e)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _softplus_sigmoid_nb(x):
        flat = x.ravel()
        sp = np.empty_like(flat)
        sg = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            e = np.exp(-abs(xi))
            a = xi if xi > 0.0 else 0.0
            sp[i] = a + np.log1p(e)
            if xi >= 0.0:
                sg[i] = 1.0 / (1.0 + e)
            else:
                sg[i] = e / (1.0 + e)
        return sp.reshape(x.shape), sg.reshape(x.shape)

    @njit(cache=True)
    def _project_simplex_rows_nb(v):
        b, d = v.shape
        out = np.empty_like(v)
        active = np.zeros((b, d), dtype=np.bool_)
        for r in range(b):
            u = np.sort(v[r])[::-1]
            cs = 0.0
            rho = 0
            tau = 0.0
            for k in range(d):
                cs += u[k]
                if u[k] * (k + 1.0) > cs - 1.0:
                    rho = k
                    tau = (cs - 1.0) / (k + 1.0)
            for j in range(d):
                val = v[r, j] - tau
                if val > 0.0:
                    out[r, j] = val
                    active[r, j] = True
                else:
                    out[r, j] = 0.0
        return out, active

    @njit(cache=True)
    def _project_relaxed_simplex_rows_nb(v):
        b, d = v.shape
        out = np.empty_like(v)
        active = np.zeros((b, d), dtype=np.bool_)
        branch = np.zeros(b, dtype=np.bool_)
        for r in range(b):
            s = 0.0
            for j in range(d):
                c = min(max(v[r, j], 0.0), 1.0)
                out[r, j] = c
                s += c
            if s > 1.0:
                branch[r] = True
                u = np.sort(v[r])[::-1]
                cs = 0.0
                tau = 0.0
                for k in range(d):
                    cs += u[k]
                    if u[k] * (k + 1.0) > cs - 1.0:
                        tau = (cs - 1.0) / (k + 1.0)
                for j in range(d):
                    val = v[r, j] - tau
                    if val > 0.0:
                        out[r, j] = val
                        active[r, j] = True
                    else:
                        out[r, j] = 0.0
            else:
                for j in range(d):
                    active[r, j] = v[r, j] > 0.0 and v[r, j] <= 1.0
        return out, active, branch

    @njit(cache=True)
    def _adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, wd, t):
        flat_p = p.ravel()
        flat_g = g.ravel()
        flat_m = m.ravel()
        flat_v = v.ravel()
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for i in range(flat_p.size):
            gi = flat_g[i]
            flat_m[i] = beta1 * flat_m[i] + (1.0 - beta1) * gi
            flat_v[i] = beta2 * flat_v[i] + (1.0 - beta2) * gi * gi
            mhat = flat_m[i] / c1
            vhat = flat_v[i] / c2
            flat_p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * flat_p[i])

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, mask, g):
        bsz = out.shape[0]
        kk, dmax = idx.shape
        for b in range(bsz):
            for k in range(kk):
                row = b * kk + k
                for j in range(dmax):
                    if mask[k, j] != 0.0:
                        out[b, idx[k, j]] += g[row, j] * mask[k, j]
        return out


# ---------------------------------------------------------------------------
# dispatch table
# ---------------------------------------------------------------------------

if USE_NUMBA:
    softplus = _softplus_nb
    sigmoid = _sigmoid_nb
    softplus_sigmoid = _softplus_sigmoid_nb
    project_simplex_rows = _project_simplex_rows_nb
    project_relaxed_simplex_rows = _project_relaxed_simplex_rows_nb
    adamw_update = _adamw_update_nb
    scatter_add_rows = _scatter_add_rows_nb
else:
    softplus = _softplus_np
    sigmoid = _sigmoid_np
    softplus_sigmoid = _softplus_sigmoid_np
    project_simplex_rows = _project_simplex_rows_np
    project_relaxed_simplex_rows = _project_relaxed_simplex_rows_np
    adamw_update = _adamw_update_np
    scatter_add_rows = _scatter_add_rows_np


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
