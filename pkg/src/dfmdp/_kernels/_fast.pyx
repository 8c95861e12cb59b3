# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the reference kernels (see reference.py for semantics).

Matrix products go through numpy's BLAS; everything elementwise and the
iteration control run as C loops. Results match the reference backend up to
floating-point reassociation and each backend is deterministic on its own.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt

cnp.import_array()

from .reference import mlp_slices


def _unpack(flat, dims):
    slices, total = mlp_slices(dims[0], dims[1], dims[2], dims[3])
    if flat.size != total:
        raise ValueError("ddqn kernel: parameter vector length mismatch")
    return {name: flat[sl].reshape(shape) for name, sl, shape in slices}


def mlp_q(x, flat, dims):
    p = _unpack(np.asarray(flat), dims)
    h = np.maximum(x @ p["w1"] + p["b1"], 0.0)
    h = np.maximum(h @ p["w2"] + p["b2"], 0.0)
    return h @ p["w3"] + p["b3"]


def soft_vi_loop(cnp.ndarray[cnp.float64_t, ndim=2] reward_next,
                 cnp.ndarray[cnp.int64_t, ndim=2] next_idx,
                 double gamma, double beta, long iters,
                 cnp.ndarray[cnp.float64_t, ndim=2] q,
                 cnp.ndarray[cnp.float64_t, ndim=1] tail):
    cdef long S = q.shape[0]
    cdef long A = q.shape[1]
    cdef long tlen = tail.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v_arr = np.zeros(S)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] qn_arr = np.zeros((S, A))
    cdef double[::1] v = v_arr
    cdef double[:, ::1] qn = qn_arr
    cdef double[:, ::1] qv = q
    cdef double[:, ::1] rn = reward_next
    cdef long[:, ::1] nx = next_idx
    cdef double[::1] tl = tail
    cdef long it, s, a, left
    cdef double zmax, esum, acc, e, resid, d

    tail[:] = 0.0
    for it in range(iters):
        for s in range(S):
            zmax = beta * qv[s, 0]
            for a in range(1, A):
                if beta * qv[s, a] > zmax:
                    zmax = beta * qv[s, a]
            esum = 0.0
            acc = 0.0
            for a in range(A):
                e = exp(beta * qv[s, a] - zmax)
                esum += e
                acc += e * qv[s, a]
            v[s] = acc / esum
        resid = 0.0
        for s in range(S):
            for a in range(A):
                qn[s, a] = rn[s, a] + gamma * v[nx[s, a]]
                d = fabs(qn[s, a] - qv[s, a])
                if d > resid:
                    resid = d
        left = iters - it
        if left <= tlen:
            tl[tlen - left] = resid
        for s in range(S):
            for a in range(A):
                qv[s, a] = qn[s, a]
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("soft value iteration diverged to non-finite Q")


def ddqn_step(cnp.ndarray[cnp.float64_t, ndim=1] flat,
              cnp.ndarray[cnp.float64_t, ndim=1] target_flat,
              cnp.ndarray[cnp.float64_t, ndim=1] adam_m,
              cnp.ndarray[cnp.float64_t, ndim=1] adam_v,
              long step_count,
              cnp.ndarray[cnp.float64_t, ndim=2] xs,
              cnp.ndarray[cnp.int64_t, ndim=1] acts,
              cnp.ndarray[cnp.float64_t, ndim=1] rews,
              cnp.ndarray[cnp.float64_t, ndim=2] xns,
              cnp.ndarray[cnp.float64_t, ndim=1] done,
              double gamma, double beta, double lr,
              double beta1, double beta2, double eps, dims):
    p = _unpack(flat, dims)
    pt = _unpack(target_flat, dims)
    cdef long B = xs.shape[0]
    cdef long A = <long> dims[3]
    cdef long i, j, a

    z1 = xs @ p["w1"] + p["b1"]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p["w2"] + p["b2"]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h2 = np.maximum(z2, 0.0)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] q = h2 @ p["w3"] + p["b3"]

    hn1 = np.maximum(xns @ p["w1"] + p["b1"], 0.0)
    hn2 = np.maximum(hn1 @ p["w2"] + p["b2"], 0.0)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] qno = hn2 @ p["w3"] + p["b3"]
    tn1 = np.maximum(xns @ pt["w1"] + pt["b1"], 0.0)
    tn2 = np.maximum(tn1 @ pt["w2"] + pt["b2"], 0.0)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] qnt = tn2 @ pt["w3"] + pt["b3"]

    # soft target values and TD error, one C pass
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gq = np.zeros((B, A))
    cdef double[:, ::1] qv = q
    cdef double[:, ::1] qov = qno
    cdef double[:, ::1] qtv = qnt
    cdef double[:, ::1] gqv = gq
    cdef long[::1] av = acts
    cdef double[::1] rv = rews
    cdef double[::1] dv = done
    cdef double zmax, esum, vsoft, e, y, td, loss
    loss = 0.0
    for i in range(B):
        zmax = beta * qov[i, 0]
        for a in range(1, A):
            if beta * qov[i, a] > zmax:
                zmax = beta * qov[i, a]
        esum = 0.0
        vsoft = 0.0
        for a in range(A):
            e = exp(beta * qov[i, a] - zmax)
            esum += e
            vsoft += e * qtv[i, a]
        vsoft /= esum
        y = rv[i] + gamma * (1.0 - dv[i]) * vsoft
        td = qv[i, av[i]] - y
        loss += td * td
        gqv[i, av[i]] = 2.0 * td / B
    loss /= B

    gw3 = h2.T @ gq
    gb3 = gq.sum(axis=0)
    gh2 = (gq @ p["w3"].T) * (z2 > 0)
    gw2 = h1.T @ gh2
    gb2 = gh2.sum(axis=0)
    gh1 = (gh2 @ p["w2"].T) * (z1 > 0)
    gw1 = xs.T @ gh1
    gb1 = gh1.sum(axis=0)

    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad = np.concatenate(
        [gw1.ravel(), gb1, gw2.ravel(), gb2, gw3.ravel(), gb3])

    cdef double[::1] gv = grad
    cdef double[::1] fv = flat
    cdef double[::1] mv = adam_m
    cdef double[::1] vv = adam_v
    cdef long n = flat.shape[0]
    cdef double c1 = 1.0 - beta1 ** step_count
    cdef double c2 = 1.0 - beta2 ** step_count
    cdef double g
    for i in range(n):
        g = gv[i]
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * g
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g * g
        fv[i] -= lr * (mv[i] / c1) / (sqrt(vv[i] / c2) + eps)
    return loss
