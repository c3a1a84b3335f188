# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled implementations of the per-element hot kernels.

Signatures and semantics mirror ``_kernels_np`` exactly; the dispatcher
in ``kernels`` picks whichever imported.  Inputs are converted to
contiguous float64/int64 views up front, so callers may pass any
integer index dtype a CSR matrix happens to carry.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin

BACKEND = "cython"


def bus_injections(indptr, indices, g, b, theta, vmag):
    """Net injections (P, Q) from the trigonometric summation."""
    cdef cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.int64_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef double[::1] gd = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] bd = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] vm = np.ascontiguousarray(vmag, dtype=np.float64)
    cdef Py_ssize_t n = th.shape[0]
    p_arr = np.empty(n)
    q_arr = np.empty(n)
    cdef double[::1] p = p_arr
    cdef double[::1] q = q_arr
    cdef Py_ssize_t i, k, j
    cdef double ti, acc_p, acc_q, dth, c_, s_, vj
    for i in range(n):
        ti = th[i]
        acc_p = 0.0
        acc_q = 0.0
        for k in range(ip[i], ip[i + 1]):
            j = ix[k]
            dth = ti - th[j]
            c_ = cos(dth)
            s_ = sin(dth)
            vj = vm[j]
            acc_p += vj * (gd[k] * c_ + bd[k] * s_)
            acc_q += vj * (gd[k] * s_ - bd[k] * c_)
        p[i] = vm[i] * acc_p
        q[i] = vm[i] * acc_q
    return p_arr, q_arr


def nodal_jacobian_data(indptr, indices, g, b, theta, vmag, p_calc, q_calc,
                        diag_pos):
    """Entry data of the four injection-derivative blocks on the CSR pattern."""
    cdef cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.int64_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef cnp.int64_t[::1] dpos = np.ascontiguousarray(diag_pos, dtype=np.int64)
    cdef double[::1] gd = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] bd = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] vm = np.ascontiguousarray(vmag, dtype=np.float64)
    cdef double[::1] pc = np.ascontiguousarray(p_calc, dtype=np.float64)
    cdef double[::1] qc = np.ascontiguousarray(q_calc, dtype=np.float64)
    cdef Py_ssize_t n = th.shape[0]
    cdef Py_ssize_t nnz = ix.shape[0]
    jpt_arr = np.empty(nnz)
    jpv_arr = np.empty(nnz)
    jqt_arr = np.empty(nnz)
    jqv_arr = np.empty(nnz)
    cdef double[::1] jpt = jpt_arr
    cdef double[::1] jpv = jpv_arr
    cdef double[::1] jqt = jqt_arr
    cdef double[::1] jqv = jqv_arr
    cdef Py_ssize_t i, k, j
    cdef double ti, vi, dth, c_, s_, gc_bs, gs_bc, vv
    for i in range(n):
        ti = th[i]
        vi = vm[i]
        for k in range(ip[i], ip[i + 1]):
            j = ix[k]
            dth = ti - th[j]
            c_ = cos(dth)
            s_ = sin(dth)
            gc_bs = gd[k] * c_ + bd[k] * s_
            gs_bc = gd[k] * s_ - bd[k] * c_
            vv = vi * vm[j]
            jpt[k] = vv * gs_bc
            jpv[k] = vi * gc_bs
            jqt[k] = -vv * gc_bs
            jqv[k] = vi * gs_bc
    cdef Py_ssize_t kk
    for i in range(n):
        kk = dpos[i]
        vi = vm[i]
        jpt[kk] = -qc[i] - bd[kk] * vi * vi
        jpv[kk] = pc[i] / vi + gd[kk] * vi
        jqt[kk] = pc[i] - gd[kk] * vi * vi
        jqv[kk] = qc[i] / vi - bd[kk] * vi
    return jpt_arr, jpv_arr, jqt_arr, jqv_arr


def branch_flows(f, t, gff, bff, gft, bft, theta, vmag):
    """From-end active/reactive branch flows of the pi model."""
    cdef cnp.int64_t[::1] fb = np.ascontiguousarray(f, dtype=np.int64)
    cdef cnp.int64_t[::1] tb = np.ascontiguousarray(t, dtype=np.int64)
    cdef double[::1] gffv = np.ascontiguousarray(gff, dtype=np.float64)
    cdef double[::1] bffv = np.ascontiguousarray(bff, dtype=np.float64)
    cdef double[::1] gftv = np.ascontiguousarray(gft, dtype=np.float64)
    cdef double[::1] bftv = np.ascontiguousarray(bft, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] vm = np.ascontiguousarray(vmag, dtype=np.float64)
    cdef Py_ssize_t m = fb.shape[0]
    p_arr = np.empty(m)
    q_arr = np.empty(m)
    cdef double[::1] p = p_arr
    cdef double[::1] q = q_arr
    cdef Py_ssize_t k
    cdef double vi, vj, dth, c_, s_, u, w
    for k in range(m):
        vi = vm[fb[k]]
        vj = vm[tb[k]]
        dth = th[fb[k]] - th[tb[k]]
        c_ = cos(dth)
        s_ = sin(dth)
        u = gftv[k] * c_ + bftv[k] * s_
        w = bftv[k] * c_ - gftv[k] * s_
        p[k] = gffv[k] * vi * vi + vi * vj * u
        q[k] = -bffv[k] * vi * vi - vi * vj * w
    return p_arr, q_arr


def branch_jacobian_cols(f, t, gff, bff, gft, bft, theta, vmag):
    """Derivatives of the from-end flows w.r.t. (th_i, th_j, V_i, V_j)."""
    cdef cnp.int64_t[::1] fb = np.ascontiguousarray(f, dtype=np.int64)
    cdef cnp.int64_t[::1] tb = np.ascontiguousarray(t, dtype=np.int64)
    cdef double[::1] gffv = np.ascontiguousarray(gff, dtype=np.float64)
    cdef double[::1] bffv = np.ascontiguousarray(bff, dtype=np.float64)
    cdef double[::1] gftv = np.ascontiguousarray(gft, dtype=np.float64)
    cdef double[::1] bftv = np.ascontiguousarray(bft, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] vm = np.ascontiguousarray(vmag, dtype=np.float64)
    cdef Py_ssize_t m = fb.shape[0]
    out = [np.empty(m) for _ in range(8)]
    cdef double[::1] dp_ti = out[0]
    cdef double[::1] dp_tj = out[1]
    cdef double[::1] dp_vi = out[2]
    cdef double[::1] dp_vj = out[3]
    cdef double[::1] dq_ti = out[4]
    cdef double[::1] dq_tj = out[5]
    cdef double[::1] dq_vi = out[6]
    cdef double[::1] dq_vj = out[7]
    cdef Py_ssize_t k
    cdef double vi, vj, dth, c_, s_, u, w, vivj
    for k in range(m):
        vi = vm[fb[k]]
        vj = vm[tb[k]]
        dth = th[fb[k]] - th[tb[k]]
        c_ = cos(dth)
        s_ = sin(dth)
        u = gftv[k] * c_ + bftv[k] * s_
        w = bftv[k] * c_ - gftv[k] * s_
        vivj = vi * vj
        dp_ti[k] = vivj * w
        dp_tj[k] = -vivj * w
        dp_vi[k] = 2.0 * gffv[k] * vi + vj * u
        dp_vj[k] = vi * u
        dq_ti[k] = vivj * u
        dq_tj[k] = -vivj * u
        dq_vi[k] = -2.0 * bffv[k] * vi - vj * w
        dq_vj[k] = -vi * w
    return tuple(out)
