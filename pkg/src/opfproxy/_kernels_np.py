"""Numpy implementations of the per-element hot kernels.

These are the fallback for the compiled extension; signatures and
semantics must match ``_kernels_c`` exactly.  All admittance arguments
come from a CSR matrix (indptr/indices plus real and imaginary data),
branch arguments from the pi-model end admittances.
"""

import numpy as np

BACKEND = "numpy"


def bus_injections(indptr, indices, g, b, theta, vmag):
    """Net complex power injections from the trigonometric summation.

    Returns (P, Q) with
    P_i = V_i sum_j V_j (G_ij cos th_ij + B_ij sin th_ij),
    Q_i = V_i sum_j V_j (G_ij sin th_ij - B_ij cos th_ij).
    """
    n = theta.shape[0]
    rows = np.repeat(np.arange(n), np.diff(indptr))
    dth = theta[rows] - theta[indices]
    c = np.cos(dth)
    s = np.sin(dth)
    vv = vmag[rows] * vmag[indices]
    p = np.add.reduceat(vv * (g * c + b * s), indptr[:-1])
    q = np.add.reduceat(vv * (g * s - b * c), indptr[:-1])
    return p, q


def nodal_jacobian_data(indptr, indices, g, b, theta, vmag, p_calc, q_calc, diag_pos):
    """Entry data of the four injection-derivative blocks on the CSR pattern.

    Returns (jpt, jpv, jqt, jqv) aligned with the admittance CSR data.
    Off-diagonal entries use the closed forms; the diagonal entries are
    the standard self terms written with the precomputed injections.
    """
    n = theta.shape[0]
    rows = np.repeat(np.arange(n), np.diff(indptr))
    dth = theta[rows] - theta[indices]
    c = np.cos(dth)
    s = np.sin(dth)
    vi = vmag[rows]
    vj = vmag[indices]
    gc_bs = g * c + b * s
    gs_bc = g * s - b * c
    jpt = vi * vj * gs_bc
    jpv = vi * gc_bs
    jqt = -vi * vj * gc_bs
    jqv = vi * gs_bc
    gd = g[diag_pos]
    bd = b[diag_pos]
    jpt[diag_pos] = -q_calc - bd * vmag * vmag
    jpv[diag_pos] = p_calc / vmag + gd * vmag
    jqt[diag_pos] = p_calc - gd * vmag * vmag
    jqv[diag_pos] = q_calc / vmag - bd * vmag
    return jpt, jpv, jqt, jqv


def branch_flows(f, t, gff, bff, gft, bft, theta, vmag):
    """From-end active/reactive branch flows of the pi model."""
    vi = vmag[f]
    vj = vmag[t]
    dth = theta[f] - theta[t]
    c = np.cos(dth)
    s = np.sin(dth)
    u = gft * c + bft * s
    w = bft * c - gft * s
    p = gff * vi * vi + vi * vj * u
    q = -bff * vi * vi - vi * vj * w
    return p, q


def branch_jacobian_cols(f, t, gff, bff, gft, bft, theta, vmag):
    """Derivatives of the from-end flows w.r.t. (th_i, th_j, V_i, V_j).

    Returns eight arrays of length M:
    (dp_ti, dp_tj, dp_vi, dp_vj, dq_ti, dq_tj, dq_vi, dq_vj).
    """
    vi = vmag[f]
    vj = vmag[t]
    dth = theta[f] - theta[t]
    c = np.cos(dth)
    s = np.sin(dth)
    u = gft * c + bft * s
    w = bft * c - gft * s
    vivj = vi * vj
    dp_ti = vivj * w
    dp_tj = -vivj * w
    dp_vi = 2.0 * gff * vi + vj * u
    dp_vj = vi * u
    dq_ti = vivj * u
    dq_tj = -vivj * u
    dq_vi = -2.0 * bff * vi - vj * w
    dq_vj = -vi * w
    return dp_ti, dp_tj, dp_vi, dp_vj, dq_ti, dq_tj, dq_vi, dq_vj
