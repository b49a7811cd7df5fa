# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend; math mirrors _fallback.py exactly.

Per-feature scalar loops in C replace the vectorized numpy expressions;
the two backends agree to floating-point round-off and are compared by
tests/test_kernels.py and benchmarks/bench_kernels.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, log, sin, sqrt

cnp.import_array()


cdef inline void _bearing_c(const double* q, double* p) nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    p[0] = 1.0 - 2.0 * (y * y + z * z)
    p[1] = 2.0 * (x * y + w * z)
    p[2] = 2.0 * (x * z - w * y)


cdef inline void _nq_c(const double* q, double* n) nogil:
    # n is 3x2 row-major: columns R(q)e2, R(q)e3
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    n[0] = 2.0 * (x * y - w * z)
    n[1] = 2.0 * (x * z + w * y)
    n[2] = 1.0 - 2.0 * (x * x + z * z)
    n[3] = 2.0 * (y * z - w * x)
    n[4] = 2.0 * (y * z + w * x)
    n[5] = 1.0 - 2.0 * (x * x + y * y)


cdef inline void _cross_c(const double* a, const double* b, double* out) nogil:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void _rates_c(const double* q, double rho, const double* vr,
                          const double* wr, double* qdot, double* rhodot) nogil:
    cdef double p[3]
    cdef double n[6]
    cdef double pxv[3]
    cdef double wfull[3]
    cdef double om[3]
    cdef double u0, u1
    cdef int i
    _bearing_c(q, p)
    _nq_c(q, n)
    _cross_c(p, vr, pxv)
    for i in range(3):
        wfull[i] = wr[i] + pxv[i] / rho
    u0 = -(n[0] * wfull[0] + n[2] * wfull[1] + n[4] * wfull[2])
    u1 = -(n[1] * wfull[0] + n[3] * wfull[1] + n[5] * wfull[2])
    om[0] = n[0] * u0 + n[1] * u1
    om[1] = n[2] * u0 + n[3] * u1
    om[2] = n[4] * u0 + n[5] * u1
    qdot[0] = -0.5 * (om[0] * q[1] + om[1] * q[2] + om[2] * q[3])
    qdot[1] = 0.5 * (q[0] * om[0] + om[1] * q[3] - om[2] * q[2])
    qdot[2] = 0.5 * (q[0] * om[1] + om[2] * q[1] - om[0] * q[3])
    qdot[3] = 0.5 * (q[0] * om[2] + om[0] * q[2] - om[1] * q[1])
    rhodot[0] = -(p[0] * vr[0] + p[1] * vr[1] + p[2] * vr[2])


cdef inline void _nav_rates_c(const double* v, const double* q, const double* a,
                              const double* w, const double* g,
                              double* vd, double* qd, double* pd) nogil:
    cdef double qw = q[0], qx = q[1], qy = q[2], qz = q[3]
    cdef double r00 = 1 - 2 * (qy * qy + qz * qz)
    cdef double r01 = 2 * (qx * qy - qw * qz)
    cdef double r02 = 2 * (qx * qz + qw * qy)
    cdef double r10 = 2 * (qx * qy + qw * qz)
    cdef double r11 = 1 - 2 * (qx * qx + qz * qz)
    cdef double r12 = 2 * (qy * qz - qw * qx)
    cdef double r20 = 2 * (qx * qz - qw * qy)
    cdef double r21 = 2 * (qy * qz + qw * qx)
    cdef double r22 = 1 - 2 * (qx * qx + qy * qy)
    vd[0] = a[0] + r00 * g[0] + r10 * g[1] + r20 * g[2] - (w[1] * v[2] - w[2] * v[1])
    vd[1] = a[1] + r01 * g[0] + r11 * g[1] + r21 * g[2] - (w[2] * v[0] - w[0] * v[2])
    vd[2] = a[2] + r02 * g[0] + r12 * g[1] + r22 * g[2] - (w[0] * v[1] - w[1] * v[0])
    qd[0] = 0.5 * (-qx * w[0] - qy * w[1] - qz * w[2])
    qd[1] = 0.5 * (qw * w[0] + qy * w[2] - qz * w[1])
    qd[2] = 0.5 * (qw * w[1] - qx * w[2] + qz * w[0])
    qd[3] = 0.5 * (qw * w[2] + qx * w[1] - qy * w[0])
    pd[0] = r00 * v[0] + r01 * v[1] + r02 * v[2]
    pd[1] = r10 * v[0] + r11 * v[1] + r12 * v[2]
    pd[2] = r20 * v[0] + r21 * v[1] + r22 * v[2]


def nav_rk4(double[::1] v, double[::1] q, double[::1] p, double[::1] a,
            double[::1] w, double[::1] g, double dt):
    """One ZOH RK4 strapdown step; see _fallback.nav_rk4."""
    v1_arr = np.empty(3)
    q1_arr = np.empty(4)
    p1_arr = np.empty(3)
    stages_arr = np.empty((4, 3))
    cdef double[::1] v1 = v1_arr
    cdef double[::1] q1 = q1_arr
    cdef double[::1] p1 = p1_arr
    cdef double[:, ::1] stages = stages_arr
    cdef double k1v[3]
    cdef double k1q[4]
    cdef double k1p[3]
    cdef double k2v[3]
    cdef double k2q[4]
    cdef double k2p[3]
    cdef double k3v[3]
    cdef double k3q[4]
    cdef double k3p[3]
    cdef double k4v[3]
    cdef double k4q[4]
    cdef double k4p[3]
    cdef double vt[3]
    cdef double qt[4]
    cdef double h = dt
    cdef Py_ssize_t i
    with nogil:
        _nav_rates_c(&v[0], &q[0], &a[0], &w[0], &g[0], k1v, k1q, k1p)
        for i in range(3):
            vt[i] = v[i] + 0.5 * h * k1v[i]
            stages[0, i] = v[i]
            stages[1, i] = vt[i]
        for i in range(4):
            qt[i] = q[i] + 0.5 * h * k1q[i]
        _nav_rates_c(vt, qt, &a[0], &w[0], &g[0], k2v, k2q, k2p)
        for i in range(3):
            vt[i] = v[i] + 0.5 * h * k2v[i]
            stages[2, i] = vt[i]
        for i in range(4):
            qt[i] = q[i] + 0.5 * h * k2q[i]
        _nav_rates_c(vt, qt, &a[0], &w[0], &g[0], k3v, k3q, k3p)
        for i in range(3):
            vt[i] = v[i] + h * k3v[i]
            stages[3, i] = vt[i]
        for i in range(4):
            qt[i] = q[i] + h * k3q[i]
        _nav_rates_c(vt, qt, &a[0], &w[0], &g[0], k4v, k4q, k4p)
        for i in range(3):
            v1[i] = v[i] + (h / 6.0) * (k1v[i] + 2 * k2v[i] + 2 * k3v[i] + k4v[i])
            p1[i] = p[i] + (h / 6.0) * (k1p[i] + 2 * k2p[i] + 2 * k3p[i] + k4p[i])
        for i in range(4):
            q1[i] = q[i] + (h / 6.0) * (k1q[i] + 2 * k2q[i] + 2 * k3q[i] + k4q[i])
    return v1_arr, q1_arr, p1_arr, stages_arr


def propagate_features_rk4(double[:, ::1] qf, double[::1] rho,
                           double[:, ::1] vr_stages, double[::1] wr, double dt):
    """Joint-RK4 feature step; see _fallback.propagate_features_rk4."""
    cdef Py_ssize_t m = qf.shape[0]
    q_out_arr = np.empty((m, 4))
    rho_out_arr = np.empty(m)
    cdef double[:, ::1] q_out = q_out_arr
    cdef double[::1] rho_out = rho_out_arr
    cdef double h = dt
    cdef double q0[4]
    cdef double qt[4]
    cdef double k1q[4]
    cdef double k2q[4]
    cdef double k3q[4]
    cdef double k4q[4]
    cdef double k1r, k2r, k3r, k4r, r0, nrm
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(4):
                q0[j] = qf[i, j]
            r0 = rho[i]
            _rates_c(q0, r0, &vr_stages[0, 0], &wr[0], k1q, &k1r)
            for j in range(4):
                qt[j] = q0[j] + 0.5 * h * k1q[j]
            _rates_c(qt, r0 + 0.5 * h * k1r, &vr_stages[1, 0], &wr[0], k2q, &k2r)
            for j in range(4):
                qt[j] = q0[j] + 0.5 * h * k2q[j]
            _rates_c(qt, r0 + 0.5 * h * k2r, &vr_stages[2, 0], &wr[0], k3q, &k3r)
            for j in range(4):
                qt[j] = q0[j] + h * k3q[j]
            _rates_c(qt, r0 + h * k3r, &vr_stages[3, 0], &wr[0], k4q, &k4r)
            nrm = 0.0
            for j in range(4):
                qt[j] = q0[j] + (h / 6.0) * (k1q[j] + 2.0 * k2q[j] + 2.0 * k3q[j] + k4q[j])
                nrm += qt[j] * qt[j]
            nrm = sqrt(nrm)
            for j in range(4):
                q_out[i, j] = qt[j] / nrm
            rho_out[i] = r0 + (h / 6.0) * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    return q_out_arr, rho_out_arr


def feature_state_blocks(double[:, ::1] qf, double[::1] rho,
                         double[::1] vr, double[::1] wr):
    """Continuous-time error blocks; see _fallback.feature_state_blocks."""
    cdef Py_ssize_t m = qf.shape[0]
    f_own_arr = np.zeros((m, 3, 3))
    f_vr_arr = np.zeros((m, 3, 3))
    f_wr_arr = np.zeros((m, 3, 3))
    cdef double[:, :, ::1] f_own = f_own_arr
    cdef double[:, :, ::1] f_vr = f_vr_arr
    cdef double[:, :, ::1] f_wr = f_wr_arr
    cdef double q0[4]
    cdef double p[3]
    cdef double n[6]
    cdef double pxn[6]
    cdef double vxpxn[6]
    cdef double col[3]
    cdef double tmp[3]
    cdef double pxv[3]
    cdef double inv_rho, p_dot_wr
    cdef double px_col[3]
    cdef Py_ssize_t i, j, c, k
    with nogil:
        for i in range(m):
            for j in range(4):
                q0[j] = qf[i, j]
            inv_rho = 1.0 / rho[i]
            _bearing_c(q0, p)
            _nq_c(q0, n)
            # pxn, vxpxn column-wise (stored 3x2 row-major like n)
            for c in range(2):
                col[0] = n[0 + c]
                col[1] = n[2 + c]
                col[2] = n[4 + c]
                _cross_c(p, col, tmp)
                pxn[0 + c] = tmp[0]
                pxn[2 + c] = tmp[1]
                pxn[4 + c] = tmp[2]
                _cross_c(&vr[0], tmp, col)
                vxpxn[0 + c] = col[0]
                vxpxn[2 + c] = col[1]
                vxpxn[4 + c] = col[2]
            p_dot_wr = p[0] * wr[0] + p[1] * wr[1] + p[2] * wr[2]
            _cross_c(p, &vr[0], pxv)
            for j in range(2):
                for c in range(2):
                    f_own[i, j, c] = (
                        -inv_rho * (n[0 + j] * vxpxn[0 + c] + n[2 + j] * vxpxn[2 + c] + n[4 + j] * vxpxn[4 + c])
                        - p_dot_wr * (n[0 + j] * pxn[0 + c] + n[2 + j] * pxn[2 + c] + n[4 + j] * pxn[4 + c])
                    )
                f_own[i, j, 2] = inv_rho * inv_rho * (
                    n[0 + j] * pxv[0] + n[2 + j] * pxv[1] + n[4 + j] * pxv[2]
                )
                f_own[i, 2, j] = vr[0] * pxn[0 + j] + vr[1] * pxn[2 + j] + vr[2] * pxn[4 + j]
            # f_vr rows 0-1: -(1/rho) n^T [p x]; [p x] columns
            for c in range(3):
                px_col[0] = 0.0
                px_col[1] = 0.0
                px_col[2] = 0.0
                if c == 0:
                    px_col[1] = p[2]
                    px_col[2] = -p[1]
                elif c == 1:
                    px_col[0] = -p[2]
                    px_col[2] = p[0]
                else:
                    px_col[0] = p[1]
                    px_col[1] = -p[0]
                for j in range(2):
                    f_vr[i, j, c] = -inv_rho * (
                        n[0 + j] * px_col[0] + n[2 + j] * px_col[1] + n[4 + j] * px_col[2]
                    )
                f_vr[i, 2, c] = -p[c]
            for c in range(3):
                for j in range(2):
                    f_wr[i, j, c] = -n[2 * c + j]
    return f_own_arr, f_vr_arr, f_wr_arr


def predict_blocks(double[:, ::1] qf, double[::1] rho, double[::1] vr,
                   double[::1] wr, double[:, ::1] r_rb, double[::1] lever,
                   double[:, ::1] f_bb, double dt):
    """Per-feature transition/noise blocks for one anchor group.

    Returns (phi_ff (k,3,3), phi_fb (k,3,9), g_gyro (k,3,3)) where phi_* are
    the second-order discrete transition blocks and g_gyro maps gyro noise
    into the feature error rates (direct w_R term plus the lever arm in v_R).
    """
    cdef Py_ssize_t k = qf.shape[0]
    phi_ff_arr = np.empty((k, 3, 3))
    phi_fb_arr = np.zeros((k, 3, 9))
    g_arr = np.empty((k, 3, 3))
    cdef double[:, :, ::1] phi_ff = phi_ff_arr
    cdef double[:, :, ::1] phi_fb = phi_fb_arr
    cdef double[:, :, ::1] gg = g_arr
    cdef double q0[4]
    cdef double p[3]
    cdef double n[6]
    cdef double pxn[6]
    cdef double vxpxn[6]
    cdef double col[3]
    cdef double tmp[3]
    cdef double pxv[3]
    cdef double fo[9]
    cdef double fv[9]
    cdef double fvr[9]
    cdef double fw[9]
    cdef double lx[9]
    cdef double inv_rho, p_dot_wr, acc, acc2
    cdef Py_ssize_t i, j, c, e, f
    lx[0] = 0.0
    lx[1] = -lever[2]
    lx[2] = lever[1]
    lx[3] = lever[2]
    lx[4] = 0.0
    lx[5] = -lever[0]
    lx[6] = -lever[1]
    lx[7] = lever[0]
    lx[8] = 0.0
    with nogil:
        for i in range(k):
            for j in range(4):
                q0[j] = qf[i, j]
            inv_rho = 1.0 / rho[i]
            _bearing_c(q0, p)
            _nq_c(q0, n)
            for c in range(2):
                col[0] = n[0 + c]
                col[1] = n[2 + c]
                col[2] = n[4 + c]
                _cross_c(p, col, tmp)
                pxn[0 + c] = tmp[0]
                pxn[2 + c] = tmp[1]
                pxn[4 + c] = tmp[2]
                _cross_c(&vr[0], tmp, col)
                vxpxn[0 + c] = col[0]
                vxpxn[2 + c] = col[1]
                vxpxn[4 + c] = col[2]
            p_dot_wr = p[0] * wr[0] + p[1] * wr[1] + p[2] * wr[2]
            _cross_c(p, &vr[0], pxv)
            # continuous blocks: fo = d(err)/d(err), fvr = d(err)/d(v_R)
            for j in range(2):
                for c in range(2):
                    fo[3 * j + c] = (
                        -inv_rho * (n[0 + j] * vxpxn[0 + c] + n[2 + j] * vxpxn[2 + c] + n[4 + j] * vxpxn[4 + c])
                        - p_dot_wr * (n[0 + j] * pxn[0 + c] + n[2 + j] * pxn[2 + c] + n[4 + j] * pxn[4 + c])
                    )
                fo[3 * j + 2] = inv_rho * inv_rho * (
                    n[0 + j] * pxv[0] + n[2 + j] * pxv[1] + n[4 + j] * pxv[2]
                )
                fo[6 + j] = vr[0] * pxn[0 + j] + vr[1] * pxn[2 + j] + vr[2] * pxn[4 + j]
            fo[8] = 0.0
            for c in range(3):
                col[0] = 0.0
                col[1] = 0.0
                col[2] = 0.0
                if c == 0:
                    col[1] = p[2]
                    col[2] = -p[1]
                elif c == 1:
                    col[0] = -p[2]
                    col[2] = p[0]
                else:
                    col[0] = p[1]
                    col[1] = -p[0]
                for j in range(2):
                    fvr[3 * j + c] = -inv_rho * (
                        n[0 + j] * col[0] + n[2 + j] * col[1] + n[4 + j] * col[2]
                    )
                fvr[6 + c] = -p[c]
            # fv = fvr @ r_rb (chain to dv); fw = d(err)/d(w_R)
            for j in range(3):
                for c in range(3):
                    fv[3 * j + c] = (
                        fvr[3 * j + 0] * r_rb[0, c]
                        + fvr[3 * j + 1] * r_rb[1, c]
                        + fvr[3 * j + 2] * r_rb[2, c]
                    )
            for c in range(3):
                fw[0 + c] = -n[2 * c]
                fw[3 + c] = -n[2 * c + 1]
                fw[6 + c] = 0.0
            # rotate fw columns into body gyro: fw @ r_rb - fv @ r_rb @ [lever x]
            # (fv already includes r_rb, so the lever term is fv @ lx... note
            #  d v_R/d w_B = -r_rb [lever x], and fv = d/d(r_rb^-1 v_R)=wrong frame;
            #  use fvr for the lever chain: fvr @ r_rb @ (-lx) = fv @ (-lx))
            for j in range(3):
                for c in range(3):
                    acc = 0.0
                    acc2 = 0.0
                    for e in range(3):
                        acc += fw[3 * j + e] * r_rb[e, c]
                        acc2 += fv[3 * j + e] * lx[3 * e + c]
                    gg[i, j, c] = acc - acc2
            # phi_ff = I + fo dt + 0.5 dt^2 fo fo
            for j in range(3):
                for c in range(3):
                    acc = 0.0
                    for e in range(3):
                        acc += fo[3 * j + e] * fo[3 * e + c]
                    phi_ff[i, j, c] = (1.0 if j == c else 0.0) + fo[3 * j + c] * dt + 0.5 * dt * dt * acc
            # phi_fb = f_fb dt + 0.5 dt^2 (f_fb f_bb + fo f_fb); f_fb = [fv | 0 | 0]
            for j in range(3):
                for c in range(9):
                    acc = 0.0
                    for e in range(3):
                        acc += fv[3 * j + e] * f_bb[e, c]
                    if c < 3:
                        acc2 = 0.0
                        for e in range(3):
                            acc2 += fo[3 * j + e] * fv[3 * e + c]
                        phi_fb[i, j, c] = fv[3 * j + c] * dt + 0.5 * dt * dt * (acc + acc2)
                    else:
                        phi_fb[i, j, c] = 0.5 * dt * dt * acc
    return phi_ff_arr, phi_fb_arr, g_arr


def psd_ok(double[:, ::1] p, double jitter):
    """In-place-free Cholesky feasibility test with a bounded jitter retry."""
    cdef Py_ssize_t n = p.shape[0]
    cdef double[:, ::1] l = np.zeros((n, n))
    cdef double boost
    cdef Py_ssize_t attempt
    cdef bint ok
    for attempt in range(2):
        boost = 0.0 if attempt == 0 else jitter
        ok = True
        with nogil:
            ok = _chol_try(p, l, boost)
        if ok:
            return True
    return False


cdef inline bint _chol_try(double[:, ::1] p, double[:, ::1] l, double boost) nogil:
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(n):
        for j in range(i + 1):
            acc = p[i, j]
            if i == j:
                acc += boost
            for k in range(j):
                acc -= l[i, k] * l[j, k]
            if i == j:
                if acc <= 0.0:
                    return False
                l[i, i] = sqrt(acc)
            else:
                l[i, j] = acc / l[j, j]
    return True


def cov_predict(double[:, ::1] p, double[:, ::1] phi_bb, double[:, ::1] phi_fb,
                double[:, :, ::1] phi_ff, double[:, ::1] g, double[::1] qc,
                double[::1] floor_diag, double dt):
    """Structured covariance prediction; see _fallback.cov_predict.

    Two sparse-row passes (T = Phi P, then Out = T Phi^T elementwise on the
    upper triangle) plus the mapped input noise, with no n^2 temporaries
    beyond the single stage buffer.
    """
    cdef Py_ssize_t nav = phi_bb.shape[0]
    cdef Py_ssize_t m = phi_ff.shape[0]
    cdef Py_ssize_t n = p.shape[0]
    out_arr = np.empty((n, n))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] t = np.empty((n, n))
    cdef double acc, qacc
    cdef Py_ssize_t i, j, k, blk, base
    with nogil:
        # T = Phi @ P
        for i in range(nav):
            for j in range(n):
                acc = 0.0
                for k in range(nav):
                    acc += phi_bb[i, k] * p[k, j]
                t[i, j] = acc
        for i in range(nav, n):
            blk = (i - nav) // 3
            base = nav + 3 * blk
            for j in range(n):
                acc = 0.0
                for k in range(nav):
                    acc += phi_fb[i - nav, k] * p[k, j]
                for k in range(3):
                    acc += phi_ff[blk, i - base, k] * p[base + k, j]
                t[i, j] = acc
        # Out = T @ Phi^T + Q, upper triangle mirrored
        for i in range(n):
            for j in range(i, n):
                if j < nav:
                    acc = 0.0
                    for k in range(nav):
                        acc += t[i, k] * phi_bb[j, k]
                else:
                    blk = (j - nav) // 3
                    base = nav + 3 * blk
                    acc = 0.0
                    for k in range(nav):
                        acc += t[i, k] * phi_fb[j - nav, k]
                    for k in range(3):
                        acc += t[i, base + k] * phi_ff[blk, j - base, k]
                qacc = 0.0
                for k in range(6):
                    qacc += g[i, k] * qc[k] * g[j, k]
                acc += qacc * dt
                if i == j:
                    acc += floor_diag[i] * dt
                out[i, j] = acc
                out[j, i] = acc
    return out_arr


def joseph_update(double[:, ::1] p, double[:, ::1] w, double[:, ::1] b,
                  double[:, ::1] s):
    """Joseph-form posterior covariance; see _fallback.joseph_update.

    Single pass over the upper triangle with the lower mirrored, so the
    result is exactly symmetric and no n^2 temporaries are allocated.
    """
    cdef Py_ssize_t n = p.shape[0]
    out_arr = np.empty((n, n))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] sw = np.empty((n, 4))
    cdef double acc
    cdef Py_ssize_t i, j, k, l
    with nogil:
        for i in range(n):
            for k in range(4):
                acc = 0.0
                for l in range(4):
                    acc += w[i, l] * s[l, k]
                sw[i, k] = acc
        for i in range(n):
            for j in range(i, n):
                acc = p[i, j]
                for k in range(4):
                    acc += sw[i, k] * w[j, k] - w[i, k] * b[j, k] - b[i, k] * w[j, k]
                out[i, j] = acc
                out[j, i] = acc
    return out_arr


cdef inline void _sym4_eig_range(const double* s, double* lo, double* hi) nogil:
    # cyclic Jacobi on a 4x4 symmetric copy; eigenvalues only
    cdef double a[16]
    cdef double app, aqq, apq, theta, t, c, sn, akp, akq
    cdef Py_ssize_t i, p, q, k, sweep
    for i in range(16):
        a[i] = s[i]
    for sweep in range(8):
        for p in range(3):
            for q in range(p + 1, 4):
                apq = a[4 * p + q]
                if apq == 0.0:
                    continue
                app = a[4 * p + p]
                aqq = a[4 * q + q]
                theta = 0.5 * (aqq - app) / apq
                t = 1.0 / (theta + (1.0 if theta >= 0 else -1.0) * sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                sn = t * c
                for k in range(4):
                    akp = a[4 * k + p]
                    akq = a[4 * k + q]
                    a[4 * k + p] = c * akp - sn * akq
                    a[4 * k + q] = sn * akp + c * akq
                for k in range(4):
                    akp = a[4 * p + k]
                    akq = a[4 * q + k]
                    a[4 * p + k] = c * akp - sn * akq
                    a[4 * q + k] = sn * akp + c * akq
    lo[0] = a[0]
    hi[0] = a[0]
    for k in range(1, 4):
        if a[4 * k + k] < lo[0]:
            lo[0] = a[4 * k + k]
        if a[4 * k + k] > hi[0]:
            hi[0] = a[4 * k + k]


cdef inline bint _chol4(const double* s, double* l) nogil:
    # lower Cholesky of a 4x4 symmetric PD matrix; returns False if not PD
    cdef Py_ssize_t i, j, k
    cdef double acc
    for i in range(16):
        l[i] = 0.0
    for i in range(4):
        for j in range(i + 1):
            acc = s[4 * i + j]
            for k in range(j):
                acc -= l[4 * i + k] * l[4 * j + k]
            if i == j:
                if acc <= 0.0:
                    return False
                l[4 * i + i] = sqrt(acc)
            else:
                l[4 * i + j] = acc / l[4 * j + j]
    return True


cdef inline void _chol4_solve(const double* l, const double* rhs, double* x) nogil:
    cdef double y[4]
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(4):
        acc = rhs[i]
        for k in range(i):
            acc -= l[4 * i + k] * y[k]
        y[i] = acc / l[4 * i + i]
    for i in range(3, -1, -1):
        acc = y[i]
        for k in range(i + 1, 4):
            acc -= l[4 * k + i] * x[k]
        x[i] = acc / l[4 * i + i]


def ekf_update_core(double[:, ::1] p, double[:, ::1] h_sub, long long[::1] cols,
                    double[::1] residual, double[:, ::1] r_cov, double cond_limit):
    """Full measurement-update linear algebra; see _fallback.ekf_update_core."""
    cdef Py_ssize_t n = p.shape[0]
    cdef double s[16]
    cdef double l[16]
    cdef double acc, lo, hi, d2, logdet
    cdef Py_ssize_t i, j, k, ci
    s_arr = np.empty((4, 4))
    cdef double[:, ::1] s_view = s_arr
    bht_arr = np.empty((n, 4))
    cdef double[:, ::1] bht = bht_arr
    with nogil:
        for i in range(n):
            for k in range(4):
                acc = 0.0
                for j in range(6):
                    acc += p[i, cols[j]] * h_sub[k, j]
                bht[i, k] = acc
        for i in range(4):
            for k in range(4):
                acc = r_cov[i, k]
                for j in range(6):
                    acc += h_sub[i, j] * bht[cols[j], k]
                s[4 * i + k] = acc
        for i in range(4):
            for k in range(i + 1, 4):
                acc = 0.5 * (s[4 * i + k] + s[4 * k + i])
                s[4 * i + k] = acc
                s[4 * k + i] = acc
        _sym4_eig_range(s, &lo, &hi)
    for i in range(4):
        for k in range(4):
            s_view[i, k] = s[4 * i + k]
    if lo <= 0.0 or hi > cond_limit * lo:
        return False, None, None, s_arr, 0.0, 0.0

    dx_arr = np.empty(n)
    pn_arr = np.empty((n, n))
    cdef double[::1] dx = dx_arr
    cdef double[:, ::1] pn = pn_arr
    cdef double[:, ::1] w = np.empty((n, 4))
    cdef double[:, ::1] sw = np.empty((n, 4))
    cdef double rhs[4]
    cdef double x4[4]
    with nogil:
        _chol4(s, l)
        # gain rows: w[i,:] = S^-1 bht[i,:]
        for i in range(n):
            for k in range(4):
                rhs[k] = bht[i, k]
            _chol4_solve(l, rhs, x4)
            for k in range(4):
                w[i, k] = x4[k]
        _chol4_solve(l, &residual[0], x4)
        d2 = 0.0
        for k in range(4):
            d2 += residual[k] * x4[k]
        for i in range(n):
            acc = 0.0
            for k in range(4):
                acc += w[i, k] * residual[k]
            dx[i] = acc
        # Joseph: P - W B^T - B W^T + W S W^T, upper triangle mirrored
        for i in range(n):
            for k in range(4):
                acc = 0.0
                for j in range(4):
                    acc += w[i, j] * s[4 * j + k]
                sw[i, k] = acc
        for i in range(n):
            for j in range(i, n):
                acc = p[i, j]
                for k in range(4):
                    acc += sw[i, k] * w[j, k] - w[i, k] * bht[j, k] - bht[i, k] * w[j, k]
                pn[i, j] = acc
                pn[j, i] = acc
        logdet = _logdet9_c(pn)
    return True, dx_arr, pn_arr, s_arr, d2, logdet


cdef inline double _logdet9_c(double[:, ::1] p) nogil:
    cdef double l[81]
    cdef double acc
    cdef Py_ssize_t i, j, k
    for i in range(81):
        l[i] = 0.0
    for i in range(9):
        for j in range(i + 1):
            acc = p[i, j]
            for k in range(j):
                acc -= l[9 * i + k] * l[9 * j + k]
            if i == j:
                l[9 * i + i] = sqrt(acc)
            else:
                l[9 * i + j] = acc / l[9 * j + j]
    acc = 0.0
    for i in range(9):
        acc += log(l[9 * i + i])
    return 2.0 * acc


def logdet9(double[:, ::1] p):
    """Log-determinant of the leading 9x9 block via Cholesky."""
    cdef double out
    with nogil:
        out = _logdet9_c(p)
    return out


def retract_bearings(double[:, ::1] qf, double[:, ::1] delta):
    """Batched bearing boxplus; see _fallback.retract_bearings."""
    cdef Py_ssize_t m = qf.shape[0]
    out_arr = np.empty((m, 4))
    cdef double[:, ::1] out = out_arr
    cdef double n[6]
    cdef double phi[3]
    cdef double dq[4]
    cdef double q[4]
    cdef double angle, half, s, nrm
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(4):
                q[j] = qf[i, j]
            _nq_c(q, n)
            phi[0] = n[0] * delta[i, 0] + n[1] * delta[i, 1]
            phi[1] = n[2] * delta[i, 0] + n[3] * delta[i, 1]
            phi[2] = n[4] * delta[i, 0] + n[5] * delta[i, 1]
            angle = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
            half = 0.5 * angle
            if angle < 1e-8:
                s = 0.5 - angle * angle / 48.0
                dq[0] = 1.0 - half * half / 2.0
            else:
                s = sin(half) / angle
                dq[0] = cos(half)
            dq[1] = s * phi[0]
            dq[2] = s * phi[1]
            dq[3] = s * phi[2]
            out[i, 0] = dq[0] * q[0] - dq[1] * q[1] - dq[2] * q[2] - dq[3] * q[3]
            out[i, 1] = dq[0] * q[1] + dq[1] * q[0] + dq[2] * q[3] - dq[3] * q[2]
            out[i, 2] = dq[0] * q[2] - dq[1] * q[3] + dq[2] * q[0] + dq[3] * q[1]
            out[i, 3] = dq[0] * q[3] + dq[1] * q[2] - dq[2] * q[1] + dq[3] * q[0]
            nrm = sqrt(
                out[i, 0] * out[i, 0]
                + out[i, 1] * out[i, 1]
                + out[i, 2] * out[i, 2]
                + out[i, 3] * out[i, 3]
            )
            for j in range(4):
                out[i, j] /= nrm
    return out_arr
