"""Pure-numpy kernel backend, vectorized over features.

Math mirrors radarslam.geometry / radarslam.features for arrays of feature
states; see _core.pyx for the compiled twin.
"""

import numpy as np


def _bearings(qf):
    """(m,4) bearing quaternions -> (m,3) unit bearings R(q) @ e1."""
    w, x, y, z = qf[:, 0], qf[:, 1], qf[:, 2], qf[:, 3]
    return np.stack(
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ],
        axis=1,
    )


def _bearing_quats(b):
    """(n,3) unit bearings -> canonical bearing quaternions (n,4).

    Shortest rotation from e1; antipodal rows fall back to a z-flip.
    """
    n = b.shape[0]
    q = np.stack([1.0 + b[:, 0], np.zeros(n), -b[:, 2], b[:, 1]], axis=1)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    bad = qn[:, 0] < 1e-9
    if np.any(bad):
        q[bad] = [0.0, 0.0, 0.0, 1.0]
        qn[bad] = 1.0
    return q / qn


def nav_rk4(v, q, p, a, w, g, dt):
    """One ZOH RK4 step of the strapdown equations.

    Returns (v1, q1, p1, v_stages (4,3)); the caller renormalizes q.
    """

    def rates(vv, qq):
        qw, qx, qy, qz = qq
        r = np.array(
            [
                [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
                [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
                [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
            ]
        )
        vdot = a + r.T @ g - np.array(
            [w[1] * vv[2] - w[2] * vv[1], w[2] * vv[0] - w[0] * vv[2], w[0] * vv[1] - w[1] * vv[0]]
        )
        qdot = 0.5 * np.array(
            [
                -qq[1] * w[0] - qq[2] * w[1] - qq[3] * w[2],
                qq[0] * w[0] + qq[2] * w[2] - qq[3] * w[1],
                qq[0] * w[1] - qq[1] * w[2] + qq[3] * w[0],
                qq[0] * w[2] + qq[1] * w[1] - qq[2] * w[0],
            ]
        )
        pdot = r @ vv
        return vdot, qdot, pdot

    h = dt
    k1 = rates(v, q)
    v2 = v + 0.5 * h * k1[0]
    k2 = rates(v2, q + 0.5 * h * k1[1])
    v3 = v + 0.5 * h * k2[0]
    k3 = rates(v3, q + 0.5 * h * k2[1])
    v4 = v + h * k3[0]
    k4 = rates(v4, q + h * k3[1])
    v1 = v + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    q1 = q + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    p1 = p + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return v1, q1, p1, np.stack([v, v2, v3, v4])


def _nq(qf):
    """(m,4) -> (m,3,2) tangent bases R(q) @ [e2 e3]."""
    w, x, y, z = qf[:, 0], qf[:, 1], qf[:, 2], qf[:, 3]
    n = np.empty((qf.shape[0], 3, 2))
    n[:, 0, 0] = 2.0 * (x * y - w * z)
    n[:, 1, 0] = 1.0 - 2.0 * (x * x + z * z)
    n[:, 2, 0] = 2.0 * (y * z + w * x)
    n[:, 0, 1] = 2.0 * (x * z + w * y)
    n[:, 1, 1] = 2.0 * (y * z - w * x)
    n[:, 2, 1] = 1.0 - 2.0 * (x * x + y * y)
    return n


def _rates(qf, rho, vr, wr):
    """Quaternion-space feature rates (qdot (m,4), rhodot (m,))."""
    p = _bearings(qf)
    n = _nq(qf)
    w_full = wr[None, :] + np.cross(p, vr[None, :]) / rho[:, None]
    u = -np.einsum("mij,mi->mj", n, w_full)
    # projected rotation rate in the radar frame
    om = np.einsum("mij,mj->mi", n, u)
    qw, qv = qf[:, 0], qf[:, 1:]
    qdot = np.empty_like(qf)
    qdot[:, 0] = -0.5 * np.einsum("mi,mi->m", om, qv)
    qdot[:, 1:] = 0.5 * (qw[:, None] * om + np.cross(om, qv))
    rhodot = -np.einsum("mi,i->m", p, vr)
    return qdot, rhodot


def propagate_features_rk4(qf, rho, vr_stages, wr, dt):
    """Joint-RK4 feature step with per-stage radar-frame velocities.

    vr_stages rows are the radar velocity at the four RK4 stage points of
    the accompanying nav integration; wr is constant over the step (ZOH).
    Returns renormalized bearing quaternions and unclamped depths.
    """
    h = dt
    k1q, k1r = _rates(qf, rho, vr_stages[0], wr)
    k2q, k2r = _rates(qf + 0.5 * h * k1q, rho + 0.5 * h * k1r, vr_stages[1], wr)
    k3q, k3r = _rates(qf + 0.5 * h * k2q, rho + 0.5 * h * k2r, vr_stages[2], wr)
    k4q, k4r = _rates(qf + h * k3q, rho + h * k3r, vr_stages[3], wr)
    q_out = qf + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    q_out /= np.linalg.norm(q_out, axis=1, keepdims=True)
    rho_out = rho + (h / 6.0) * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    return q_out, rho_out


def retract_bearings(qf, delta):
    """Batched bearing boxplus: rotate each quaternion by N(q) @ delta."""
    n = _nq(qf)
    phi = np.einsum("mij,mj->mi", n, delta)
    angle = np.linalg.norm(phi, axis=1)
    half = 0.5 * angle
    small = angle < 1e-8
    s = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    dq = np.empty((qf.shape[0], 4))
    dq[:, 0] = np.where(small, 1.0 - half * half / 2.0, np.cos(half))
    dq[:, 1:] = s[:, None] * phi
    out = _quat_mul_batch(dq, qf)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _quat_mul_batch(a, b):
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


def predict_blocks(qf, rho, vr, wr, r_rb, lever, f_bb, dt):
    """Per-feature transition/noise blocks for one anchor group.

    Returns (phi_ff (k,3,3), phi_fb (k,3,9), g_gyro (k,3,3)); see the
    compiled twin for the block definitions.
    """
    k = qf.shape[0]
    f_own, f_vr, f_wr = feature_state_blocks(qf, rho, vr, wr)
    f_fv = f_vr @ r_rb
    lx = np.array(
        [[0.0, -lever[2], lever[1]], [lever[2], 0.0, -lever[0]], [-lever[1], lever[0], 0.0]]
    )
    g_gyro = f_wr @ r_rb - f_fv @ lx
    phi_ff = np.eye(3)[None] + f_own * dt + 0.5 * dt * dt * (f_own @ f_own)
    f_fb = np.zeros((k, 3, 9))
    f_fb[:, :, 0:3] = f_fv
    phi_fb = f_fb * dt + 0.5 * dt * dt * (f_fb @ f_bb + f_own @ f_fb)
    return phi_ff, phi_fb, g_gyro


def psd_ok(p, jitter):
    """Cholesky feasibility with a bounded jitter retry."""
    for boost in (0.0, jitter):
        try:
            np.linalg.cholesky(p + boost * np.eye(p.shape[0]) if boost else p)
            return True
        except np.linalg.LinAlgError:
            continue
    return False


def cov_predict(p, phi_bb, phi_fb, phi_ff, g, qc, floor_diag, dt):
    """Structured covariance prediction Phi P Phi^T + Q.

    Phi = [[phi_bb, 0], [phi_fb, blockdiag(phi_ff)]]; Q is the input noise
    mapped through g (qc = per-channel variances) scaled by dt plus a
    diagonal floor.  Exploits the block sparsity so cost stays O(m^2)
    in small blocks rather than O(n^3).
    """
    nav = phi_bb.shape[0]
    m = phi_ff.shape[0]
    n = p.shape[0]
    p00 = p[:nav, :nav]
    p01 = p[:nav, nav:]
    p11 = p[nav:, nav:]

    def row_blocks(mat):
        return (phi_ff @ mat.reshape(m, 3, -1)).reshape(3 * m, -1)

    out = np.empty((n, n))
    out[:nav, :nav] = phi_bb @ p00 @ phi_bb.T
    if m:
        w = phi_fb @ p00 + row_blocks(p01.T)
        u = phi_fb @ p01 + row_blocks(p11)
        u_ct = (
            (u.reshape(3 * m, m, 3).transpose(1, 0, 2) @ phi_ff.transpose(0, 2, 1))
            .transpose(1, 0, 2)
            .reshape(3 * m, 3 * m)
        )
        out[nav:, :nav] = w @ phi_bb.T
        out[:nav, nav:] = out[nav:, :nav].T
        out[nav:, nav:] = w @ phi_fb.T + u_ct
    out += (g * qc) @ g.T * dt
    out[np.diag_indices(n)] += floor_diag * dt
    return 0.5 * (out + out.T)


def joseph_update(p, w, b, s):
    """Joseph-form posterior covariance P - WB^T - BW^T + WSW^T, symmetrized.

    w is the Kalman gain (n,4), b = P H^T (n,4), s the 4x4 innovation
    covariance.  Output is exactly symmetric.
    """
    m = w @ b.T
    out = p - m - m.T + (w @ s) @ w.T
    return 0.5 * (out + out.T)


def logdet9(p):
    """Log-determinant of the leading 9x9 block (-inf when singular)."""
    sign, val = np.linalg.slogdet(p[:9, :9])
    return float(val) if sign > 0 else -np.inf


def ekf_update_core(p, h_sub, cols, residual, r_cov, cond_limit):
    """Full measurement-update linear algebra in one call.

    h_sub (4,6) holds the nonzero H columns indexed by cols; returns
    (accepted, dx, p_new, s, d2, logdet9_new).  Rejects when the innovation
    covariance is ill-conditioned (eigenvalue ratio above cond_limit).
    """
    bht = p[:, cols] @ h_sub.T
    s = h_sub @ bht[cols] + r_cov
    s = 0.5 * (s + s.T)
    ev = np.linalg.eigvalsh(s)
    if ev[0] <= 0.0 or ev[-1] > cond_limit * ev[0]:
        return False, None, None, s, 0.0, 0.0
    sol = np.linalg.solve(s, np.column_stack([bht.T, residual]))
    k = sol[:, :-1].T
    d2 = float(residual @ sol[:, -1])
    dx = k @ residual
    p_new = joseph_update(p, k, bht, s)
    return True, dx, p_new, s, d2, logdet9(p_new)


def feature_state_blocks(qf, rho, vr, wr):
    """Continuous-time error-dynamics blocks for each feature.

    Error order per feature is [db (2 tangent), drho].  Returns
    (f_own (m,3,3), f_vr (m,3,3), f_wr (m,3,3)): Jacobians wrt the feature's
    own error, the radar-frame velocity, and the radar-frame angular rate.
    """
    m = qf.shape[0]
    p = _bearings(qf)
    n = _nq(qf)
    inv_rho = 1.0 / rho

    # [p x] N and [vr x][p x] N, batched
    pxn = np.cross(p[:, :, None], n, axisa=1, axisb=1, axisc=1)
    vxpxn = np.cross(np.broadcast_to(vr, (m, 3))[:, :, None], pxn, axisa=1, axisb=1, axisc=1)
    nt_pxn = np.einsum("mij,mik->mjk", n, pxn)
    nt_vxpxn = np.einsum("mij,mik->mjk", n, vxpxn)
    p_dot_wr = p @ wr
    pxv = np.cross(p, vr[None, :])

    f_own = np.zeros((m, 3, 3))
    f_own[:, 0:2, 0:2] = (
        -inv_rho[:, None, None] * nt_vxpxn - p_dot_wr[:, None, None] * nt_pxn
    )
    f_own[:, 0:2, 2] = inv_rho[:, None] ** 2 * np.einsum("mij,mi->mj", n, pxv)
    f_own[:, 2, 0:2] = np.einsum("i,mij->mj", vr, pxn)

    f_vr = np.zeros((m, 3, 3))
    px = np.zeros((m, 3, 3))
    px[:, 0, 1] = -p[:, 2]
    px[:, 0, 2] = p[:, 1]
    px[:, 1, 0] = p[:, 2]
    px[:, 1, 2] = -p[:, 0]
    px[:, 2, 0] = -p[:, 1]
    px[:, 2, 1] = p[:, 0]
    f_vr[:, 0:2, :] = -inv_rho[:, None, None] * np.einsum("mij,mik->mjk", n, px)
    f_vr[:, 2, :] = -p

    f_wr = np.zeros((m, 3, 3))
    f_wr[:, 0:2, :] = -np.transpose(n, (0, 2, 1))
    return f_own, f_vr, f_wr
