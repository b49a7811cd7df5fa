"""Rotation and unit-sphere algebra.

Conventions used everywhere in this package:

* Quaternions are Hamilton, stored as numpy arrays ``[w, x, y, z]`` and kept
  unit norm.  ``quat_to_rotmat(q_B)`` maps body vectors into the world frame.
* Attitude error is a left (global-frame) rotation vector:
  ``q boxplus dtheta = exp_so3(dtheta) * q``.
* A feature bearing is a quaternion ``q_f`` rotating ``e1`` onto the bearing
  direction; its 2-dof error lives in the tangent plane spanned by the
  columns of ``nq_projection(q_f)``.
"""

import numpy as np

from .errors import DegenerateGeometryError

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


def skew(v):
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def cross3(a, b):
    """Cross product of two 3-vectors (np.cross has heavy overhead here)."""
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n < 1e-12:
        raise DegenerateGeometryError("cannot normalize near-zero quaternion")
    return q / n


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a, b):
    """Hamilton product a * b, renormalized."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return quat_normalize(
        np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ]
        )
    )


def quat_to_rotmat(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def exp_so3(phi):
    """Rotation vector -> unit quaternion (Rodrigues / axis-angle)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    half = 0.5 * angle
    if angle < 1e-8:
        # sin(x)/x Taylor keeps full precision for tiny rotations
        s = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0 - half * half / 2.0, *(s * phi)]))
    s = np.sin(half) / angle
    return np.array([np.cos(half), s * phi[0], s * phi[1], s * phi[2]])


def log_so3(q):
    """Unit quaternion -> rotation vector, shortest representation."""
    if q[0] < 0.0:
        q = -q
    vn = np.linalg.norm(q[1:])
    if vn < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vn, q[0])
    return (angle / vn) * q[1:]


def rot_boxplus(q, dtheta):
    """Left (global) rotation-vector retraction of an attitude quaternion."""
    return quat_mul(exp_so3(dtheta), q)


def rot_boxminus(qa, qb):
    """Rotation vector r with qa = rot_boxplus(qb, r)."""
    return log_so3(quat_mul(qa, quat_conj(qb)))


def bearing_from_angles(azimuth, elevation):
    """Unit bearing [cos(el)cos(az), cos(el)sin(az), sin(el)]."""
    ce = np.cos(elevation)
    return np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def angles_from_bearing(b):
    """Inverse of bearing_from_angles; returns (azimuth, elevation)."""
    return np.arctan2(b[1], b[0]), np.arcsin(np.clip(b[2], -1.0, 1.0))


def bearing_vector(q_f):
    """Bearing p_f = R(q_f) @ e1 without building the full matrix."""
    w, x, y, z = q_f
    return np.array(
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ]
    )


def nq_projection(q_f):
    """3x2 tangent basis at the bearing: R(q_f) @ [e2 e3].

    Columns are orthonormal and orthogonal to bearing_vector(q_f).
    """
    w, x, y, z = q_f
    return np.array(
        [
            [2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def quat_from_two_vectors(a, b):
    """Shortest rotation taking unit vector a onto unit vector b."""
    d = float(np.dot(a, b))
    if d < -1.0 + 1e-12:
        raise DegenerateGeometryError("antipodal vectors: rotation is ambiguous")
    v = cross3(a, b)
    return quat_normalize(np.array([1.0 + d, v[0], v[1], v[2]]))


def bearing_quat(b):
    """Canonical bearing quaternion: shortest rotation from e1 to b.

    Fixes the gauge freedom (rotation about the bearing axis)
    deterministically.
    """
    return quat_from_two_vectors(E1, b)


def bearing_boxplus(q_f, delta):
    """Retract a 2-dof tangent perturbation: rotate q_f by N(q_f) @ delta."""
    n = nq_projection(q_f)
    return quat_mul(exp_so3(n @ delta), q_f)


def bearing_boxminus(qa, qb):
    """Tangent coordinates of bearing(qa) in the local basis at qb.

    Inverse of bearing_boxplus up to the gauge: depends only on the two
    bearing directions.  Raises for antipodal bearings.
    """
    pa = bearing_vector(qa)
    pb = bearing_vector(qb)
    c = cross3(pb, pa)
    sn = np.linalg.norm(c)
    cs = float(np.dot(pb, pa))
    if cs < -1.0 + 1e-12 and sn < 1e-9:
        raise DegenerateGeometryError("antipodal bearings have no tangent difference")
    if sn < 1e-12:
        return np.zeros(2)
    phi = (np.arctan2(sn, cs) / sn) * c
    return nq_projection(qb).T @ phi
