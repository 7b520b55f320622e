"""Quaternion, rotation-matrix and 6D rotation helpers.

Quaternions are stored ``(w, x, y, z)`` along the last axis.  All functions
broadcast over leading axes.
"""
from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6


def identity_quat(*shape: int) -> np.ndarray:
    q = np.zeros(shape + (4,))
    q[..., 0] = 1.0
    return q


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=float))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Convert rotation matrices to unit quaternions with ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    r = m.reshape(-1, 3, 3)
    m00, m11, m22 = r[:, 0, 0], r[:, 1, 1], r[:, 2, 2]
    tr = m00 + m11 + m22
    # Shepperd: branch on the largest of (trace, diagonal) for stability
    choice = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)
    s = np.stack(
        [1.0 + tr, 1.0 + m00 - m11 - m22, 1.0 - m00 + m11 - m22, 1.0 - m00 - m11 + m22], axis=1
    )
    s = 2.0 * np.sqrt(np.maximum(s[np.arange(len(r)), choice], 1e-300))
    d21, d02, d10 = r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]
    s01, s02, s12 = r[:, 0, 1] + r[:, 1, 0], r[:, 0, 2] + r[:, 2, 0], r[:, 1, 2] + r[:, 2, 1]
    cand = np.stack(
        [
            np.stack([0.25 * s, d21 / s, d02 / s, d10 / s], axis=1),
            np.stack([d21 / s, 0.25 * s, s01 / s, s02 / s], axis=1),
            np.stack([d02 / s, s01 / s, 0.25 * s, s12 / s], axis=1),
            np.stack([d10 / s, s02 / s, s12 / s, 0.25 * s], axis=1),
        ],
        axis=1,
    )
    q = cand[np.arange(len(r)), choice]
    q[q[:, 0] < 0] *= -1
    return quat_normalize(q).reshape(m.shape[:-2] + (4,))


def axis_angle_to_quat(rotvec):
    """Exponential map from rotation vectors (angle * unit axis)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), rotvec * k], axis=-1)


def quat_angle(a, b):
    """Geodesic angle in radians between orientations ``a`` and ``b``."""
    dot = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


def random_quat(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return quat_normalize(rng.standard_normal(shape + (4,)))


def check_unit(q, what="quaternion", tol=UNIT_TOL):
    from .errors import ValidationError

    norms = np.linalg.norm(np.asarray(q, dtype=float), axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValidationError(f"{what} not unit norm (max deviation {worst:.3g} > {tol:g})")


def matrix_to_6d(m):
    """First two columns, column-major: ``(m00, m10, m20, m01, m11, m21)``."""
    m = np.asarray(m, dtype=float)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def sixd_to_matrix(d6):
    """Gram-Schmidt on the two stored columns, third column by cross product."""
    d6 = np.asarray(d6, dtype=float)
    a, b = d6[..., :3], d6[..., 3:6]
    c0 = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - np.sum(c0 * b, axis=-1, keepdims=True) * c0
    c1 = b / np.linalg.norm(b, axis=-1, keepdims=True)
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)
