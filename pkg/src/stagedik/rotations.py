"""Small SO(3) helpers: exponential map, its left Jacobian and axis-angle rotations."""

import numpy as np

_SMALL = 1e-4


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def exp_map(w):
    """Rotation matrix of the rotation vector ``w`` (axis times angle, radians)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < _SMALL ** 2:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def left_jacobian(w):
    """Left Jacobian of SO(3): exp(w + dw) = exp(J_l(w) dw) exp(w) to first order."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < _SMALL ** 2:
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        c = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        theta = np.sqrt(theta2)
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * K + c * (K @ K)


def log_map(R):
    """Rotation vector of ``R`` with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return axis * theta
    return v * (theta / (2.0 * np.sin(theta)))


def axis_angle(axis, angle):
    return exp_map(np.asarray(axis, dtype=float) * angle)


def wrap_rotation_vector(w):
    """Equivalent rotation vector with norm <= pi."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta <= np.pi:
        return w
    return w * (1.0 - 2.0 * np.pi / theta) if theta < 2.0 * np.pi else log_map(exp_map(w))


def geodesic_angle(R1, R2):
    """Angle (radians) of the relative rotation R1^T R2."""
    cos_t = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_t, -1.0, 1.0)))
