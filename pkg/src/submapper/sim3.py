"""Sim(3) / SE(3) group and algebra operations.

Conventions used throughout the package:

* A similarity transform acts on points as ``y = s * R @ x + t``.
* Tangent vectors are 7-vectors ordered ``(omega[0:3], sigma[3:6], mu[6])``
  where omega is the rotation part (radians), sigma the translation part
  and mu the log of scale.
* ``compose(A, B)`` is "A applied first": as 4x4 matrices the result is
  ``B.matrix() @ A.matrix()``.
* Solver updates are left-multiplicative: ``G <- exp(v_up) * G``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateLogError(ValueError):
    """Rotation angle at pi: the logarithm axis is ambiguous."""


def skew(v):
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(omega):
    """Rodrigues rotation from an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    S = skew(omega)
    if theta < 1e-4:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0        # sin(t)/t
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0       # (1-cos(t))/t^2
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * S + b * (S @ S)


def so3_log(R):
    """Axis-angle of a rotation matrix, ||omega|| < pi.

    Raises DegenerateLogError within 1e-9 of a half-turn.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-9:
        raise DegenerateLogError("rotation angle at pi, axis ambiguous")
    w = _vee(R - R.T) / 2.0  # = sin(theta) * axis
    if theta < 1e-4:
        t2 = theta * theta
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    if theta < 2.9:
        return w * (theta / np.sin(theta))
    # Near pi sin(theta) is small; recover the axis from the symmetric part.
    outer = (R + R.T) / 2.0 - np.cos(theta) * np.eye(3)
    outer /= 1.0 - np.cos(theta)  # = axis @ axis.T
    k = int(np.argmax(np.diag(outer)))
    axis = outer[k] / np.sqrt(outer[k, k])
    if np.dot(axis, w) < 0.0:
        axis = -axis
    return theta * axis


def _tau_moment(n, mu):
    """Integral of tau^n * exp(mu*tau) over tau in [0, 1]."""
    if abs(mu) < 1e-3:
        # Series sum_k mu^k / (k! (k+n+1)); truncation error < 1e-18 here.
        acc = 0.0
        term = 1.0
        for k in range(7):
            acc += term / (k + n + 1)
            term *= mu / (k + 1)
        return acc
    s = np.exp(mu)
    val = np.expm1(mu) / mu
    for m in range(1, n + 1):
        val = (s - m * val) / mu
    return val


def _w_matrix(omega, mu):
    """Translation mixing matrix: integral of exp(tau*mu)*R(tau*omega) dtau."""
    theta = np.linalg.norm(omega)
    c = _tau_moment(0, mu)
    if theta < 1e-2:
        t2 = theta * theta
        a = _tau_moment(1, mu) - t2 / 6.0 * _tau_moment(3, mu) \
            + t2 * t2 / 120.0 * _tau_moment(5, mu)
        b = _tau_moment(2, mu) / 2.0 - t2 / 24.0 * _tau_moment(4, mu) \
            + t2 * t2 / 720.0 * _tau_moment(6, mu)
    else:
        s = np.exp(mu)
        denom = mu * mu + theta * theta
        a = (s * (mu * np.sin(theta) - theta * np.cos(theta)) + theta) \
            / (theta * denom)
        b = (c - (s * (mu * np.cos(theta) + theta * np.sin(theta)) - mu)
             / denom) / (theta * theta)
    S = skew(omega)
    return c * np.eye(3) + a * S + b * (S @ S)


@dataclass
class Sim3:
    """Similarity transform acting as y = s * R @ x + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    s: float = 1.0
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def matrix(self):
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def check(self, tol=1e-9):
        """Verify rotation orthonormality and positive scale."""
        ok = (np.abs(self.R @ self.R.T - np.eye(3)).max() < tol
              and abs(np.linalg.det(self.R) - 1.0) < 10 * tol
              and self.s > 0)
        if not ok:
            raise ValueError("invalid similarity transform")
        return self


@dataclass
class SE3:
    """Rigid transform y = R @ x + t (the s=1 case, kept separate for BA)."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.R.T + self.t

    def inverse(self):
        return SE3(self.R.T, -self.R.T @ self.t)

    def compose_after(self, other):
        """self applied after other: matrix product self * other."""
        return SE3(self.R @ other.R, self.R @ other.t + self.t)

    def center(self):
        """Camera center for a camera-from-world pose."""
        return -self.R.T @ self.t

    def as_sim3(self):
        return Sim3(self.R.copy(), 1.0, self.t.copy())


def se3_exp(v):
    """SE(3) exponential of (omega, sigma)."""
    v = np.asarray(v, dtype=float)
    R = so3_exp(v[:3])
    V = _w_matrix(v[:3], 0.0)
    return SE3(R, V @ v[3:6])


def sim3_exp(v):
    """Group element of a tangent 7-vector (omega, sigma, mu)."""
    v = np.asarray(v, dtype=float)
    omega, sigma, mu = v[:3], v[3:6], v[6]
    R = so3_exp(omega)
    W = _w_matrix(omega, mu)
    return Sim3(R, float(np.exp(mu)), W @ sigma)


def sim3_log(G):
    """Canonical tangent 7-vector; inverse of sim3_exp for ||omega|| < pi."""
    omega = so3_log(G.R)
    mu = np.log(G.s)
    W = _w_matrix(omega, mu)
    sigma = np.linalg.solve(W, G.t)
    return np.concatenate([omega, sigma, [mu]])


def sim3_identity():
    return Sim3()


def sim3_compose(A, B):
    """A applied first, then B (matrix product B * A)."""
    return Sim3(B.R @ A.R, B.s * A.s, B.s * (B.R @ A.t) + B.t)


def sim3_inverse(G):
    Rinv = G.R.T
    sinv = 1.0 / G.s
    return Sim3(Rinv, sinv, -sinv * (Rinv @ G.t))


def sim3_apply(G, x):
    """Transform one point or an (n, 3) array of points."""
    x = np.asarray(x, dtype=float)
    return G.s * (x @ G.R.T) + G.t


def sim3_manifold_update(state, v_up):
    """Left-multiplicative solver update of a (tangent, group) state pair.

    Returns the new pair (log(exp(v_up) * exp(v)), exp(v_up) * G).
    """
    v, G = state
    G_up = sim3_exp(v_up)
    new_v = sim3_log(sim3_compose(sim3_exp(v), G_up))
    new_G = sim3_compose(G, G_up)
    return new_v, new_G


def alignment_residual_and_jacobians(G, x, X):
    """Residual s*R@x + t - X and its Jacobians.

    J_pose is 3x7 with columns ordered (omega, sigma, mu) for the
    left-multiplicative update at G; J_landmark is d(residual)/dX = -I.
    """
    y = sim3_apply(G, x)
    r = y - np.asarray(X, dtype=float)
    J_pose = np.hstack([-skew(y), np.eye(3), y.reshape(3, 1)])
    return r, J_pose, -np.eye(3)
