"""SE(3) kernel: hat/vee, exp/log, perturbation sampling and pose compounding.

Twists are 6-vectors ordered ``(rho, phi)``: translation part first, rotation
part second. Covariances over twists are plain ``(6, 6)`` arrays with the
same block order. Every vectorised function accepts arbitrary leading batch
dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

POSE_TOL = 1e-9
_SERIES_ANGLE = 1e-3
_PI_MARGIN = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > POSE_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, reproject: bool = False) -> "Pose":
        m = np.asarray(m, dtype=float)
        R = m[:3, :3]
        if reproject:
            R = project_to_so3(R)
        return cls(R, m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        """Transform an ``(N, 3)`` array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def distance(self, other: "Pose") -> float:
        """Frobenius distance between the 4x4 matrices."""
        return float(np.linalg.norm(self.matrix - other.matrix))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def project_to_so3(R) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def hat(xi) -> np.ndarray:
    """Map twist(s) ``(..., 6)`` to ``(..., 4, 4)`` matrices."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != 6:
        raise ValueError("twist must have 6 components")
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(m, tol: float = POSE_TOL) -> np.ndarray:
    """Inverse of :func:`hat`; rejects matrices without the hat structure."""
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (4, 4):
        raise ValueError("expected 4x4 matrix")
    W = m[..., :3, :3]
    if np.abs(W + np.swapaxes(W, -1, -2)).max(initial=0.0) > tol:
        raise ValueError("rotation block is not skew-symmetric")
    if np.abs(m[..., 3, :]).max(initial=0.0) > tol:
        raise ValueError("bottom row must be zero")
    phi = 0.5 * np.stack(
        [W[..., 2, 1] - W[..., 1, 2], W[..., 0, 2] - W[..., 2, 0], W[..., 1, 0] - W[..., 0, 1]],
        axis=-1,
    )
    return np.concatenate([m[..., :3, 3], phi], axis=-1)


def _exp_coefficients(theta):
    """Return ``sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3`` with a series branch."""
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    half = np.sin(0.5 * t) / t
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half)
    c = np.where(
        small,
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        (t - np.sin(t)) / (t * t * t),
    )
    return a, b, c


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _exp_coefficients(theta)
    K = skew(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_log(R) -> np.ndarray:
    """Rotation vector of ``R``; raises near angle pi where the log is not unique."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    s = np.linalg.norm(w, axis=-1)
    c = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - _PI_MARGIN):
        raise ValueError("rotation angle too close to pi for a unique logarithm")
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    # theta / sin(theta)
    factor = np.where(small, 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0, t / np.where(small, 1.0, s))
    return factor[..., None] * w


def left_jacobian(phi) -> np.ndarray:
    """SO(3) left Jacobian ``V`` mapping rho to the exp translation."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _exp_coefficients(theta)
    K = skew(phi)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def inverse_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    half = 0.5 * t
    coef = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (t * t),
    )
    K = skew(phi)
    return np.eye(3) - 0.5 * K + coef[..., None, None] * (K @ K)


def exp_batch(xi):
    """Vectorised exponential: returns ``(R, t)`` arrays for twists ``(..., 6)``."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist entries must be finite")
    phi = xi[..., 3:]
    R = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", left_jacobian(phi), xi[..., :3])
    return R, t


def log_batch(R, t) -> np.ndarray:
    """Vectorised logarithm of ``(R, t)`` arrays; returns ``(..., 6)`` twists."""
    phi = so3_log(R)
    rho = np.einsum("...ij,...j->...i", inverse_left_jacobian(phi), np.asarray(t, dtype=float))
    return np.concatenate([rho, phi], axis=-1)


def exp_map(xi) -> Pose:
    R, t = exp_batch(np.asarray(xi, dtype=float).reshape(6))
    return Pose(R, t)


def log_map(T: Pose) -> np.ndarray:
    return log_batch(T.rotation, T.translation)


def icp_error(T_hat: Pose, T_true: Pose) -> np.ndarray:
    """Error twist ``log(T_hat^-1 T_true)`` used as the regression label."""
    return log_map(T_hat.inverse() @ T_true)


def adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint for the ``(rho, phi)`` ordering."""
    R = T.rotation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[:3, 3:] = skew(T.translation) @ R
    return Ad


def _cov_factor(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(0.5 * (cov + cov.T))
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ValueError("covariance is not positive semidefinite")
        return U * np.sqrt(np.clip(w, 0.0, None))


def sample_twists(cov, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` zero-mean twists with covariance ``cov``."""
    L = _cov_factor(cov)
    return rng.standard_normal((size, 6)) @ L.T


def sample_perturbed_pose(T: Pose, cov, rng_seed) -> Pose:
    """Return ``T exp(xi)`` with ``xi ~ N(0, cov)``."""
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return T
    xi = sample_twists(cov, 1, np.random.default_rng(rng_seed))[0]
    return T @ exp_map(xi)


# -- covariance compounding ---------------------------------------------------


def _angle(A):
    return -np.trace(A) * np.eye(3) + A


def _angle2(A, B):
    return _angle(A) @ _angle(B) + _angle(B @ A)


def compound_left(S1, S2, order: int = 4) -> np.ndarray:
    """Covariance of ``exp(a) exp(b)`` for left perturbations.

    ``S1`` is the covariance of the first factor, ``S2`` the covariance of the
    second factor already transported into the first factor's frame.
    """
    S1 = np.asarray(S1, dtype=float)
    S2 = np.asarray(S2, dtype=float)
    S = S1 + S2
    if order == 2:
        return S
    if order != 4:
        raise ValueError("order must be 2 or 4")

    def blocks(M):
        return M[:3, :3], M[:3, 3:], M[3:, 3:]

    r1, rp1, p1 = blocks(S1)
    r2, rp2, p2 = blocks(S2)

    def a_matrix(rr, rp, pp):
        A = np.zeros((6, 6))
        A[:3, :3] = _angle(pp)
        A[:3, 3:] = _angle(rp + rp.T)
        A[3:, 3:] = _angle(pp)
        return A

    A1 = a_matrix(r1, rp1, p1)
    A2 = a_matrix(r2, rp2, p2)

    B_rr = _angle2(p1, r2) + _angle2(rp1.T, rp2) + _angle2(rp1, rp2.T) + _angle2(r1, p2)
    B_rp = _angle2(p1, rp2.T) + _angle2(rp1.T, p2)
    B_pp = _angle2(p1, p2)
    B = np.block([[B_rr, B_rp], [B_rp.T, B_pp]])

    S = S + 0.25 * B + (A1 @ S2 + S2 @ A1.T + A2 @ S1 + S1 @ A2.T) / 12.0
    return 0.5 * (S + S.T)


def compose_with_covariance(
    chain: Sequence[tuple[Pose, np.ndarray]] | Iterable[tuple[Pose, np.ndarray]],
    order: int = 4,
    return_steps: bool = False,
):
    """Compose ``T_1 T_2 ... T_n`` and propagate right-perturbation covariances.

    Each covariance describes ``T_true = T_i exp(xi)``, the same convention as
    :func:`icp_error` labels. Internally the chain is compounded with left
    perturbations and the result is mapped back to the right of the final pose.
    With ``return_steps`` a list of the intermediate (pose, covariance) pairs is
    returned as well.
    """
    chain = list(chain)
    if not chain:
        raise ValueError("empty chain")
    T, cov = chain[0]
    cov = np.asarray(cov, dtype=float)
    steps = [(T, cov)]
    if len(chain) == 1:
        return (T, cov, steps) if return_steps else (T, cov)

    Ad = adjoint(T)
    S_left = Ad @ cov @ Ad.T
    for T_i, cov_i in chain[1:]:
        cov_i = np.asarray(cov_i, dtype=float)
        T = T @ T_i
        Ad = adjoint(T)
        # right perturbation of T_i becomes a left perturbation at the composed pose
        S_i = Ad @ cov_i @ Ad.T
        if np.any(S_left) and np.any(S_i):
            S_left = compound_left(S_left, S_i, order)
        else:
            S_left = S_left + S_i
        Ad_inv = np.linalg.inv(Ad)
        cov = Ad_inv @ S_left @ Ad_inv.T
        cov = 0.5 * (cov + cov.T)
        steps.append((T, cov))
    return (T, cov, steps) if return_steps else (T, cov)


def monte_carlo_compound(chain, samples: int, rng_seed=0, chunk: int = 20000):
    """Monte-Carlo reference for :func:`compose_with_covariance`.

    Samples right perturbations for every link, composes and returns the
    sample covariance of the resulting right-perturbation twist.
    """
    chain = list(chain)
    rng = np.random.default_rng(rng_seed)
    T_mean = chain[0][0]
    for T_i, _ in chain[1:]:
        T_mean = T_mean @ T_i
    Rm_inv = T_mean.rotation.T
    tm = T_mean.translation
    out = []
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        R = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        t = np.zeros((n, 3))
        for T_i, cov_i in chain:
            dR, dt = exp_batch(sample_twists(cov_i, n, rng))
            Ri = T_i.rotation @ dR
            ti = np.einsum("ij,nj->ni", T_i.rotation, dt) + T_i.translation
            t = np.einsum("nij,nj->ni", R, ti) + t
            R = R @ Ri
        # error = T_mean^-1 T_sample
        eR = Rm_inv @ R
        et = np.einsum("ij,nj->ni", Rm_inv, t - tm)
        out.append(log_batch(eR, et))
        remaining -= n
    xi = np.concatenate(out)
    return np.einsum("ni,nj->ij", xi, xi) / len(xi)


# -- text serialisation (KITTI odometry pose format) ---------------------------


def pose_to_row(T: Pose) -> np.ndarray:
    return T.matrix[:3, :].reshape(12)


def pose_from_row(row, reproject: bool = True) -> Pose:
    row = np.asarray(row, dtype=float)
    if row.shape != (12,):
        raise ValueError("pose row must hold 12 numbers")
    m = np.eye(4)
    m[:3, :] = row.reshape(3, 4)
    return Pose.from_matrix(m, reproject=reproject)


def save_poses(path, poses: Sequence[Pose]) -> None:
    with open(path, "w") as f:
        for T in poses:
            f.write(" ".join(f"{v:.17g}" for v in pose_to_row(T)) + "\n")


def load_poses(path, reproject: bool = True) -> list[Pose]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = np.array([float(v) for v in line.split()])
                poses.append(pose_from_row(row, reproject=reproject))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed pose line ({exc})") from None
    return poses
