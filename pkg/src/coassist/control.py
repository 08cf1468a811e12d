"""Cooperative-game assistive controller.

Both players minimize quadratic costs; a convex combination (weight alpha)
turns the two-player problem into a single LQR over the joint input
u = [u_h, u_r].  The shared reference is the weight-blended composition of
the human and robot references, the gain comes from the continuous algebraic
Riccati equation, and the robot's assistive force is the lower slice of the
full-state feedback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import PlantParams, build_state_space

_SYM_TOL = 1e-12


class CareError(RuntimeError):
    """Riccati solve failed (unstabilizable pair or no convergence)."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class SingularBlendError(ValueError):
    """The blended state weight cannot be inverted."""


def _check_symmetric(name: str, mat: np.ndarray, tol: float = _SYM_TOL) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.max(np.abs(mat - mat.T)) > tol * max(1.0, np.max(np.abs(mat))):
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (mat + mat.T)


def _check_psd(name: str, mat: np.ndarray, strict: bool) -> np.ndarray:
    mat = _check_symmetric(name, mat)
    eigs = np.linalg.eigvalsh(mat)
    floor = -1e-10 * max(1.0, float(np.max(np.abs(eigs))))
    if strict:
        if np.min(eigs) <= 0.0:
            raise ValueError(f"{name} must be positive definite (min eig {np.min(eigs):.3g})")
    elif np.min(eigs) < floor:
        raise ValueError(f"{name} must be positive semidefinite (min eig {np.min(eigs):.3g})")
    return mat


@dataclass
class GameWeights:
    """Per-player quadratic weights and the cooperation weight alpha."""

    q_hh: np.ndarray          # (2d, 2d) human weight on own reference error
    q_hr: np.ndarray          # (2d, 2d) human weight on the robot's error
    q_rh: np.ndarray          # (2d, 2d) robot weight on the human's error
    q_rr: np.ndarray          # (2d, 2d) robot weight on own reference error
    r_h: np.ndarray           # (d, d) human effort weight
    r_r: np.ndarray           # (d, d) robot effort weight
    alpha: float = 0.8

    def __post_init__(self):
        self.q_hh = _check_psd("q_hh", self.q_hh, strict=False)
        self.q_hr = _check_psd("q_hr", self.q_hr, strict=False)
        self.q_rh = _check_psd("q_rh", self.q_rh, strict=False)
        self.q_rr = _check_psd("q_rr", self.q_rr, strict=False)
        self.r_h = _check_psd("r_h", self.r_h, strict=True)
        self.r_r = _check_psd("r_r", self.r_r, strict=True)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")

    @classmethod
    def default(cls, d: int = 2, alpha: float = 0.8,
                q_pos: float = 1.0, q_vel: float = 1e-4, r: float = 5e-4) -> "GameWeights":
        """Experimental defaults: equal players, zero cross-weights."""
        q = np.diag([q_pos] * d + [q_vel] * d)
        zero = np.zeros((2 * d, 2 * d))
        reff = np.eye(d) * r
        return cls(q_hh=q, q_hr=zero, q_rh=zero.copy(), q_rr=q.copy(),
                   r_h=reff, r_r=reff.copy(), alpha=alpha)


def combine_costs(w: GameWeights):
    """Blend the two players' weights into the shared cost.

    Returns (Q_c, R_c, Q_h, Q_r) with R_c block-diagonal over [u_h, u_r].
    """
    a = w.alpha
    q_c = a * (w.q_hh + w.q_hr) + (1.0 - a) * (w.q_rh + w.q_rr)
    d = w.r_h.shape[0]
    r_c = np.zeros((2 * d, 2 * d))
    r_c[:d, :d] = a * w.r_h
    r_c[d:, d:] = (1.0 - a) * w.r_r
    q_h = a * w.q_hh + (1.0 - a) * w.q_hr
    q_r = a * w.q_rh + (1.0 - a) * w.q_rr
    return q_c, r_c, q_h, q_r


def solve_lyapunov(F: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Solve F'P + PF = -S by the vectorized Kronecker linear system.

    Exact (dense LU) and cheap for the state dimensions used here (<= 12).
    """
    n = F.shape[0]
    eye = np.eye(n)
    lhs = np.kron(eye, F.T) + np.kron(F.T, eye)
    p = np.linalg.solve(lhs, -S.reshape(-1))
    P = p.reshape(n, n)
    return 0.5 * (P + P.T)


def care_residual(A, B, Q, R, P) -> float:
    res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.linalg.norm(res, "fro"))


def _initial_stabilizing_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Stabilizing start gain by pole shifting (Bass construction).

    With beta pushing every eigenvalue of A + beta*I into the right half
    plane, the Lyapunov solution W of (A+bI)W + W(A+bI)' = 2BB' is positive
    definite for a controllable pair, and K0 = B'W^-1 makes A - B K0 Hurwitz.
    """
    n = A.shape[0]
    if np.max(np.linalg.eigvals(A).real) < 0.0:
        return np.zeros((B.shape[1], n))     # already stable
    beta = 1.0 + float(np.linalg.norm(A, "fro"))
    Ab = A + beta * np.eye(n)
    # AX + XA' = Q form: swap transposes relative to solve_lyapunov
    lhs = np.kron(np.eye(n), Ab) + np.kron(Ab, np.eye(n))
    W = np.linalg.solve(lhs, (2.0 * B @ B.T).reshape(-1)).reshape(n, n)
    W = 0.5 * (W + W.T)
    eigs = np.linalg.eigvalsh(W)
    if np.min(eigs) <= 1e-12 * max(1.0, np.max(eigs)):
        raise CareError("pair (A, B) appears unstabilizable: "
                        "singular controllability Gramian surrogate")
    K0 = B.T @ np.linalg.inv(W)
    if np.max(np.linalg.eigvals(A - B @ K0).real) >= 0.0:
        raise CareError("pole-shifting initialization failed to stabilize")
    return K0


def solve_care(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               *, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Continuous algebraic Riccati equation by Kleinman-Newton iteration.

    Solves A'P + PA - P B R^-1 B' P + Q = 0.  Each step solves one Lyapunov
    equation for the current stabilizing gain; convergence is quadratic.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = _check_psd("Q", Q, strict=False)
    R = _check_psd("R", R, strict=True)
    K = _initial_stabilizing_gain(A, B)
    rinv_bt = np.linalg.solve(R, B.T)
    P = np.zeros_like(A)
    residual = np.inf
    for _ in range(max_iter):
        F = A - B @ K
        S = Q + K.T @ R @ K
        P = solve_lyapunov(F, S)
        K = rinv_bt @ P
        residual = care_residual(A, B, Q, R, P)
        if residual < tol:
            break
    else:
        raise CareError(f"Riccati iteration did not converge in {max_iter} steps "
                        f"(last residual {residual:.3g})", residual=residual)
    return P


def feedback_gain(P: np.ndarray, B: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Full-state feedback gain K = R^-1 B' P for u = -K (z - z_ref)."""
    return np.linalg.solve(R, B.T @ P)


@dataclass
class GameController:
    """Immutable bundle of everything the assistive loop needs."""

    d: int
    A: np.ndarray             # (2d, 2d) plant dynamics
    B: np.ndarray             # (2d, 2d) joint input matrix [B_h B_r]
    q_c: np.ndarray
    r_c: np.ndarray
    q_h: np.ndarray
    q_r: np.ndarray
    P: np.ndarray             # Riccati solution
    K_gt: np.ndarray          # (2d, 2d) joint feedback gain
    alpha: float
    pick_index: int = 20      # which predicted step feeds the reference
    weights: GameWeights | None = field(default=None, repr=False)

    def closed_loop_eigs(self) -> np.ndarray:
        return np.linalg.eigvals(self.A - self.B @ self.K_gt)


def build_game_controller(plant: PlantParams, weights: GameWeights,
                          pick_index: int = 20) -> GameController:
    """Assemble the cooperative controller for a plant.

    Verifies the Riccati residual, the symmetry/PSD-ness of P and that the
    closed loop is Hurwitz before returning.
    """
    A, B_h, B_r = build_state_space(plant)
    B = np.hstack([B_h, B_r])
    q_c, r_c, q_h, q_r = combine_costs(weights)
    P = solve_care(A, B, q_c, r_c)
    P = _check_psd("P", P, strict=False)
    K = feedback_gain(P, B, r_c)
    eigs = np.linalg.eigvals(A - B @ K)
    if np.max(eigs.real) >= 0.0:
        raise CareError(f"closed loop not Hurwitz (max Re eig {np.max(eigs.real):.3g})")
    if pick_index < 1:
        raise ValueError("pick_index must be >= 1")
    return GameController(d=plant.d, A=A, B=B, q_c=q_c, r_c=r_c, q_h=q_h, q_r=q_r,
                          P=P, K_gt=K, alpha=weights.alpha, pick_index=pick_index,
                          weights=weights)


def shared_reference(z_ref_h: np.ndarray, z_ref_r: np.ndarray,
                     ctrl: GameController) -> np.ndarray:
    """Blend the human and robot references: z_ref = Q_c^-1 (Q_h z_h + Q_r z_r)."""
    rhs = ctrl.q_h @ z_ref_h + ctrl.q_r @ z_ref_r
    diag = np.abs(np.diag(ctrl.q_c))
    dead = [int(i) for i in np.flatnonzero(diag <= 1e-300)]
    if dead:
        raise SingularBlendError(
            f"blended weight Q_c is singular; zero-weighted state coordinates: {dead}")
    try:
        return np.linalg.solve(ctrl.q_c, rhs)
    except np.linalg.LinAlgError:
        raise SingularBlendError("blended weight Q_c is singular") from None


def robot_action(ctrl: GameController, z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    """Assistive force: lower slice of the joint feedback u = -K_gt (z - z_ref)."""
    u = -ctrl.K_gt @ (z - z_ref)
    return u[ctrl.d:]


def reference_from_prediction(prediction: np.ndarray, x_now: np.ndarray,
                              pick_index: int, dt: float) -> np.ndarray:
    """Turn an N-step position prediction into a full-state reference.

    Takes the pick_index-th predicted point (1-based) as the position part;
    the velocity is its backward difference (against the measurement for the
    first point).
    """
    prediction = np.asarray(prediction, dtype=float)
    n = prediction.shape[0]
    if not 1 <= pick_index <= n:
        raise ValueError(f"pick_index {pick_index} outside 1..{n}")
    pos = prediction[pick_index - 1]
    prev = x_now if pick_index == 1 else prediction[pick_index - 2]
    vel = (pos - prev) / dt
    return np.concatenate([pos, vel])


def evaluate_game_cost(z_seq: np.ndarray, u_seq: np.ndarray, z_ref_seq: np.ndarray,
                       q_c: np.ndarray, r_c: np.ndarray, dt: float,
                       horizon_t: float | None = None) -> float:
    """Trapezoidal quadrature of the shared cost integrand over a rollout."""
    z_seq = np.atleast_2d(z_seq)
    u_seq = np.atleast_2d(u_seq)
    z_ref_seq = np.broadcast_to(np.asarray(z_ref_seq, dtype=float), z_seq.shape)
    n = z_seq.shape[0]
    if horizon_t is not None:
        n = min(n, int(round(horizon_t / dt)) + 1)
    err = z_seq[:n] - z_ref_seq[:n]
    integrand = (np.einsum("ti,ij,tj->t", err, q_c, err)
                 + np.einsum("ti,ij,tj->t", u_seq[:n], r_c, u_seq[:n]))
    return float(np.trapezoid(integrand, dx=dt))


def simulate_regulation(ctrl: GameController, z0: np.ndarray, horizon_t: float,
                        dt: float, gain: np.ndarray | None = None):
    """Closed-loop regulation to the origin under u = -K z, sampled exactly.

    Uses the matrix exponential of the closed loop per step, so the state
    samples carry no integration error; only the cost quadrature is
    approximate.  Returns (z_seq, u_seq).
    """
    from scipy.linalg import expm

    K = ctrl.K_gt if gain is None else gain
    F = ctrl.A - ctrl.B @ K
    steps = int(round(horizon_t / dt))
    Fd = expm(F * dt)
    z_seq = np.empty((steps + 1, z0.shape[0]))
    z_seq[0] = z0
    for i in range(steps):
        z_seq[i + 1] = Fd @ z_seq[i]
    u_seq = -(K @ z_seq.T).T
    return z_seq, u_seq


def controller_to_dict(ctrl: GameController) -> dict:
    """Full-precision export of the controller matrices."""
    def mat(m):
        return [[float(x) for x in row] for row in np.asarray(m)]
    return {"schema_version": 1, "d": ctrl.d, "alpha": ctrl.alpha,
            "pick_index": ctrl.pick_index,
            "A": mat(ctrl.A), "B": mat(ctrl.B), "Q_c": mat(ctrl.q_c),
            "R_c": mat(ctrl.r_c), "Q_h": mat(ctrl.q_h), "Q_r": mat(ctrl.q_r),
            "P": mat(ctrl.P), "K_gt": mat(ctrl.K_gt)}
