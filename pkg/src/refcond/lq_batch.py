"""Batch form of the finite-horizon LQ tracking problem.

The tracking problem for a discrete-time linear system

    x_{k+1} = A x_k + B u_k,      y_k = C x_k,

with cost

    J(u) = sum_{k=1}^{N} ||C x_k - r_k||_Q^2 + sum_{k=0}^{N-1} ||u_k||_R^2,

is condensed in time by rolling out the dynamics, which leaves the stacked
control sequence u = (u_0, ..., u_{N-1}) as the only decision variable.  The
unconstrained minimizer is affine in the initial state and in the stacked
reference r = (r_1, ..., r_N):

    u*(x0, r) = Fx x0 + Fr r.

This module builds the stacked operators, the Hessian H, and the gain
matrices Fx, Fr.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class NumericalError(RuntimeError):
    """Raised when a matrix fails a definiteness or conditioning requirement."""


def _as_matrix(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time plant (A, B) with tracking output map C and sample time Ts."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Ts: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "B", _as_matrix(self.B, "B"))
        object.__setattr__(self, "C", _as_matrix(self.C, "C"))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n_x:
            raise ValueError(f"B has {self.B.shape[0]} rows, expected {n_x}")
        if self.C.shape[1] != n_x:
            raise ValueError(f"C has {self.C.shape[1]} columns, expected {n_x}")
        if not self.Ts > 0:
            raise ValueError(f"Ts must be positive, got {self.Ts}")

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_r(self):
        return self.C.shape[0]


def zoh_double_integrator(Ts=0.1):
    """Double integrator p'' = u discretized with zero-order hold; output is position."""
    A = [[1.0, Ts], [0.0, 1.0]]
    B = [[0.5 * Ts * Ts], [Ts]]
    C = [[1.0, 0.0]]
    return LtiSystem(A, B, C, Ts)


@dataclass(frozen=True)
class TrackingWeights:
    """Quadratic weights: Q >= 0 on the tracking error, R > 0 on the input."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square, got {M.shape}")
            scale = np.linalg.norm(M, 2) if M.size else 0.0
            if np.linalg.norm(M - M.T, 2) > 1e-10 * max(scale, 1.0):
                raise ValueError(f"{name} must be symmetric")
        Q = 0.5 * (Q + Q.T)
        R = 0.5 * (R + R.T)
        # scale-relative definiteness tolerances
        q_norm = np.linalg.norm(Q, 2)
        if np.min(np.linalg.eigvalsh(Q)) < -1e-9 * q_norm:
            raise ValueError("Q must be positive semidefinite")
        r_norm = np.linalg.norm(R, 2)
        if np.min(np.linalg.eigvalsh(R)) <= 1e-12 * r_norm or r_norm == 0.0:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class BatchOperators:
    """Stacked horizon operators and the control-sequence Hessian.

    Abold (N nx, nx) stacks A, A^2, ..., A^N; Bbold (N nx, N nu) is lower
    block-triangular with block (i, j) = A^(i-j) B for i >= j; Cbold, Qbold,
    Rbold are N-fold block-diagonal copies of C, Q, R, and

        H = Bbold' Cbold' Qbold Cbold Bbold + Rbold.
    """

    Abold: np.ndarray
    Bbold: np.ndarray
    Cbold: np.ndarray
    Qbold: np.ndarray
    Rbold: np.ndarray
    H: np.ndarray
    N: int
    h_factor: tuple = field(repr=False, compare=False, default=None)

    @property
    def n_x(self):
        return self.Abold.shape[1]

    @property
    def n_u(self):
        return self.Bbold.shape[1] // self.N

    @property
    def n_r(self):
        return self.Cbold.shape[0] // self.N

    @cached_property
    def cost_gradient_map(self):
        """Bbold' Cbold' Qbold: maps a stacked output residual to the cost gradient."""
        return self.Bbold.T @ self.Cbold.T @ self.Qbold

    @cached_property
    def free_output_response(self):
        """Cbold Abold: stacked outputs produced by the initial state alone."""
        return self.Cbold @ self.Abold

    def linear_term(self, x, r_stacked):
        """Linear coefficient of the batch cost in u, for state x and stacked reference."""
        x = np.asarray(x, dtype=float).ravel()
        r_stacked = np.asarray(r_stacked, dtype=float).ravel()
        if x.size != self.n_x or r_stacked.size != self.N * self.n_r:
            raise ValueError("state or stacked reference has the wrong length")
        return self.cost_gradient_map @ (self.free_output_response @ x - r_stacked)


def build_batch_operators(sys: LtiSystem, w: TrackingWeights, N: int) -> BatchOperators:
    """Roll out the dynamics over N steps and assemble the batch cost operators."""
    if N < 1:
        raise ValueError(f"horizon must be at least 1, got N={N}")
    n_x, n_u, n_r = sys.n_x, sys.n_u, sys.n_r
    if w.Q.shape[0] != n_r:
        raise ValueError(f"Q is {w.Q.shape[0]}x{w.Q.shape[0]} but C has {n_r} rows")
    if w.R.shape[0] != n_u:
        raise ValueError(f"R is {w.R.shape[0]}x{w.R.shape[0]} but B has {n_u} columns")

    # powers[k] = A^k, built by repeated multiplication
    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(powers[-1] @ sys.A)

    Abold = np.vstack(powers[1 : N + 1])
    Bbold = np.zeros((N * n_x, N * n_u))
    impulse = [powers[k] @ sys.B for k in range(N)]
    for i in range(N):
        for j in range(i + 1):
            Bbold[i * n_x : (i + 1) * n_x, j * n_u : (j + 1) * n_u] = impulse[i - j]

    Cbold = np.kron(np.eye(N), sys.C)
    Qbold = np.kron(np.eye(N), w.Q)
    Rbold = np.kron(np.eye(N), w.R)

    CB = Cbold @ Bbold
    H = CB.T @ Qbold @ CB + Rbold
    H = 0.5 * (H + H.T)
    try:
        factor = cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "batch Hessian is not positive definite; check the weights"
        ) from exc
    return BatchOperators(Abold, Bbold, Cbold, Qbold, Rbold, H, N, factor)


@dataclass(frozen=True)
class TrackingGains:
    """Gains of the affine unconstrained optimum u*(x0, r) = Fx x0 + Fr r."""

    Fx: np.ndarray
    Fr: np.ndarray
    N: int

    @property
    def n_x(self):
        return self.Fx.shape[1]

    @property
    def n_u(self):
        return self.Fx.shape[0] // self.N

    @property
    def n_r(self):
        return self.Fr.shape[1] // self.N

    @cached_property
    def fr_max_singular_value(self):
        return float(np.linalg.norm(self.Fr, 2))


def tracking_gains(ops: BatchOperators) -> TrackingGains:
    """Solve for the optimal-policy matrices from the batch operators.

    Fx = -H^-1 Bbold' Cbold' Qbold Cbold Abold and Fr = H^-1 Bbold' Cbold' Qbold,
    computed with the cached symmetric factorization of H rather than an
    explicit inverse.
    """
    cond = np.linalg.cond(ops.H)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"batch Hessian is ill-conditioned (cond ~ {cond:.3e})")
    E = ops.cost_gradient_map
    Fr = cho_solve(ops.h_factor, E)
    Fx = -cho_solve(ops.h_factor, E @ ops.free_output_response)
    return TrackingGains(Fx, Fr, ops.N)


def open_loop_sequence(g: TrackingGains, x0, r):
    """Optimal stacked control sequence Fx x0 + Fr r."""
    x0 = np.asarray(x0, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    if x0.size != g.n_x:
        raise ValueError(f"x0 has length {x0.size}, expected {g.n_x}")
    if r.size != g.Fr.shape[1]:
        raise ValueError(f"stacked reference has length {r.size}, expected {g.Fr.shape[1]}")
    return g.Fx @ x0 + g.Fr @ r


def rollout(sys: LtiSystem, x0, u):
    """Apply x_{k+1} = A x_k + B u_k along a stacked input; returns stacked (x_1, ..., x_N)."""
    x0 = np.asarray(x0, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x0.size != sys.n_x:
        raise ValueError(f"x0 has length {x0.size}, expected {sys.n_x}")
    if u.size % sys.n_u != 0:
        raise ValueError("stacked input length is not a multiple of the input dimension")
    N = u.size // sys.n_u
    states = np.empty((N, sys.n_x))
    x = x0
    for k in range(N):
        x = sys.A @ x + sys.B @ u[k * sys.n_u : (k + 1) * sys.n_u]
        states[k] = x
    return states.ravel()


def tracking_cost(ops: BatchOperators, x0, u, r_stacked):
    """Batch cost J(u; x0, r) evaluated through the stacked operators."""
    x0 = np.asarray(x0, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    r_stacked = np.asarray(r_stacked, dtype=float).ravel()
    e = ops.Cbold @ (ops.Abold @ x0 + ops.Bbold @ u) - r_stacked
    return float(e @ ops.Qbold @ e + u @ ops.Rbold @ u)
