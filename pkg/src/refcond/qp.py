"""Dense strictly convex quadratic programs and an active-set solver.

Solves

    minimize    1/2 z' H z + f' z
    subject to  lb <= z <= ub,   G z <= g,

with H symmetric positive definite.  The solver is a dual active-set method:
it starts from the unconstrained minimum and adds violated constraints one at
a time, taking partial steps (dropping blocking constraints) whenever a
working-set multiplier would turn negative.  Every iterate is the exact
minimizer of the problem restricted to the current working set, so the final
solution is certified by its KKT residual rather than by iteration count.

Constraint rows are indexed in a fixed order used for multipliers, active
sets, and warm starts:

    rows 0 .. n-1        lower bounds  (-z_i <= -lb_i)
    rows n .. 2n-1       upper bounds  ( z_i <=  ub_i)
    rows 2n .. 2n+m-1    general rows  ( G z <= g )
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lq_batch import BatchOperators, NumericalError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"


class QpInfeasibleError(RuntimeError):
    """Raised when a QP has provably inconsistent constraints."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


@dataclass
class DenseQp:
    """Strictly convex QP data; bounds default to unbounded, G may be empty."""

    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray = None
    ub: np.ndarray = None
    G: np.ndarray = None
    g: np.ndarray = None
    h_factor: tuple = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H must be square, got {self.H.shape}")
        scale = max(np.max(np.abs(self.H)), 1.0)
        if np.max(np.abs(self.H - self.H.T)) > 1e-10 * scale:
            raise ValueError("H must be symmetric")
        if self.f.size != n:
            raise ValueError(f"f has length {self.f.size}, expected {n}")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must have the same length as f")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"inconsistent bounds: lb[{bad}]={self.lb[bad]} > ub[{bad}]={self.ub[bad]}")
        if self.G is None:
            self.G = np.zeros((0, n))
            self.g = np.zeros(0)
        else:
            self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
            self.g = np.asarray(self.g, dtype=float).ravel()
            if self.G.shape[1] != n or self.G.shape[0] != self.g.size:
                raise ValueError("G/g dimensions do not match the decision vector")

    @property
    def n(self):
        return self.H.shape[0]

    @property
    def m(self):
        return self.G.shape[0]

    def objective(self, z):
        z = np.asarray(z, dtype=float).ravel()
        return float(0.5 * z @ self.H @ z + self.f @ z)


@dataclass
class QpSolution:
    """Primal solution with multipliers and the certified KKT residual.

    `duals` holds one multiplier per constraint row (see the module docstring
    for the row order); `active_set` lists the rows in the final working set.
    For an infeasible problem, `certificate` names a set of mutually
    inconsistent constraint rows.
    """

    z: np.ndarray
    status: str
    duals: np.ndarray
    active_set: tuple
    iterations: int
    kkt_residual: float
    certificate: tuple = None


def _kkt_residual(qp, z, duals, rows_C, rows_d, finite):
    lam = duals[finite]
    C = rows_C[finite]
    d = rows_d[finite]
    stationarity = np.max(np.abs(qp.H @ z + qp.f + C.T @ lam)) if lam.size else \
        np.max(np.abs(qp.H @ z + qp.f))
    slack = C @ z - d if lam.size else np.zeros(0)
    primal = max(0.0, float(np.max(slack))) if slack.size else 0.0
    dual = max(0.0, float(-np.min(lam))) if lam.size else 0.0
    comp = float(np.max(np.abs(lam * slack))) if lam.size else 0.0
    return max(stationarity, primal, dual, comp)


def solve(qp: DenseQp, tol_kkt=1e-8, max_iterations=None, warm_start=None) -> QpSolution:
    """Solve a strictly convex QP to the requested KKT tolerance.

    warm_start is an optional iterable of constraint-row indices used to seed
    the working set (typically the active set of the previous solve in a
    receding-horizon loop).
    """
    n, m = qp.n, qp.m
    if max_iterations is None:
        max_iterations = 10 * (n + m)

    factor = qp.h_factor
    if factor is None:
        try:
            factor = cho_factor(qp.H)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("QP Hessian is not positive definite") from exc

    # unified constraint rows: lower bounds, upper bounds, general rows
    rows_C = np.vstack([-np.eye(n), np.eye(n), qp.G])
    rows_d = np.concatenate([-qp.lb, qp.ub, qp.g])
    finite = np.isfinite(rows_d)
    n_rows = rows_d.size

    def eqp(active):
        """Minimizer and multipliers with the rows in `active` held at equality."""
        if not active:
            return -cho_solve(factor, qp.f), np.zeros(0)
        C = rows_C[active]
        d = rows_d[active]
        Y = cho_solve(factor, C.T)          # H^-1 C'
        M = C @ Y
        M = 0.5 * (M + M.T)
        lam = np.linalg.solve(M, -(d + C @ cho_solve(factor, qp.f)))
        z = -cho_solve(factor, qp.f + C.T @ lam)
        return z, lam

    active = []
    lam = np.zeros(0)
    if warm_start:
        seed = [int(i) for i in warm_start if 0 <= int(i) < n_rows and finite[int(i)]]
        seed = sorted(set(seed))
        try:
            while seed:
                z, lam = eqp(seed)
                if lam.size == 0 or np.min(lam) >= 0.0:
                    break
                del seed[int(np.argmin(lam))]
            else:
                z, lam = eqp(seed)
            active = seed
        except np.linalg.LinAlgError:
            active, lam = [], np.zeros(0)
            z = -cho_solve(factor, qp.f)
    else:
        z = -cho_solve(factor, qp.f)

    iterations = 0
    while True:
        # most violated constraint outside the working set (lowest index on ties)
        slack = rows_C @ z - rows_d
        slack[~finite] = -np.inf
        if active:
            slack[active] = -np.inf
        p = int(np.argmax(slack))
        row_scale = 1.0 + (abs(rows_d[p]) if np.isfinite(rows_d[p]) else 0.0)
        if slack[p] <= 0.1 * tol_kkt * row_scale:
            try:
                z, lam = eqp(active)  # final polish of the optimal working set
            except np.linalg.LinAlgError:
                pass
            duals = np.zeros(n_rows)
            duals[active] = lam
            res = _kkt_residual(qp, z, duals, rows_C, rows_d, finite)
            status = OPTIMAL if res <= tol_kkt else MAX_ITERATIONS
            return QpSolution(z, status, duals, tuple(active), iterations, res)

        c_p = rows_C[p]
        lam_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iterations:
                duals = np.zeros(n_rows)
                duals[active] = lam
                res = _kkt_residual(qp, z, duals, rows_C, rows_d, finite)
                return QpSolution(z, MAX_ITERATIONS, duals, tuple(active), iterations, res)

            # step directions keeping the working set tight while loading p
            hc = cho_solve(factor, c_p)
            if active:
                C = rows_C[active]
                Y = cho_solve(factor, C.T)
                M = C @ Y
                M = 0.5 * (M + M.T)
                dlam = np.linalg.solve(M, -(C @ hc))
                dz = -(hc + Y @ dlam)
            else:
                dlam = np.zeros(0)
                dz = -hc
            curvature = float(c_p @ dz) * -1.0  # equals dz' H dz >= 0
            s_p = float(c_p @ z - rows_d[p])

            t_full = s_p / curvature if curvature > 1e-12 * max(1.0, abs(float(c_p @ hc))) else np.inf

            blocking = np.where(dlam < -1e-12)[0]
            if blocking.size:
                ratios = -lam[blocking] / dlam[blocking]
                j_local = blocking[int(np.argmin(ratios))]
                t_block = float(ratios.min())
            else:
                j_local = -1
                t_block = np.inf

            t = min(t_full, t_block)
            if not np.isfinite(t):
                cert = tuple(sorted(active + [p]))
                duals = np.zeros(n_rows)
                duals[active] = lam
                res = _kkt_residual(qp, z, duals, rows_C, rows_d, finite)
                return QpSolution(z, INFEASIBLE, duals, tuple(active), iterations, res, cert)

            z = z + t * dz
            lam = lam + t * dlam
            lam_p += t
            if t_full <= t_block:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            # partial step: drop the blocking constraint and keep loading p
            del active[j_local]
            lam = np.maximum(np.delete(lam, j_local), 0.0)


def build_mpc_qp(ops: BatchOperators, x, rbar_stacked, input_bounds=None,
                 state_constraints=None) -> DenseQp:
    """Assemble the condensed MPC program for state x and a stacked reference.

    input_bounds is a (lb, ub) pair applied at every step (scalars or
    per-input vectors; None for unbounded).  state_constraints is an optional
    (Hx, hx) polyhedron Hx x_k <= hx, imposed at every predicted step and
    mapped through the dynamics rollout into general rows on u.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size != ops.n_x:
        raise ValueError(f"state has length {x.size}, expected {ops.n_x}")
    f = ops.linear_term(x, rbar_stacked)

    N, n_u = ops.N, ops.n_u
    lb = ub = None
    if input_bounds is not None:
        lo, hi = input_bounds
        lo = np.full(n_u, -np.inf) if lo is None else np.broadcast_to(
            np.asarray(lo, dtype=float).ravel(), (n_u,))
        hi = np.full(n_u, np.inf) if hi is None else np.broadcast_to(
            np.asarray(hi, dtype=float).ravel(), (n_u,))
        lb = np.tile(lo, N)
        ub = np.tile(hi, N)

    G = g = None
    if state_constraints is not None:
        Hx, hx = state_constraints
        Hx = np.atleast_2d(np.asarray(Hx, dtype=float))
        hx = np.asarray(hx, dtype=float).ravel()
        if Hx.shape[1] != ops.n_x or Hx.shape[0] != hx.size:
            raise ValueError("state constraint dimensions do not match the system")
        Hbig = np.kron(np.eye(N), Hx)
        G = Hbig @ ops.Bbold
        g = np.tile(hx, N) - Hbig @ (ops.Abold @ x)
        # prune vacuous rows; an unsatisfiable constant row is a hard stop
        zero_rows = np.max(np.abs(G), axis=1) == 0.0
        if np.any(zero_rows & (g < 0)):
            bad = int(np.argmax(zero_rows & (g < 0)))
            raise QpInfeasibleError(
                f"state constraint row {bad} is unsatisfiable for the current state",
                certificate=(bad,),
            )
        keep = ~zero_rows
        G = G[keep]
        g = g[keep]

    return DenseQp(ops.H, f, lb=lb, ub=ub, G=G, g=g, h_factor=ops.h_factor)
