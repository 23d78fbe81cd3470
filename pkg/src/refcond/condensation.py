"""Condensation of a preview reference trajectory into a single setpoint.

A stacked preview r = (r_1, ..., r_N) is compressed to one setpoint rbar = S r
chosen so that the control sequence induced by holding rbar constant matches
the preview-optimal sequence as closely as possible:

    minimize_rbar  || Fr r - Fr Ibold rbar ||^2,

where Ibold stacks N copies of the identity.  The minimum-norm solution is
S = pinv(Fr Ibold) Fr.  A weighted variant emphasizes the first control of
the sequence (the only one applied in receding-horizon use) by scaling the
first block of the matching residual by rho before solving the least-squares
problem.

Both maps reproduce constant previews exactly and have unit row sums whenever
Fr Ibold has full column rank, so the setpoint is an affine combination of
the window samples.  The module also provides the two error bounds that
control how far condensed tracking can drift from full preview tracking.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .lq_batch import LtiSystem, NumericalError, TrackingGains

UNWEIGHTED = "unweighted"
WEIGHTED = "weighted"


def stacked_identity(n_r, N):
    """N copies of the n_r identity stacked vertically."""
    return np.tile(np.eye(n_r), (N, 1))


@dataclass(frozen=True)
class CondensationMap:
    """Linear map S from a stacked preview (N n_r) to one setpoint (n_r).

    rank_ok records whether Fr Ibold had full column rank at construction;
    the affine-combination and constant-recovery properties are only
    guaranteed when it did.
    """

    S: np.ndarray
    kind: str
    rho: float = None
    rank_ok: bool = True

    @property
    def n_r(self):
        return self.S.shape[0]

    @property
    def N(self):
        return self.S.shape[1] // self.S.shape[0]


def _rank_cutoff(FrI):
    return max(FrI.shape) * np.finfo(float).eps


def unweighted_map(g: TrackingGains) -> CondensationMap:
    """Minimum-norm least-squares condensation S = pinv(Fr Ibold) Fr."""
    Ibold = stacked_identity(g.n_r, g.N)
    FrI = g.Fr @ Ibold
    U, sv, Vt = np.linalg.svd(FrI, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        warnings.warn("Fr Ibold is identically zero; condensation map degenerates to zero")
        return CondensationMap(np.zeros((g.n_r, g.N * g.n_r)), UNWEIGHTED, rank_ok=False)
    cutoff = _rank_cutoff(FrI) * sv[0]
    rank_ok = bool(sv[-1] > cutoff)
    if not rank_ok:
        warnings.warn("Fr Ibold is rank deficient; condensed setpoint is the "
                      "minimum-norm choice and row sums may differ from one")
    inv_sv = np.where(sv > cutoff, 1.0 / np.where(sv > cutoff, sv, 1.0), 0.0)
    pinv = (Vt.T * inv_sv) @ U.T
    return CondensationMap(pinv @ g.Fr, UNWEIGHTED, rank_ok=rank_ok)


def weighted_map(g: TrackingGains, rho) -> CondensationMap:
    """Condensation with the first control block of the residual scaled by rho.

    Solves the weighted least-squares problem whose normal equations are

        (Ibold' Fr' W Fr Ibold) rbar = Ibold' Fr' W Fr r,    W = diag(rho^2 I_nu, I, ..., I),

    i.e. the rows of the control-matching residual belonging to the first
    applied control are multiplied by rho before squaring.  Large rho pins
    the first control of the condensed problem to the preview-optimal one.
    """
    rho = float(rho)
    if rho <= 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    Ibold = stacked_identity(g.n_r, g.N)
    FrI = g.Fr @ Ibold
    sv = np.linalg.svd(FrI, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0 or sv[-1] <= _rank_cutoff(FrI) * sv[0]:
        raise NumericalError("Fr Ibold is rank deficient; weighted condensation "
                             "requires full column rank")
    w = np.ones(FrI.shape[0])
    w[: g.n_u] = rho * rho
    M = FrI.T @ (w[:, None] * FrI)
    M = 0.5 * (M + M.T)
    rhs = FrI.T @ (w[:, None] * g.Fr)
    try:
        S = cho_solve(cho_factor(M), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("weighted normal equations are singular") from exc
    return CondensationMap(S, WEIGHTED, rho=rho, rank_ok=True)


def condense(m: CondensationMap, r):
    """Setpoint S r for a stacked preview window."""
    r = np.asarray(r, dtype=float).ravel()
    if r.size != m.S.shape[1]:
        raise ValueError(f"stacked reference has length {r.size}, expected {m.S.shape[1]}")
    return m.S @ r


def average_reference(r, n_r=1):
    """Arithmetic mean of the window samples; the simple preview baseline."""
    r = np.asarray(r, dtype=float).ravel()
    if n_r < 1 or r.size == 0 or r.size % n_r != 0:
        raise ValueError("stacked reference length must be a positive multiple of n_r")
    return r.reshape(-1, n_r).mean(axis=0)


def control_error_bound(g: TrackingGains, r):
    """Bound on the open-loop control mismatch induced by condensing.

    The optimal condensed sequence cannot do worse than holding the average
    reference, so sigma_max(Fr) * ||r - Ibold r_avg|| dominates the actual
    mismatch ||Fr r - Fr Ibold S r||.
    """
    r = np.asarray(r, dtype=float).ravel()
    Ibold = stacked_identity(g.n_r, g.N)
    r_avg = average_reference(r, g.n_r)
    return g.fr_max_singular_value * float(np.linalg.norm(r - Ibold @ r_avg))


@dataclass(frozen=True)
class DecayEstimate:
    """Constants with ||A_cl^i||_2 <= c * lam^i for i = 0 .. horizon_checked."""

    c: float
    lam: float
    horizon_checked: int


def estimate_decay(A_cl, horizon_checked=1000) -> DecayEstimate:
    """Fit (c, lam) to the powers of a Schur-stable closed-loop matrix.

    lam is fixed halfway between the spectral radius and one, and c is the
    smallest constant covering the first horizon_checked powers, so the
    estimate satisfies its own definition by construction.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    radius = float(np.max(np.abs(np.linalg.eigvals(A_cl))))
    if radius >= 1.0:
        raise NumericalError(f"closed-loop matrix is not Schur stable (rho = {radius:.6f})")
    lam = 0.5 * (radius + 1.0)
    c = 1.0
    power = np.eye(A_cl.shape[0])
    scale = 1.0
    for _ in range(horizon_checked):
        power = power @ A_cl
        scale *= lam
        c = max(c, np.linalg.norm(power, 2) / scale)
    return DecayEstimate(float(c), lam, horizon_checked)


def closed_loop_bound(g: TrackingGains, sys: LtiSystem, m: CondensationMap, windows,
                      horizon_checked=1000):
    """Worst-case closed-loop state gap between preview and condensed tracking.

    windows is a sequence of stacked preview vectors; the bound is driven by
    the largest part of any window that one setpoint cannot represent,
    e_j = r_j - Ibold S r_j, filtered through the stable closed loop.
    """
    n_u = g.n_u
    Kx1 = g.Fx[:n_u]
    Kr1 = g.Fr[:n_u]
    est = estimate_decay(sys.A + sys.B @ Kx1, horizon_checked)
    Ibold = stacked_identity(g.n_r, g.N)
    worst = 0.0
    for r in windows:
        r = np.asarray(r, dtype=float).ravel()
        e = r - Ibold @ condense(m, r)
        worst = max(worst, float(np.linalg.norm(e)))
    gain = np.linalg.norm(sys.B @ Kr1, 2)
    return est.c * gain / (1.0 - est.lam) * worst
