"""Horizon stacking, causal feedback parameterizations, and response maps.

Stacks the per-step model over a horizon N into block matrices acting on
x = [x_1; ...; x_N], u = [u_0; ...; u_{N-1}] and the uncertainty channels
p = [p_0; ...; p_{N-1}; p_N], q likewise, so that

    x = A x_0 + B_u u + B_p p
    q = C_q x_0 + D_qu u + D_qp p + q_offset
    f = C_f x_0 + D_fu u + D_fp p          (bound f_bound)
    z = C_z x_0 + D_zu u + D_zp p          (target z_ref)

with D_qp strictly block lower triangular.  Control laws are either state
feedback u = K_0 x_0 + K x + v with K block lower triangular (u_k sees
x_1..x_k), or the equivalent disturbance feedback u = Khat_0 x_0
+ Khat B_p p + vhat; the two are related by unit-triangular inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, DimensionError, SolverError
from .model import Dimensions, UncertainSystem, stage_value

# refuse to build stacked systems bigger than this many entries per matrix
SIZE_LIMIT = 4_000_000


@dataclass
class StackedSystem:
    """Block matrices of the horizon-stacked model (all dense)."""

    dims: Dimensions
    A: np.ndarray
    B_u: np.ndarray
    B_p: np.ndarray
    C_q: np.ndarray
    D_qu: np.ndarray
    D_qp: np.ndarray
    q_offset: np.ndarray
    C_f: np.ndarray
    D_fu: np.ndarray
    D_fp: np.ndarray
    f_bound: np.ndarray
    C_z: np.ndarray
    D_zu: np.ndarray
    D_zp: np.ndarray
    z_ref: np.ndarray

    @property
    def N(self) -> int:
        return self.dims.N

    @property
    def n_x(self) -> int:
        return self.dims.stacked_state

    @property
    def n_u(self) -> int:
        return self.dims.stacked_input

    @property
    def n_p(self) -> int:
        return self.dims.stacked_p

    @property
    def n_q(self) -> int:
        return self.dims.stacked_q

    @property
    def n_f(self) -> int:
        return self.dims.stacked_f

    @property
    def n_z(self) -> int:
        return self.dims.stacked_z


def _signal_rows(powers, B_u, B_p, C, Du, Dp, C_N, Dp_N, dims: Dimensions):
    """Stack one signal group (q, f, or z) over the horizon.

    Stage k depends on x_k expanded through the dynamics; the terminal row
    uses C_N on x_N.  Dp_N lands in the terminal p-column, everything beyond
    the block diagonal is zero.
    """
    N = dims.N
    n, n_u, n_p = dims.n, dims.n_u, dims.n_p
    rows = C.shape[0]
    rows_N = C_N.shape[0]
    total = N * rows + rows_N
    Cs = np.zeros((total, n))
    Dus = np.zeros((total, N * n_u))
    Dps = np.zeros((total, dims.stacked_p))
    for k in range(N):
        r = slice(k * rows, (k + 1) * rows)
        Cs[r] = C @ powers[k]
        for j in range(k):
            Dus[r, j * n_u : (j + 1) * n_u] = C @ powers[k - 1 - j] @ B_u
            Dps[r, j * n_p : (j + 1) * n_p] = C @ powers[k - 1 - j] @ B_p
        Dus[r, k * n_u : (k + 1) * n_u] = Du
        Dps[r, k * n_p : (k + 1) * n_p] = Dp
    if rows_N:
        r = slice(N * rows, total)
        Cs[r] = C_N @ powers[N]
        for j in range(N):
            Dus[r, j * n_u : (j + 1) * n_u] = C_N @ powers[N - 1 - j] @ B_u
            Dps[r, j * n_p : (j + 1) * n_p] = C_N @ powers[N - 1 - j] @ B_p
        if Dp_N.shape[1]:
            Dps[r, N * n_p :] = Dp_N
    return Cs, Dus, Dps


def build_stacked(sys: UncertainSystem, N: int | None = None) -> StackedSystem:
    """Stack a recast system over the horizon.

    The system must have been through `recast_disturbance` (n_w = 0) so that
    the only exogenous channel is the structured uncertainty.
    """
    if not sys.is_recast:
        raise ConfigError("stacking requires a recast system; call recast_disturbance first")
    sys.validate()
    if N is None:
        N = sys.N
    if N != sys.N:
        sys = replace(sys, N=int(N)).validate()
    d = sys.dims
    if max(d.stacked_q, d.stacked_f, d.stacked_z, 1) * max(d.stacked_p, d.stacked_state) > SIZE_LIMIT:
        raise ConfigError(
            f"stacked system too large for horizon {N} "
            f"({d.stacked_q}x{d.stacked_p} uncertainty channel)"
        )

    powers = [np.eye(d.n)]
    for _ in range(N):
        powers.append(sys.A @ powers[-1])

    # state rows x_1..x_N
    A_s = np.zeros((N * d.n, d.n))
    Bu_s = np.zeros((N * d.n, N * d.n_u))
    Bp_s = np.zeros((N * d.n, d.stacked_p))
    for k in range(1, N + 1):
        r = slice((k - 1) * d.n, k * d.n)
        A_s[r] = powers[k]
        for j in range(k):
            Bu_s[r, j * d.n_u : (j + 1) * d.n_u] = powers[k - 1 - j] @ sys.B_u
            Bp_s[r, j * d.n_p : (j + 1) * d.n_p] = powers[k - 1 - j] @ sys.B_p

    zero_q = np.zeros((d.n_q, d.n_p))
    Cq_s, Dqu_s, Dqp_s = _signal_rows(
        powers, sys.B_u, sys.B_p, sys.C_q, sys.D_qu, zero_q, sys.C_qN,
        np.zeros((d.n_q_N, d.n_p_N)), d,
    )
    Cf_s, Dfu_s, Dfp_s = _signal_rows(
        powers, sys.B_u, sys.B_p, sys.C_f, sys.D_fu, sys.D_fp, sys.C_fN, sys.D_fpN, d
    )
    Cz_s, Dzu_s, Dzp_s = _signal_rows(
        powers, sys.B_u, sys.B_p, sys.C_z, sys.D_zu, sys.D_zp, sys.C_zN, sys.D_zpN, d
    )

    q_off = np.concatenate(
        [stage_value(sys.q_offset, k) for k in range(N)] + [np.zeros(d.n_q_N)]
    )
    f_bound = np.concatenate([stage_value(sys.f_bound, k) for k in range(N)] + [sys.f_boundN])
    z_ref = np.concatenate([stage_value(sys.z_ref, k) for k in range(N)] + [sys.z_refN])

    return StackedSystem(
        dims=d,
        A=A_s,
        B_u=Bu_s,
        B_p=Bp_s,
        C_q=Cq_s,
        D_qu=Dqu_s,
        D_qp=Dqp_s,
        q_offset=q_off,
        C_f=Cf_s,
        D_fu=Dfu_s,
        D_fp=Dfp_s,
        f_bound=f_bound,
        C_z=Cz_s,
        D_zu=Dzu_s,
        D_zp=Dzp_s,
        z_ref=z_ref,
    )


# ---------------------------------------------------------------------------
# feedback policies


@dataclass
class FeedbackPolicy:
    """Affine feedback u = K0 x_0 + K x + v (hat=False) or its
    disturbance-feedback equivalent u = K0 x_0 + K B_p p + v (hat=True)."""

    K0: np.ndarray
    K: np.ndarray
    v: np.ndarray
    hat: bool


def causal_mask(dims: Dimensions) -> np.ndarray:
    """Boolean mask of allowed entries of K: u_k may see x_1..x_k only."""
    mask = np.zeros((dims.stacked_input, dims.stacked_state), dtype=bool)
    for i in range(dims.N):
        if i >= 1:
            mask[i * dims.n_u : (i + 1) * dims.n_u, : i * dims.n] = True
    return mask


def check_causal(K: np.ndarray, dims: Dimensions, tol: float = 1e-9, what: str = "K") -> None:
    mask = causal_mask(dims)
    if K.shape != mask.shape:
        raise DimensionError(f"{what} must have shape {mask.shape}, got {K.shape}")
    worst = float(np.max(np.abs(K[~mask]), initial=0.0))
    if worst > tol:
        raise DimensionError(f"{what} violates the causal pattern by {worst:.2e}")


def zero_policy(dims: Dimensions, hat: bool = True) -> FeedbackPolicy:
    return FeedbackPolicy(
        K0=np.zeros((dims.stacked_input, dims.n)),
        K=np.zeros((dims.stacked_input, dims.stacked_state)),
        v=np.zeros(dims.stacked_input),
        hat=hat,
    )


def policy_to_hat(stacked: StackedSystem, pol: FeedbackPolicy) -> FeedbackPolicy:
    """Convert state feedback (K0, K, v) into disturbance feedback.

    I - K B_u is unit lower triangular because K is strictly causal, so the
    transform is exact up to a triangular solve.
    """
    if pol.hat:
        return pol
    check_causal(pol.K, stacked.dims)
    M = np.eye(stacked.n_u) - pol.K @ stacked.B_u
    rhs = np.hstack([pol.K0 + pol.K @ stacked.A, pol.K, pol.v[:, None]])
    sol = solve_triangular(M, rhs, lower=True, unit_diagonal=True)
    n = stacked.dims.n
    return FeedbackPolicy(K0=sol[:, :n], K=sol[:, n:-1], v=sol[:, -1], hat=True)


def hat_to_policy(stacked: StackedSystem, pol: FeedbackPolicy) -> FeedbackPolicy:
    """Convert disturbance feedback back into causal state feedback."""
    if not pol.hat:
        return pol
    check_causal(pol.K, stacked.dims)
    M = np.eye(stacked.n_u) + pol.K @ stacked.B_u
    rhs = np.hstack([pol.K0 - pol.K @ stacked.A, pol.K, pol.v[:, None]])
    sol = solve_triangular(M, rhs, lower=True, unit_diagonal=True)
    n = stacked.dims.n
    return FeedbackPolicy(K0=sol[:, :n], K=sol[:, n:-1], v=sol[:, -1], hat=False)


# ---------------------------------------------------------------------------
# closed-loop maps and response


@dataclass
class ClosedLoopMaps:
    """Affine maps from the stacked uncertainty output p to (q, f, z - z_ref)."""

    D_qp: np.ndarray
    d_q: np.ndarray
    D_fp: np.ndarray
    d_f: np.ndarray
    D_zp: np.ndarray
    d_z: np.ndarray


def closed_loop_maps(stacked: StackedSystem, pol: FeedbackPolicy, x0: np.ndarray) -> ClosedLoopMaps:
    """Close the loop with a hat policy at a given initial state."""
    if not pol.hat:
        pol = policy_to_hat(stacked, pol)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (stacked.dims.n,):
        raise DimensionError(f"x0 must have shape ({stacked.dims.n},), got {x0.shape}")
    KB = pol.K @ stacked.B_p
    u_aff = pol.K0 @ x0 + pol.v
    return ClosedLoopMaps(
        D_qp=stacked.D_qp + stacked.D_qu @ KB,
        d_q=stacked.D_qu @ u_aff + stacked.C_q @ x0 + stacked.q_offset,
        D_fp=stacked.D_fp + stacked.D_fu @ KB,
        d_f=stacked.D_fu @ u_aff + stacked.C_f @ x0,
        D_zp=stacked.D_zp + stacked.D_zu @ KB,
        d_z=stacked.D_zu @ u_aff + stacked.C_z @ x0 - stacked.z_ref,
    )


def evaluate_response(maps: ClosedLoopMaps, delta: np.ndarray, cond_limit: float = 1e10):
    """Exact response at one uncertainty realization.

    Solves the implicit loop q = D_qp delta q + d_q and returns
    (f, z_err, cost) with cost = ||z_err||^2.  Raises SolverError when the
    loop matrix is singular or numerically unreliable.
    """
    n_q = maps.d_q.shape[0]
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (maps.D_qp.shape[1], n_q):
        raise DimensionError(
            f"delta must have shape ({maps.D_qp.shape[1]}, {n_q}), got {delta.shape}"
        )
    loop = np.eye(n_q) - maps.D_qp @ delta
    cond = np.linalg.cond(loop)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SolverError(f"uncertainty loop is ill conditioned (cond ~ {cond:.2e})")
    q = np.linalg.solve(loop, maps.d_q)
    pq = delta @ q
    f = maps.d_f + maps.D_fp @ pq
    z_err = maps.d_z + maps.D_zp @ pq
    return f, z_err, float(z_err @ z_err)
