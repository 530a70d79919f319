"""Assembly of the robust control matrix inequalities.

Everything here produces :class:`~robustmpc.sdp.AffineLmi` constraints over
variables registered in an :class:`~robustmpc.sdp.SdpProgram`.  The central
objects are three symmetric "display" layouts sharing a common core:

* a cost-bound display with row partition (N_z, 1, N_q, N_p),
* a per-row constraint display with partition (1, N_q, N_p),
* an aggregated constraint display with partition (1, N_f, N_q, N_p),

each of which can be closed with a fixed feedback gain (the matrix inequality
becomes affine) or linearized around an anchor, which appends an (N_n) block
row with the mixing variable X.  The initial state either enters as a concrete
vector or is ranged over a box through a diagonal multiplier lift appending an
(n) block row.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError
from .forms import (
    block_lower_triangular_form,
    causal_gain_form,
    diagonal_form,
    full_form,
)
from .sdp import OPTIMAL, AffineLmi, SdpProgram, SolverOptions
from .stacking import causal_mask


def _col(v):
    return np.asarray(v, dtype=float).reshape(-1, 1)


class LmiBuilder:
    """Accumulates one symmetric affine LMI over block partitions.

    Every placement c at (r0, c0) also adds its transpose at (c0, r0), so
    the result is symmetric by construction and a placement on the diagonal
    realizes H(c) = c + c^T.  Symmetric diagonal content is passed halved.
    """

    def __init__(self, sizes):
        self.sizes = [int(s) for s in sizes]
        self.off = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.n = int(self.off[-1])
        self._const = np.zeros((self.n, self.n))
        self._terms = {}

    def offset(self, i):
        return int(self.off[i])

    def const(self, i, j, C):
        self.const_abs(self.off[i], self.off[j], C)

    def const_abs(self, r0, c0, C):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        h, w = C.shape
        self._const[r0:r0 + h, c0:c0 + w] += C
        self._const[c0:c0 + w, r0:r0 + h] += C.T

    def term(self, i, j, var, form=None, L=None, R=None, scale=1.0):
        self.term_abs(self.off[i], self.off[j], var, form, L, R, scale)

    def term_abs(self, r0, c0, var, form=None, L=None, R=None, scale=1.0):
        form = var.form if form is None else form
        for k in range(form.ncoords):
            rows, cols, vals = form.entries[k]
            E = np.zeros(form.shape)
            np.add.at(E, (rows, cols), vals)
            C = E if L is None else np.asarray(L, dtype=float) @ E
            if R is not None:
                C = C @ np.asarray(R, dtype=float)
            if scale != 1.0:
                C = scale * C
            if not np.any(C):
                continue
            h, w = C.shape
            F = self._terms.get((var, k))
            if F is None:
                F = self._terms[(var, k)] = np.zeros((self.n, self.n))
            F[r0:r0 + h, c0:c0 + w] += C
            F[c0:c0 + w, r0:r0 + h] += C.T

    def build(self, name, strict=True):
        terms = {}
        for key, F in self._terms.items():
            r, c = np.nonzero(F)
            if r.size:
                terms[key] = (r, c, F[r, c])
        return AffineLmi(self.n, self._const, terms, name=name, strict=strict)


# -- decision variable factories --------------------------------------


def add_policy_vars(prog, dims, with_k0=True):
    """Current-state gain (full) and input perturbation (vector).

    With a fixed initial state the constant input term can absorb the
    current-state gain, and keeping K0 around just adds flat directions
    that stall the interior point method; pass with_k0=False there and
    feed K0=None to the condition builders.
    """
    K0 = None
    if with_k0:
        K0 = prog.add_variable("K0", full_form(dims.stacked_input, dims.n))
    vhat = prog.add_variable("vhat", full_form(dims.stacked_input, 1))
    return K0, vhat


def add_gain_var(prog, dims, name="kbar"):
    """Strictly causal feedback gain block pattern."""
    return prog.add_variable(name, causal_gain_form(dims.N, dims.n_u, dims.n))


def add_mixing_var(prog, dims, block_diagonal=False, name="X"):
    form = block_lower_triangular_form(dims.N, dims.n, diagonal_only=block_diagonal)
    return prog.add_variable(name, form)


def add_scaling_var(prog, basis, name="scal"):
    var = prog.add_variable(name, basis.S)
    if var.ncoords != basis.ncoords:
        raise ConfigError("scaling basis coordinate mismatch")
    return var


def add_aggregation_vars(prog, n_f):
    if n_f <= 0:
        raise ConfigError("aggregation needs at least one constraint row")
    mu = prog.add_scalar("mu")
    M = prog.add_variable("M", diagonal_form(n_f))
    return mu, M


def add_box_multiplier(prog, p, name="D0"):
    D0 = prog.add_variable(name, diagonal_form(p))
    for k in range(p):
        prog.add_linear([(D0, k, 1.0)], lb=0.0)
    return D0


def bound_coords(prog, var, limit=1e4):
    """Box every coordinate of var at +-limit.

    Redundant policy directions (a current-state gain at a fixed x0, a
    scaling block whose uncertainty channel is inert) leave the feasible
    set unbounded along rays the objective ignores, which the interior
    point method tolerates badly.  Large inactive bounds remove the rays
    without moving any optimum.  None is accepted and skipped so callers
    can pass optional variables straight through.
    """
    if var is None:
        return
    for k in range(var.ncoords):
        prog.add_linear([(var, k, 1.0)], lb=-limit, ub=limit)


# -- display metadata --------------------------------------------------


@dataclass
class DisplayBlocks:
    """Partition and coupling data of one symmetric display."""

    sizes: tuple           # T1 row partition
    T2: np.ndarray         # (m, N_u) input coupling column
    pos: int               # absolute column of the scalar/affine entry
    qcol: int              # absolute offset of the N_q block
    pcol: int              # absolute offset of the N_p block
    M2_const: np.ndarray   # (m, n) state coefficient of the affine entry

    @property
    def m(self):
        return int(sum(self.sizes))

    def T3(self, S, G):
        n_p = S.shape[0]
        T3 = np.zeros((n_p, self.m))
        T3[:, self.qcol:self.qcol + G.shape[0]] = G.T
        T3[:, self.pcol:self.pcol + n_p] = S
        return T3


def cost_blocks(st):
    d = st.dims
    nz, nq, np_ = d.stacked_z, d.stacked_q, d.stacked_p
    T2 = np.vstack([st.D_zu, np.zeros((1, d.stacked_input)), st.D_qu,
                    np.zeros((np_, d.stacked_input))])
    M2 = np.vstack([st.C_z, np.zeros((1, d.n)), st.C_q, np.zeros((np_, d.n))])
    return DisplayBlocks(sizes=(nz, 1, nq, np_), T2=T2, pos=nz,
                         qcol=nz + 1, pcol=nz + 1 + nq, M2_const=M2)


def constraint_blocks(st, i):
    d = st.dims
    nq, np_ = d.stacked_q, d.stacked_p
    if not 0 <= i < d.stacked_f:
        raise IndexError("constraint row %d out of range" % i)
    fu = st.D_fu[i:i + 1, :]
    T2 = np.vstack([-0.5 * fu, st.D_qu, np.zeros((np_, d.stacked_input))])
    M2 = np.vstack([-0.5 * st.C_f[i:i + 1, :], st.C_q, np.zeros((np_, d.n))])
    return DisplayBlocks(sizes=(1, nq, np_), T2=T2, pos=0,
                         qcol=1, pcol=1 + nq, M2_const=M2)


def aggregate_blocks(st):
    d = st.dims
    nf, nq, np_ = d.stacked_f, d.stacked_q, d.stacked_p
    if nf == 0:
        raise ConfigError("system has no constraint rows to aggregate")
    T2 = np.vstack([np.zeros((1, d.stacked_input)), -st.D_fu, st.D_qu,
                    np.zeros((np_, d.stacked_input))])
    M2 = np.vstack([np.zeros((1, d.n)), -st.C_f, st.C_q, np.zeros((np_, d.n))])
    return DisplayBlocks(sizes=(1, nf, nq, np_), T2=T2, pos=0,
                         qcol=1 + nf, pcol=1 + nf + nq, M2_const=M2)


# -- shared assembly pieces -------------------------------------------


def _scaling_core(b, st, scal, basis, qblk, pblk):
    b.term(qblk, qblk, scal, basis.R, scale=0.5)
    b.term(qblk, qblk, scal, basis.G.T, L=st.D_qp)
    b.term(qblk, pblk, scal, basis.S, L=st.D_qp)
    b.term(pblk, pblk, scal, basis.S, scale=0.5)


def _response_column(b, st, qblk, posblk, K0, vhat):
    # state-independent part of the uncertainty channel offset
    b.const(qblk, posblk, _col(st.q_offset))
    b.term(qblk, posblk, vhat, L=st.D_qu)


def _fixed_gain_coupling(b, st, blocks, scal, basis, khat):
    P = blocks.T2 @ khat @ st.B_p
    b.term_abs(0, blocks.qcol, scal, basis.G.T, L=P)
    b.term_abs(0, blocks.pcol, scal, basis.S, L=P)


def _linearization_rows(b, st, blocks, scal, basis, kbar, X, anchor, ext):
    m = blocks.m
    if anchor.shape != (st.B_p.shape[0], m):
        raise ConfigError("anchor shape %s does not match (%d, %d)"
                          % (anchor.shape, st.B_p.shape[0], m))
    b.term_abs(0, 0, kbar, L=blocks.T2, R=anchor)
    b.term_abs(ext, blocks.qcol, scal, basis.G.T, L=st.B_p)
    b.term_abs(ext, blocks.pcol, scal, basis.S, L=st.B_p)
    b.term_abs(ext, 0, kbar, form=kbar.form.T, R=-blocks.T2.T)
    b.term_abs(ext, 0, X, R=-anchor)
    b.term_abs(ext, ext, X)


def _inject_state(b, blocks, K0, x0):
    x0c = _col(x0)
    b.const_abs(0, blocks.pos, blocks.M2_const @ x0c)
    if K0 is not None:
        b.term_abs(0, blocks.pos, K0, L=blocks.T2, R=x0c)


def _lift_tail(b, blocks, K0, D0, C0, lo, hi, ext):
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    if np.any(lo > hi):
        raise ConfigError("state box has crossed bounds")
    pos = blocks.pos
    b.term_abs(pos, pos, D0, L=0.5 * lo[None, :], R=_col(hi))
    b.const_abs(ext, 0, blocks.M2_const.T)
    if K0 is not None:
        b.term_abs(ext, 0, K0, form=K0.form.T, R=blocks.T2.T)
    b.term_abs(ext, pos, D0, L=-0.5 * C0.T, R=_col(lo + hi))
    b.term_abs(ext, ext, D0, L=0.5 * C0.T, R=C0)


def _close(prog, b, st, blocks, K0, x0, region, name, strict=True):
    """Apply the initial-state handling and register the built LMI."""
    D0 = None
    if x0 is not None:
        _inject_state(b, blocks, K0, x0)
    elif region is not None:
        C0, lo, hi = region
        C0 = np.atleast_2d(np.asarray(C0, dtype=float))
        D0 = add_box_multiplier(prog, C0.shape[0], name="D0_" + name)
        ext = b.offset(len(b.sizes) - 1)
        _lift_tail(b, blocks, K0, D0, C0, lo, hi, ext)
    else:
        raise ConfigError("either an initial state or a state box is required")
    lmi = b.build(name, strict=strict)
    prog.add_lmi(lmi)
    return lmi, D0


@dataclass
class Condition:
    lmi: AffineLmi
    blocks: DisplayBlocks
    D0: object = None


def _partition(st, blocks, lin, region):
    sizes = list(blocks.sizes)
    if lin is not None:
        sizes.append(st.dims.stacked_state)
    if region is not None:
        sizes.append(st.dims.n)
    return sizes


# -- the three condition families -------------------------------------


def cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal,
                   khat=None, lin=None, x0=None, region=None, name="cost"):
    """Worst-case cost certificate: either fixed-gain or linearized form."""
    if (khat is None) == (lin is None):
        raise ConfigError("pass exactly one of a fixed gain or linearization data")
    blocks = cost_blocks(st)
    b = LmiBuilder(_partition(st, blocks, lin, region))
    d = st.dims
    b.const(0, 0, 0.5 * np.eye(d.stacked_z))
    b.const(0, 1, -_col(st.z_ref))
    b.term(0, 1, vhat, L=st.D_zu)
    b.term(0, 2, scal, basis.G.T, L=st.D_zp)
    b.term(0, 3, scal, basis.S, L=st.D_zp)
    b.term(1, 1, gamma2, scale=0.5)
    _response_column(b, st, 2, 1, K0, vhat)
    _scaling_core(b, st, scal, basis, 2, 3)
    if khat is not None:
        _fixed_gain_coupling(b, st, blocks, scal, basis, khat)
    else:
        kbar, X, anchor = lin
        _linearization_rows(b, st, blocks, scal, basis, kbar, X, anchor,
                            b.offset(4))
    lmi, D0 = _close(prog, b, st, blocks, K0, x0, region, name)
    return Condition(lmi, blocks, D0)


def row_bound_lmi(prog, st, basis, K0, vhat, scal, i,
                  khat=None, lin=None, x0=None, region=None, beta=None,
                  name=None):
    """Certificate that constraint row i stays below its bound.

    ``beta`` optionally scales the bound, as in the aggregate form: a
    decision variable for the feasibility search, or a plain number to
    certify against relaxed bounds.
    """
    if (khat is None) == (lin is None):
        raise ConfigError("pass exactly one of a fixed gain or linearization data")
    blocks = constraint_blocks(st, i)
    name = name or ("row%d" % i)
    b = LmiBuilder(_partition(st, blocks, lin, region))
    fi = float(st.f_bound[i])
    if beta is None:
        b.const(0, 0, 0.5 * fi)
    elif isinstance(beta, (int, float)):
        b.const(0, 0, 0.5 * float(beta) * fi)
    else:
        b.term(0, 0, beta, L=np.array([[0.5 * fi]]))
    b.term(0, 0, vhat, L=-0.5 * st.D_fu[i:i + 1, :])
    fp = st.D_fp[i:i + 1, :]
    b.term(0, 1, scal, basis.G.T, L=-0.5 * fp)
    b.term(0, 2, scal, basis.S, L=-0.5 * fp)
    _response_column(b, st, 1, 0, K0, vhat)
    _scaling_core(b, st, scal, basis, 1, 2)
    if khat is not None:
        _fixed_gain_coupling(b, st, blocks, scal, basis, khat)
    else:
        kbar, X, anchor = lin
        _linearization_rows(b, st, blocks, scal, basis, kbar, X, anchor,
                            b.offset(3))
    lmi, D0 = _close(prog, b, st, blocks, K0, x0, region, name)
    return Condition(lmi, blocks, D0)


def aggregate_bound_lmi(prog, st, basis, K0, vhat, scal, mu, M,
                        khat=None, lin=None, x0=None, region=None,
                        beta=None, name="aggregate"):
    """Single certificate covering every constraint row at once.

    ``beta`` optionally scales the constraint bounds: a decision variable
    for the offline feasibility search, or a plain number to certify
    against relaxed bounds; omitted, the bounds enter as constants.
    """
    if (khat is None) == (lin is None):
        raise ConfigError("pass exactly one of a fixed gain or linearization data")
    blocks = aggregate_blocks(st)
    b = LmiBuilder(_partition(st, blocks, lin, region))
    d = st.dims
    e = np.ones((d.stacked_f, 1))
    b.term(0, 0, mu)
    if beta is None:
        b.const(1, 0, _col(st.f_bound))
    elif isinstance(beta, (int, float)):
        b.const(1, 0, float(beta) * _col(st.f_bound))
    else:
        b.term(1, 0, beta, L=_col(st.f_bound))
    b.term(1, 0, vhat, L=-st.D_fu)
    b.term(1, 0, M, R=e, scale=-1.0)
    b.term(1, 0, mu, L=-e)
    b.term(1, 1, M)
    b.term(1, 2, scal, basis.G.T, L=-st.D_fp)
    b.term(1, 3, scal, basis.S, L=-st.D_fp)
    _response_column(b, st, 2, 0, K0, vhat)
    _scaling_core(b, st, scal, basis, 2, 3)
    if khat is not None:
        _fixed_gain_coupling(b, st, blocks, scal, basis, khat)
    else:
        kbar, X, anchor = lin
        _linearization_rows(b, st, blocks, scal, basis, kbar, X, anchor,
                            b.offset(4))
    lmi, D0 = _close(prog, b, st, blocks, K0, x0, region, name)
    return Condition(lmi, blocks, D0)


# -- standalone primitives --------------------------------------------


def robust_quadratic_lmi(prog, H11, H12, H21, H22, basis, scal=None,
                         name="robust"):
    """Certificate for H11 + H(H12 D (I - H22 D)^{-1} H21) > 0 over the ball.

    Returns the scaling variable alongside the constraint so callers can
    inspect the multipliers.
    """
    H11 = np.atleast_2d(np.asarray(H11, dtype=float))
    H12 = np.atleast_2d(np.asarray(H12, dtype=float))
    H21 = np.atleast_2d(np.asarray(H21, dtype=float))
    H22 = np.atleast_2d(np.asarray(H22, dtype=float))
    m = H11.shape[0]
    n_p, n_q = basis.n_p, basis.n_q
    if H11.shape != (m, m) or H12.shape != (m, n_p) \
            or H21.shape != (n_q, m) or H22.shape != (n_q, n_p):
        raise ConfigError("uncertainty channel dimensions are inconsistent")
    if scal is None:
        scal = add_scaling_var(prog, basis, name="scal_" + name)
    b = LmiBuilder([m, n_q, n_p])
    b.const(0, 0, 0.5 * H11)
    b.const(0, 1, H21.T)
    b.term(0, 1, scal, basis.G.T, L=H12)
    b.term(0, 2, scal, basis.S, L=H12)
    b.term(1, 1, scal, basis.R, scale=0.5)
    b.term(1, 1, scal, basis.G.T, L=H22)
    b.term(1, 2, scal, basis.S, L=H22)
    b.term(2, 2, scal, basis.S, scale=0.5)
    lmi = b.build(name, strict=True)
    prog.add_lmi(lmi)
    return lmi, scal


def nonneg_aggregation_lmi(prog, f_value, mu, M, name="nonneg"):
    """Sufficient certificate that a fixed vector is elementwise nonnegative."""
    f = _col(f_value)
    nf = f.shape[0]
    e = np.ones((nf, 1))
    b = LmiBuilder([1, nf])
    b.term(0, 0, mu)
    b.const(1, 0, f)
    b.term(1, 0, M, R=e, scale=-1.0)
    b.term(1, 0, mu, L=-e)
    b.term(1, 1, M)
    lmi = b.build(name, strict=False)
    prog.add_lmi(lmi)
    return lmi


def box_lift_lmi(prog, M1, M2, M3, C0, lo, hi, name="boxlift"):
    """Certificate for M1 + H(M2 x0 M3) > 0 over a box on C0 x0."""
    M1 = np.atleast_2d(np.asarray(M1, dtype=float))
    M2 = np.atleast_2d(np.asarray(M2, dtype=float))
    M3 = np.atleast_2d(np.asarray(M3, dtype=float))
    C0 = np.atleast_2d(np.asarray(C0, dtype=float))
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    m = M1.shape[0]
    n = M2.shape[1]
    p = C0.shape[0]
    if M1.shape != (m, m) or M3.shape != (1, m) or M2.shape != (m, n) \
            or C0.shape[1] != n or lo.size != p or hi.size != p:
        raise ConfigError("lift dimensions are inconsistent")
    if np.any(lo > hi):
        raise ConfigError("state box has crossed bounds")
    D0 = add_box_multiplier(prog, p, name="D0_" + name)
    b = LmiBuilder([m, n])
    b.const(0, 0, 0.5 * M1)
    b.term_abs(0, 0, D0, L=0.5 * M3.T @ lo[None, :], R=_col(hi) @ M3)
    b.const(1, 0, M2.T)
    b.term(1, 0, D0, L=-0.5 * C0.T, R=_col(lo + hi) @ M3)
    b.term(1, 1, D0, L=0.5 * C0.T, R=C0)
    lmi = b.build(name, strict=True)
    prog.add_lmi(lmi)
    return lmi, D0


# -- anchors and gain recovery ----------------------------------------


def display_anchor(st, blocks, khat, S, G):
    """Linearization anchor from a fixed gain and scaling values."""
    return st.B_p @ blocks.T3(S, G) + (blocks.T2 @ khat).T


def cost_anchor(st, khat, S, G):
    return display_anchor(st, cost_blocks(st), khat, S, G)


def row_anchor(st, khat, S, G, i):
    return display_anchor(st, constraint_blocks(st, i), khat, S, G)


def aggregate_anchor(st, khat, S, G):
    return display_anchor(st, aggregate_blocks(st), khat, S, G)


def anchor_scalings(basis, coords, cap=100.0):
    """Scaling matrices for anchor building, rescaled when drifted large.

    Certificates with slack admit unbounded scaling directions, so stored
    coordinates can carry large magnitudes that poison the next problem's
    conditioning.  A positive rescale stays inside the admissible structure
    and any admissible values give a sound anchor, so shrinking loses
    nothing but the drift.
    """
    coords = np.asarray(coords, dtype=float)
    top = float(np.abs(coords).max()) if coords.size else 0.0
    if top > cap:
        coords = coords * (cap / top)
    S, _, G = basis.matrices(coords)
    return S, G


def recover_gain(kbar_value, x_value, dims):
    """Undo the mixing change of variables and re-impose causality zeros."""
    khat = np.linalg.solve(x_value.T, kbar_value.T).T
    return khat * causal_mask(dims)


# -- test utility ------------------------------------------------------


def elimination_check(Q, B, C, options=None):
    """Check both sides of the variable-elimination equivalence.

    Returns (projected_definiteness, completion_feasible): whether both
    orthogonal-complement projections of Q are positive definite, and whether
    some Z makes Q + H(C Z B^T) positive definite.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))

    def projected(Mat):
        null = scipy.linalg.null_space(Mat.T)
        if null.shape[1] == 0:
            return True
        return float(np.linalg.eigvalsh(null.T @ Q @ null)[0]) > 0.0

    side_i = projected(B) and projected(C)

    prog = SdpProgram()
    Z = prog.add_variable("Z", full_form(C.shape[1], B.shape[1]))
    b = LmiBuilder([Q.shape[0]])
    b.const(0, 0, 0.5 * Q)
    b.term(0, 0, Z, L=C, R=B.T)
    prog.add_lmi(b.build("completion", strict=True))
    sol = prog.solve(options or SolverOptions())
    return side_i, sol.status == OPTIMAL


def describe(lmi):
    """One-line-per-variable text summary of an assembled constraint."""
    lines = ["%s: size %d, %d terms" % (lmi.name, lmi.size, len(lmi.terms))]
    per_var = {}
    for (var, _), (r, _c, _v) in sorted(lmi.terms.items(),
                                        key=lambda kv: (kv[0][0].name, kv[0][1])):
        agg = per_var.setdefault(var.name, [0, 0])
        agg[0] += 1
        agg[1] += r.size
    for vname, (ncoords, nnz) in sorted(per_var.items()):
        lines.append("  %s: %d coords, %d entries" % (vname, ncoords, nnz))
    return "\n".join(lines)
