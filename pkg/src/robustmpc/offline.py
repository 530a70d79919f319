"""Offline initialization: certified anchors over initial-state boxes.

For each box of initial states this runs the four-step procedure: scale the
constraint bounds by a factor beta and minimize it with the feedback gain
frozen at zero, iterate the linearized gain update until beta reaches 1,
then minimize the worst-case cost bound at the converged gain and refine it
with the joint linearized problem.  Converged gains, scalings, and bounds
go into a checksummed lookup table the online controllers start from.

Boxes that stall above beta = 1 still get anchors, certified against the
beta-scaled bounds; their entries are marked best-effort, and the online
problems they seed carry no feasibility guarantee.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CoverageError, InfeasibleError, SolverError, TableError
from .lmi import (
    add_aggregation_vars,
    add_gain_var,
    add_mixing_var,
    add_policy_vars,
    add_scaling_var,
    aggregate_anchor,
    aggregate_bound_lmi,
    bound_coords,
    cost_anchor,
    cost_bound_lmi,
    recover_gain,
    row_bound_lmi,
)
from .model import load_system, recast_disturbance
from .scalings import scaling_basis
from .sdp import INFEASIBLE, OPTIMAL, SdpProgram, SolverOptions
from .stacking import build_stacked

TABLE_SCHEMA = 1


@dataclass(frozen=True)
class OfflineSettings:
    """Knobs of the offline procedure; defaults match the benchmark runs."""

    i_max: int = 10
    j_max: int = 10
    tol_beta: float = 0.01
    tol_gamma: float = 0.01
    beta_slack: float = 1e-6
    depth_limit: int = 3
    coord_limit: float = 1e4
    block_diagonal_mixing: bool = False
    row_anchors: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass(frozen=True)
class InitialStateSet:
    """Box of initial states lo <= C0 x0 <= hi (C0 defaults to identity)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).ravel())
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).ravel())
        if self.lo.shape != self.hi.shape:
            raise ConfigError("initial-state box bounds must have equal length")
        if np.any(self.lo > self.hi):
            raise ConfigError("initial-state box has crossed bounds")

    def contains(self, x0, tol=1e-9):
        x0 = np.asarray(x0, dtype=float).ravel()
        return bool(np.all(x0 >= self.lo - tol) and np.all(x0 <= self.hi + tol))

    def split(self):
        """Bisect the widest axis; returns the two halves."""
        widths = self.hi - self.lo
        ax = int(np.argmax(widths))
        if widths[ax] <= 0:
            raise ConfigError("cannot subdivide a degenerate box")
        mid = 0.5 * (self.lo[ax] + self.hi[ax])
        lo2, hi1 = self.lo.copy(), self.hi.copy()
        hi1[ax] = mid
        lo2[ax] = mid
        return InitialStateSet(self.lo, hi1), InitialStateSet(lo2, self.hi)


@dataclass
class CellEntry:
    """One table row: the box plus everything the online solvers warm from.

    Scalings are stored as basis coordinate vectors; matrices come back
    through the scaling basis of the bound system.
    """

    index: int
    cell: InitialStateSet
    khat: np.ndarray
    scal_t: np.ndarray
    beta: float
    scal: np.ndarray = None
    gamma2: float = None
    best_effort: bool = False
    log: list = field(default_factory=list)
    row_scal: list = None

    def to_payload(self):
        return {
            "index": self.index,
            "lo": self.cell.lo.tolist(),
            "hi": self.cell.hi.tolist(),
            "khat": self.khat.tolist(),
            "scal_t": self.scal_t.tolist(),
            "beta": self.beta,
            "scal": None if self.scal is None else self.scal.tolist(),
            "gamma2": self.gamma2,
            "best_effort": self.best_effort,
            "log": self.log,
            "row_scal": None if self.row_scal is None
            else [s.tolist() for s in self.row_scal],
        }

    @classmethod
    def from_payload(cls, p):
        return cls(
            index=int(p["index"]),
            cell=InitialStateSet(np.array(p["lo"]), np.array(p["hi"])),
            khat=np.array(p["khat"], dtype=float),
            scal_t=np.array(p["scal_t"], dtype=float),
            beta=p["beta"],
            scal=None if p["scal"] is None else np.array(p["scal"], dtype=float),
            gamma2=p["gamma2"],
            best_effort=bool(p["best_effort"]),
            log=list(p["log"]),
            row_scal=None if p["row_scal"] is None
            else [np.array(s, dtype=float) for s in p["row_scal"]],
        )


@dataclass
class InitializationTable:
    fingerprint: str
    name: str
    horizon: int
    entries: list
    schema: int = TABLE_SCHEMA
    build_seconds: float = None  # informational, never serialized

    def lookup(self, x0, tol=1e-9):
        for entry in self.entries:
            if entry.cell.contains(x0, tol=tol):
                return entry
        raise CoverageError(
            f"initial state {np.asarray(x0, dtype=float).ravel().tolist()} "
            "is outside every table cell"
        )

    def covers(self, x0, tol=1e-9):
        return any(e.cell.contains(x0, tol=tol) for e in self.entries)

    def to_payload(self):
        return {
            "schema": self.schema,
            "fingerprint": self.fingerprint,
            "name": self.name,
            "horizon": self.horizon,
            "entries": [e.to_payload() for e in self.entries],
        }

    @classmethod
    def from_payload(cls, p):
        return cls(
            fingerprint=p["fingerprint"],
            name=p["name"],
            horizon=int(p["horizon"]),
            entries=[CellEntry.from_payload(e) for e in p["entries"]],
            schema=int(p["schema"]),
        )


def system_fingerprint(config) -> str:
    """Hash of the canonical JSON encoding of a system config."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def save_table(table: InitializationTable, path) -> None:
    payload = table.to_payload()
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    checksum = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        json.dump({"checksum": checksum, "payload": payload},
                  fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_table(path, config=None) -> InitializationTable:
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TableError(f"cannot read table {path}: {exc}") from exc
    if not isinstance(blob, dict) or "payload" not in blob or "checksum" not in blob:
        raise TableError(f"table {path} has no checksum envelope")
    body = json.dumps(blob["payload"], sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(body.encode()).hexdigest()
    if digest != blob["checksum"]:
        raise TableError(f"table {path} fails its checksum")
    payload = blob["payload"]
    if payload.get("schema") != TABLE_SCHEMA:
        raise TableError(
            f"table schema {payload.get('schema')} != supported {TABLE_SCHEMA}"
        )
    table = InitializationTable.from_payload(payload)
    if config is not None:
        expect = system_fingerprint(config)
        if table.fingerprint != expect:
            raise TableError(
                "table was built for a different system "
                f"(fingerprint {table.fingerprint[:12]}.. != {expect[:12]}..)"
            )
    return table


# -- problem context ---------------------------------------------------


class OfflineContext:
    """Stacked system plus scaling basis, shared by every cell solve."""

    def __init__(self, config, settings: OfflineSettings = None):
        self.config = config
        self.settings = settings or OfflineSettings()
        self.system = recast_disturbance(load_system(config))
        self.stacked = build_stacked(self.system)
        self.basis = scaling_basis(self.system.structure, self.stacked.N)
        self.fingerprint = system_fingerprint(config)
        if np.any(self.stacked.f_bound <= 0):
            raise ConfigError(
                "bound scaling needs strictly positive constraint bounds"
            )

    def zero_gain(self):
        d = self.stacked.dims
        return np.zeros((d.stacked_input, d.stacked_state))

    def region(self, cell: InitialStateSet):
        n = self.stacked.dims.n
        if cell.lo.size != n:
            raise ConfigError(
                f"cell has {cell.lo.size} bounds for {n} states"
            )
        return np.eye(n), cell.lo, cell.hi


def _solve(prog, ctx, what, cell):
    sol = prog.solve(ctx.settings.solver)
    if sol.status == OPTIMAL:
        return sol
    where = f"{what} on cell [{cell.lo.tolist()}, {cell.hi.tolist()}]"
    if sol.status == INFEASIBLE:
        raise InfeasibleError(f"{where}: infeasible")
    raise SolverError(f"{where}: solver ended with status {sol.status}")


def _scal_coords(sol, var):
    return sol.coords[var.offset:var.offset + var.ncoords].copy()


# -- the four steps ----------------------------------------------------


def step1_min_beta(ctx, cell, khat=None):
    """Smallest bound scaling at a frozen gain (zero unless given)."""
    khat = ctx.zero_gain() if khat is None else np.asarray(khat, dtype=float)
    st, basis = ctx.stacked, ctx.basis
    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    scal_t = add_scaling_var(prog, basis, "scal_t")
    mu, M = add_aggregation_vars(prog, st.dims.stacked_f)
    beta = prog.add_scalar("beta")
    aggregate_bound_lmi(prog, st, basis, K0, vhat, scal_t, mu, M,
                        khat=khat, region=ctx.region(cell), beta=beta)
    for var in (K0, vhat, scal_t, M):
        bound_coords(prog, var, ctx.settings.coord_limit)
    prog.minimize(beta)
    sol = _solve(prog, ctx, "bound scaling (step 1)", cell)
    return float(sol.objective), khat, _scal_coords(sol, scal_t)


def step2_iterate_beta(ctx, cell, beta1, khat, scal_t):
    """Drive beta toward 1 by alternating gain updates."""
    s = ctx.settings
    st, basis = ctx.stacked, ctx.basis
    beta_now = beta1
    log = [{"step": 1, "beta": beta_now}]
    i = 1
    while beta_now > 1.0 + s.beta_slack and i < s.i_max:
        S_t, _, G_t = basis.matrices(scal_t)
        anchor = aggregate_anchor(st, khat, S_t, G_t)
        prog = SdpProgram()
        K0, vhat = add_policy_vars(prog, st.dims)
        scal_v = add_scaling_var(prog, basis, "scal_t")
        mu, M = add_aggregation_vars(prog, st.dims.stacked_f)
        kbar = add_gain_var(prog, st.dims)
        X = add_mixing_var(prog, st.dims, s.block_diagonal_mixing)
        beta = prog.add_scalar("beta")
        aggregate_bound_lmi(prog, st, basis, K0, vhat, scal_v, mu, M,
                            lin=(kbar, X, anchor), region=ctx.region(cell),
                            beta=beta)
        prog.add_linear([(beta, 0, 1.0)], lb=1.0)
        for var in (K0, vhat, scal_v, M, kbar, X):
            bound_coords(prog, var, s.coord_limit)
        prog.minimize(beta)
        sol = _solve(prog, ctx, f"gain update {i} (step 2)", cell)
        beta_next = float(sol.objective)
        khat = recover_gain(sol.value(kbar), sol.value(X), st.dims)
        scal_t = _scal_coords(sol, scal_v)
        rec = {"step": 2, "i": i, "beta": beta_next}
        if beta_next > beta_now * (1 + 1e-7) + 1e-9:
            rec["anomaly"] = "beta increased"
        log.append(rec)
        i += 1
        if beta_next >= 1.0 + s.beta_slack and \
                abs(beta_now - beta_next) < s.tol_beta * abs(beta_next):
            beta_now = beta_next
            break
        beta_now = beta_next
    if beta_now <= 1.0 + s.beta_slack:
        beta_now = 1.0
    return beta_now, khat, scal_t, log


def step3_min_gamma(ctx, cell, khat):
    """Cost bound at the converged frozen gain."""
    st, basis = ctx.stacked, ctx.basis
    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    gamma2 = prog.add_scalar("gamma2")
    scal = add_scaling_var(prog, basis, "scal")
    cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal,
                   khat=khat, region=ctx.region(cell))
    for var in (K0, vhat, scal):
        bound_coords(prog, var, ctx.settings.coord_limit)
    prog.minimize(gamma2)
    sol = _solve(prog, ctx, "cost bound (step 3)", cell)
    return float(sol.objective), _scal_coords(sol, scal)


def step4_iterate_gamma(ctx, cell, gamma2_1, khat, scal, scal_t,
                        beta_relax=None):
    """Joint linearized refinement of gain, cost, and bound certificates.

    ``beta_relax`` scales the constraint bounds for boxes where the
    feasibility search stalled above 1; the anchors then certify the
    relaxed problem only.
    """
    s = ctx.settings
    st, basis = ctx.stacked, ctx.basis
    gamma2_now = gamma2_1
    log = [{"step": 3, "gamma2": gamma2_now}]
    for j in range(1, s.j_max):
        S, _, G = basis.matrices(scal)
        S_t, _, G_t = basis.matrices(scal_t)
        Y = cost_anchor(st, khat, S, G)
        Y_t = aggregate_anchor(st, khat, S_t, G_t)
        prog = SdpProgram()
        K0, vhat = add_policy_vars(prog, st.dims)
        gamma2 = prog.add_scalar("gamma2")
        scal_v = add_scaling_var(prog, basis, "scal")
        scal_tv = add_scaling_var(prog, basis, "scal_t")
        mu, M = add_aggregation_vars(prog, st.dims.stacked_f)
        kbar = add_gain_var(prog, st.dims)
        X = add_mixing_var(prog, st.dims, s.block_diagonal_mixing)
        cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal_v,
                       lin=(kbar, X, Y), region=ctx.region(cell))
        aggregate_bound_lmi(prog, st, basis, K0, vhat, scal_tv, mu, M,
                            lin=(kbar, X, Y_t), region=ctx.region(cell),
                            beta=beta_relax)
        for var in (K0, vhat, scal_v, scal_tv, M, kbar, X):
            bound_coords(prog, var, s.coord_limit)
        prog.minimize(gamma2)
        sol = _solve(prog, ctx, f"joint refinement {j} (step 4)", cell)
        gamma2_next = float(sol.objective)
        khat = recover_gain(sol.value(kbar), sol.value(X), st.dims)
        scal = _scal_coords(sol, scal_v)
        scal_t = _scal_coords(sol, scal_tv)
        rec = {"step": 4, "j": j, "gamma2": gamma2_next}
        # the jump from the cost-only step 3 seed can go either way, but
        # from the first joint solve on the sequence must not increase
        if j > 1 and gamma2_next > gamma2_now * (1 + 1e-5) + 1e-7:
            rec["anomaly"] = "gamma2 increased"
        log.append(rec)
        converged = abs(gamma2_now - gamma2_next) < s.tol_gamma * abs(gamma2_next)
        gamma2_now = gamma2_next
        if converged:
            break
    return gamma2_now, khat, scal, scal_t, log


def row_anchor_pass(ctx, cell, khat):
    """Per-row scalings for the multi-certificate online variant.

    One joint solve: the cost condition plus every row condition at the
    frozen gain, each row with its own scaling triple.
    """
    st, basis = ctx.stacked, ctx.basis
    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    gamma2 = prog.add_scalar("gamma2")
    scal = add_scaling_var(prog, basis, "scal")
    cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal,
                   khat=khat, region=ctx.region(cell))
    row_vars = []
    for i in range(st.dims.stacked_f):
        sv = add_scaling_var(prog, basis, "scal_row%d" % i)
        row_bound_lmi(prog, st, basis, K0, vhat, sv, i,
                      khat=khat, region=ctx.region(cell))
        row_vars.append(sv)
    for var in [K0, vhat, scal] + row_vars:
        bound_coords(prog, var, ctx.settings.coord_limit)
    prog.minimize(gamma2)
    sol = _solve(prog, ctx, "row certificates", cell)
    return [_scal_coords(sol, sv) for sv in row_vars]


def process_cell(ctx, cell, khat0=None, anchor_best_effort=True):
    """Run the full four-step procedure on one box.

    A box whose feasibility search stalls above beta = 1 normally still
    gets cost anchors, certified against the beta-scaled bounds; the
    entry is marked best-effort and carries no guarantee.  Pass
    ``anchor_best_effort=False`` to skip those stages and return the
    bare search result instead (cheaper when the box will be subdivided
    anyway).
    """
    beta1, khat, scal_t = step1_min_beta(ctx, cell, khat=khat0)
    beta, khat, scal_t, log = step2_iterate_beta(ctx, cell, beta1, khat, scal_t)
    # the search stops on the feasibility boundary, so certifying at the
    # stalled beta itself leaves no interior; back off by the search tol
    relax = beta * (1 + ctx.settings.tol_beta) if beta > 1.0 else None
    if relax is not None and not anchor_best_effort:
        return CellEntry(index=-1, cell=cell, khat=khat, scal_t=scal_t,
                         beta=beta, best_effort=True, log=log)
    gamma2_1, scal = step3_min_gamma(ctx, cell, khat)
    gamma2, khat, scal, scal_t, log4 = step4_iterate_gamma(
        ctx, cell, gamma2_1, khat, scal, scal_t, beta_relax=relax)
    row_scal = None
    if ctx.settings.row_anchors:
        try:
            row_scal = row_anchor_pass(ctx, cell, khat)
        except (InfeasibleError, SolverError):
            # single rows can be certifiable even when the aggregate is
            # not, but there is no guarantee; without one the online
            # multi-certificate solver falls back to the shared scaling
            if relax is None:
                raise
    return CellEntry(index=-1, cell=cell, khat=khat, scal_t=scal_t,
                     beta=beta, scal=scal, gamma2=gamma2,
                     best_effort=relax is not None,
                     log=log + log4, row_scal=row_scal)


def build_table(config, regions, settings: OfflineSettings = None,
                khat0=None) -> InitializationTable:
    """Process every region, subdividing the ones that fail to reach beta=1."""
    ctx = OfflineContext(config, settings)
    queue = [(_as_cell(r), 0) for r in regions]
    entries = []
    start = time.perf_counter()
    while queue:
        cell, depth = queue.pop(0)
        entry = process_cell(ctx, cell, khat0=khat0,
                             anchor_best_effort=depth >= ctx.settings.depth_limit)
        if entry.best_effort and depth < ctx.settings.depth_limit:
            queue[0:0] = [(child, depth + 1) for child in cell.split()]
            continue
        entry.index = len(entries)
        entries.append(entry)
    table = InitializationTable(
        fingerprint=ctx.fingerprint,
        name=str(config.get("name", "")),
        horizon=ctx.stacked.N,
        entries=entries,
    )
    table.build_seconds = time.perf_counter() - start
    return table


def _as_cell(region):
    if isinstance(region, InitialStateSet):
        return region
    lo, hi = region
    return InitialStateSet(lo, hi)


# -- independent certificate audit ------------------------------------


def pin_coords(prog, var, values):
    values = np.asarray(values, dtype=float).ravel()
    for k in range(var.ncoords):
        prog.add_linear([(var, k, 1.0)], lb=float(values[k]), ub=float(values[k]))


def certify_entry(ctx, entry, tol=None):
    """Re-check a beta=1 entry from its stored values alone.

    Solves the bound certificate and the cost certificate over the cell
    with the gain and scalings pinned to the table numbers, then verifies
    the returned point eigenvalue by eigenvalue.  Returns the verification
    reports; raises if either problem fails.
    """
    tol = ctx.settings.solver.feastol if tol is None else tol
    if entry.best_effort:
        raise ConfigError("cannot certify a best-effort entry")
    st, basis = ctx.stacked, ctx.basis
    khat = entry.khat
    reports = {}

    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    scal_t = add_scaling_var(prog, basis, "scal_t")
    mu, M = add_aggregation_vars(prog, st.dims.stacked_f)
    aggregate_bound_lmi(prog, st, basis, K0, vhat, scal_t, mu, M,
                        khat=khat, region=ctx.region(entry.cell))
    pin_coords(prog, scal_t, entry.scal_t)
    for var in (K0, vhat, M):
        bound_coords(prog, var, ctx.settings.coord_limit)
    sol = _solve(prog, ctx, "bound certificate audit", entry.cell)
    reports["bound"] = prog.verify(sol.coords, tol=tol)

    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    gamma2 = prog.add_scalar("gamma2")
    scal = add_scaling_var(prog, basis, "scal")
    cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal,
                   khat=khat, region=ctx.region(entry.cell))
    pin_coords(prog, scal, entry.scal)
    # the stored bound must be achievable, not just some larger one
    prog.add_linear([(gamma2, 0, 1.0)], ub=entry.gamma2 * (1 + 1e-6))
    for var in (K0, vhat):
        bound_coords(prog, var, ctx.settings.coord_limit)
    prog.minimize(gamma2)
    sol = _solve(prog, ctx, "cost certificate audit", entry.cell)
    reports["cost"] = prog.verify(sol.coords, tol=tol)
    reports["gamma2"] = float(sol.objective)
    return reports
