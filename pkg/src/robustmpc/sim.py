"""Closed-loop simulation under seeded uncertainty and disturbance scenarios.

The true plant evolves with a realized uncertainty matrix and disturbance
vector drawn each step; the controller only ever sees the measured state.
Harnesses for the two benchmark presets, the spring-stiffness feasibility
sweep, and CSV export live here too.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import block_diag

from .controller import Controller, ControllerSettings
from .errors import ConfigError, RobustMpcError
from .model import (
    DiagonalBlock,
    FullBlock,
    RepeatedScalar,
    load_system,
    recast_disturbance,
    stage_value,
)
from .offline import (
    InitializationTable,
    InitialStateSet,
    OfflineContext,
    OfflineSettings,
    process_cell,
)
from .presets import (
    example1_config,
    example2_config,
    example2_region,
    spring_realization,
)
from .stacking import build_stacked, closed_loop_maps, evaluate_response

UNCERTAINTY_RULES = ("fixed", "random", "vertex")
DISTURBANCE_RULES = ("zero", "uniform", "fixed")


@dataclass(frozen=True)
class Scenario:
    """What the plant actually does, drawn reproducibly from a seed.

    ``uncertainty`` picks the realization rule: ``"fixed"`` fills every
    block with the scalar ``delta``, ``"random"`` draws each block inside
    its unit ball per step, and ``"vertex"`` picks the worst of a sampled
    set of sign patterns, scored on the realized constraint rows.
    ``disturbance`` is ``"zero"``, ``"uniform"`` in the stage bounds, or a
    ``"fixed"`` sequence supplied in ``w_sequence``.
    """

    steps: int = 30
    seed: int = 0
    uncertainty: str = "fixed"
    delta: float = 1.0
    disturbance: str = "uniform"
    w_sequence: np.ndarray = None
    vertex_samples: int = 8

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.uncertainty not in UNCERTAINTY_RULES:
            raise ConfigError(
                f"unknown uncertainty rule {self.uncertainty!r}, "
                f"expected one of {UNCERTAINTY_RULES}"
            )
        if self.disturbance not in DISTURBANCE_RULES:
            raise ConfigError(
                f"unknown disturbance rule {self.disturbance!r}, "
                f"expected one of {DISTURBANCE_RULES}"
            )
        if abs(self.delta) > 1.0 + 1e-12:
            raise ConfigError(f"fixed delta must satisfy |delta| <= 1, got {self.delta}")
        if self.disturbance == "fixed" and self.w_sequence is None:
            raise ConfigError("disturbance rule 'fixed' needs a w_sequence")
        if self.vertex_samples < 2:
            raise ConfigError("vertex rule needs at least 2 samples")


@dataclass
class Trajectory:
    """Everything one closed-loop run produced.

    ``x`` has one more row than ``u``: the state after the last applied
    input is kept.  ``gamma2`` is nan on replay steps.  ``violated`` is
    recomputed from the realized constraint rows, independent of the
    controller's own flags.
    """

    x: np.ndarray
    u: np.ndarray
    delta: list
    w: np.ndarray
    gamma2: np.ndarray
    solve_ms: np.ndarray
    violated: np.ndarray
    provenance: list
    results: list = field(default_factory=list)
    status: str = "completed"
    cost: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.u)


# -- realization drawing ------------------------------------------------


def _fill_block(blk, value):
    if isinstance(blk, FullBlock):
        return value * np.eye(blk.p_dim, blk.q_dim)
    return value * np.eye(blk.size)


def _random_block(blk, rng):
    if isinstance(blk, RepeatedScalar):
        return rng.uniform(-1.0, 1.0) * np.eye(blk.size)
    if isinstance(blk, DiagonalBlock):
        return np.diag(rng.uniform(-1.0, 1.0, size=blk.size))
    mat = rng.standard_normal((blk.p_dim, blk.q_dim))
    top = np.linalg.norm(mat, 2)
    if top > 0:
        mat *= rng.uniform(0.0, 1.0) / top
    return mat


def _sign_block(blk, rng):
    if isinstance(blk, DiagonalBlock):
        return np.diag(rng.choice([-1.0, 1.0], size=blk.size))
    return _fill_block(blk, float(rng.choice([-1.0, 1.0])))


def _check_delta(blocks, delta, tol=1e-9):
    r = c = 0
    for blk in blocks:
        sub = delta[r:r + blk.p_dim, c:c + blk.q_dim]
        if np.linalg.norm(sub, 2) > 1.0 + tol:
            raise ConfigError("realized uncertainty block leaves its unit ball")
        r += blk.p_dim
        c += blk.q_dim
    return delta


def _draw_delta(sys, scenario, rng, x, u, w):
    """Realize one structured uncertainty matrix for the current step."""
    blocks = sys.structure.blocks
    if not blocks:
        return np.zeros((0, 0))
    if scenario.uncertainty == "fixed":
        parts = [_fill_block(b, scenario.delta) for b in blocks]
        return _check_delta(blocks, block_diag(*parts))
    if scenario.uncertainty == "random":
        parts = [_random_block(b, rng) for b in blocks]
        return _check_delta(blocks, block_diag(*parts))
    # vertex: both uniform sign fills plus sampled per-block sign patterns,
    # keep whichever stresses the realized constraint rows hardest
    candidates = [
        block_diag(*[_fill_block(b, s) for b in blocks]) for s in (1.0, -1.0)
    ]
    for _ in range(scenario.vertex_samples - 2):
        candidates.append(block_diag(*[_sign_block(b, rng) for b in blocks]))
    q = sys.C_q @ x + sys.D_qu @ u + stage_value(sys.q_offset, 0)
    base = sys.C_f @ x + sys.D_fu @ u + sys.D_fw @ w - stage_value(sys.f_bound, 0)
    scores = [np.max(base + sys.D_fp @ (cand @ q)) for cand in candidates]
    return _check_delta(blocks, candidates[int(np.argmax(scores))])


def _draw_w(sys, scenario, rng, k):
    n_w = sys.dims.n_w
    bound = stage_value(sys.d_bound, 0) if n_w else np.zeros(0)
    if n_w == 0 or scenario.disturbance == "zero":
        return np.zeros(n_w)
    if scenario.disturbance == "uniform":
        return rng.uniform(-bound, bound)
    w = np.asarray(scenario.w_sequence, dtype=float).reshape(-1, n_w)[k]
    if np.any(np.abs(w) > bound + 1e-9):
        raise ConfigError(f"fixed disturbance at step {k} exceeds its bound")
    return w


# -- the loop -----------------------------------------------------------


def simulate(config, table, scenario: Scenario, x0,
             settings: ControllerSettings = None) -> Trajectory:
    """Run the closed loop for ``scenario.steps`` steps from ``x0``.

    The plant uses the realized uncertainty and disturbance; the
    controller re-solves from the measured state each step.  A controller
    hard failure truncates the run and is recorded in ``status``.
    """
    sys = load_system(config)
    ctrl = Controller(config, table, settings)
    rng = np.random.default_rng(scenario.seed)
    f_bound = stage_value(sys.f_bound, 0)
    z_ref = stage_value(sys.z_ref, 0)

    x = np.asarray(x0, dtype=float).ravel().copy()
    xs, us, deltas, ws = [x.copy()], [], [], []
    g2s, secs, viols, provs, results = [], [], [], [], []
    status, cost = "completed", 0.0
    for k in range(scenario.steps):
        try:
            res = ctrl.step(x)
        except RobustMpcError as exc:
            status = f"truncated at step {k} ({type(exc).__name__})"
            break
        u = res.u0
        w = _draw_w(sys, scenario, rng, k)
        delta = _draw_delta(sys, scenario, rng, x, u, w)
        q = sys.C_q @ x + sys.D_qu @ u + stage_value(sys.q_offset, 0)
        p = delta @ q
        f = sys.C_f @ x + sys.D_fu @ u + sys.D_fp @ p + sys.D_fw @ w
        z_err = sys.C_z @ x + sys.D_zu @ u + sys.D_zp @ p + sys.D_zw @ w - z_ref
        cost += float(z_err @ z_err)
        x = sys.A @ x + sys.B_u @ u + sys.B_p @ p + sys.B_w @ w

        xs.append(x.copy())
        us.append(u.copy())
        deltas.append(delta)
        ws.append(w)
        g2s.append(np.nan if res.gamma2 is None else res.gamma2)
        secs.append(1e3 * res.solve_seconds)
        viols.append(bool(np.any(f > f_bound + 1e-9)))
        provs.append(res.provenance)
        results.append(res)

    return Trajectory(
        x=np.array(xs), u=np.array(us), delta=deltas,
        w=np.array(ws).reshape(len(ws), sys.dims.n_w),
        gamma2=np.array(g2s), solve_ms=np.array(secs),
        violated=np.array(viols, dtype=bool), provenance=provs,
        results=results, status=status, cost=cost)


def certificate_margins(config, traj: Trajectory) -> np.ndarray:
    """Per-step slack of the cost certificate on the realized run.

    For every step whose prediction window lies inside the trajectory,
    evaluates the response of that step's own stored policy on the
    realized uncertainty and disturbance sequence and returns
    gamma2 minus that windowed cost (nan where no check is possible).
    A sound certificate gives a nonnegative margin.
    """
    sys = load_system(config)
    rc = recast_disturbance(sys)
    st = build_stacked(rc)
    N, d = st.N, sys.dims
    margins = np.full(traj.steps, np.nan)
    for k in range(traj.steps):
        res = traj.results[k] if k < len(traj.results) else None
        if res is None or res.gamma2 is None or k + N > traj.steps:
            continue
        stage = []
        for j in range(N):
            parts = [traj.delta[k + j]] if d.n_p else []
            if d.n_w:
                parts.append(np.diag(traj.w[k + j] / stage_value(sys.d_bound, j)))
            stage.append(block_diag(*parts) if parts else np.zeros((0, 0)))
        big = block_diag(*stage, np.zeros((rc.dims.n_p_N, rc.dims.n_q_N)))
        maps = closed_loop_maps(st, res.policy, traj.x[k])
        _, _, realized = evaluate_response(maps, big)
        margins[k] = res.gamma2 - realized
    return margins


# -- CSV ----------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def export(obj, path):
    """Write a trajectory or a benchmark report as CSV.

    Trajectory columns: step, x0.., u0.., gamma2, solve_ms, violated; one
    row per applied input, the final state is not written.  Reports write
    their rows with the keys of the first row as header.  Floats use
    ``repr`` so identical data gives identical bytes.
    """
    if isinstance(obj, Trajectory):
        rows, header = _trajectory_rows(obj)
    elif isinstance(obj, dict) and "rows" in obj:
        rows = [[_fmt(v) if isinstance(v, float) else str(v) for v in r.values()]
                for r in obj["rows"]]
        header = list(obj["rows"][0].keys()) if obj["rows"] else []
    else:
        raise ConfigError(f"cannot export object of type {type(obj).__name__}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _trajectory_rows(traj):
    n = traj.x.shape[1] if traj.x.ndim == 2 else 0
    n_u = traj.u.shape[1] if traj.u.ndim == 2 else 0
    header = (["step"] + [f"x{i}" for i in range(n)]
              + [f"u{i}" for i in range(n_u)]
              + ["gamma2", "solve_ms", "violated"])
    rows = []
    for k in range(traj.steps):
        rows.append([str(k)]
                    + [_fmt(v) for v in traj.x[k]]
                    + [_fmt(v) for v in traj.u[k]]
                    + [_fmt(traj.gamma2[k]),
                       _fmt(traj.solve_ms[k]),
                       str(int(traj.violated[k]))])
    return rows, header


def load_trajectory_csv(path) -> Trajectory:
    """Read back an exported trajectory; re-exporting reproduces the file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    n = sum(c.startswith("x") for c in header)
    n_u = sum(c.startswith("u") for c in header)
    xs = np.array([[float(r[1 + i]) for i in range(n)] for r in body])
    us = np.array([[float(r[1 + n + i]) for i in range(n_u)] for r in body])
    g2 = np.array([float(r[1 + n + n_u]) for r in body])
    ms = np.array([float(r[2 + n + n_u]) for r in body])
    vi = np.array([bool(int(r[3 + n + n_u])) for r in body])
    return Trajectory(x=xs.reshape(len(body), n), u=us.reshape(len(body), n_u),
                      delta=[], w=np.zeros((len(body), 0)), gamma2=g2,
                      solve_ms=ms, violated=vi,
                      provenance=[""] * len(body))


# -- benchmark harnesses ------------------------------------------------


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _sim_job(args):
    config, table, scenario, x0, settings = args
    return simulate(config, table, scenario, x0, settings)


def _ms_stats(chunks):
    pooled = np.concatenate([np.atleast_1d(c) for c in chunks]) if chunks \
        else np.zeros(0)
    if pooled.size == 0:
        return {"mean_ms": np.nan, "std_ms": np.nan, "max_ms": np.nan}
    std = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
    return {"mean_ms": float(pooled.mean()), "std_ms": std,
            "max_ms": float(pooled.max())}


def _replays(traj):
    return sum(p == "replay" for p in traj.provenance)


def bench_example1(table, variants=("ce1", "ce2"), reps=10, steps=30,
                   seed=0, jobs=1):
    """Repeated seeded closed-loop runs on the double-integrator preset.

    Each repetition gets its own seed and controller.  The report pools
    per-step solve times per variant (mean/std/max), counts realized
    violations, and records the worst certificate margin over all runs.
    """
    cfg = example1_config()
    x0 = np.array([7.0, 7.0])
    work, keys = [], []
    for variant in variants:
        for rep in range(reps):
            work.append((cfg, table, Scenario(steps=steps, seed=seed + rep),
                         x0, ControllerSettings(variant=variant)))
            keys.append((variant, rep))
    trajs = _pool_map(_sim_job, work, jobs)
    rows, summary = [], {}
    for variant in variants:
        chunk = [t for (v, _), t in zip(keys, trajs) if v == variant]
        for rep, traj in enumerate(chunk):
            rows.append({"variant": variant, "rep": rep, "steps": traj.steps,
                         **_ms_stats([traj.solve_ms]),
                         "cost": traj.cost,
                         "violations": int(traj.violated.sum()),
                         "replays": _replays(traj)})
        margins = np.concatenate(
            [certificate_margins(cfg, t) for t in chunk]) if chunk else np.zeros(0)
        checked = margins[np.isfinite(margins)]
        summary[variant] = {
            **_ms_stats([t.solve_ms for t in chunk]),
            "violations": int(sum(t.violated.sum() for t in chunk)),
            "min_margin": float(checked.min()) if checked.size else np.nan,
        }
    return {"example": "1", "x0": x0.tolist(), "rows": rows,
            "summary": summary, "trajectories": trajs}


def bench_example2(table, variants=("ce1", "ce2", "nl"),
                   springs=(0.5, 1.0, 10.0), steps=150, band=0.1, jobs=1):
    """Tracking runs on the two-mass-spring preset, one per realized spring.

    Every run starts at rest with a unit position reference; the report
    records when the second mass first enters the band around the
    reference, the largest input magnitude, and the solve-time stats.
    """
    cfg = example2_config()
    k_lo, k_hi = 0.5, 10.0
    x0 = np.zeros(4)
    work, keys = [], []
    for variant in variants:
        for spring in springs:
            scen = Scenario(steps=steps, seed=0, uncertainty="fixed",
                            delta=spring_realization(k_lo, k_hi, spring),
                            disturbance="zero")
            work.append((cfg, table, scen, x0,
                         ControllerSettings(variant=variant)))
            keys.append((variant, spring))
    trajs = _pool_map(_sim_job, work, jobs)
    rows, summary = [], {}
    for (variant, spring), traj in zip(keys, trajs):
        hits = np.flatnonzero(np.abs(traj.x[:, 1] - 1.0) <= band)
        rows.append({"variant": variant, "spring": spring, "steps": traj.steps,
                     "reached": int(hits[0]) if hits.size else -1,
                     "final_err": float(abs(traj.x[-1, 1] - 1.0)),
                     "u_max": float(np.max(np.abs(traj.u))) if traj.steps else 0.0,
                     **_ms_stats([traj.solve_ms]),
                     "cost": traj.cost,
                     "violations": int(traj.violated.sum()),
                     "replays": _replays(traj)})
    for variant in variants:
        chunk = [t for (v, _), t in zip(keys, trajs) if v == variant]
        mine = [r for r in rows if r["variant"] == variant]
        summary[variant] = {
            **_ms_stats([t.solve_ms for t in chunk]),
            "tracked": all(0 <= r["reached"] for r in mine),
            "u_ok": all(r["u_max"] <= 1.0 + 1e-9 for r in mine),
        }
    return {"example": "2", "springs": list(springs), "rows": rows,
            "summary": summary, "trajectories": trajs}


def _sweep_job(args):
    variant, k_max, off, sett = args
    cfg = example2_config(k_max=k_max)
    point = {"k_max": float(k_max), "feasible": False, "beta": np.nan,
             "gamma2": np.nan, "error": ""}
    try:
        ctx = OfflineContext(cfg, off)
        entry = process_cell(ctx, InitialStateSet(*example2_region()))
        entry.index = 0
        point["beta"] = entry.beta
        tab = InitializationTable(fingerprint=ctx.fingerprint, name="sweep",
                                  horizon=ctx.stacked.N, entries=[entry])
        res = Controller(cfg, tab, sett).step(np.zeros(4))
        point["feasible"] = res.status == "optimal"
        point["gamma2"] = np.nan if res.gamma2 is None else res.gamma2
    except RobustMpcError as exc:
        point["error"] = type(exc).__name__
    return point


def kmax_sweep(variant, grid, offline_settings: OfflineSettings = None,
               settings: ControllerSettings = None, jobs=1):
    """Largest spring-stiffness upper bound the variant can still start.

    Walks the given grid of upper bounds; a point is feasible when the
    offline stage produces anchors and the first tracking step solves
    at the origin.  Returns the records and the largest feasible value
    (None when every point fails).
    """
    off = offline_settings or OfflineSettings()
    sett = replace(settings or ControllerSettings(), variant=variant)
    work = [(variant, float(k), off, sett) for k in grid]
    points = _pool_map(_sweep_job, work, jobs)
    feas = [p["k_max"] for p in points if p["feasible"]]
    return {"variant": variant, "kmax": max(feas) if feas else None,
            "points": points}
