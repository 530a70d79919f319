"""Online variant solves, the fallback ladder, and per-step certificates."""

import numpy as np
import pytest

from conftest import PLANT_CELL, plant_config

from robustmpc.controller import (
    Controller,
    ControllerSettings,
    audit_step,
)
from robustmpc.errors import (
    ConfigError,
    CoverageError,
    InfeasibleError,
    TableError,
)
from robustmpc.lmi import (
    add_aggregation_vars,
    add_policy_vars,
    add_scaling_var,
    aggregate_bound_lmi,
    bound_coords,
    cost_bound_lmi,
)
from robustmpc.offline import (
    InitializationTable,
    OfflineContext,
    OfflineSettings,
    pin_coords,
    process_cell,
)
from robustmpc.sdp import SdpProgram

X_IN = [1.0]       # inside the table cell
X_OUT = [5.0]      # far outside it


def make(plant_table, **kw):
    return Controller(plant_config(), plant_table, ControllerSettings(**kw))


def test_settings_reject_unknown_variant():
    with pytest.raises(ConfigError):
        ControllerSettings(variant="ce3")


def test_table_for_other_system_rejected(plant_table):
    other = plant_config()
    other["bounds"]["f"][0] = 1.9
    with pytest.raises(TableError):
        Controller(other, plant_table)


def test_table_horizon_mismatch_rejected(plant_ctx, plant_entry):
    bad = InitializationTable(fingerprint=plant_ctx.fingerprint,
                              name="scalar-test", horizon=5,
                              entries=[plant_entry])
    with pytest.raises(TableError):
        Controller(plant_config(), bad)


@pytest.mark.parametrize("variant", ["ce1", "ce2", "nl"])
def test_step_solves_from_table(plant_table, plant_entry, variant):
    ctrl = make(plant_table, variant=variant)
    res = ctrl.step(X_IN)
    assert res.status == "optimal"
    assert res.provenance == "table"
    assert res.cell_index == 0
    assert res.u0.shape == (1,)
    assert res.iterations > 0 and res.solve_seconds > 0
    assert not res.violation_logged
    if variant != "nl":
        # the stored anchors stay feasible, so the fixed-state optimum can
        # only improve on the cell-wide bound
        assert res.gamma2 <= plant_entry.gamma2 * (1 + 1e-6)


def test_u0_is_first_policy_block(plant_table):
    ctrl = make(plant_table, variant="ce1")
    res = ctrl.step(X_IN)
    expected = res.state_policy.K0[:1] @ X_IN + res.state_policy.v[:1]
    assert np.allclose(res.u0, expected, atol=1e-12)


@pytest.mark.parametrize("variant,second", [("ce1", "warm"), ("nl", "warm"),
                                            ("ce2", "table")])
def test_second_step_provenance(plant_table, variant, second):
    ctrl = make(plant_table, variant=variant)
    ctrl.step(X_IN)
    res = ctrl.step(X_IN)
    assert res.provenance == second
    assert res.status == "optimal"


def test_warm_start_disabled_stays_on_table(plant_table):
    ctrl = make(plant_table, variant="ce1", warm_start=False)
    ctrl.step(X_IN)
    assert ctrl.step(X_IN).provenance == "table"


def test_matched_instance_gamma_ordering(plant_ctx, plant_entry, plant_table):
    # reference point: the frozen-gain problem with the scalings pinned to
    # the stored anchors; both online variants relax something relative to
    # it, so neither may come out above it
    st, basis = plant_ctx.stacked, plant_ctx.basis
    x0 = np.array([1.2])
    prog = SdpProgram()
    K0, vhat = add_policy_vars(prog, st.dims)
    gamma2 = prog.add_scalar("gamma2")
    scal = add_scaling_var(prog, basis, "scal")
    scal_t = add_scaling_var(prog, basis, "scal_t")
    mu, M = add_aggregation_vars(prog, st.dims.stacked_f)
    cost_bound_lmi(prog, st, basis, K0, vhat, gamma2, scal,
                   khat=plant_entry.khat, x0=x0)
    aggregate_bound_lmi(prog, st, basis, K0, vhat, scal_t, mu, M,
                        khat=plant_entry.khat, x0=x0)
    # exact pins leave the interior-point method no strictly feasible start;
    # a hair of slack around the stored values changes the optimum by O(eps)
    for var, coords in ((scal, plant_entry.scal), (scal_t, plant_entry.scal_t)):
        for k, v in enumerate(np.asarray(coords, dtype=float)):
            eps = 1e-6 * (1 + abs(v))
            prog.add_linear([(var, k, 1.0)], lb=v - eps, ub=v + eps)
    for var in (K0, vhat, M):
        bound_coords(prog, var, 1e4)
    prog.minimize(gamma2)
    sol = prog.solve()
    assert sol.ok
    pinned = sol.objective

    tol = 1e-5 * (1 + abs(pinned))
    g1 = make(plant_table, variant="ce1").step(x0).gamma2
    g2 = make(plant_table, variant="ce2").step(x0).gamma2
    assert g1 <= pinned + tol
    assert g2 <= pinned + tol


def test_outside_coverage_without_plan_raises(plant_table):
    ctrl = make(plant_table, variant="ce2")
    with pytest.raises(CoverageError):
        ctrl.step(X_OUT)


def test_replay_serves_the_stored_plan(plant_table):
    ctrl = make(plant_table, variant="ce2", warm_start=False)
    first = ctrl.step(X_IN)
    res = ctrl.step(X_OUT)
    assert res.provenance == "replay"
    assert res.status == "replay"
    assert res.violation_logged
    assert res.gamma2 is None
    assert "outside table coverage" in res.note
    pol = first.state_policy
    expected = pol.K0[1:2] @ X_IN + pol.K[1:2, :1] @ X_OUT + pol.v[1:2]
    assert np.allclose(res.u0, expected, atol=1e-12)


def test_replay_exhausts_after_horizon(plant_table):
    ctrl = make(plant_table, variant="ce2", warm_start=False)
    ctrl.step(X_IN)
    ctrl.step(X_OUT)   # offset 1
    ctrl.step(X_OUT)   # offset 2, last block of N=3
    with pytest.raises(InfeasibleError):
        ctrl.step(X_OUT)


def test_solver_failure_without_plan_raises(plant_table, monkeypatch):
    ctrl = make(plant_table, variant="ce2")
    monkeypatch.setattr(ctrl, "_solve_ce2", lambda x, material, cap=False: None)
    with pytest.raises(InfeasibleError):
        ctrl.step(X_IN)


def test_best_effort_cell_with_anchors_serves_all_variants(plant_ctx,
                                                           plant_entry):
    import copy

    entry = copy.deepcopy(plant_entry)
    entry.best_effort = True
    entry.beta = 1.2
    table = InitializationTable(fingerprint=plant_ctx.fingerprint,
                                name="scalar-test",
                                horizon=plant_ctx.stacked.N,
                                entries=[entry])
    for variant in ("ce1", "ce2", "nl"):
        assert make(table, variant=variant).step(X_IN).status == "optimal"


def test_anchorless_cell_serves_ce2_only(plant_ctx, plant_entry):
    import copy

    bare = copy.deepcopy(plant_entry)
    bare.best_effort = True
    bare.beta = 1.2
    bare.scal = None
    bare.gamma2 = None
    table = InitializationTable(fingerprint=plant_ctx.fingerprint,
                                name="scalar-test",
                                horizon=plant_ctx.stacked.N,
                                entries=[bare])
    assert make(table, variant="ce2").step(X_IN).status == "optimal"
    with pytest.raises(ConfigError):
        make(table, variant="ce1").step(X_IN)


@pytest.mark.parametrize("variant", ["ce1", "ce2", "nl"])
def test_step_certificate_holds_under_sampling(plant_table, variant):
    ctrl = make(plant_table, variant=variant)
    x0 = np.array([1.2])
    res = ctrl.step(x0)
    viol, overshoot = audit_step(ctrl.stacked, ctrl.system.structure, res, x0,
                                 count=200, rng=np.random.default_rng(7))
    assert viol <= 1e-6
    assert overshoot <= 1e-6 * (1 + res.gamma2)


def test_nl_prefers_stored_row_scalings():
    ctx = OfflineContext(plant_config(), OfflineSettings(row_anchors=True))
    entry = process_cell(ctx, PLANT_CELL)
    entry.index = 0
    assert entry.row_scal is not None
    assert len(entry.row_scal) == ctx.stacked.dims.stacked_f
    table = InitializationTable(fingerprint=ctx.fingerprint,
                                name="scalar-test", horizon=ctx.stacked.N,
                                entries=[entry])
    res = make(table, variant="nl").step(X_IN)
    assert res.status == "optimal"
    assert res.provenance == "table"
