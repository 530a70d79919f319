import copy
from pathlib import Path

import numpy as np
import pytest

from robustmpc.controller import Controller, ControllerSettings
from robustmpc.errors import ConfigError, InfeasibleError
from robustmpc.offline import (
    InitializationTable,
    InitialStateSet,
    OfflineContext,
    process_cell,
)
from robustmpc.sim import (
    Scenario,
    Trajectory,
    bench_example1,
    certificate_margins,
    export,
    kmax_sweep,
    load_trajectory_csv,
    simulate,
)
from conftest import PLANT_CELL, plant_config

GOLDEN = Path(__file__).parent / "data" / "golden_scalar.csv"


def noisy_config():
    """The shared scalar plant plus a bounded additive disturbance."""
    cfg = copy.deepcopy(plant_config())
    cfg["name"] = "scalar-noisy"
    cfg["matrices"]["B_w"] = [[0.2]]
    cfg["matrices"]["D_fw"] = [[0.0], [0.0], [0.2], [-0.2]]
    cfg["matrices"]["D_zw"] = [[0.0], [0.0]]
    cfg["bounds"]["d"] = [0.5]
    return cfg


@pytest.fixture(scope="module")
def noisy_table():
    cfg = noisy_config()
    ctx = OfflineContext(cfg)
    entry = process_cell(ctx, PLANT_CELL)
    entry.index = 0
    assert not entry.best_effort
    return cfg, InitializationTable(fingerprint=ctx.fingerprint,
                                    name="scalar-noisy",
                                    horizon=ctx.stacked.N, entries=[entry])


class TestScenario:
    def test_rule_names_checked(self):
        with pytest.raises(ConfigError):
            Scenario(uncertainty="worst")
        with pytest.raises(ConfigError):
            Scenario(disturbance="gaussian")

    def test_fixed_delta_must_be_in_ball(self):
        with pytest.raises(ConfigError):
            Scenario(delta=1.5)

    def test_fixed_disturbance_needs_sequence(self):
        with pytest.raises(ConfigError):
            Scenario(disturbance="fixed")


class TestSimulate:
    def test_shapes_and_status(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=4, seed=3), [1.0])
        assert traj.status == "completed"
        assert traj.x.shape == (5, 1) and traj.u.shape == (4, 1)
        assert traj.w.shape == (4, 1) and len(traj.delta) == 4
        assert traj.gamma2.shape == (4,) and traj.violated.shape == (4,)
        assert len(traj.results) == traj.steps == 4
        assert traj.cost >= 0.0

    def test_plant_evolution_matches_recursion(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=3, seed=5,
                                             uncertainty="random"), [1.0])
        # x_{k+1} = x_k + u_k + 0.5 delta_k x_k + 0.2 w_k for this plant
        for k in range(3):
            d = traj.delta[k][0, 0]
            step = (traj.x[k] + traj.u[k] + 0.5 * d * traj.x[k]
                    + 0.2 * traj.w[k])
            np.testing.assert_allclose(traj.x[k + 1], step, atol=1e-12)

    def test_same_seed_same_run(self, noisy_table):
        cfg, table = noisy_table
        scen = Scenario(steps=4, seed=11, uncertainty="random")
        a = simulate(cfg, table, scen, [1.0])
        b = simulate(cfg, table, scen, [1.0])
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)
        assert np.array_equal(a.w, b.w)

    def test_random_draws_stay_in_ball(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=6, seed=2,
                                             uncertainty="random"), [1.0])
        for delta in traj.delta:
            assert np.linalg.norm(delta, 2) <= 1.0 + 1e-12
        assert np.all(np.abs(traj.w) <= 0.5 + 1e-12)

    def test_vertex_rule_picks_corners(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=4, seed=2,
                                             uncertainty="vertex"), [1.0])
        for delta in traj.delta:
            assert abs(abs(delta[0, 0]) - 1.0) < 1e-12

    def test_out_of_bounds_fixed_disturbance_rejected(self, noisy_table):
        cfg, table = noisy_table
        scen = Scenario(steps=2, disturbance="fixed",
                        w_sequence=np.array([[0.1], [0.9]]))
        with pytest.raises(ConfigError):
            simulate(cfg, table, scen, [1.0])

    def test_hard_failure_truncates(self, noisy_table, monkeypatch):
        cfg, table = noisy_table

        def boom(self, x):
            raise InfeasibleError("no solution")

        monkeypatch.setattr(Controller, "step", boom)
        traj = simulate(cfg, table, Scenario(steps=5), [1.0])
        assert traj.status == "truncated at step 0 (InfeasibleError)"
        assert traj.steps == 0 and traj.x.shape == (1, 1)

    def test_no_violations_on_regulated_run(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=8, seed=4,
                                             uncertainty="random"), [1.2])
        assert not traj.violated.any()


class TestCertificateMargins:
    def test_windowed_margins_nonnegative(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=6, seed=9,
                                             uncertainty="random"), [1.0])
        margins = certificate_margins(cfg, traj)
        # horizon 3: the last two steps have no complete window
        checked = margins[: 6 - 3 + 1]
        assert np.all(np.isfinite(checked))
        assert np.all(np.isnan(margins[6 - 3 + 1:]))
        for k, m in enumerate(checked):
            assert m >= -1e-6 * (1.0 + traj.gamma2[k])

    def test_replay_steps_skipped(self, noisy_table):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=4, seed=9), [1.0])
        traj.results[1] = None
        margins = certificate_margins(cfg, traj)
        assert np.isnan(margins[1]) and np.isfinite(margins[0])


class TestCsv:
    def test_round_trip_bytes_equal(self, noisy_table, tmp_path):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=4, seed=1,
                                             uncertainty="random"), [1.0])
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export(traj, p1)
        export(load_trajectory_csv(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_matches_dimensions(self, noisy_table, tmp_path):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=2, seed=1), [1.0])
        path = tmp_path / "t.csv"
        export(traj, path)
        head = path.read_text().splitlines()[0]
        assert head == "step,x0,u0,gamma2,solve_ms,violated"

    def test_empty_trajectory_is_header_only(self, noisy_table, tmp_path,
                                             monkeypatch):
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=0), [1.0])
        path = tmp_path / "empty.csv"
        export(traj, path)
        assert path.read_text() == "step,x0,u0,gamma2,solve_ms,violated\n"

    def test_golden_seeded_run(self, noisy_table, tmp_path):
        # regenerate by deleting the golden file and rerunning this test
        cfg, table = noisy_table
        traj = simulate(cfg, table, Scenario(steps=4, seed=21,
                                             uncertainty="random"), [1.0])
        traj.solve_ms = np.zeros_like(traj.solve_ms)  # wall time is not data
        path = tmp_path / "golden.csv"
        export(traj, path)
        if not GOLDEN.exists():
            GOLDEN.parent.mkdir(parents=True, exist_ok=True)
            GOLDEN.write_bytes(path.read_bytes())
        assert path.read_bytes() == GOLDEN.read_bytes()

    def test_report_export(self, tmp_path):
        report = {"rows": [{"variant": "ce1", "rep": 0, "mean_ms": 1.25},
                           {"variant": "ce2", "rep": 0, "mean_ms": 0.5}]}
        path = tmp_path / "r.csv"
        export(report, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "variant,rep,mean_ms"
        assert lines[1] == "ce1,0,1.25"

    def test_unknown_object_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            export(object(), tmp_path / "x.csv")


class TestBenchAssembly:
    def test_report_shape_from_faked_runs(self, monkeypatch):
        def fake(config, table, scenario, x0, settings=None):
            n = scenario.steps
            return Trajectory(
                x=np.zeros((n + 1, 2)), u=np.zeros((n, 1)), delta=[], w=np.zeros((n, 1)),
                gamma2=np.full(n, 2.0), solve_ms=np.full(n, 1.0 + scenario.seed),
                violated=np.zeros(n, dtype=bool), provenance=["table"] * n)

        monkeypatch.setattr("robustmpc.sim.simulate", fake)
        monkeypatch.setattr("robustmpc.sim.certificate_margins",
                            lambda cfg, t: np.array([0.25]))
        report = bench_example1(table=None, variants=("ce1", "ce2"),
                                reps=2, steps=3, seed=0)
        assert len(report["rows"]) == 4
        ce1 = report["summary"]["ce1"]
        assert ce1["mean_ms"] == pytest.approx(1.5)
        assert ce1["max_ms"] == 2.0
        assert ce1["violations"] == 0
        assert ce1["min_margin"] == 0.25
        assert [r["rep"] for r in report["rows"]] == [0, 1, 0, 1]


class TestKmaxSweep:
    def test_degenerate_range_is_feasible(self):
        res = kmax_sweep("ce2", [0.5])
        assert res["kmax"] == 0.5
        assert res["points"][0]["feasible"]
        assert res["points"][0]["beta"] == 1.0
