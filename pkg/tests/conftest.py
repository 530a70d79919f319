"""Shared scalar test system and a prebuilt table, used across suites."""

import numpy as np
import pytest

from robustmpc.offline import (
    InitializationTable,
    InitialStateSet,
    OfflineContext,
    process_cell,
)


def scalar_config(u_max, x_max, b_p, c_q, N=2, f_scale=1.0):
    """Integrator with |u_k| <= u_max and |x_{k+1}| <= x_max rows."""
    return {
        "schema_version": 1,
        "name": "scalar-test",
        "horizon": N,
        "matrices": {
            "A": [[1.0]], "B_u": [[1.0]], "B_p": [[b_p]],
            "C_q": [[c_q]], "D_qu": [[0.0]],
            "C_f": [[0.0], [0.0], [1.0], [-1.0]],
            "D_fu": [[1.0], [-1.0], [1.0], [-1.0]],
            "D_fp": [[0.0], [0.0], [b_p], [-b_p]],
            "C_z": [[1.0], [0.0]], "D_zu": [[0.0], [1.0]],
            "C_qN": [[0.0]], "C_zN": [[1.0]],
        },
        "bounds": {"f": [u_max * f_scale, u_max * f_scale,
                         x_max * f_scale, x_max * f_scale]},
        "uncertainty": {
            "blocks": [{"kind": "repeated_scalar", "size": 1}],
            "terminal_blocks": [{"kind": "repeated_scalar", "size": 1}],
        },
    }


def plant_config():
    # uncertain channel the causal gain can damp but the open-loop part cannot
    return scalar_config(2.0, 2.2, 0.5, 1.0, N=3)


PLANT_CELL = InitialStateSet([0.8], [1.2])


@pytest.fixture(scope="session")
def plant_ctx():
    return OfflineContext(plant_config())


@pytest.fixture(scope="session")
def plant_entry(plant_ctx):
    entry = process_cell(plant_ctx, PLANT_CELL)
    entry.index = 0
    assert entry.beta == 1.0 and not entry.best_effort
    return entry


@pytest.fixture(scope="session")
def plant_table(plant_ctx, plant_entry):
    return InitializationTable(
        fingerprint=plant_ctx.fingerprint,
        name="scalar-test",
        horizon=plant_ctx.stacked.N,
        entries=[plant_entry],
    )
