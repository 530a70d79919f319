"""Built-in benchmark configurations.

Two classic setups: an unstable two-state plant with multiplicative gain
uncertainty and an additive disturbance, and a two-mass-spring system with an
uncertain spring constant discretized by forward Euler.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model import SCHEMA_VERSION, box_constraint_rows


def example1_config(N: int = 5) -> dict:
    """Unstable 2-state plant, |u| <= 8, |x| <= 7, horizon N.

    The plant gain is scaled by (1 + 0.1 delta) with |delta| <= 1 repeated
    over both state equations, plus an additive disturbance of magnitude 0.1.
    The quadratic cost weighs [x; u] against the origin.  State limits are
    imposed one step ahead, so each stage carries 6 constraint rows.
    """
    A = np.array([[1.0, 0.8], [0.5, 1.0]])
    B_u = np.array([[1.0], [1.0]])
    B_p = 0.1 * np.eye(2)
    B_w = np.array([[0.1], [0.1]])
    C_f, D_fu, D_fp, D_fw, f_bound = box_constraint_rows(
        A, B_u, B_p, B_w, x_max=[7.0, 7.0], u_max=[8.0]
    )
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "example1",
        "horizon": int(N),
        "matrices": {
            "A": A.tolist(),
            "B_u": B_u.tolist(),
            "B_p": B_p.tolist(),
            "B_w": B_w.tolist(),
            "C_q": A.tolist(),
            "D_qu": B_u.tolist(),
            "C_f": C_f.tolist(),
            "D_fu": D_fu.tolist(),
            "D_fp": D_fp.tolist(),
            "D_fw": D_fw.tolist(),
            "C_z": [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]],
            "D_zu": [[0.0], [0.0], [1.0]],
            "C_qN": [[0.0, 0.0], [0.0, 0.0]],
            "C_zN": [[1.0, 0.0], [0.0, 1.0]],
            "D_zpN": [[0.0, 0.0], [0.0, 0.0]],
        },
        "bounds": {"d": [1.0], "f": f_bound.tolist()},
        "uncertainty": {
            "blocks": [{"kind": "repeated_scalar", "size": 2}],
            "terminal_blocks": [{"kind": "repeated_scalar", "size": 2}],
        },
    }


# initial-state grid used with example1: per-axis intervals, largest first
_EXAMPLE1_INTERVALS = (
    (5.25, 7.0),
    (2.8, 5.25),
    (-2.8, 2.8),
    (-5.25, -2.8),
    (-7.0, -5.25),
)


def example1_regions() -> list[tuple[np.ndarray, np.ndarray]]:
    """25 box regions tiling [-7, 7]^2, ordered row-major over the two axes."""
    regions = []
    for lo1, hi1 in _EXAMPLE1_INTERVALS:
        for lo2, hi2 in _EXAMPLE1_INTERVALS:
            regions.append((np.array([lo1, lo2]), np.array([hi1, hi2])))
    return regions


def two_mass_spring_matrices(spring: float, dt: float = 0.1, m1: float = 1.0, m2: float = 1.0):
    """Forward-Euler discretization of the two-mass-spring system.

    States are the two positions followed by the two velocities; the input
    is a force on the first mass.  Returns (A, B_u).
    """
    if dt <= 0 or m1 <= 0 or m2 <= 0:
        raise ConfigError("dt and masses must be positive")
    k = float(spring)
    A = np.array(
        [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [-dt * k / m1, dt * k / m1, 1.0, 0.0],
            [dt * k / m2, -dt * k / m2, 0.0, 1.0],
        ]
    )
    B_u = np.array([[0.0], [0.0], [dt / m1], [0.0]])
    return A, B_u


def example2_config(k_min: float = 0.5, k_max: float = 10.0, N: int = 6, dt: float = 0.1) -> dict:
    """Two-mass-spring tracking setup with spring constant in [k_min, k_max].

    The uncertain spring enters as a repeated scalar acting on the relative
    position x1 - x2.  The cost weighs 5*(x - x_ref) and u, with x_ref moving
    both masses to position 1.  |u| <= 1 and |x| <= [1.5, 1.5, 1, 1], state
    limits one step ahead.
    """
    if not k_min < k_max:
        raise ConfigError(f"need k_min < k_max, got [{k_min}, {k_max}]")
    k_nom = 0.5 * (k_min + k_max)
    k_dev = 0.5 * (k_max - k_min)
    A, B_u = two_mass_spring_matrices(k_nom, dt=dt)
    B_p = dt * k_dev * np.array([[0.0], [0.0], [-1.0], [1.0]])
    B_w = np.zeros((4, 0))
    C_q = np.array([[1.0, -1.0, 0.0, 0.0]])
    C_f, D_fu, D_fp, D_fw, f_bound = box_constraint_rows(
        A, B_u, B_p, B_w, x_max=[1.5, 1.5, 1.0, 1.0], u_max=[1.0]
    )
    C_z = np.vstack([5.0 * np.eye(4), np.zeros((1, 4))])
    D_zu = np.array([[0.0], [0.0], [0.0], [0.0], [1.0]])
    x_ref = np.array([1.0, 1.0, 0.0, 0.0])
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "example2",
        "horizon": int(N),
        "matrices": {
            "A": A.tolist(),
            "B_u": B_u.tolist(),
            "B_p": B_p.tolist(),
            "C_q": C_q.tolist(),
            "D_qu": [[0.0]],
            "C_f": C_f.tolist(),
            "D_fu": D_fu.tolist(),
            "D_fp": D_fp.tolist(),
            "C_z": C_z.tolist(),
            "D_zu": D_zu.tolist(),
            "C_qN": [[0.0, 0.0, 0.0, 0.0]],
            "C_zN": (5.0 * np.eye(4)).tolist(),
            "D_zpN": [[0.0], [0.0], [0.0], [0.0]],
        },
        "bounds": {
            "f": f_bound.tolist(),
            "z_ref": (C_z @ x_ref).tolist(),
            "z_ref_terminal": (5.0 * x_ref).tolist(),
        },
        "uncertainty": {
            "blocks": [{"kind": "repeated_scalar", "size": 1}],
            "terminal_blocks": [{"kind": "repeated_scalar", "size": 1}],
        },
    }


def example2_region(halfwidth: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Small box around the origin used to certify the tracking start."""
    hw = float(halfwidth)
    if hw <= 0:
        raise ConfigError("halfwidth must be positive")
    return -hw * np.ones(4), hw * np.ones(4)


def spring_realization(k_min: float, k_max: float, spring: float) -> float:
    """Normalized uncertainty value delta in [-1, 1] for a realized spring."""
    k_nom = 0.5 * (k_min + k_max)
    k_dev = 0.5 * (k_max - k_min)
    delta = (float(spring) - k_nom) / k_dev
    if abs(delta) > 1 + 1e-12:
        raise ConfigError(f"spring {spring} outside [{k_min}, {k_max}]")
    return float(np.clip(delta, -1.0, 1.0))
