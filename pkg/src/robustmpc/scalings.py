"""Commuting scaling bases and samplers for structured uncertainty.

For the stacked uncertainty set {diag(Delta_0, ..., Delta_N)} the admissible
scalings are triples (S, R, G) with S Delta = Delta R and
Delta G + G^T Delta^T = 0 for every structure member.  This module builds a
coordinate basis for that subspace, block by block:

  repeated scalar   free symmetric S = R and free skew G on the block
  full block        S = lambda I_p, R = lambda I_q, G = 0
  diagonal          free positive-diagonal S = R, G = 0

Cross-block couplings vanish except between repeated-scalar blocks tied to
the same scalar across steps, where S, R, G extend over the whole group.
S and R share coordinates in every case, so S > 0 implies R > 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConfigError, DimensionError
from .forms import MatrixForm
from .model import Block, DiagonalBlock, FullBlock, RepeatedScalar, UncertaintyStructure


@dataclass(frozen=True)
class PlacedBlock:
    """One uncertainty block positioned inside the stacked structure."""

    block: Block
    step: int  # 0..N-1 for stage blocks, N for terminal blocks
    p_off: int
    q_off: int
    group: int


def stacked_layout(structure: UncertaintyStructure, N: int):
    """Place the per-step and terminal blocks of diag(Delta_0..Delta_N).

    Returns (placed_blocks, n_p_total, n_q_total).  Tied repeated-scalar
    blocks share a group id across the N stage copies; terminal blocks are
    always their own group.
    """
    if N < 1:
        raise ConfigError(f"horizon must be >= 1, got {N}")
    structure.validate()
    placed = []
    p_off = q_off = 0
    tied_groups: dict[int, int] = {}
    next_group = 0
    for step in range(N):
        for bi, blk in enumerate(structure.blocks):
            if structure.tie_repeated and isinstance(blk, RepeatedScalar):
                if bi not in tied_groups:
                    tied_groups[bi] = next_group
                    next_group += 1
                group = tied_groups[bi]
            else:
                group = next_group
                next_group += 1
            placed.append(PlacedBlock(blk, step, p_off, q_off, group))
            p_off += blk.p_dim
            q_off += blk.q_dim
    for blk in structure.terminal_blocks:
        placed.append(PlacedBlock(blk, N, p_off, q_off, next_group))
        next_group += 1
        p_off += blk.p_dim
        q_off += blk.q_dim
    return placed, p_off, q_off


def _groups(placed):
    groups: dict[int, list[PlacedBlock]] = {}
    for pb in placed:
        groups.setdefault(pb.group, []).append(pb)
    return [groups[g] for g in sorted(groups)]


@dataclass
class ScalingBasis:
    """Coordinate basis of the admissible scaling subspace."""

    layout: list[PlacedBlock]
    n_p: int
    n_q: int
    S: MatrixForm
    R: MatrixForm
    G: MatrixForm

    @property
    def ncoords(self) -> int:
        return self.S.ncoords

    def identity_coords(self, scale: float = 1.0) -> np.ndarray:
        """Coordinates with S = R = scale * I, G = 0."""
        x = np.zeros(self.ncoords)
        S = self.S
        for c, (r, cc, v) in enumerate(S.entries):
            if r.size == 1 and r[0] == cc[0]:
                x[c] = scale
        return x

    def matrices(self, coords):
        return self.S.value(coords), self.R.value(coords), self.G.value(coords)


def scaling_basis(structure: UncertaintyStructure, N: int) -> ScalingBasis:
    """Build the scaling basis for the stacked structure over horizon N."""
    placed, n_p, n_q = stacked_layout(structure, N)
    S_entries, R_entries, G_entries = [], [], []

    def empty():
        return (np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0))

    for members in _groups(placed):
        blk = members[0].block
        if isinstance(blk, (RepeatedScalar,)):
            if not all(isinstance(m.block, RepeatedScalar) for m in members):
                raise DimensionError("tied group mixes block kinds")
            p_idx = np.concatenate(
                [np.arange(m.p_off, m.p_off + m.block.size) for m in members]
            )
            q_idx = np.concatenate(
                [np.arange(m.q_off, m.q_off + m.block.size) for m in members]
            )
            M = p_idx.size
            for a in range(M):
                for b in range(a, M):
                    if a == b:
                        S_entries.append(([p_idx[a]], [p_idx[a]], [1.0]))
                        R_entries.append(([q_idx[a]], [q_idx[a]], [1.0]))
                    else:
                        S_entries.append(
                            ([p_idx[a], p_idx[b]], [p_idx[b], p_idx[a]], [1.0, 1.0])
                        )
                        R_entries.append(
                            ([q_idx[a], q_idx[b]], [q_idx[b], q_idx[a]], [1.0, 1.0])
                        )
                    G_entries.append(empty())
            for a in range(M):
                for b in range(a + 1, M):
                    S_entries.append(empty())
                    R_entries.append(empty())
                    G_entries.append(
                        ([q_idx[a], q_idx[b]], [p_idx[b], p_idx[a]], [1.0, -1.0])
                    )
        elif isinstance(blk, FullBlock):
            (m,) = members
            S_entries.append(
                (
                    np.arange(m.p_off, m.p_off + blk.p_dim),
                    np.arange(m.p_off, m.p_off + blk.p_dim),
                    np.ones(blk.p_dim),
                )
            )
            R_entries.append(
                (
                    np.arange(m.q_off, m.q_off + blk.q_dim),
                    np.arange(m.q_off, m.q_off + blk.q_dim),
                    np.ones(blk.q_dim),
                )
            )
            G_entries.append(empty())
        elif isinstance(blk, DiagonalBlock):
            (m,) = members
            for i in range(blk.size):
                S_entries.append(([m.p_off + i], [m.p_off + i], [1.0]))
                R_entries.append(([m.q_off + i], [m.q_off + i], [1.0]))
                G_entries.append(empty())
        else:  # pragma: no cover - new block kinds must extend this module
            raise DimensionError(f"unsupported block kind {type(blk).__name__}")

    return ScalingBasis(
        layout=placed,
        n_p=n_p,
        n_q=n_q,
        S=MatrixForm((n_p, n_p), S_entries),
        R=MatrixForm((n_q, n_q), R_entries),
        G=MatrixForm((n_q, n_p), G_entries),
    )


# ---------------------------------------------------------------------------
# samplers


def _group_param_slots(placed):
    """Scalar/matrix parameter slots, one per group."""
    slots = []
    for members in _groups(placed):
        blk = members[0].block
        if isinstance(blk, RepeatedScalar):
            slots.append(("scalar", members))
        elif isinstance(blk, DiagonalBlock):
            slots.append(("diag", members))
        else:
            slots.append(("full", members))
    return slots


def _embed(placed, n_p, n_q, values):
    delta = np.zeros((n_p, n_q))
    for pb, val in values:
        blk = pb.block
        delta[pb.p_off : pb.p_off + blk.p_dim, pb.q_off : pb.q_off + blk.q_dim] = val
    return delta


def _full_boundary(rng, p_dim, q_dim, radius=1.0):
    X = rng.normal(size=(p_dim, q_dim))
    s = np.linalg.norm(X, 2)
    if s == 0:
        X = np.zeros((p_dim, q_dim))
        X[0, 0] = 1.0
        s = 1.0
    return radius * X / s


def sample_uncertainty(
    structure: UncertaintyStructure,
    N: int,
    mode: str = "random-ball",
    count: int = 1,
    rng: np.random.Generator | None = None,
    grid_points: int = 2,
    limit: int = 4096,
) -> list[np.ndarray]:
    """Draw stacked uncertainty matrices consistent with the structure.

    Modes: "random-ball" draws interior points, "boundary" draws points with
    unit block norms, "vertex-grid" enumerates grids over the scalar
    parameters (capped at `limit` combinations, subsampled with rng beyond
    that).  Tied blocks receive a single shared scalar.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    placed, n_p, n_q = stacked_layout(structure, N)
    slots = _group_param_slots(placed)

    def draw(mode_):
        values = []
        for kind, members in slots:
            blk = members[0].block
            if kind == "scalar":
                d = rng.uniform(-1, 1) if mode_ == "random-ball" else float(rng.choice([-1.0, 1.0]))
                values.extend((m, d * np.eye(m.block.size)) for m in members)
            elif kind == "diag":
                if mode_ == "random-ball":
                    d = rng.uniform(-1, 1, size=blk.size)
                else:
                    d = rng.choice([-1.0, 1.0], size=blk.size)
                values.append((members[0], np.diag(d)))
            else:
                if mode_ == "random-ball":
                    val = _full_boundary(rng, blk.p_dim, blk.q_dim, radius=rng.uniform())
                else:
                    val = _full_boundary(rng, blk.p_dim, blk.q_dim)
                values.append((members[0], val))
        return _embed(placed, n_p, n_q, values)

    if mode in ("random-ball", "boundary"):
        return [draw(mode) for _ in range(count)]
    if mode != "vertex-grid":
        raise ConfigError(f"unknown sampling mode {mode!r}")

    if grid_points < 2:
        raise ConfigError("vertex-grid needs grid_points >= 2")
    grid = np.linspace(-1.0, 1.0, grid_points)
    scalar_slots = []
    for kind, members in slots:
        if kind == "scalar":
            scalar_slots.append(("scalar", members, None))
        elif kind == "diag":
            for i in range(members[0].block.size):
                scalar_slots.append(("diag_entry", members, i))
    n_scalar = len(scalar_slots)
    total = grid_points**n_scalar if n_scalar else 1
    if total <= limit:
        combos = list(product(range(grid_points), repeat=n_scalar))
    else:
        combos = [tuple(rng.integers(0, grid_points, size=n_scalar)) for _ in range(limit)]

    out = []
    for combo in combos:
        values = []
        diag_accum: dict[int, np.ndarray] = {}
        for (kind, members, extra), gi in zip(scalar_slots, combo):
            if kind == "scalar":
                values.extend((m, grid[gi] * np.eye(m.block.size)) for m in members)
            else:
                pb = members[0]
                acc = diag_accum.setdefault(id(pb), np.zeros(pb.block.size))
                acc[extra] = grid[gi]
        for kind, members in slots:
            if kind == "diag":
                pb = members[0]
                values.append((pb, np.diag(diag_accum.get(id(pb), np.zeros(pb.block.size)))))
            elif kind == "full":
                values.append((members[0], _full_boundary(rng, members[0].block.p_dim, members[0].block.q_dim)))
        out.append(_embed(placed, n_p, n_q, values))
    return out
