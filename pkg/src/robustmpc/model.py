"""Uncertain system description, validation, and the disturbance recast.

The per-step model is

    x_{k+1} = A x_k + B_u u_k + B_p p_k + B_w w_k
    q_k     = C_q x_k + D_qu u_k + q_offset_k,      p_k = Delta_k q_k
    f_k     = C_f x_k + D_fu u_k + D_fp p_k + D_fw w_k  <= f_bound_k
    z_k     = C_z x_k + D_zu u_k + D_zp p_k + D_zw w_k  (target z_ref_k)

with |w_k| <= d_bound_k elementwise (d_bound_k > 0) and Delta_k drawn from a
norm-bounded structured set.  Terminal rows use the *_N matrices and a
terminal uncertainty Delta_N acting on q_N = C_qN x_N.

`recast_disturbance` folds the additive disturbance into the uncertainty
channel: w_k becomes the output of an extra diagonal block driven by the
constant q-rows q_offset = d_bound, after which n_w = 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# uncertainty structure


@dataclass(frozen=True)
class RepeatedScalar:
    """Block of the form delta * I_size with scalar |delta| <= 1."""

    size: int
    kind: str = field(default="repeated_scalar", init=False, repr=False)

    @property
    def p_dim(self) -> int:
        return self.size

    @property
    def q_dim(self) -> int:
        return self.size


@dataclass(frozen=True)
class FullBlock:
    """Unstructured block Delta in R^{p_dim x q_dim} with spectral norm <= 1."""

    p_dim: int
    q_dim: int
    kind: str = field(default="full", init=False, repr=False)


@dataclass(frozen=True)
class DiagonalBlock:
    """diag(delta_1..delta_size) with each |delta_i| <= 1.

    Used for independent scalar channels, in particular the recast
    disturbance block.
    """

    size: int
    kind: str = field(default="diagonal", init=False, repr=False)

    @property
    def p_dim(self) -> int:
        return self.size

    @property
    def q_dim(self) -> int:
        return self.size


Block = RepeatedScalar | FullBlock | DiagonalBlock


def block_from_config(entry: dict) -> Block:
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(f"uncertainty block must be a dict with a 'kind': {entry!r}")
    kind = entry["kind"]
    try:
        if kind == "repeated_scalar":
            return RepeatedScalar(int(entry["size"]))
        if kind == "full":
            return FullBlock(int(entry["p_dim"]), int(entry["q_dim"]))
        if kind == "diagonal":
            return DiagonalBlock(int(entry["size"]))
    except KeyError as exc:
        raise ConfigError(f"uncertainty block {entry!r} is missing field {exc}") from exc
    raise ConfigError(f"unknown uncertainty block kind {kind!r}")


def block_to_config(blk: Block) -> dict:
    if isinstance(blk, FullBlock):
        return {"kind": "full", "p_dim": blk.p_dim, "q_dim": blk.q_dim}
    return {"kind": blk.kind, "size": blk.size}


@dataclass(frozen=True)
class UncertaintyStructure:
    """Block-diagonal structure of the per-step and terminal uncertainty."""

    blocks: tuple[Block, ...]
    terminal_blocks: tuple[Block, ...] = ()
    tie_repeated: bool = False

    @property
    def p_dim(self) -> int:
        return sum(b.p_dim for b in self.blocks)

    @property
    def q_dim(self) -> int:
        return sum(b.q_dim for b in self.blocks)

    @property
    def terminal_p_dim(self) -> int:
        return sum(b.p_dim for b in self.terminal_blocks)

    @property
    def terminal_q_dim(self) -> int:
        return sum(b.q_dim for b in self.terminal_blocks)

    def validate(self) -> None:
        for blk in self.blocks + self.terminal_blocks:
            dims = (blk.p_dim, blk.q_dim)
            if min(dims) <= 0:
                raise DimensionError(f"uncertainty block {blk} has a non-positive size")
        if self.tie_repeated:
            # tying couples the repeated-scalar blocks across steps; it is only
            # defined when each step has at least one such block
            if not any(isinstance(b, RepeatedScalar) for b in self.blocks):
                raise ConfigError("tie_repeated requires a repeated_scalar block")

    @staticmethod
    def from_config(cfg: dict) -> "UncertaintyStructure":
        blocks = tuple(block_from_config(e) for e in cfg.get("blocks", []))
        term = tuple(block_from_config(e) for e in cfg.get("terminal_blocks", []))
        return UncertaintyStructure(
            blocks=blocks,
            terminal_blocks=term,
            tie_repeated=bool(cfg.get("tie_repeated_across_horizon", False)),
        )

    def to_config(self) -> dict:
        return {
            "blocks": [block_to_config(b) for b in self.blocks],
            "terminal_blocks": [block_to_config(b) for b in self.terminal_blocks],
            "tie_repeated_across_horizon": self.tie_repeated,
        }


# ---------------------------------------------------------------------------
# dimensions


@dataclass(frozen=True)
class Dimensions:
    n: int
    n_u: int
    n_p: int
    n_q: int
    n_w: int
    n_f: int
    n_z: int
    N: int
    n_p_N: int
    n_q_N: int
    n_f_N: int
    n_z_N: int

    @property
    def stacked_state(self) -> int:
        return self.N * self.n

    @property
    def stacked_input(self) -> int:
        return self.N * self.n_u

    @property
    def stacked_p(self) -> int:
        return self.N * self.n_p + self.n_p_N

    @property
    def stacked_q(self) -> int:
        return self.N * self.n_q + self.n_q_N

    @property
    def stacked_f(self) -> int:
        return self.N * self.n_f + self.n_f_N

    @property
    def stacked_z(self) -> int:
        return self.N * self.n_z + self.n_z_N


# ---------------------------------------------------------------------------
# system


def _as_matrix(name: str, value, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise DimensionError(f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    return arr


def _stage_array(name: str, value, width: int, N: int) -> np.ndarray:
    """Coerce a constant-or-per-step bound to shape (width,) or (N, width)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != width:
            raise DimensionError(f"{name} must have length {width}, got {arr.shape[0]}")
    elif arr.ndim == 2:
        if arr.shape != (N, width):
            raise DimensionError(f"{name} must have shape ({N}, {width}), got {arr.shape}")
    else:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def stage_value(arr: np.ndarray, k: int) -> np.ndarray:
    """Row k of a constant-or-per-step array."""
    return arr if arr.ndim == 1 else arr[k]


@dataclass
class UncertainSystem:
    """Validated uncertain system over a fixed horizon N."""

    A: np.ndarray
    B_u: np.ndarray
    B_p: np.ndarray
    B_w: np.ndarray
    C_q: np.ndarray
    D_qu: np.ndarray
    C_f: np.ndarray
    D_fu: np.ndarray
    D_fp: np.ndarray
    D_fw: np.ndarray
    C_z: np.ndarray
    D_zu: np.ndarray
    D_zp: np.ndarray
    D_zw: np.ndarray
    C_qN: np.ndarray
    C_fN: np.ndarray
    D_fpN: np.ndarray
    C_zN: np.ndarray
    D_zpN: np.ndarray
    structure: UncertaintyStructure
    N: int
    d_bound: np.ndarray
    f_bound: np.ndarray
    f_boundN: np.ndarray
    z_ref: np.ndarray
    z_refN: np.ndarray
    q_offset: np.ndarray
    name: str = ""

    @property
    def dims(self) -> Dimensions:
        return Dimensions(
            n=self.A.shape[0],
            n_u=self.B_u.shape[1],
            n_p=self.B_p.shape[1],
            n_q=self.C_q.shape[0],
            n_w=self.B_w.shape[1],
            n_f=self.C_f.shape[0],
            n_z=self.C_z.shape[0],
            N=self.N,
            n_p_N=self.structure.terminal_p_dim,
            n_q_N=self.C_qN.shape[0],
            n_f_N=self.C_fN.shape[0],
            n_z_N=self.C_zN.shape[0],
        )

    def validate(self) -> "UncertainSystem":
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.N < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.N}")
        self.structure.validate()
        d = self.dims
        if self.structure.p_dim != d.n_p or self.structure.q_dim != d.n_q:
            raise DimensionError(
                "uncertainty blocks sum to "
                f"({self.structure.p_dim}, {self.structure.q_dim}) but B_p/C_q give "
                f"({d.n_p}, {d.n_q})"
            )
        if self.structure.terminal_q_dim != d.n_q_N:
            raise DimensionError(
                f"terminal blocks give q-dim {self.structure.terminal_q_dim} "
                f"but C_qN has {d.n_q_N} rows"
            )
        _as_matrix("B_u", self.B_u, n)
        _as_matrix("B_p", self.B_p, n)
        _as_matrix("B_w", self.B_w, n)
        _as_matrix("C_q", self.C_q, cols=n)
        _as_matrix("D_qu", self.D_qu, d.n_q, d.n_u)
        _as_matrix("C_f", self.C_f, cols=n)
        _as_matrix("D_fu", self.D_fu, d.n_f, d.n_u)
        _as_matrix("D_fp", self.D_fp, d.n_f, d.n_p)
        _as_matrix("D_fw", self.D_fw, d.n_f, d.n_w)
        _as_matrix("C_z", self.C_z, cols=n)
        _as_matrix("D_zu", self.D_zu, d.n_z, d.n_u)
        _as_matrix("D_zp", self.D_zp, d.n_z, d.n_p)
        _as_matrix("D_zw", self.D_zw, d.n_z, d.n_w)
        _as_matrix("C_qN", self.C_qN, d.n_q_N, n)
        _as_matrix("C_fN", self.C_fN, d.n_f_N, n)
        _as_matrix("D_fpN", self.D_fpN, d.n_f_N, d.n_p_N)
        _as_matrix("C_zN", self.C_zN, d.n_z_N, n)
        _as_matrix("D_zpN", self.D_zpN, d.n_z_N, d.n_p_N)
        self.d_bound = _stage_array("d_bound", self.d_bound, d.n_w, self.N)
        if self.d_bound.size and not np.all(self.d_bound > 0):
            raise ConfigError("disturbance bounds d_bound must be strictly positive")
        self.f_bound = _stage_array("f_bound", self.f_bound, d.n_f, self.N)
        if self.f_boundN.shape != (d.n_f_N,):
            raise DimensionError(
                f"f_boundN must have shape ({d.n_f_N},), got {self.f_boundN.shape}"
            )
        self.z_ref = _stage_array("z_ref", self.z_ref, d.n_z, self.N)
        if self.z_refN.shape != (d.n_z_N,):
            raise DimensionError(f"z_refN must have shape ({d.n_z_N},), got {self.z_refN.shape}")
        self.q_offset = _stage_array("q_offset", self.q_offset, d.n_q, self.N)
        return self

    @property
    def is_recast(self) -> bool:
        return self.dims.n_w == 0


def make_system(
    A,
    B_u,
    structure: UncertaintyStructure,
    N: int,
    *,
    B_p=None,
    B_w=None,
    C_q=None,
    D_qu=None,
    C_f=None,
    D_fu=None,
    D_fp=None,
    D_fw=None,
    C_z=None,
    D_zu=None,
    D_zp=None,
    D_zw=None,
    C_qN=None,
    C_fN=None,
    D_fpN=None,
    C_zN=None,
    D_zpN=None,
    d_bound=None,
    f_bound=None,
    f_boundN=None,
    z_ref=None,
    z_refN=None,
    name: str = "",
) -> UncertainSystem:
    """Build a validated system, filling omitted matrices with zeros.

    Dimensions are inferred from the provided matrices: n and n_u from A and
    B_u, n_p/n_q from the uncertainty structure, n_w from B_w (or d_bound),
    n_f from C_f/D_fu rows, n_z from C_z/D_zu rows, and the terminal sizes
    from the terminal matrices.
    """
    A = _as_matrix("A", A)
    n = A.shape[0]
    B_u = _as_matrix("B_u", B_u, n)
    n_u = B_u.shape[1]
    n_p, n_q = structure.p_dim, structure.q_dim

    if B_w is not None:
        n_w = _as_matrix("B_w", B_w).shape[1]
    elif d_bound is not None:
        n_w = np.atleast_1d(np.asarray(d_bound, dtype=float)).shape[-1]
    else:
        n_w = 0

    def zeros(r, c):
        return np.zeros((r, c))

    def pick(val, r, c, label):
        return zeros(r, c) if val is None else _as_matrix(label, val, r, c)

    n_f = 0
    for m, cols in ((C_f, n), (D_fu, n_u), (D_fp, n_p), (D_fw, n_w)):
        if m is not None:
            n_f = _as_matrix("constraint matrix", m, cols=cols).shape[0]
            break
    if f_bound is not None and n_f == 0:
        arr = np.asarray(f_bound, dtype=float)
        n_f = arr.shape[-1] if arr.ndim else 0
    n_z = 0
    for m, cols in ((C_z, n), (D_zu, n_u), (D_zp, n_p), (D_zw, n_w)):
        if m is not None:
            n_z = _as_matrix("cost matrix", m, cols=cols).shape[0]
            break
    n_q_N = structure.terminal_q_dim
    n_p_N = structure.terminal_p_dim
    n_f_N = 0 if C_fN is None else _as_matrix("C_fN", C_fN, cols=n).shape[0]
    n_z_N = 0 if C_zN is None else _as_matrix("C_zN", C_zN, cols=n).shape[0]

    sys = UncertainSystem(
        A=A,
        B_u=B_u,
        B_p=pick(B_p, n, n_p, "B_p"),
        B_w=pick(B_w, n, n_w, "B_w"),
        C_q=pick(C_q, n_q, n, "C_q"),
        D_qu=pick(D_qu, n_q, n_u, "D_qu"),
        C_f=pick(C_f, n_f, n, "C_f"),
        D_fu=pick(D_fu, n_f, n_u, "D_fu"),
        D_fp=pick(D_fp, n_f, n_p, "D_fp"),
        D_fw=pick(D_fw, n_f, n_w, "D_fw"),
        C_z=pick(C_z, n_z, n, "C_z"),
        D_zu=pick(D_zu, n_z, n_u, "D_zu"),
        D_zp=pick(D_zp, n_z, n_p, "D_zp"),
        D_zw=pick(D_zw, n_z, n_w, "D_zw"),
        C_qN=pick(C_qN, n_q_N, n, "C_qN"),
        C_fN=pick(C_fN, n_f_N, n, "C_fN"),
        D_fpN=pick(D_fpN, n_f_N, n_p_N, "D_fpN"),
        C_zN=pick(C_zN, n_z_N, n, "C_zN"),
        D_zpN=pick(D_zpN, n_z_N, n_p_N, "D_zpN"),
        structure=structure,
        N=int(N),
        d_bound=np.ones(n_w) if d_bound is None else np.asarray(d_bound, dtype=float),
        f_bound=np.zeros(n_f) if f_bound is None else np.asarray(f_bound, dtype=float),
        f_boundN=np.zeros(n_f_N) if f_boundN is None else np.asarray(f_boundN, dtype=float),
        z_ref=np.zeros(n_z) if z_ref is None else np.asarray(z_ref, dtype=float),
        z_refN=np.zeros(n_z_N) if z_refN is None else np.asarray(z_refN, dtype=float),
        q_offset=np.zeros(n_q),
        name=name,
    )
    return sys.validate()


# ---------------------------------------------------------------------------
# config I/O


_MATRIX_KEYS = (
    "A",
    "B_u",
    "B_p",
    "B_w",
    "C_q",
    "D_qu",
    "C_f",
    "D_fu",
    "D_fp",
    "D_fw",
    "C_z",
    "D_zu",
    "D_zp",
    "D_zw",
    "C_qN",
    "C_fN",
    "D_fpN",
    "C_zN",
    "D_zpN",
)


def load_system(source) -> UncertainSystem:
    """Load a system from a config dict, a JSON string, or a JSON file path."""
    if isinstance(source, UncertainSystem):
        return source.validate()
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    elif isinstance(source, str):
        try:
            cfg = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config string: {exc}") from exc
    elif isinstance(source, dict):
        cfg = source
    else:
        raise ConfigError(f"unsupported config source {type(source).__name__}")

    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    if "horizon" not in cfg:
        raise ConfigError("config is missing 'horizon'")
    if "uncertainty" not in cfg:
        raise ConfigError("config is missing the 'uncertainty' section")
    matrices = cfg.get("matrices", {})
    unknown = set(matrices) - set(_MATRIX_KEYS)
    if unknown:
        raise ConfigError(f"unknown matrix keys in config: {sorted(unknown)}")
    if "A" not in matrices or "B_u" not in matrices:
        raise ConfigError("config matrices must include at least A and B_u")
    structure = UncertaintyStructure.from_config(cfg["uncertainty"])
    bounds = cfg.get("bounds", {})
    try:
        return make_system(
            structure=structure,
            N=int(cfg["horizon"]),
            name=str(cfg.get("name", "")),
            d_bound=bounds.get("d"),
            f_bound=bounds.get("f"),
            f_boundN=bounds.get("f_terminal"),
            z_ref=bounds.get("z_ref"),
            z_refN=bounds.get("z_ref_terminal"),
            **{k: matrices.get(k) for k in _MATRIX_KEYS},
        )
    except (DimensionError, ConfigError):
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from exc


def to_config(sys: UncertainSystem) -> dict:
    """Serialize a system back to its config dict (pre-recast systems only)."""
    matrices = {}
    for key in _MATRIX_KEYS:
        arr = getattr(sys, key)
        if arr.size:
            matrices[key] = arr.tolist()
    bounds = {}
    if sys.d_bound.size:
        bounds["d"] = sys.d_bound.tolist()
    if sys.f_bound.size:
        bounds["f"] = sys.f_bound.tolist()
    if sys.f_boundN.size:
        bounds["f_terminal"] = sys.f_boundN.tolist()
    if sys.z_ref.size:
        bounds["z_ref"] = sys.z_ref.tolist()
    if sys.z_refN.size:
        bounds["z_ref_terminal"] = sys.z_refN.tolist()
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "horizon": sys.N,
        "matrices": matrices,
        "bounds": bounds,
        "uncertainty": sys.structure.to_config(),
    }
    if sys.name:
        cfg["name"] = sys.name
    return cfg


def fingerprint(sys: UncertainSystem) -> str:
    """Deterministic hash of the system config, used to bind tables to systems."""
    text = json.dumps(to_config(sys), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# recast


def recast_disturbance(sys: UncertainSystem) -> UncertainSystem:
    """Fold the additive disturbance w into the uncertainty channel.

    The disturbance columns join B_p / D_fp / D_zp, the q-channel gains n_w
    constant rows equal to d_bound, and the per-step structure gains a
    DiagonalBlock(n_w).  Terminal matrices are untouched.  Idempotent: a
    system with n_w = 0 is returned unchanged.
    """
    d = sys.dims
    if d.n_w == 0:
        return sys
    sys.validate()
    N = sys.N
    n = d.n

    new_q_offset = np.zeros((N, d.n_q + d.n_w))
    for k in range(N):
        new_q_offset[k, : d.n_q] = stage_value(sys.q_offset, k)
        new_q_offset[k, d.n_q :] = stage_value(sys.d_bound, k)
    if sys.q_offset.ndim == 1 and sys.d_bound.ndim == 1:
        new_q_offset = new_q_offset[0]

    out = replace(
        sys,
        B_p=np.hstack([sys.B_p, sys.B_w]),
        B_w=np.zeros((n, 0)),
        C_q=np.vstack([sys.C_q, np.zeros((d.n_w, n))]),
        D_qu=np.vstack([sys.D_qu, np.zeros((d.n_w, d.n_u))]),
        D_fp=np.hstack([sys.D_fp, sys.D_fw]),
        D_fw=np.zeros((d.n_f, 0)),
        D_zp=np.hstack([sys.D_zp, sys.D_zw]),
        D_zw=np.zeros((d.n_z, 0)),
        structure=UncertaintyStructure(
            blocks=sys.structure.blocks + (DiagonalBlock(d.n_w),),
            terminal_blocks=sys.structure.terminal_blocks,
            tie_repeated=sys.structure.tie_repeated,
        ),
        d_bound=np.zeros(0) if sys.d_bound.ndim == 1 else np.zeros((N, 0)),
        q_offset=new_q_offset,
    )
    return out.validate()


# ---------------------------------------------------------------------------
# box-constraint helper


def box_constraint_rows(A, B_u, B_p, B_w, x_max=None, u_max=None):
    """Stage constraint rows for |u_k| <= u_max and |x_{k+1}| <= x_max.

    State limits are written one step ahead through the dynamics, which keeps
    the robust constraint system strictly feasible when the measured state
    starts on the box boundary (the current state is not a decision).  The
    final stage row then covers the terminal state, so no terminal constraint
    rows are needed for a pure box.

    Returns (C_f, D_fu, D_fp, D_fw, f_bound).
    """
    A = _as_matrix("A", A)
    n = A.shape[0]
    B_u = _as_matrix("B_u", B_u, n)
    B_p = _as_matrix("B_p", B_p, n)
    B_w = _as_matrix("B_w", B_w, n)
    n_u, n_p, n_w = B_u.shape[1], B_p.shape[1], B_w.shape[1]
    C_rows, Du_rows, Dp_rows, Dw_rows, bound = [], [], [], [], []
    if u_max is not None:
        u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (n_u,))
        if not np.all(u_max > 0):
            raise ConfigError("u_max entries must be positive")
        eye = np.eye(n_u)
        for sign in (1.0, -1.0):
            C_rows.append(np.zeros((n_u, n)))
            Du_rows.append(sign * eye)
            Dp_rows.append(np.zeros((n_u, n_p)))
            Dw_rows.append(np.zeros((n_u, n_w)))
            bound.append(u_max)
    if x_max is not None:
        x_max = np.broadcast_to(np.asarray(x_max, dtype=float), (n,))
        if not np.all(x_max > 0):
            raise ConfigError("x_max entries must be positive")
        for sign in (1.0, -1.0):
            C_rows.append(sign * A)
            Du_rows.append(sign * B_u)
            Dp_rows.append(sign * B_p)
            Dw_rows.append(sign * B_w)
            bound.append(x_max)
    if not C_rows:
        raise ConfigError("box_constraint_rows needs at least one of x_max, u_max")
    return (
        np.vstack(C_rows),
        np.vstack(Du_rows),
        np.vstack(Dp_rows),
        np.vstack(Dw_rows),
        np.concatenate(bound),
    )
