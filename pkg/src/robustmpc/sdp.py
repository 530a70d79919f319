"""Linear matrix inequality programs and a cvxopt backend.

A program collects matrix variables (each parameterized by a
:class:`~robustmpc.forms.MatrixForm`), affine LMI constraints in those
variables, and scalar linear inequality rows.  Solving compiles everything
into the cone program format of ``cvxopt.solvers.sdp`` and maps the result
back onto the variables.
"""

from dataclasses import dataclass

import numpy as np
from cvxopt import matrix as cvxmat
from cvxopt import spmatrix
from cvxopt import solvers

from .errors import SolverError
from .forms import MatrixForm

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SolverOptions:
    abstol: float = 1e-7
    reltol: float = 1e-7
    feastol: float = 1e-7
    maxiters: int = 200
    # slack subtracted from the constant term of strict inequalities,
    # relative to the magnitude of the constant block
    margin: float = 1e-7
    show_progress: bool = False


class Variable:
    """A matrix decision variable over a coordinate form."""

    __slots__ = ("name", "form", "offset")

    def __init__(self, name, form, offset):
        self.name = name
        self.form = form
        self.offset = offset

    @property
    def ncoords(self):
        return self.form.ncoords

    @property
    def shape(self):
        return self.form.shape

    def __repr__(self):
        return "Variable(%r, shape=%s, ncoords=%d)" % (self.name, self.shape, self.ncoords)


class AffineLmi:
    """Constraint F0 + sum_k theta_k F_k >= 0.

    ``terms`` maps (variable, local coordinate) to a triplet
    (rows, cols, vals) giving the nonzero entries of that coordinate's
    coefficient matrix.  ``strict`` requests a small positive margin so the
    solved point satisfies the inequality strictly.
    """

    def __init__(self, size, F0, terms, name="lmi", strict=True):
        self.size = int(size)
        self.F0 = np.asarray(F0, dtype=float)
        if self.F0.shape != (self.size, self.size):
            raise ValueError("constant block shape %s does not match size %d"
                             % (self.F0.shape, self.size))
        self.terms = terms
        self.name = name
        self.strict = strict

    def coefficient(self, var, local):
        """Dense coefficient matrix of one coordinate (zeros if absent)."""
        F = np.zeros((self.size, self.size))
        trip = self.terms.get((var, local))
        if trip is not None:
            rows, cols, vals = trip
            np.add.at(F, (rows, cols), vals)
        return F

    def value(self, coords):
        """Evaluate F(theta) for a global coordinate vector."""
        F = self.F0.copy()
        for (var, local), (rows, cols, vals) in self.terms.items():
            theta = coords[var.offset + local]
            if theta != 0.0:
                np.add.at(F, (rows, cols), theta * vals)
        return F


@dataclass
class SdpSolution:
    status: str
    coords: np.ndarray
    objective: float | None = None
    iterations: int = 0
    message: str = ""

    @property
    def ok(self):
        return self.status == OPTIMAL

    def value(self, var):
        local = self.coords[var.offset:var.offset + var.ncoords]
        return var.form.value(local)


class SdpProgram:
    """A collection of variables, LMIs and linear rows to solve together."""

    def __init__(self):
        self.variables = []
        self.lmis = []
        self.linear = []
        self.objective = None
        self._ncoords = 0

    @property
    def ncoords(self):
        return self._ncoords

    def add_variable(self, name, form):
        var = Variable(name, form, self._ncoords)
        self._ncoords += form.ncoords
        self.variables.append(var)
        return var

    def add_scalar(self, name):
        form = MatrixForm((1, 1), [(np.array([0]), np.array([0]), np.array([1.0]))])
        return self.add_variable(name, form)

    def add_lmi(self, lmi):
        self.lmis.append(lmi)
        return lmi

    def add_linear(self, terms, lb=None, ub=None):
        """Add lb <= sum coeff * var[local] <= ub (either bound optional)."""
        if lb is None and ub is None:
            raise ValueError("linear row needs at least one bound")
        self.linear.append((tuple(terms), lb, ub))

    def minimize(self, var, coeff=1.0):
        if var.ncoords != 1:
            raise ValueError("objective variable must be scalar")
        self.objective = (var, float(coeff))

    # -- compilation ---------------------------------------------------

    def _used_mask(self):
        used = np.zeros(self._ncoords, dtype=bool)
        for lmi in self.lmis:
            for (var, local) in lmi.terms:
                used[var.offset + local] = True
        for terms, _, _ in self.linear:
            for var, local, _ in terms:
                used[var.offset + local] = True
        if self.objective is not None:
            var, _ = self.objective
            used[var.offset] = True
        return used

    def solve(self, options=None):
        opts = options or SolverOptions()
        used = self._used_mask()
        index = np.full(self._ncoords, -1, dtype=np.int64)
        index[used] = np.arange(int(used.sum()))
        nfree = int(used.sum())
        coords = np.zeros(self._ncoords)

        # constant constraints can be decided outright
        active = []
        for lmi in self.lmis:
            if lmi.terms:
                active.append(lmi)
                continue
            w = np.linalg.eigvalsh(0.5 * (lmi.F0 + lmi.F0.T))
            if w[0] < (0.0 if not lmi.strict else 1e-12):
                return SdpSolution(INFEASIBLE, coords,
                                   message="constant block %s has min eig %.3e"
                                   % (lmi.name, w[0]))

        if nfree == 0:
            return SdpSolution(OPTIMAL, coords, objective=0.0)

        c = np.zeros(nfree)
        if self.objective is not None:
            var, coeff = self.objective
            c[index[var.offset]] = coeff

        Gl = hl = None
        rows, rhs = [], []
        for terms, lb, ub in self.linear:
            row = np.zeros(nfree)
            for var, local, coeff in terms:
                row[index[var.offset + local]] += coeff
            if ub is not None:
                rows.append(row.copy())
                rhs.append(float(ub))
            if lb is not None:
                rows.append(-row)
                rhs.append(-float(lb))
        if rows:
            Gl = cvxmat(np.array(rows))
            hl = cvxmat(np.array(rhs))

        Gs, hs = [], []
        for lmi in active:
            n = lmi.size
            # keep the coefficient blocks sparse: most coordinates touch a
            # handful of entries in one constraint, and densifying every
            # column makes the larger programs memory-bound
            pos, col, val = [], [], []
            for (var, local), (r, cidx, vals) in lmi.terms.items():
                j = index[var.offset + local]
                pos.append(r + n * cidx)
                col.append(np.full(len(vals), j, dtype=np.int64))
                val.append(-np.asarray(vals, dtype=float))
            pos = np.concatenate(pos)
            col = np.concatenate(col)
            val = np.concatenate(val)
            # collapse duplicate writes to the same entry
            flat, inv = np.unique(pos * nfree + col, return_inverse=True)
            acc = np.zeros(len(flat))
            np.add.at(acc, inv, val)
            Gs.append(spmatrix(acc, (flat // nfree).astype(int),
                               (flat % nfree).astype(int), size=(n * n, nfree)))
            F0 = 0.5 * (lmi.F0 + lmi.F0.T)
            if lmi.strict:
                scale = max(1.0, float(np.abs(F0).max()))
                F0 = F0 - opts.margin * scale * np.eye(n)
            hs.append(cvxmat(F0))

        saved = dict(solvers.options)
        solvers.options.update({
            "show_progress": opts.show_progress,
            "abstol": opts.abstol,
            "reltol": opts.reltol,
            "feastol": opts.feastol,
            "maxiters": opts.maxiters,
        })
        try:
            sol = solvers.sdp(cvxmat(c), Gl=Gl, hl=hl, Gs=Gs, hs=hs)
        except (ArithmeticError, ValueError) as exc:
            return SdpSolution(NUMERICAL_FAILURE, coords, message=str(exc))
        finally:
            solvers.options.clear()
            solvers.options.update(saved)

        status = sol["status"]
        iters = int(sol.get("iterations", 0))
        if sol["x"] is not None:
            coords[used] = np.array(sol["x"]).ravel()
        obj = None
        if self.objective is not None and sol["x"] is not None:
            var, coeff = self.objective
            obj = coeff * coords[var.offset]

        if status == "optimal":
            return SdpSolution(OPTIMAL, coords, objective=obj, iterations=iters)
        if status == "primal infeasible":
            return SdpSolution(INFEASIBLE, coords, iterations=iters)
        if iters >= opts.maxiters:
            return SdpSolution(MAX_ITERATIONS, coords, objective=obj, iterations=iters,
                               message="no convergence in %d iterations" % iters)
        return SdpSolution(NUMERICAL_FAILURE, coords, objective=obj, iterations=iters,
                           message="solver returned status %r" % status)

    # -- checking ------------------------------------------------------

    def verify(self, coords, tol=1e-9):
        """Residuals of every constraint at a coordinate vector.

        Returns a dict mapping constraint names to their minimum eigenvalue
        (LMIs) or worst signed violation (linear rows, positive = violated).
        Raises SolverError if anything is violated beyond tol.
        """
        report = {}
        bad = []
        for i, lmi in enumerate(self.lmis):
            F = lmi.value(coords)
            w = float(np.linalg.eigvalsh(0.5 * (F + F.T))[0])
            key = lmi.name or ("lmi%d" % i)
            report[key] = w
            if w < -tol:
                bad.append("%s min eig %.3e" % (key, w))
        worst = 0.0
        for terms, lb, ub in self.linear:
            val = sum(coeff * coords[var.offset + local] for var, local, coeff in terms)
            if ub is not None:
                worst = max(worst, val - ub)
            if lb is not None:
                worst = max(worst, lb - val)
        if self.linear:
            report["linear"] = worst
            if worst > tol:
                bad.append("linear rows violated by %.3e" % worst)
        if bad:
            raise SolverError("certificate check failed: " + "; ".join(bad))
        return report
