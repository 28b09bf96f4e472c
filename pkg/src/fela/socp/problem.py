"""Standard-form sparse conic problems.

A problem is

    min / max   c'x
    subject to  A x = b
                x in F x R+^l x Q^d1 x ... x Q^dk

where F is a block of free variables, R+^l the nonnegative orthant and
Q^d = {u in R^d : u_1 >= ||u_2..d||} a second-order cone.  The variable
vector is laid out as [free | nonnegative | cone_1 | ... | cone_k].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp


class ConicProblemError(ValueError):
    """Invalid problem data."""


class PresolveInfeasibleError(ConicProblemError):
    """A singleton row pins a variable to an inadmissible value."""


@dataclass(frozen=True)
class ConicProblem:
    """Immutable standard-form conic program.

    Attributes
    ----------
    A : scipy.sparse.csr_matrix
        Equality constraint matrix, shape (m, n), no stored zeros.
    b : ndarray, shape (m,)
    c : ndarray, shape (n,)
    n_free : int
        Leading free variables.
    n_nonneg : int
        Nonnegative variables following the free block.
    cone_dims : tuple of int
        Second-order cone dimensions, each >= 2, stored consecutively
        after the nonnegative block.
    sense : str
        "min" or "max".
    """

    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    n_free: int
    n_nonneg: int
    cone_dims: tuple = ()
    sense: str = "min"

    def __post_init__(self):
        A = sp.csr_matrix(self.A)
        A.eliminate_zeros()
        A.sort_indices()
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", np.ascontiguousarray(self.b, dtype=float))
        object.__setattr__(self, "c", np.ascontiguousarray(self.c, dtype=float))
        object.__setattr__(self, "cone_dims", tuple(int(d) for d in self.cone_dims))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def n_cone(self) -> int:
        return int(sum(self.cone_dims))

    def validate(self) -> None:
        """Raise ConicProblemError when an invariant is violated."""
        m, n = self.A.shape
        if self.sense not in ("min", "max"):
            raise ConicProblemError(f"unknown sense {self.sense!r}")
        if self.b.shape != (m,):
            raise ConicProblemError("b length does not match row count")
        if self.c.shape != (n,):
            raise ConicProblemError("c length does not match column count")
        if self.n_free < 0 or self.n_nonneg < 0:
            raise ConicProblemError("negative block size")
        if any(d < 2 for d in self.cone_dims):
            raise ConicProblemError("cone dimensions must be >= 2")
        if self.n_free + self.n_nonneg + self.n_cone != n:
            raise ConicProblemError("variable partition does not tile the columns")
        if not np.all(np.isfinite(self.A.data)) or not np.all(np.isfinite(self.b)) or not np.all(np.isfinite(self.c)):
            raise ConicProblemError("non-finite problem data")
        counts = np.diff(self.A.indptr)
        if np.any(counts == 0):
            row = int(np.argmin(counts))
            raise ConicProblemError(f"empty constraint row {row}")

    def cone_offsets(self):
        """Start index of each cone in the variable vector."""
        off = self.n_free + self.n_nonneg
        out = []
        for d in self.cone_dims:
            out.append(off)
            off += d
        return out

    def with_sense(self, sense: str) -> "ConicProblem":
        return replace(self, sense=sense)


@dataclass(frozen=True)
class ConicSolution:
    """Result of a conic solve.

    ``status`` is one of "optimal", "primal-infeasible", "dual-infeasible",
    "max-iter", "numerical".  Residuals are recomputed from the returned
    iterate, not taken from solver bookkeeping:

    * ``residual_primal``  = ||A x - b|| / (1 + ||b||)
    * ``residual_dual``    = ||c - A'y - z|| / (1 + ||c||)   (min sense)
    * ``relative_gap``     = |c'x - b'y| / (1 + |c'x|)
    """

    status: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    primal_objective: float
    dual_objective: float
    residual_primal: float
    residual_dual: float
    relative_gap: float
    iterations: int
    wall_time: float

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class ProblemBuilder:
    """Incremental construction of a ConicProblem.

    Variables are allocated in any order through :meth:`new_free`,
    :meth:`new_nonneg` and :meth:`new_cone`; the builder maps them to the
    canonical [free | nonneg | cones] layout at :meth:`build` time.  The
    returned handles are final column indices only after ``build``; use the
    handle arrays stored by the caller together with ``column_of``.
    """

    def __init__(self):
        self._kinds = []          # per handle: 0 free, 1 nonneg, 2 cone member
        self._cones = []          # list of handle arrays, one per cone
        self._obj = {}            # handle -> coefficient
        self._rows_cols = []      # list of int arrays (handles)
        self._rows_vals = []
        self._rhs = []
        self._perm = None

    # -- variables ---------------------------------------------------------

    def new_free(self, k: int = 1) -> np.ndarray:
        start = len(self._kinds)
        self._kinds.extend([0] * k)
        return np.arange(start, start + k)

    def new_nonneg(self, k: int = 1) -> np.ndarray:
        start = len(self._kinds)
        self._kinds.extend([1] * k)
        return np.arange(start, start + k)

    def new_cone(self, dim: int) -> np.ndarray:
        if dim < 2:
            raise ConicProblemError("cone dimension must be >= 2")
        start = len(self._kinds)
        self._kinds.extend([2] * dim)
        ids = np.arange(start, start + dim)
        self._cones.append(ids)
        return ids

    # -- rows and objective --------------------------------------------------

    def add_row(self, cols, vals, rhs: float) -> None:
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        keep = vals != 0.0
        self._rows_cols.append(cols[keep])
        self._rows_vals.append(vals[keep])
        self._rhs.append(float(rhs))

    def add_objective(self, cols, vals) -> None:
        for col, val in zip(np.atleast_1d(cols), np.atleast_1d(vals)):
            if val != 0.0:
                self._obj[int(col)] = self._obj.get(int(col), 0.0) + float(val)

    @property
    def n_rows(self) -> int:
        return len(self._rhs)

    # -- assembly ------------------------------------------------------------

    def column_of(self, handles):
        """Map provisional handles to final column indices (after build)."""
        if self._perm is None:
            raise RuntimeError("build() must run before column_of()")
        return self._perm[np.asarray(handles, dtype=np.int64)]

    def build(self, sense: str = "min") -> ConicProblem:
        kinds = np.asarray(self._kinds, dtype=np.int8)
        nvar = kinds.size
        perm = np.empty(nvar, dtype=np.int64)
        free = np.flatnonzero(kinds == 0)
        nonneg = np.flatnonzero(kinds == 1)
        perm[free] = np.arange(free.size)
        perm[nonneg] = free.size + np.arange(nonneg.size)
        off = free.size + nonneg.size
        cone_dims = []
        for ids in self._cones:
            perm[ids] = off + np.arange(ids.size)
            off += ids.size
            cone_dims.append(ids.size)
        self._perm = perm

        nrow = len(self._rhs)
        counts = np.fromiter((a.size for a in self._rows_cols), dtype=np.int64, count=nrow)
        rows = np.repeat(np.arange(nrow), counts)
        cols = perm[np.concatenate(self._rows_cols)] if nrow else np.empty(0, dtype=np.int64)
        vals = np.concatenate(self._rows_vals) if nrow else np.empty(0)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(nrow, nvar)).tocsr()
        A.sum_duplicates()

        c = np.zeros(nvar)
        for col, val in self._obj.items():
            c[perm[col]] += val

        return ConicProblem(
            A=A,
            b=np.asarray(self._rhs, dtype=float),
            c=c,
            n_free=int(free.size),
            n_nonneg=int(nonneg.size),
            cone_dims=tuple(cone_dims),
            sense=sense,
        )


# ---------------------------------------------------------------------------
# presolve
# ---------------------------------------------------------------------------


@dataclass
class PresolveMap:
    """Mapping from the reduced problem back to the original one."""

    original: ConicProblem
    kept_cols: np.ndarray
    kept_rows: np.ndarray
    fixed_values: dict = field(default_factory=dict)      # orig col -> value
    singleton_rows: list = field(default_factory=list)    # (orig row, orig col, coef) in elimination order

    def restore_primal(self, x_reduced: np.ndarray) -> np.ndarray:
        x = np.zeros(self.original.n)
        x[self.kept_cols] = x_reduced
        for col, val in self.fixed_values.items():
            x[col] = val
        return x

    def restore_dual(self, y_reduced: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Recover multipliers of eliminated rows from dual stationarity."""
        y = np.zeros(self.original.m)
        y[self.kept_rows] = y_reduced
        AT = self.original.A.tocsc()
        for row, col, coef in reversed(self.singleton_rows):
            col_vec = AT.getcol(col)
            resid = self.original.c[col] - float(col_vec.T.dot(y[:, None])[0, 0])
            y[row] = resid / coef
        return y


def presolve(problem: ConicProblem, tol: float = 0.0):
    """Eliminate singleton-pinned variables and empty rows/columns.

    Only free and nonnegative variables are substituted out; cone members
    are never touched.  Returns ``(reduced_problem, PresolveMap)``.
    Raises :class:`PresolveInfeasibleError` on a contradictory singleton
    (nonnegative variable pinned to a negative value, or an empty row with
    a nonzero right-hand side).
    """
    problem.validate()
    A = problem.A.tolil()
    b = problem.b.copy()
    c = problem.c.copy()
    n = problem.n
    n_elim = problem.n_free + problem.n_nonneg

    col_alive = np.ones(n, dtype=bool)
    row_alive = np.ones(problem.m, dtype=bool)
    pmap = PresolveMap(problem, kept_cols=None, kept_rows=None)
    feastol = tol if tol > 0 else 1e-12 * (1.0 + float(np.abs(b).max(initial=0.0)))

    Acsc = problem.A.tocsc()
    changed = True
    while changed:
        changed = False
        Acsr = A.tocsr()
        counts = np.diff(Acsr.indptr)
        for row in np.flatnonzero(row_alive):
            nnz = counts[row]
            if nnz == 0:
                if abs(b[row]) > feastol:
                    raise PresolveInfeasibleError(f"row {row} reduces to 0 = {b[row]!r}")
                row_alive[row] = False
                changed = True
            elif nnz == 1:
                col = int(Acsr.indices[Acsr.indptr[row]])
                if col >= n_elim or not col_alive[col]:
                    continue
                coef = float(Acsr.data[Acsr.indptr[row]])
                val = b[row] / coef
                if col >= problem.n_free and val < -feastol:
                    raise PresolveInfeasibleError(
                        f"row {row} pins nonnegative variable {col} to {val!r}"
                    )
                # substitute the fixed variable out of every other row
                col_data = Acsc.getcol(col).tocoo()
                for r, v in zip(col_data.row, col_data.data):
                    if r != row and row_alive[r]:
                        b[r] -= v * val
                        A[r, col] = 0.0
                pmap.fixed_values[col] = val
                pmap.singleton_rows.append((row, col, coef))
                col_alive[col] = False
                row_alive[row] = False
                changed = True
        if changed:
            continue
        # empty eliminable columns: unconstrained, fix at zero when harmless
        col_counts = np.asarray((A.tocsc()[row_alive, :] if row_alive.any() else A.tocsc())
                                .getnnz(axis=0)).ravel()
        for col in np.flatnonzero(col_alive[:n_elim]):
            if col_counts[col] == 0:
                if c[col] == 0.0 or (col >= problem.n_free and c[col] > 0.0):
                    pmap.fixed_values[col] = 0.0
                    col_alive[col] = False
                    changed = True

    kept_cols = np.flatnonzero(col_alive)
    kept_rows = np.flatnonzero(row_alive)
    pmap.kept_cols = kept_cols
    pmap.kept_rows = kept_rows

    Ared = A.tocsr()[kept_rows][:, kept_cols].tocsr()
    reduced = ConicProblem(
        A=Ared,
        b=b[kept_rows],
        c=c[kept_cols],
        n_free=int(np.count_nonzero(kept_cols < problem.n_free)),
        n_nonneg=int(
            np.count_nonzero((kept_cols >= problem.n_free) & (kept_cols < n_elim))
        ),
        cone_dims=problem.cone_dims,
        sense=problem.sense,
    )
    return reduced, pmap


# ---------------------------------------------------------------------------
# problem dump / load
# ---------------------------------------------------------------------------


def dump_problem(problem: ConicProblem, path) -> None:
    """Write a self-contained JSON dump, byte-deterministic for equal input.

    Triplets are sorted row-major then by column; floats serialize with the
    shortest round-trip decimal representation.
    """
    problem.validate()
    coo = problem.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    triplets = [
        [int(coo.row[k]), int(coo.col[k]), float(coo.data[k])] for k in order
    ]
    doc = {
        "sense": problem.sense,
        "c": [float(v) for v in problem.c],
        "b": [float(v) for v in problem.b],
        "A": {"rows": problem.m, "cols": problem.n, "triplets": triplets},
        "cones": [int(d) for d in problem.cone_dims],
        "nonneg": int(problem.n_nonneg),
        "free": int(problem.n_free),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_problem(path) -> ConicProblem:
    """Read a problem written by :func:`dump_problem`."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    shape = (doc["A"]["rows"], doc["A"]["cols"])
    trip = doc["A"]["triplets"]
    rows = [t[0] for t in trip]
    cols = [t[1] for t in trip]
    vals = [t[2] for t in trip]
    A = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    problem = ConicProblem(
        A=A,
        b=np.asarray(doc["b"], dtype=float),
        c=np.asarray(doc["c"], dtype=float),
        n_free=int(doc["free"]),
        n_nonneg=int(doc["nonneg"]),
        cone_dims=tuple(doc["cones"]),
        sense=doc["sense"],
    )
    problem.validate()
    return problem
