"""KKT systems for the interior-point solver.

Every Newton step reduces to the quasi-definite system

    [ D + eps*I   A' ] [ux]   [rx]
    [ A        -del*I] [uy] = [ry]

where D places the inverse squared Nesterov-Todd scaling on the coned
coordinates and zero on the free ones.  Two backends factor it:

* ``sparse-lu``  -- assemble the full matrix, factor with SuperLU.
* ``block``      -- eliminate small independent (variable, row) groups in
  batched dense arithmetic and factor only the Schur complement on the
  free variables plus border rows.  Applicable whenever the non-free
  variables decouple into small groups through the constraint rows, which
  is the shape produced by per-quadrature-point yield blocks.

Both run under an iterative-refinement wrapper against the exact
(unregularized) system.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla


class KKTFactorError(RuntimeError):
    """Factorization failed (singular or badly pivoted system)."""


# ---------------------------------------------------------------------------
# scaling-block application helpers
# ---------------------------------------------------------------------------


class ScalingBlocks:
    """Squared NT scaling and its inverse, grouped like the cone layout.

    ``nonneg``: diagonal entries of W^-2 for the nonnegative block;
    ``soc``: list of (idx, inv_blocks, sq_blocks) with ``idx`` (g, d)
    coned-coordinate indices and dense symmetric (g, d, d) matrices for
    W^-2 and W^2.
    """

    def __init__(self, n_cone_coords, nonneg_idx, nonneg, soc):
        self.n = n_cone_coords
        self.nonneg_idx = nonneg_idx
        self.nonneg = nonneg
        self.soc = soc

    def apply(self, v):
        """Return W^-2 v on the coned part."""
        out = np.zeros_like(v)
        if self.nonneg_idx.size:
            out[self.nonneg_idx] = self.nonneg * v[self.nonneg_idx]
        for idx, blocks, _sq in self.soc:
            out[idx] = np.einsum("gij,gj->gi", blocks, v[idx])
        return out

    def apply_sq(self, v):
        """Return W^2 v on the coned part."""
        out = np.zeros_like(v)
        if self.nonneg_idx.size:
            out[self.nonneg_idx] = v[self.nonneg_idx] / self.nonneg
        for idx, _blocks, sq in self.soc:
            out[idx] = np.einsum("gij,gj->gi", sq, v[idx])
        return out

    def diag_coo(self):
        """COO triplets of the W^-2 block diagonal on coned coordinates."""
        rows = [self.nonneg_idx]
        cols = [self.nonneg_idx]
        vals = [self.nonneg]
        for idx, blocks, _sq in self.soc:
            g, d = idx.shape
            rows.append(np.repeat(idx, d, axis=1).ravel())
            cols.append(np.tile(idx, (1, d)).ravel())
            vals.append(blocks.ravel())
        return (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


# ---------------------------------------------------------------------------
# sparse-LU backend
# ---------------------------------------------------------------------------


class SparseLUBackend:
    name = "sparse-lu"

    def __init__(self, A: sp.csr_matrix, n_free: int, reg_primal: float, reg_dual: float):
        self.A = A.tocsr()
        self.m, self.n = A.shape
        self.n_free = n_free
        self.reg_primal = reg_primal
        self.reg_dual = reg_dual
        self._lu = None

    def factor(self, blocks: ScalingBlocks, reg_scale: float = 1.0) -> None:
        rows, cols, vals = blocks.diag_coo()
        D = sp.coo_matrix(
            (vals, (rows + self.n_free, cols + self.n_free)), shape=(self.n, self.n)
        )
        eps = self.reg_primal * reg_scale
        delta = self.reg_dual * reg_scale
        M = sp.bmat(
            [
                [D + eps * sp.identity(self.n), self.A.T],
                [self.A, -delta * sp.identity(self.m)],
            ],
            format="csc",
        )
        try:
            self._lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # singular factor
            raise KKTFactorError(str(exc)) from exc

    def raw_solve(self, rx, ry):
        sol = self._lu.solve(np.concatenate([rx, ry]))
        if not np.all(np.isfinite(sol)):
            raise KKTFactorError("non-finite KKT solution")
        return sol[: self.n], sol[self.n :]


# ---------------------------------------------------------------------------
# block-angular backend
# ---------------------------------------------------------------------------


class _Group:
    """Batch of components with identical local shape."""

    __slots__ = (
        "nv", "nr", "nc", "vslots", "rslots", "cids", "L", "C",
        "nn_slot", "nn_pos", "cones", "kinv",
    )


def _detect_components(A: sp.csr_matrix, n_free: int, cone_offsets, cone_dims):
    """Union rows with the non-free variables they touch; cones stay whole.

    Returns (labels_rows, labels_vars, n_components) where vars are counted
    from column ``n_free``, or None when there is nothing to decouple.
    """
    m, n = A.shape
    n_local = n - n_free
    if n_local == 0:
        return None
    coo = A.tocoo()
    sel = coo.col >= n_free
    ri = coo.row[sel]
    vi = coo.col[sel] - n_free + m  # graph node ids for local vars
    edges_r = [ri]
    edges_c = [vi]
    # chain edges keep each cone in a single component
    for off, d in zip(cone_offsets, cone_dims):
        base = off - n_free + m
        edges_r.append(np.arange(base, base + d - 1))
        edges_c.append(np.arange(base + 1, base + d))
    er = np.concatenate(edges_r)
    ec = np.concatenate(edges_c)
    nn = m + n_local
    G = sp.coo_matrix((np.ones(er.size), (er, ec)), shape=(nn, nn))
    ncomp, labels = csgraph.connected_components(G, directed=False)
    return labels[:m], labels[m:], ncomp


class BlockAngularBackend:
    """Batched dense elimination of local groups, sparse border factor."""

    name = "block"
    max_local = 128  # largest admissible component (vars + rows)

    def __init__(self, A: sp.csr_matrix, n_free: int, cone_offsets, cone_dims,
                 nonneg_range, reg_primal: float, reg_dual: float):
        self.A = A.tocsr()
        self.m, self.n = A.shape
        self.n_free = n_free
        self.reg_primal = reg_primal
        self.reg_dual = reg_dual

        det = _detect_components(A, n_free, cone_offsets, cone_dims)
        if det is None:
            raise KKTFactorError("no local variables")
        row_label, var_label, ncomp = det

        comp_vars = [[] for _ in range(ncomp)]
        comp_rows = [[] for _ in range(ncomp)]
        for j, lab in enumerate(var_label):
            comp_vars[lab].append(j + n_free)
        for i, lab in enumerate(row_label):
            comp_rows[lab].append(i)

        # border rows live in components without variables
        self.border_rows = np.array(
            sorted(r for k in range(ncomp) if not comp_vars[k] for r in comp_rows[k]),
            dtype=np.int64,
        )
        comps = [
            (np.asarray(sorted(comp_vars[k]), dtype=np.int64),
             np.asarray(sorted(comp_rows[k]), dtype=np.int64))
            for k in range(ncomp)
            if comp_vars[k]
        ]
        if not comps:
            raise KKTFactorError("no local components")
        if max(v.size + r.size for v, r in comps) > self.max_local:
            raise KKTFactorError("component too large for block elimination")

        nn_lo, nn_hi = nonneg_range
        soc_of = {}
        for gidx, (off, d) in enumerate(zip(cone_offsets, cone_dims)):
            soc_of[off] = (gidx, d)

        Acsc = A.tocsc()
        Acsr = A.tocsr()

        def signature(vs, rs):
            slots = []
            j = 0
            while j < vs.size:
                col = vs[j]
                if nn_lo <= col < nn_hi:
                    slots.append(("n",))
                    j += 1
                else:
                    gidx, d = soc_of[col]
                    slots.append(("c", d))
                    j += d
            return (vs.size, rs.size, tuple(slots))

        buckets = {}
        for vs, rs in comps:
            # free columns referenced by this component's rows
            sub = Acsr[rs]
            free_cols = np.unique(sub.indices[sub.indices < n_free]) if rs.size else np.empty(0, np.int64)
            key = signature(vs, rs) + (free_cols.size,)
            buckets.setdefault(key, []).append((vs, rs, free_cols))

        self.groups = []
        for key, items in sorted(buckets.items(), key=lambda kv: kv[0]):
            nv, nr, slots, nc = key[0], key[1], key[2], key[3]
            G = len(items)
            grp = _Group()
            grp.nv, grp.nr, grp.nc = nv, nr, nc
            grp.vslots = np.stack([it[0] for it in items])            # (G, nv)
            grp.rslots = (np.stack([it[1] for it in items]) if nr else np.zeros((G, 0), np.int64))
            grp.cids = (np.stack([it[2] for it in items]) if nc else np.zeros((G, 0), np.int64))
            L = np.zeros((G, nr, nv))
            C = np.zeros((G, nr, nc))
            for g, (vs, rs, fc) in enumerate(items):
                if nr:
                    sub = Acsr[rs].toarray()
                    L[g] = sub[:, vs]
                    if nc:
                        C[g] = sub[:, fc]
            grp.L = L
            grp.C = C
            # local scaling layout
            nn_slot, nn_pos, cones = [], [], []
            j = 0
            for s in slots:
                if s[0] == "n":
                    nn_slot.append(j)
                    j += 1
                else:
                    cones.append((j, s[1]))
                    j += s[1]
            grp.nn_slot = np.asarray(nn_slot, dtype=np.int64)
            # absolute coned-coordinate index of each nonneg slot / cone start
            grp.nn_pos = grp.vslots[:, grp.nn_slot] - n_free if nn_slot else np.zeros((G, 0), np.int64)
            grp.cones = cones
            grp.kinv = None
            self.groups.append(grp)

        # static Schur sparsity on the free block
        srows, scols = [], []
        for grp in self.groups:
            if grp.nc:
                srows.append(np.repeat(grp.cids, grp.nc, axis=1).ravel())
                scols.append(np.tile(grp.cids, (1, grp.nc)).ravel())
        self._srows = np.concatenate(srows) if srows else np.empty(0, np.int64)
        self._scols = np.concatenate(scols) if scols else np.empty(0, np.int64)
        self._A_bf = Acsr[self.border_rows][:, :n_free] if self.border_rows.size else None
        self._border_lu = None

    def factor(self, blocks: ScalingBlocks, reg_scale: float = 1.0) -> None:
        eps = self.reg_primal * reg_scale
        delta = self.reg_dual * reg_scale
        nf = self.n_free
        svals = []
        soc_blocks = blocks.soc  # aligned with cone group order
        for grp in self.groups:
            G, nv, nr = grp.vslots.shape[0], grp.nv, grp.nr
            k = nv + nr
            K = np.zeros((G, k, k))
            if grp.nn_slot.size:
                K[:, grp.nn_slot, grp.nn_slot] = blocks.nonneg_at(grp.nn_pos)
            for slot, d in grp.cones:
                # match each component's cone to its batch entry
                starts = grp.vslots[:, slot] - nf
                K[:, slot : slot + d, slot : slot + d] = blocks.soc_block_at(starts, d)
            K[:, :nv, :nv] += eps * np.eye(nv)
            if nr:
                K[:, nv:, :nv] = grp.L
                K[:, :nv, nv:] = np.transpose(grp.L, (0, 2, 1))
                K[:, nv:, nv:] = -delta * np.eye(nr)
            try:
                grp.kinv = np.linalg.inv(K)
            except np.linalg.LinAlgError as exc:
                raise KKTFactorError(str(exc)) from exc
            if grp.nc:
                Grr = grp.kinv[:, nv:, nv:]
                T = -np.einsum("gri,grs,gsj->gij", grp.C, Grr, grp.C)
                svals.append(T.ravel())
        vals = np.concatenate(svals) if svals else np.empty(0)
        S = sp.coo_matrix((vals, (self._srows, self._scols)), shape=(nf, nf)).tocsr()
        S = S + eps * sp.identity(nf, format="csr")
        nb = self.border_rows.size
        if nb:
            M = sp.bmat(
                [[S, self._A_bf.T], [self._A_bf, -delta * sp.identity(nb)]],
                format="csc",
            )
        else:
            M = S.tocsc()
        if M.shape[0] == 0:
            self._border_lu = None
            return
        try:
            self._border_lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise KKTFactorError(str(exc)) from exc

    def raw_solve(self, rx, ry):
        nf = self.n_free
        bf = rx[:nf].copy()
        ws = []
        for grp in self.groups:
            rg = np.concatenate(
                [rx[grp.vslots], ry[grp.rslots] if grp.nr else np.zeros((grp.vslots.shape[0], 0))],
                axis=1,
            )
            w = np.einsum("gij,gj->gi", grp.kinv, rg)
            ws.append((rg, w))
            if grp.nc and grp.nr:
                contrib = np.einsum("grc,gr->gc", grp.C, w[:, grp.nv :])
                bf -= np.bincount(grp.cids.ravel(), weights=contrib.ravel(), minlength=nf)
        rhs = np.concatenate([bf, ry[self.border_rows]]) if self.border_rows.size else bf
        if self._border_lu is None:
            sol = np.zeros(0)
        else:
            sol = self._border_lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise KKTFactorError("non-finite KKT solution")
        uf = sol[:nf]
        ux = np.zeros(self.n)
        uy = np.zeros(self.m)
        ux[:nf] = uf
        if self.border_rows.size:
            uy[self.border_rows] = sol[nf:]
        for grp, (rg, w) in zip(self.groups, ws):
            if grp.nc and grp.nr:
                corr = np.einsum("grc,gc->gr", grp.C, uf[grp.cids])
                rg = rg.copy()
                rg[:, grp.nv :] -= corr
                u = np.einsum("gij,gj->gi", grp.kinv, rg)
            else:
                u = w
            ux[grp.vslots] = u[:, : grp.nv]
            if grp.nr:
                uy[grp.rslots] = u[:, grp.nv :]
        return ux, uy


# hooks used by BlockAngularBackend.factor
def _nonneg_at(self, pos):
    return self.nonneg_lookup[pos]


def _soc_block_at(self, starts, d):
    lookup = self.soc_lookup[d]
    return lookup[0][lookup[1][starts]]


ScalingBlocks.nonneg_at = _nonneg_at
ScalingBlocks.soc_block_at = _soc_block_at


# ---------------------------------------------------------------------------
# refinement wrapper
# ---------------------------------------------------------------------------


class KKTSolver:
    """Backend selection plus iterative refinement and z-recovery.

    Solves the full 3x3 system

        [0  A'  G'] [ux]   [bx]
        [A  0   0 ] [uy] = [by]       G = -E (coned-coordinate selection)
        [G  0 -W^2] [uz]   [bz]

    by elimination of uz.
    """

    def __init__(self, A: sp.csr_matrix, n_free: int, n_nonneg: int,
                 cone_dims, reg_primal: float = 1e-9, reg_dual: float = 1e-9,
                 backend: str = "auto", refine_steps: int = 2):
        self.A = A.tocsr()
        self.m, self.n = A.shape
        self.n_free = n_free
        self.refine_steps = refine_steps
        offsets = []
        off = n_free + n_nonneg
        for d in cone_dims:
            offsets.append(off)
            off += d
        self._blocks = None
        chosen = None
        if backend in ("auto", "block"):
            try:
                chosen = BlockAngularBackend(
                    A, n_free, offsets, cone_dims,
                    (n_free, n_free + n_nonneg), reg_primal, reg_dual,
                )
            except KKTFactorError:
                if backend == "block":
                    raise
                chosen = None
        if chosen is None:
            chosen = SparseLUBackend(A, n_free, reg_primal, reg_dual)
        self.backend = chosen

    @property
    def backend_name(self):
        return self.backend.name

    def factor(self, blocks: ScalingBlocks, reg_scale: float = 1.0) -> None:
        # index structures for fast per-group block lookup
        blocks.nonneg_lookup = np.zeros(blocks.n)
        if blocks.nonneg_idx.size:
            blocks.nonneg_lookup[blocks.nonneg_idx] = blocks.nonneg
        blocks.soc_lookup = {}
        for idx, mats, _sq in blocks.soc:
            d = idx.shape[1]
            if d not in blocks.soc_lookup:
                blocks.soc_lookup[d] = (mats, np.zeros(blocks.n, dtype=np.int64))
            else:
                prev, where = blocks.soc_lookup[d]
                blocks.soc_lookup[d] = (np.concatenate([prev, mats]), where)
            mats_all, where = blocks.soc_lookup[d]
            where[idx[:, 0]] = np.arange(mats_all.shape[0] - idx.shape[0], mats_all.shape[0])
        self._blocks = blocks
        self.backend.factor(blocks, reg_scale)

    def _raw3(self, bx, by, bz):
        """One pass of the uz elimination through the factorization."""
        blocks = self._blocks
        rx = bx.copy()
        rx[self.n_free :] -= blocks.apply(bz)
        ux, uy = self.backend.raw_solve(rx, by)
        uz = -blocks.apply(ux[self.n_free :] + bz)
        return ux, uy, uz

    def _residual3(self, bx, by, bz, ux, uy, uz):
        """Residual of the exact (unregularized) 3x3 system."""
        r1 = bx - self.A.T @ uy
        r1[self.n_free :] += uz  # -G'uz = +E'uz
        r2 = by - self.A @ ux
        r3 = bz + ux[self.n_free :] + self._blocks.apply_sq(uz)  # bz - (Gux - W^2 uz)
        return r1, r2, r3

    def solve3(self, bx, by, bz):
        ux, uy, uz = self._raw3(bx, by, bz)
        for _ in range(self.refine_steps):
            r1, r2, r3 = self._residual3(bx, by, bz, ux, uy, uz)
            dx, dy, dz = self._raw3(r1, r2, r3)
            ux = ux + dx
            uy = uy + dy
            uz = uz + dz
        return ux, uy, uz
