"""Primal-dual interior-point solver on the homogeneous self-dual embedding.

Nesterov-Todd scaling, Mehrotra predictor-corrector steps, step length at
0.99 of the distance to the cone boundary.  Every Newton direction comes
from one factorized KKT system solved with two right-hand sides (static
and residual); the embedding scalars (tau, kappa) close the system through
a bordered update whose denominator is evaluated in its cancellation-free
form -||W z1||^2 - kappa/tau.  Directions are then polished against the
full Newton equations, which keeps the endgame stable although the
unscaled KKT matrix degenerates like 1/mu^2.

Returned residuals are recomputed on the de-homogenized candidate point,
never copied from solver bookkeeping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from fela.socp.kkt import KKTFactorError, KKTSolver, ScalingBlocks
from fela.socp.problem import ConicProblem, ConicSolution


@dataclass
class SolverSettings:
    """Interior-point controls.

    ``tol`` bounds the relative primal/dual feasibility residuals and the
    relative duality gap at status "optimal".
    """

    tol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.99
    reg_primal: float = 1e-9
    reg_dual: float = 1e-9
    refine_steps: int = 2
    direction_refine_steps: int = 2
    kkt_backend: str = "auto"  # auto | block | sparse-lu
    verbose: bool = False


# ---------------------------------------------------------------------------
# cone algebra on the [nonneg | soc...] part of the variable vector
# ---------------------------------------------------------------------------


class _ConeOps:
    def __init__(self, n_nonneg: int, dims):
        self.n_nonneg = n_nonneg
        self.dims = tuple(dims)
        self.n = n_nonneg + sum(dims)
        self.degree = n_nonneg + len(dims)
        groups = {}
        off = n_nonneg
        for d in dims:
            groups.setdefault(d, []).append(off)
            off += d
        self.groups = [
            (d, np.asarray(starts)[:, None] + np.arange(d)[None, :])
            for d, starts in groups.items()
        ]
        self.nonneg_idx = np.arange(n_nonneg)

    def identity(self):
        e = np.zeros(self.n)
        e[: self.n_nonneg] = 1.0
        for _, idx in self.groups:
            e[idx[:, 0]] = 1.0
        return e

    def inside(self, u, margin=0.0):
        if self.n_nonneg and np.any(u[: self.n_nonneg] <= margin):
            return False
        for _, idx in self.groups:
            v = u[idx]
            if np.any(v[:, 0] - np.linalg.norm(v[:, 1:], axis=1) <= margin):
                return False
        return True

    def prod(self, u, v):
        """Jordan product taken per cone."""
        out = np.empty(self.n)
        out[: self.n_nonneg] = u[: self.n_nonneg] * v[: self.n_nonneg]
        for _, idx in self.groups:
            a = u[idx]
            b = v[idx]
            out[idx[:, 0]] = np.sum(a * b, axis=1)
            out[idx[:, 1:]] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
        return out

    def inv_prod(self, lam, r):
        """Solve lam o x = r per cone."""
        out = np.empty(self.n)
        out[: self.n_nonneg] = r[: self.n_nonneg] / lam[: self.n_nonneg]
        for _, idx in self.groups:
            a = lam[idx]
            w = r[idx]
            a0 = a[:, 0]
            abar = a[:, 1:]
            jlam = a0**2 - np.sum(abar**2, axis=1)
            x0 = (a0 * w[:, 0] - np.sum(abar * w[:, 1:], axis=1)) / jlam
            xbar = (w[:, 1:] - x0[:, None] * abar) / a0[:, None]
            out[idx[:, 0]] = x0
            out[idx[:, 1:]] = xbar
        return out

    def max_step(self, u, du):
        """Largest t with u + s*du in the cone for all s in [0, t]."""
        t = np.inf
        if self.n_nonneg:
            un = u[: self.n_nonneg]
            dn = du[: self.n_nonneg]
            neg = dn < 0
            if np.any(neg):
                t = min(t, float(np.min(-un[neg] / dn[neg])))
        for _, idx in self.groups:
            a = u[idx]
            d = du[idx]
            ju = a[:, 0] ** 2 - np.sum(a[:, 1:] ** 2, axis=1)
            jd = d[:, 0] ** 2 - np.sum(d[:, 1:] ** 2, axis=1)
            jud = a[:, 0] * d[:, 0] - np.sum(a[:, 1:] * d[:, 1:], axis=1)
            disc = jud**2 - jd * ju
            with np.errstate(invalid="ignore", divide="ignore"):
                sq = np.sqrt(np.maximum(disc, 0.0))
                r1 = np.where(
                    np.abs(jd) > 1e-300,
                    (-jud - sq) / jd,
                    np.where(jud < 0, -ju / (2 * jud), np.inf),
                )
                r2 = np.where(np.abs(jd) > 1e-300, (-jud + sq) / jd, np.inf)
            roots = np.stack([r1, r2])
            roots = np.where((roots > 0) & (disc >= 0), roots, np.inf)
            t = min(t, float(np.min(roots, initial=np.inf)))
            d0 = d[:, 0]
            neg = d0 < 0
            if np.any(neg):
                t = min(t, float(np.min(-a[neg, 0] / d0[neg])))
        return t

    def nt_scaling(self, s, z):
        sn = s[: self.n_nonneg]
        zn = z[: self.n_nonneg]
        if np.any(sn <= 0) or np.any(zn <= 0):
            raise FloatingPointError("iterate left the cone interior")
        w_nn = np.sqrt(sn / zn)
        soc = []
        for _, idx in self.groups:
            sv = s[idx]
            zv = z[idx]
            js = sv[:, 0] ** 2 - np.sum(sv[:, 1:] ** 2, axis=1)
            jz = zv[:, 0] ** 2 - np.sum(zv[:, 1:] ** 2, axis=1)
            if np.any(js <= 0) or np.any(jz <= 0):
                raise FloatingPointError("iterate left the cone interior")
            sb = sv / np.sqrt(js)[:, None]
            zb = zv / np.sqrt(jz)[:, None]
            gamma = np.sqrt((1.0 + np.sum(sb * zb, axis=1)) / 2.0)
            jzb = zb.copy()
            jzb[:, 1:] *= -1.0
            wbar = (sb + jzb) / (2.0 * gamma[:, None])
            eta = (js / jz) ** 0.25
            # Jordan square root of wbar: W = eta * P(sqrt(wbar))
            q = wbar.copy()
            q[:, 0] += 1.0
            q /= np.sqrt(2.0 * (1.0 + wbar[:, 0]))[:, None]
            soc.append((idx, wbar, eta, q))
        return _Scaling(self, w_nn, soc)


class _Scaling:
    """NT scaling W with W z = W^-1 s =: lam."""

    def __init__(self, ops, w_nn, soc):
        self.ops = ops
        self.w_nn = w_nn
        self.soc = soc

    def apply(self, v):
        """W v = eta * P(sqrt(wbar)) v."""
        ops = self.ops
        out = np.empty(ops.n)
        out[: ops.n_nonneg] = self.w_nn * v[: ops.n_nonneg]
        for idx, _wbar, eta, q in self.soc:
            u = v[idx]
            dot = np.sum(q * u, axis=1)
            ju = u.copy()
            ju[:, 1:] *= -1.0
            out[idx] = eta[:, None] * (2.0 * q * dot[:, None] - ju)
        return out

    def apply_inv(self, v):
        """W^-1 v; sqrt(wbar)^-1 = J sqrt(wbar)."""
        ops = self.ops
        out = np.empty(ops.n)
        out[: ops.n_nonneg] = v[: ops.n_nonneg] / self.w_nn
        for idx, _wbar, eta, q in self.soc:
            u = v[idx]
            jq = q.copy()
            jq[:, 1:] *= -1.0
            dot = np.sum(jq * u, axis=1)
            ju = u.copy()
            ju[:, 1:] *= -1.0
            out[idx] = (2.0 * jq * dot[:, None] - ju) / eta[:, None]
        return out

    def kkt_blocks(self):
        """W^-2 = eta^-2 P(J wbar) and W^2 = eta^2 P(wbar) for the KKT."""
        ops = self.ops
        soc_blocks = []
        for idx, wbar, eta, _q in self.soc:
            g, d = idx.shape
            vb = wbar.copy()
            vb[:, 1:] *= -1.0
            J = np.diag(np.concatenate([[1.0], -np.ones(d - 1)]))
            W2inv = (2.0 * np.einsum("gi,gj->gij", vb, vb) - J[None, :, :]) / (
                eta**2
            )[:, None, None]
            W2 = (2.0 * np.einsum("gi,gj->gij", wbar, wbar) - J[None, :, :]) * (
                eta**2
            )[:, None, None]
            soc_blocks.append((idx, W2inv, W2))
        return ScalingBlocks(ops.n, ops.nonneg_idx, 1.0 / self.w_nn**2, soc_blocks)


# ---------------------------------------------------------------------------
# main solver
# ---------------------------------------------------------------------------


def solve(problem: ConicProblem, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve a standard-form conic problem to the configured tolerances."""
    t0 = time.perf_counter()
    settings = settings or SolverSettings()
    problem.validate()

    A = problem.A
    m, n = A.shape
    b = problem.b
    c_int = problem.c if problem.sense == "min" else -problem.c
    nf = problem.n_free
    coned = np.arange(nf, n)
    ops = _ConeOps(problem.n_nonneg, problem.cone_dims)

    kkt = KKTSolver(
        A, nf, problem.n_nonneg, problem.cone_dims,
        reg_primal=settings.reg_primal, reg_dual=settings.reg_dual,
        backend=settings.kkt_backend, refine_steps=settings.refine_steps,
    )

    x = np.zeros(n)
    y = np.zeros(m)
    s = ops.identity()
    z = ops.identity()
    tau, kappa = 1.0, 1.0
    nu = ops.degree

    norm_b = 1.0 + float(np.linalg.norm(b))
    norm_c = 1.0 + float(np.linalg.norm(c_int))

    def scatter(v):
        out = np.zeros(n)
        out[coned] = v
        return out

    best = None
    exit_reason = "max-iter"
    iters = 0
    infeasible_cert = None

    for it in range(settings.max_iter + 1):
        iters = it
        zfull = scatter(z)
        rx = A.T @ y - zfull + c_int * tau
        ry = A @ x - b * tau
        rs = s - x[coned]
        rtau = float(c_int @ x + b @ y + kappa)
        mu = (float(s @ z) + tau * kappa) / (nu + 1)

        # de-homogenized candidate and certified measures
        xhat = x / tau
        xhat[coned] = s / tau
        yhat = -y / tau
        zhat = zfull / tau
        pobj = float(c_int @ xhat)
        dobj = float(b @ yhat)
        pres = float(np.linalg.norm(A @ xhat - b)) / norm_b
        dres = float(np.linalg.norm(c_int - A.T @ yhat - zhat)) / norm_c
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj))

        if settings.verbose:
            print(
                f"iter {it:3d}  pobj {pobj:+.9e}  gap {relgap:.2e}  "
                f"pres {pres:.2e}  dres {dres:.2e}  mu {mu:.2e}  tau {tau:.2e}"
            )

        score = max(pres, dres, relgap)
        if best is None or score < best[0]:
            best = (score, xhat.copy(), yhat.copy(), zhat.copy(), pobj, dobj, pres, dres, relgap)

        if pres <= settings.tol and dres <= settings.tol and relgap <= settings.tol:
            break

        # infeasibility certificates (tau collapsing against kappa)
        if tau <= 1e-8 * max(1.0, kappa):
            by_ = float(b @ y)
            if by_ < 0:
                respi = float(np.linalg.norm(A.T @ y - zfull)) / (-by_)
                if respi <= settings.tol * norm_c:
                    exit_reason = "primal-infeasible"
                    scale = -1.0 / by_
                    infeasible_cert = (xhat, -y * scale, scatter(z) * scale)
                    break
            cx = float(c_int @ x)
            if cx < 0:
                resd = max(
                    float(np.linalg.norm(A @ x)), float(np.linalg.norm(s - x[coned]))
                ) / (-cx)
                if resd <= settings.tol * norm_b:
                    exit_reason = "dual-infeasible"
                    infeasible_cert = (x / (-cx), yhat, zhat)
                    break

        if it == settings.max_iter:
            exit_reason = "max-iter"
            break

        try:
            scal = ops.nt_scaling(s, z)
        except FloatingPointError:
            exit_reason = "numerical"
            break
        lam = scal.apply(z)

        factored = False
        for reg_scale in (1.0, 1e2, 1e4):
            try:
                kkt.factor(scal.kkt_blocks(), reg_scale)
                factored = True
                break
            except KKTFactorError:
                continue
        if not factored:
            exit_reason = "numerical"
            break

        try:
            x1, y1, z1 = kkt.solve3(-c_int, b.copy(), np.zeros(ops.n))
        except KKTFactorError:
            exit_reason = "numerical"
            break
        wz1 = scal.apply(z1)
        denom = -float(wz1 @ wz1) - kappa / tau

        def solve_newton(r1, r2, r3, r4, r6, r5):
            """Direction solving the six linearized embedding equations."""
            g = ops.inv_prod(lam, r5)
            bz = r3 - scal.apply(g)
            x2, y2, z2 = kkt.solve3(r1, r2, bz)
            dtau = (r4 - r6 / tau - float(c_int @ x2 + b @ y2)) / denom
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            dz = z2 + dtau * z1
            ds = scal.apply(g - scal.apply(dz))
            dkappa = (r6 - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def direction(eta1, ds_t, dk_rhs):
            """solve_newton plus polish passes on the full equations."""
            r1 = -eta1 * rx
            r2 = -eta1 * ry
            r3 = -eta1 * rs
            r4 = -eta1 * rtau
            r6 = dk_rhs
            d = solve_newton(r1, r2, r3, r4, r6, ds_t)
            for _ in range(settings.direction_refine_steps):
                dx, dy, dz, ds, dtau, dkappa = d
                e1 = r1 - (A.T @ dy - scatter(dz) + c_int * dtau)
                e2 = r2 - (A @ dx - b * dtau)
                e3 = r3 - (ds - dx[coned])
                e4 = r4 - (float(c_int @ dx + b @ dy) + dkappa)
                e6 = r6 - (tau * dkappa + kappa * dtau)
                e5 = ds_t - ops.prod(lam, scal.apply(dz) + scal.apply_inv(ds))
                cor = solve_newton(e1, e2, e3, e4, e6, e5)
                d = tuple(a + ca for a, ca in zip(d, cor))
            return d

        lamlam = ops.prod(lam, lam)
        e = ops.identity()

        try:
            # predictor
            dx, dy, dz, ds, dtau, dkappa = direction(1.0, -lamlam, -tau * kappa)
            alpha = min(ops.max_step(s, ds), ops.max_step(z, dz))
            if dtau < 0:
                alpha = min(alpha, tau / -dtau)
            if dkappa < 0:
                alpha = min(alpha, kappa / -dkappa)
            sigma = min(1.0, max(0.0, (1.0 - min(1.0, alpha)) ** 3))
            gamma_corr = ops.prod(scal.apply_inv(ds), scal.apply(dz))
            dk_rhs = -tau * kappa - dtau * dkappa + sigma * mu
            # corrector
            dx, dy, dz, ds, dtau, dkappa = direction(
                1.0 - sigma, -lamlam - gamma_corr + sigma * mu * e, dk_rhs
            )
        except KKTFactorError:
            exit_reason = "numerical"
            break

        alpha = min(ops.max_step(s, ds), ops.max_step(z, dz))
        if dtau < 0:
            alpha = min(alpha, tau / -dtau)
        if dkappa < 0:
            alpha = min(alpha, kappa / -dkappa)
        step = min(1.0, settings.step_fraction * alpha)
        if not np.isfinite(step) or step <= 0:
            exit_reason = "numerical"
            break

        x += step * dx
        y += step * dy
        s += step * ds
        z += step * dz
        tau += step * dtau
        kappa += step * dkappa
        if tau <= 0 or kappa <= 0 or not ops.inside(s) or not ops.inside(z):
            exit_reason = "numerical"
            break

    if infeasible_cert is not None:
        xr, yr, zr = infeasible_cert
        status = exit_reason
        pobj = dobj = np.nan
        pres, dres, relgap = best[6], best[7], best[8]
    else:
        _, xr, yr, zr, pobj, dobj, pres, dres, relgap = best
        if pres <= settings.tol and dres <= settings.tol and relgap <= settings.tol:
            status = "optimal"
        else:
            status = exit_reason

    if problem.sense == "max":
        yr = -yr
        pobj, dobj = -pobj, -dobj
    return ConicSolution(
        status=status,
        x=xr,
        y=yr,
        z=zr,
        primal_objective=pobj,
        dual_objective=dobj,
        residual_primal=pres,
        residual_dual=dres,
        relative_gap=relgap,
        iterations=iters,
        wall_time=time.perf_counter() - t0,
    )
