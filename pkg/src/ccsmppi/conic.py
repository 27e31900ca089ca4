"""Solver-neutral conic program and its backends.

A :class:`ConicProgram` is

    minimize    0.5 z' P z + q' z + r
    subject to  t_i(z) >= alpha_i * || C_i z + d_i ||      (cone i)
                z_j >= 0                                    (j in nonneg)

with ``t_i(z) = e_i' z + f_i``. Backends translate this into their own
format; :func:`certify` recomputes residuals from the IR alone so no backend
is trusted blindly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


@dataclass
class SocBlock:
    """A batch of cones sharing one sparse layout.

    ``e`` is ``(m, n)``, ``f`` is ``(m,)``; ``C`` stacks the ``m`` norm
    arguments row-wise, ``dims[i]`` rows per cone.
    """

    e: sp.csr_matrix
    f: np.ndarray
    C: sp.csr_matrix
    d: np.ndarray
    dims: np.ndarray
    alpha: float

    @property
    def m(self) -> int:
        return len(self.f)

    def compact(self) -> "SocBlock":
        """Equivalent block with zero rows dropped and constant rows merged.

        Rows of ``C`` without nonzeros contribute the constant ``d``; all such
        entries of one cone collapse into a single row holding their norm.
        """
        C = sp.csr_matrix(self.C)
        C.eliminate_zeros()
        variable = np.diff(C.indptr) > 0
        cone_of_row = np.repeat(np.arange(self.m), self.dims)
        const_sq = np.bincount(cone_of_row, weights=np.where(variable, 0.0, self.d**2), minlength=self.m)
        keep_rows = np.flatnonzero(variable)
        has_const = const_sq > 0
        n_var = np.bincount(cone_of_row[keep_rows], minlength=self.m)
        dims = n_var + has_const
        # new row order: each cone's variable rows, then its merged constant row
        blocks_C, blocks_d = [], []
        starts = np.concatenate([[0], np.cumsum(n_var)[:-1]])
        for i in range(self.m):
            rows = keep_rows[starts[i]:starts[i] + n_var[i]]
            blocks_C.append(C[rows])
            blocks_d.append(self.d[rows])
            if has_const[i]:
                blocks_C.append(sp.csr_matrix((1, C.shape[1])))
                blocks_d.append(np.array([np.sqrt(const_sq[i])]))
        if blocks_C:
            C_new = sp.vstack(blocks_C, format="csr")
            d_new = np.concatenate(blocks_d)
        else:
            C_new = sp.csr_matrix((0, C.shape[1]))
            d_new = np.zeros(0)
        return SocBlock(sp.csr_matrix(self.e), self.f.copy(), C_new, d_new, dims.astype(int), self.alpha)

    def subset(self, idx) -> "SocBlock":
        idx = np.asarray(idx, dtype=int)
        starts = np.concatenate([[0], np.cumsum(self.dims)[:-1]])
        rows = np.concatenate([np.arange(starts[i], starts[i] + self.dims[i]) for i in idx]) if len(idx) else np.zeros(0, dtype=int)
        return SocBlock(sp.csr_matrix(self.e)[idx], self.f[idx], sp.csr_matrix(self.C)[rows],
                        self.d[rows], self.dims[idx], self.alpha)


@dataclass
class ConicProgram:
    P: sp.csc_matrix
    q: np.ndarray
    r: float = 0.0
    cones: SocBlock | None = None
    nonneg: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    labels: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, z) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.r)

    def margins(self, z) -> np.ndarray:
        """``t_i(z) - alpha * ||C_i z + d_i||`` for every cone."""
        c = self.cones
        if c is None or c.m == 0:
            return np.zeros(0)
        t = c.e @ z + c.f
        v = c.C @ z + c.d
        cone_of_row = np.repeat(np.arange(c.m), c.dims)
        norms = np.sqrt(np.bincount(cone_of_row, weights=v * v, minlength=c.m))
        return t - c.alpha * norms


@dataclass
class ConicSolution:
    z: np.ndarray
    status: str  # "optimal" | "infeasible" | "failed"
    iterations: int = 0
    primal_residual: float = np.inf
    stationarity_residual: float = np.inf
    solve_time: float = 0.0
    backend: str = ""


def certify(prog: ConicProgram, z, grad_dual=None) -> tuple[float, float]:
    """Primal feasibility and (optional) stationarity residuals of ``z``.

    ``grad_dual`` is the constraint-gradient term ``A' y`` of the KKT system;
    stationarity is reported relative to the size of the gradient terms.
    """
    viol = -prog.margins(z)
    if len(prog.nonneg):
        viol = np.concatenate([viol, -z[prog.nonneg]])
    primal = float(max(0.0, viol.max())) if viol.size else 0.0
    if grad_dual is None:
        return primal, np.nan
    Pz = prog.P @ z
    g = Pz + prog.q + grad_dual
    scale = max(1.0, np.abs(Pz).max(initial=0.0), np.abs(prog.q).max(initial=0.0),
                np.abs(grad_dual).max(initial=0.0))
    return primal, float(np.abs(g).max(initial=0.0) / scale)


def _clarabel_matrices(prog: ConicProgram):
    """Stack cone rows into Clarabel's ``A z + s = b, s in K`` form."""
    import clarabel

    blocks, rhs, cones = [], [], []
    n = prog.n
    c = prog.cones
    if c is not None and c.m:
        dims = c.dims if c.alpha > 0 else np.zeros(c.m, dtype=int)
        # each cone becomes [t_i; alpha * v_i]; interleave t-rows ahead of norm rows
        starts = np.concatenate([[0], np.cumsum(dims)[:-1]])
        n_rows = c.m + int(dims.sum())
        new_t = np.arange(c.m) + starts
        new_v = np.repeat(np.arange(c.m), dims) + 1 + np.arange(int(dims.sum()))
        perm = np.empty(n_rows, dtype=int)
        perm[new_t] = np.arange(c.m)
        perm[new_v] = c.m + np.arange(int(dims.sum()))
        if c.alpha > 0:
            A_all = sp.vstack([sp.csr_matrix(-c.e), sp.csr_matrix(-c.alpha * c.C)], format="csr")
            b_all = np.concatenate([c.f, c.alpha * c.d])
        else:
            A_all = sp.csr_matrix(-c.e)
            b_all = np.asarray(c.f, dtype=float)
        blocks.append(A_all[perm])
        rhs.append(b_all[perm])
        for dim in dims:
            cones.append(clarabel.SecondOrderConeT(int(dim) + 1) if dim else clarabel.NonnegativeConeT(1))
    if len(prog.nonneg):
        sel = sp.csr_matrix(
            (-np.ones(len(prog.nonneg)), (np.arange(len(prog.nonneg)), prog.nonneg)),
            shape=(len(prog.nonneg), n),
        )
        blocks.append(sel)
        rhs.append(np.zeros(len(prog.nonneg)))
        cones.append(clarabel.NonnegativeConeT(len(prog.nonneg)))
    if blocks:
        A = sp.vstack(blocks, format="csc")
        b = np.concatenate(rhs)
    else:
        A = sp.csc_matrix((0, n))
        b = np.zeros(0)
    return A, b, cones


def solve_clarabel(prog: ConicProgram, max_iter: int = 200, tol: float = 1e-9) -> ConicSolution:
    import clarabel

    A, b, cones = _clarabel_matrices(prog)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.presolve_enable = False
    P = sp.triu(prog.P, format="csc")
    solver = clarabel.DefaultSolver(P, np.asarray(prog.q, dtype=float), A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    z = np.asarray(sol.x)
    if "Infeasible" in status and "Almost" not in status:
        return ConicSolution(z, "infeasible", sol.iterations, backend="clarabel",
                             solve_time=sol.solve_time)
    if status not in ("Solved", "AlmostSolved"):
        logger.warning("clarabel returned status %s", status)
        return ConicSolution(z, "failed", sol.iterations, backend="clarabel",
                             solve_time=sol.solve_time)
    y = np.asarray(sol.z)
    primal, stat = certify(prog, z, A.T @ y if A.shape[0] else np.zeros(prog.n))
    return ConicSolution(z, "optimal", sol.iterations, primal, stat, sol.solve_time, "clarabel")


def solve_cvxpy(prog: ConicProgram, solver: str | None = None) -> ConicSolution:
    """Reference backend through cvxpy; slower, used to cross-check."""
    import cvxpy as cp

    z = cp.Variable(prog.n)
    P = sp.csc_matrix(0.5 * (prog.P + prog.P.T))
    obj = 0.5 * cp.quad_form(z, cp.psd_wrap(P)) + prog.q @ z + prog.r
    cons = []
    c = prog.cones
    if c is not None and c.m:
        t = c.e @ z + c.f
        v = c.C @ z + c.d
        start = 0
        for i, dim in enumerate(c.dims):
            cons.append(c.alpha * cp.norm(v[start:start + dim], 2) <= t[i])
            start += dim
    if len(prog.nonneg):
        cons.append(z[prog.nonneg] >= 0)
    problem = cp.Problem(cp.Minimize(obj), cons)
    problem.solve(solver=solver or "CLARABEL")
    if problem.status in ("infeasible", "infeasible_inaccurate"):
        return ConicSolution(np.full(prog.n, np.nan), "infeasible", backend="cvxpy")
    if z.value is None:
        return ConicSolution(np.full(prog.n, np.nan), "failed", backend="cvxpy")
    primal, _ = certify(prog, z.value)
    return ConicSolution(np.asarray(z.value), "optimal", primal_residual=primal, backend="cvxpy")


BACKENDS = {"clarabel": solve_clarabel, "cvxpy": solve_cvxpy}


def solve(prog: ConicProgram, backend: str = "clarabel") -> ConicSolution:
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown conic backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    return fn(prog)
