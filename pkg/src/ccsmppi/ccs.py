"""Constrained covariance steering around a reference plan.

The policy is affine in the initial-state deviation and the previous-stage
disturbance::

    v_0 = vbar_0 + H_0 (x_0 - mu_0)
    v_k = vbar_k + H_k (x_0 - mu_0) + K_{k-1} w_{k-1},   k > 0

Stacking gives ``v = vbar + Hs xt0 + Ks w`` and, through the lifted plant,
an affine mean and a covariance factor ``zeta`` with
``var_x = zeta zeta'``. The chance constraints on each half-space become
second-order cones, so the deterministic problem is an SOCP.

Internally the gains enter only through ``Hs Sigma_0^{1/2}`` and
``K_m W_m^{1/2}``; those products are the decision variables, and the gains
are recovered with the minimum-norm pseudo-inverse. This keeps the program
strictly convex when ``Sigma_0`` or ``W`` is singular.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from . import conic
from .dynamics import GaussianBelief, LiftedSystem, psd_sqrt, symmetrize
from .halfspace import HalfspaceSet
from .mppi import ReferencePlan

logger = logging.getLogger(__name__)

#: Linear penalty on constraint slacks in the fallback re-solve.
SLACK_PENALTY = 1e6
# stage-0 cones no input can influence; a violation this small is round-off
# carried over from the previous solve's active constraint
CONST_TOL = 1e-5


def chance_margin(p_fail: float) -> float:
    """Normal quantile ``Phi^{-1}(1 - p_fail)`` used to tighten half-spaces."""
    if not 0.0 < p_fail <= 0.5:
        raise ValueError(f"p_fail must lie in (0, 0.5], got {p_fail}")
    return max(0.0, float(-ndtri(p_fail)))


@dataclass(frozen=True)
class FeedbackPolicy:
    v_bar: np.ndarray  # (N*n_u,)
    H_blocks: np.ndarray  # (N, n_u, n_x)
    K_blocks: np.ndarray  # (N-1, n_u, n_x); K_blocks[k-1] multiplies w_{k-1}

    @property
    def N(self) -> int:
        return self.H_blocks.shape[0]

    @property
    def n_u(self) -> int:
        return self.H_blocks.shape[1]

    @property
    def n_x(self) -> int:
        return self.H_blocks.shape[2]

    @classmethod
    def zeros(cls, N: int, n_u: int, n_x: int) -> "FeedbackPolicy":
        return cls(np.zeros(N * n_u), np.zeros((N, n_u, n_x)), np.zeros((max(N - 1, 0), n_u, n_x)))

    @property
    def script_H(self) -> np.ndarray:
        return self.H_blocks.reshape(self.N * self.n_u, self.n_x)

    @property
    def script_K(self) -> np.ndarray:
        N, n_u, n_x = self.N, self.n_u, self.n_x
        Ks = np.zeros((N * n_u, N * n_x))
        for k in range(1, N):
            Ks[k * n_u:(k + 1) * n_u, (k - 1) * n_x:k * n_x] = self.K_blocks[k - 1]
        return Ks

    def inputs(self, x0_dev, w) -> np.ndarray:
        """Stacked inputs for one or many realizations (rows) of ``(x0 - mu0, w)``."""
        x0_dev = np.atleast_2d(x0_dev)
        w = np.atleast_2d(w)
        return self.v_bar + x0_dev @ self.script_H.T + w @ self.script_K.T


@dataclass(frozen=True)
class CcsProblem:
    lifted: LiftedSystem
    init: GaussianBelief
    reference: ReferencePlan
    Q: tuple[np.ndarray, ...]  # N+1 state-deviation weights
    R: tuple[np.ndarray, ...]  # N input-deviation weights
    halfspaces: HalfspaceSet
    p_fail: float
    W_seq: tuple[np.ndarray, ...]  # N noise covariances

    def __post_init__(self):
        L = self.lifted
        N, n_x, n_u = L.N, L.n_x, L.n_u
        Q = _broadcast(self.Q, N + 1, (n_x, n_x), "Q")
        R = _broadcast(self.R, N, (n_u, n_u), "R")
        W = _broadcast(self.W_seq, N, (n_x, n_x), "W")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "W_seq", W)
        for Qk in Q:
            if np.linalg.eigvalsh(symmetrize(Qk))[0] < -1e-10:
                raise ValueError("state weights must be PSD")
        for Rk in R:
            if np.linalg.eigvalsh(symmetrize(Rk))[0] <= 0:
                raise ValueError("input weights must be positive definite")
        if not 0.0 < self.p_fail <= 0.5:
            raise ValueError(f"p_fail must lie in (0, 0.5], got {self.p_fail}")
        if self.init.mean.shape != (n_x,):
            raise ValueError("initial mean has the wrong dimension")
        if self.reference.states.shape[0] < N + 1 or self.reference.controls.shape[0] < N:
            raise ValueError("reference plan shorter than the steering horizon")
        for h in self.halfspaces:
            if not 0 <= h.stage <= N:
                raise ValueError(f"half-space stage {h.stage} outside 0..{N}")

    @property
    def x_ref(self) -> np.ndarray:
        return self.reference.states[: self.lifted.N + 1].ravel()

    @property
    def u_ref(self) -> np.ndarray:
        return self.reference.controls[: self.lifted.N].ravel()


def _broadcast(mats, count, shape, name) -> tuple[np.ndarray, ...]:
    arr = np.asarray(mats, dtype=float)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (count,) + arr.shape)
    if arr.shape != (count,) + shape:
        raise ValueError(f"{name} must be {shape} or a sequence of {count} such matrices")
    return tuple(np.array(m) for m in arr)


@dataclass(frozen=True)
class CcsSolution:
    policy: FeedbackPolicy
    mean_traj: np.ndarray  # (N+1)*n_x
    state_cov_blocks: np.ndarray  # (N+1, n_x, n_x)
    objective: float
    status: str  # "optimal" | "fallback" | "infeasible"
    iterations: int = 0
    primal_residual: float = np.nan
    stationarity_residual: float = np.nan
    max_slack: float = 0.0
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def assemble_moments(lifted: LiftedSystem, init: GaussianBelief, policy: FeedbackPolicy,
                     W_seq: Sequence[np.ndarray]):
    """Means and covariance factors of the stacked state and input.

    Returns ``(mu_x, zeta, mu_v, zeta_v)`` with ``var_x = zeta zeta'`` and
    ``var_v = zeta_v zeta_v'``.
    """
    S0 = psd_sqrt(init.cov)
    Wh = _block_diag([psd_sqrt(W) for W in W_seq])
    Hs, Ks = policy.script_H, policy.script_K
    mu_x = lifted.Gamma @ init.mean + lifted.G_u @ policy.v_bar
    zeta = np.hstack([(lifted.Gamma + lifted.G_u @ Hs) @ S0, (lifted.G_w + lifted.G_u @ Ks) @ Wh])
    zeta_v = np.hstack([Hs @ S0, Ks @ Wh])
    return mu_x, zeta, policy.v_bar.copy(), zeta_v


def _block_diag(blocks) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


def policy_objective(problem: CcsProblem, policy: FeedbackPolicy) -> float:
    """Deterministic tracking cost of a fixed policy, from the moment formulas."""
    mu_x, zeta, mu_v, zeta_v = assemble_moments(problem.lifted, problem.init, policy, problem.W_seq)
    Qb = _block_diag(problem.Q)
    Rb = _block_diag(problem.R)
    dx = mu_x - problem.x_ref
    du = mu_v - problem.u_ref
    return float(dx @ Qb @ dx + du @ Rb @ du + np.sum(zeta * (Qb @ zeta)) + np.sum(zeta_v * (Rb @ zeta_v)))


@dataclass
class CcsProgram:
    """The conic program plus the bookkeeping needed to decode its solution.

    Cones whose data do not depend on the decision variables (early stages)
    are not passed to the solver; their margins are kept in ``const_margins``
    and a negative entry means the program is infeasible as posed.
    """

    program: conic.ConicProgram
    S0: np.ndarray  # n_x x r0
    Wh: list  # per-stage n_x x r_m factors
    n_vbar: int
    n_Y: int
    K_offsets: list  # start index of each K~_m block
    cone_index: np.ndarray  # half-space index of every solver cone
    const_index: np.ndarray  # half-space index of every constant cone
    const_margins: np.ndarray
    n_slack: int = 0

    @property
    def n_core(self) -> int:
        return self.program.n - self.n_slack


def _static_terms(problem: CcsProblem):
    L = problem.lifted
    key = ("static", tuple(Q.tobytes() for Q in problem.Q), tuple(R.tobytes() for R in problem.R))
    hit = L._cache.get(key)
    if hit is not None:
        return hit
    Qb = _block_diag(problem.Q)
    Rb = _block_diag(problem.R)
    QG = Qb @ L.G_u
    M = L.G_u.T @ QG + Rb
    pos = list(L.position_index)
    Gu_pos = L.G_u.reshape(L.N + 1, L.n_x, -1)[:, pos, :]
    Gam_pos = L.Gamma.reshape(L.N + 1, L.n_x, L.n_x)[:, pos, :]
    L._cache[key] = (Qb, Rb, QG, M, Gu_pos, Gam_pos)
    return L._cache[key]


def build_socp(problem: CcsProblem, slack: bool = False) -> CcsProgram:
    """Assemble the deterministic SOCP.

    Variables, in order: ``vbar`` (N n_u); ``Y = Hs S0`` column-major
    (r0 columns of length N n_u); ``K~_m = K_m W_m^{1/2}`` for m = 0..N-2,
    each column-major ``n_u x r_m``; optional nonnegative slacks, one per
    solver cone.
    """
    L = problem.lifted
    N, n_x, n_u = L.N, L.n_x, L.n_u
    Nu = N * n_u
    Qb, Rb, QG, M, Gu_pos, Gam_pos = _static_terms(problem)
    S0 = psd_sqrt(problem.init.cov, reduced=True)
    Wh = [psd_sqrt(W, reduced=True) for W in problem.W_seq]
    r0 = S0.shape[1]
    ranks = [Wm.shape[1] for Wm in Wh]

    n_vbar = Nu
    n_Y = r0 * Nu
    K_offsets = []
    off = n_vbar + n_Y
    for m in range(N - 1):
        K_offsets.append(off)
        off += n_u * ranks[m]
    n_core = off

    # ---- objective --------------------------------------------------------
    P_blocks = [2.0 * M] * (1 + r0)
    for m in range(N - 1):
        blk = 2.0 * M[(m + 1) * n_u:(m + 2) * n_u, (m + 1) * n_u:(m + 2) * n_u]
        P_blocks.extend([blk] * ranks[m])
    q = np.zeros(n_core)
    e0 = L.Gamma @ problem.init.mean - problem.x_ref
    u_ref = problem.u_ref
    q[:Nu] = 2.0 * (QG.T @ e0 - Rb @ u_ref)
    r = float(e0 @ Qb @ e0 + u_ref @ Rb @ u_ref)
    C0 = L.Gamma @ S0
    if r0:
        q[n_vbar:n_vbar + n_Y] = (2.0 * (QG.T @ C0)).T.ravel()
        r += float(np.sum(C0 * (Qb @ C0)))
    GwWh = np.hstack([L.G_w[:, m * n_x:(m + 1) * n_x] @ Wh[m] for m in range(N)])
    r += float(np.sum(GwWh * (Qb @ GwWh)))
    col = 0
    for m in range(N - 1):
        if ranks[m]:
            D = GwWh[:, col:col + ranks[m]]
            QG_blk = QG[:, (m + 1) * n_u:(m + 2) * n_u]
            q[K_offsets[m]:K_offsets[m] + n_u * ranks[m]] = (2.0 * (QG_blk.T @ D)).T.ravel()
        col += ranks[m]

    # ---- cones ------------------------------------------------------------
    alpha = chance_margin(problem.p_fail)
    stages, normals, offsets = problem.halfspaces.arrays()
    nc = len(offsets)
    dim = r0 + sum(ranks)
    G = np.einsum("ik,ikn->in", normals, Gu_pos[stages]) if nc else np.zeros((0, Nu))
    f = np.einsum("ik,ikn,n->i", normals, Gam_pos[stages], problem.init.mean) - offsets
    dY = np.einsum("ik,ikr->ir", normals, (Gam_pos @ S0)[stages])
    GwWh_pos = GwWh.reshape(N + 1, n_x, -1)[:, list(L.position_index), :]
    dK = np.einsum("ik,ikr->ir", normals, GwWh_pos[stages])
    d = np.hstack([dY, dK]).ravel()

    rows, cols, vals = [], [], []
    if r0:
        rY = (np.arange(nc)[:, None] * dim + np.arange(r0)[None, :])[:, :, None]
        cY = (n_vbar + np.arange(n_Y).reshape(r0, Nu))[None, :, :]
        shape = (nc, r0, Nu)
        rows.append(np.broadcast_to(rY, shape).ravel())
        cols.append(np.broadcast_to(cY, shape).ravel())
        vals.append(np.broadcast_to(G[:, None, :], shape).ravel())
    row_off = r0
    for m in range(N - 1):
        rk = ranks[m]
        if rk:
            shape = (nc, rk, n_u)
            rK = (np.arange(nc)[:, None] * dim + row_off + np.arange(rk)[None, :])[:, :, None]
            cK = (K_offsets[m] + np.arange(rk)[:, None] * n_u + np.arange(n_u)[None, :])[None, :, :]
            g_blk = G[:, (m + 1) * n_u:(m + 2) * n_u]
            rows.append(np.broadcast_to(rK, shape).ravel())
            cols.append(np.broadcast_to(cK, shape).ravel())
            vals.append(np.broadcast_to(g_blk[:, None, :], shape).ravel())
        row_off += rk
    cat = lambda parts, dtype: np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)  # noqa: E731
    C = sp.csr_matrix((cat(vals, float), (cat(rows, int), cat(cols, int))), shape=(nc * dim, n_core))
    e = sp.csr_matrix(G, shape=(nc, Nu))
    e = sp.hstack([e, sp.csr_matrix((nc, n_core - Nu))], format="csr")
    block = conic.SocBlock(e, f, C, d, np.full(nc, dim, dtype=int), alpha).compact()

    depends = np.diff(block.e.indptr) > 0
    row_cone = np.repeat(np.arange(nc), block.dims)
    depends |= np.bincount(row_cone, weights=np.diff(block.C.indptr) > 0, minlength=nc) > 0
    cone_index = np.flatnonzero(depends)
    const_index = np.flatnonzero(~depends)
    const_margins = block.subset(const_index).f - alpha * np.sqrt(
        np.bincount(np.repeat(np.arange(len(const_index)), block.dims[const_index]),
                    weights=block.subset(const_index).d ** 2, minlength=len(const_index)))
    block = block.subset(cone_index)

    P = sp.block_diag(P_blocks, format="csc")
    n_slack = len(cone_index) if slack else 0
    nonneg = np.zeros(0, dtype=int)
    if slack:
        P = sp.block_diag([P, sp.csc_matrix((n_slack, n_slack))], format="csc")
        q = np.concatenate([q, np.full(n_slack, SLACK_PENALTY)])
        block.e = sp.hstack([block.e, sp.identity(n_slack, format="csr")], format="csr")
        block.C = sp.hstack([block.C, sp.csr_matrix((block.C.shape[0], n_slack))], format="csr")
        nonneg = np.arange(n_core, n_core + n_slack)
    program = conic.ConicProgram(P, q, r, block, nonneg)
    return CcsProgram(program, S0, Wh, n_vbar, n_Y, K_offsets, cone_index, const_index,
                      const_margins, n_slack)


def decode(problem: CcsProblem, prog: CcsProgram, z: np.ndarray) -> FeedbackPolicy:
    L = problem.lifted
    N, n_x, n_u = L.N, L.n_x, L.n_u
    Nu = N * n_u
    v_bar = z[:Nu].copy()
    r0 = prog.S0.shape[1]
    if r0:
        Y = z[prog.n_vbar:prog.n_vbar + prog.n_Y].reshape(r0, Nu).T
        Hs = Y @ np.linalg.pinv(prog.S0)
    else:
        Hs = np.zeros((Nu, n_x))
    K_blocks = np.zeros((max(N - 1, 0), n_u, n_x))
    for m in range(N - 1):
        rk = prog.Wh[m].shape[1]
        if rk:
            start = prog.K_offsets[m]
            Kt = z[start:start + n_u * rk].reshape(rk, n_u).T
            K_blocks[m] = Kt @ np.linalg.pinv(prog.Wh[m])
    return FeedbackPolicy(v_bar, Hs.reshape(N, n_u, n_x), K_blocks)


def constraint_margins(problem: CcsProblem, mu_x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """``a' P mu_x - b - alpha ||zeta' P' a||`` for every half-space."""
    alpha = chance_margin(problem.p_fail)
    out = np.empty(len(problem.halfspaces))
    for i, h in enumerate(problem.halfspaces):
        rows = problem.lifted.position_rows(h.stage)
        out[i] = h.a @ mu_x[rows] - h.b - alpha * np.linalg.norm(zeta[rows].T @ h.a)
    return out


def _solution(problem: CcsProblem, policy: FeedbackPolicy, status: str, sol=None,
              max_slack: float = 0.0) -> CcsSolution:
    mu_x, zeta, _, _ = assemble_moments(problem.lifted, problem.init, policy, problem.W_seq)
    n_x = problem.lifted.n_x
    Z = zeta.reshape(problem.lifted.N + 1, n_x, -1)
    blocks = np.einsum("kir,kjr->kij", Z, Z)
    return CcsSolution(
        policy=policy,
        mean_traj=mu_x,
        state_cov_blocks=blocks,
        objective=policy_objective(problem, policy),
        status=status,
        iterations=0 if sol is None else sol.iterations,
        primal_residual=np.nan if sol is None else sol.primal_residual,
        stationarity_residual=np.nan if sol is None else sol.stationarity_residual,
        max_slack=max_slack,
        margins=constraint_margins(problem, mu_x, zeta),
    )


def solve_ccs(problem: CcsProblem, backend: str = "clarabel") -> CcsSolution:
    """Solve the steering SOCP; on infeasibility re-solve with penalized slacks.

    Never raises on solver trouble. If even the slack problem fails the
    returned policy reproduces the reference controls with zero feedback and
    ``status == "infeasible"``.
    """
    prog = build_socp(problem)
    if prog.const_margins.size == 0 or prog.const_margins.min() >= -CONST_TOL:
        sol = conic.solve(prog.program, backend)
        if sol.status == "optimal":
            return _solution(problem, decode(problem, prog, sol.z), "optimal", sol)
        logger.info("steering problem %s; re-solving with slacks", sol.status)
    else:
        logger.info("uncontrollable constraint violated by %.3g; re-solving with slacks",
                    -prog.const_margins.min())

    sprog = build_socp(problem, slack=True)
    ssol = conic.solve(sprog.program, backend)
    if ssol.status == "optimal":
        slacks = np.clip(ssol.z[sprog.n_core:], 0.0, None)
        const_short = np.clip(-sprog.const_margins, 0.0, None)
        max_slack = float(max(slacks.max(initial=0.0), const_short.max(initial=0.0)))
        policy = decode(problem, sprog, ssol.z[: sprog.n_core])
        return _solution(problem, policy, "fallback", ssol, max_slack)

    logger.warning("slack re-solve also failed (%s); using the reference open loop", ssol.status)
    L = problem.lifted
    policy = FeedbackPolicy(problem.u_ref.copy(), np.zeros((L.N, L.n_u, L.n_x)),
                            np.zeros((max(L.N - 1, 0), L.n_u, L.n_x)))
    return _solution(problem, policy, "infeasible")


def first_step(solution: CcsSolution) -> tuple[np.ndarray, np.ndarray]:
    """Feedforward ``vbar_0`` and initial-deviation gain ``H_0``."""
    pol = solution.policy
    return pol.v_bar[: pol.n_u].copy(), pol.H_blocks[0].copy()
