"""Stochastic linear time-varying plant and its lifted (stacked) form.

The plant is ``x_{k+1} = A_k x_k + B_k u_k + w_k`` with ``w_k ~ N(0, W_k)``.
Stacking ``N`` stages gives ``x = Gamma x_0 + G_u u + G_w w`` where ``x`` holds
stages ``0..N``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: Relative eigenvalue tolerance below which a covariance is treated as rank deficient.
RANK_TOL = 1e-12
#: Eigenvalues down to ``-PSD_TOL * scale`` are clipped to zero instead of rejected.
PSD_TOL = 1e-9


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def psd_sqrt(M: np.ndarray, reduced: bool = False) -> np.ndarray:
    """Square-root factor ``L`` of a symmetric PSD matrix with ``L @ L.T == M``.

    Parameters
    ----------
    M : (n, n) array
        Covariance-like matrix. It is symmetrized first.
    reduced : bool
        If True, return only the ``n x r`` factor spanning the range of ``M``
        (``r`` = numerical rank, possibly zero). Otherwise return ``n x n``.

    Raises
    ------
    np.linalg.LinAlgError
        If ``M`` has an eigenvalue below ``-PSD_TOL`` relative to its scale.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    n = M.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    w, V = np.linalg.eigh(M)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -PSD_TOL * scale:
        raise np.linalg.LinAlgError(
            f"matrix is not positive semi-definite (min eigenvalue {w[0]:.3e})"
        )
    w = np.clip(w, 0.0, None)
    if reduced:
        keep = w > RANK_TOL * scale
        return V[:, keep] * np.sqrt(w[keep])
    return V * np.sqrt(w)


@dataclass(frozen=True)
class LtvModel:
    """Per-stage system matrices ``A_k``, ``B_k`` and noise covariances ``W_k``."""

    A_seq: tuple[np.ndarray, ...]
    B_seq: tuple[np.ndarray, ...]
    W_seq: tuple[np.ndarray, ...]
    position_index: tuple[int, int] = (0, 1)

    def __post_init__(self):
        N = len(self.A_seq)
        if N < 1:
            raise ValueError("model needs at least one stage")
        if len(self.B_seq) != N or len(self.W_seq) != N:
            raise ValueError("A_seq, B_seq and W_seq must have the same length")
        n_x, n_u = self.B_seq[0].shape
        for k in range(N):
            if self.A_seq[k].shape != (n_x, n_x):
                raise ValueError(f"A_{k} has shape {self.A_seq[k].shape}, expected {(n_x, n_x)}")
            if self.B_seq[k].shape != (n_x, n_u):
                raise ValueError(f"B_{k} has shape {self.B_seq[k].shape}, expected {(n_x, n_u)}")
            W = self.W_seq[k]
            if W.shape != (n_x, n_x):
                raise ValueError(f"W_{k} has shape {W.shape}, expected {(n_x, n_x)}")
            if np.linalg.eigvalsh(symmetrize(W))[0] < -1e-10:
                raise ValueError(f"W_{k} is not positive semi-definite")
        for arr in (*self.A_seq, *self.B_seq, *self.W_seq):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, A_seq, B_seq, W_seq, position_index=(0, 1)) -> "LtvModel":
        as_tuple = lambda seq: tuple(np.array(m, dtype=float) for m in seq)  # noqa: E731
        return cls(as_tuple(A_seq), as_tuple(B_seq), as_tuple(W_seq), tuple(position_index))

    @property
    def N(self) -> int:
        return len(self.A_seq)

    @property
    def n_x(self) -> int:
        return self.B_seq[0].shape[0]

    @property
    def n_u(self) -> int:
        return self.B_seq[0].shape[1]

    @property
    def time_invariant(self) -> bool:
        A0, B0, W0 = self.A_seq[0], self.B_seq[0], self.W_seq[0]
        return all(
            np.array_equal(A, A0) and np.array_equal(B, B0) and np.array_equal(W, W0)
            for A, B, W in zip(self.A_seq, self.B_seq, self.W_seq)
        )

    def with_noise(self, W: np.ndarray | Sequence[np.ndarray]) -> "LtvModel":
        """Copy of the model with a constant ``W`` (or a per-stage sequence)."""
        W = np.asarray(W, dtype=float)
        W_seq = [W] * self.N if W.ndim == 2 else list(W)
        return LtvModel.from_arrays(self.A_seq, self.B_seq, W_seq, self.position_index)

    def window(self, start: int, length: int) -> "LtvModel":
        """Stages ``start .. start+length-1``; the last stage repeats past the end."""
        idx = [min(start + i, self.N - 1) for i in range(length)]
        return LtvModel(
            tuple(self.A_seq[i] for i in idx),
            tuple(self.B_seq[i] for i in idx),
            tuple(self.W_seq[i] for i in idx),
            self.position_index,
        )


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def point(cls, mean) -> "GaussianBelief":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.zeros((mean.size, mean.size)))


def make_double_integrator(dt: float, N: int, W=None) -> LtvModel:
    """Euler-discretized planar double integrator, state ``(p_x, p_y, v_x, v_y)``.

    ``W`` defaults to zero noise; pass a 4x4 covariance to fill every stage.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    I2 = np.eye(2)
    A = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    B = np.vstack([np.zeros((2, 2)), dt * I2])
    W = np.zeros((4, 4)) if W is None else np.asarray(W, dtype=float)
    return LtvModel.from_arrays([A] * int(N), [B] * int(N), [W] * int(N))


def step(model: LtvModel, k: int, x, u, w=None) -> np.ndarray:
    if not 0 <= k < model.N:
        raise IndexError(f"stage {k} out of range [0, {model.N})")
    x_next = model.A_seq[k] @ x + model.B_seq[k] @ u
    if w is not None:
        x_next = x_next + w
    return x_next


def sample_noise(W: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``N(0, W)``; always consumes ``n`` standard normals."""
    L = psd_sqrt(W)
    return L @ rng.standard_normal(L.shape[0])


def rollout(model: LtvModel, x0, controls, noises=None, start: int = 0) -> np.ndarray:
    """Sequentially unroll the plant; returns ``len(controls)+1`` states."""
    controls = np.asarray(controls, dtype=float)
    xs = np.empty((len(controls) + 1, model.n_x))
    xs[0] = x0
    for k, u in enumerate(controls):
        w = None if noises is None else noises[k]
        xs[k + 1] = step(model, start + k, xs[k], u, w)
    return xs


@dataclass(frozen=True)
class LiftedSystem:
    """Stacked dynamics ``x = Gamma x_0 + G_u u + G_w w`` over ``N`` stages."""

    Gamma: np.ndarray
    G_u: np.ndarray
    G_w: np.ndarray
    n_x: int
    n_u: int
    N: int
    position_index: tuple[int, int] = (0, 1)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def state_selector(self, k: int) -> np.ndarray:
        F = np.zeros((self.n_x, (self.N + 1) * self.n_x))
        F[:, k * self.n_x:(k + 1) * self.n_x] = np.eye(self.n_x)
        return F

    def input_selector(self, k: int) -> np.ndarray:
        F = np.zeros((self.n_u, self.N * self.n_u))
        F[:, k * self.n_u:(k + 1) * self.n_u] = np.eye(self.n_u)
        return F

    def position_selector(self, k: int) -> np.ndarray:
        P = np.zeros((2, (self.N + 1) * self.n_x))
        for row, i in enumerate(self.position_index):
            P[row, k * self.n_x + i] = 1.0
        return P

    def position_rows(self, k: int) -> list[int]:
        return [k * self.n_x + i for i in self.position_index]

    def apply(self, x0, u, w) -> np.ndarray:
        return self.Gamma @ x0 + self.G_u @ np.ravel(u) + self.G_w @ np.ravel(w)


def build_lifted(model: LtvModel) -> LiftedSystem:
    N, n_x, n_u = model.N, model.n_x, model.n_u
    Gamma = np.zeros(((N + 1) * n_x, n_x))
    G_u = np.zeros(((N + 1) * n_x, N * n_u))
    G_w = np.zeros(((N + 1) * n_x, N * n_x))
    Gamma[:n_x] = np.eye(n_x)
    for k in range(1, N + 1):
        rows = slice(k * n_x, (k + 1) * n_x)
        prev = slice((k - 1) * n_x, k * n_x)
        A = model.A_seq[k - 1]
        # block row k = A_{k-1} * block row k-1, plus the fresh input/noise at column k-1
        Gamma[rows] = A @ Gamma[prev]
        G_u[rows, :(k - 1) * n_u] = A @ G_u[prev, :(k - 1) * n_u]
        G_u[rows, (k - 1) * n_u:k * n_u] = model.B_seq[k - 1]
        G_w[rows, :(k - 1) * n_x] = A @ G_w[prev, :(k - 1) * n_x]
        G_w[rows, (k - 1) * n_x:k * n_x] = np.eye(n_x)
    for arr in (Gamma, G_u, G_w):
        arr.setflags(write=False)
    return LiftedSystem(Gamma, G_u, G_w, n_x, n_u, N, model.position_index)
