"""Crank-Nicolson time stepping for the state, adjoint and free dynamics.

One step of the controlled system on a uniform grid reads

    (I - dt/2 A) x[j+1] = (I + dt/2 A) x[j] + dt/2 B (u[j] + u[j+1])

and the adjoint runs backwards with ``A.T``.  With ``L = I - dt/2 A`` and
``R = I + dt/2 A`` the one-step map is ``S = L^{-1} R``.  ``L`` and ``R``
commute, so the backward adjoint step is exactly ``S.T``, which is what
makes the discrete Gramian symmetric.

Long sweeps are regrouped into blocks of ``p`` steps: the state after a
block is ``S^p x`` plus a fixed linear map of the ``p`` control increments,
and the ``p`` adjoint outputs of a block are a fixed linear map of the
adjoint value at the block's end.  This is the same discrete operator,
evaluated with far fewer (and larger) matrix products.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla

# Number of single-vector time integration passes, by kind.  Batched
# sweeps count one pass per column and per system.
SWEEPS: Counter = Counter()


def reset_sweeps() -> None:
    SWEEPS.clear()


class FactorizationError(np.linalg.LinAlgError):
    """``I - dt/2 A`` is singular; use a smaller time step."""


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    dt: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_horizon(cls, horizon: float, steps: int) -> "TimeGrid":
        return cls(int(steps), float(horizon) / int(steps))

    @property
    def horizon(self) -> float:
        return self.dt * self.steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


def default_steps(horizon: float, a_norm: float, min_steps: int = 200) -> int:
    """Smallest step count with ``dt <= min(T / min_steps, 0.5 / a_norm)``."""
    n = min_steps
    if a_norm > 0:
        n = max(n, int(math.ceil(horizon * a_norm / 0.5)))
    return n


@dataclass(frozen=True)
class ControlSignal:
    """Control samples ``u[j]`` at ``t_j = j * dt``, shape ``(steps + 1, M)``."""

    grid: TimeGrid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.grid.steps + 1:
            raise ValueError(f"expected {self.grid.steps + 1} samples, got {s.shape[0]}")
        if not np.all(np.isfinite(s)):
            raise ValueError("control samples must be finite")
        object.__setattr__(self, "samples", s)

    @classmethod
    def zeros(cls, grid: TimeGrid, M: int) -> "ControlSignal":
        return cls(grid, np.zeros((grid.steps + 1, M)))

    def norm(self) -> float:
        return math.sqrt(max(control_inner(self.samples, self.samples, self.grid.dt), 0.0))


def control_inner(u: np.ndarray, v: np.ndarray, dt: float) -> float:
    """L2(0, T) inner product matching the trapezoidal control coupling.

    Each interval contributes ``dt * <(u_j + u_{j+1})/2, (v_j + v_{j+1})/2>``.
    With this rule the discrete state/adjoint duality holds to roundoff.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    um = 0.5 * (u[1:] + u[:-1])
    vm = 0.5 * (v[1:] + v[:-1])
    return float(dt * np.sum(um * vm))


class Propagator:
    """Crank-Nicolson stepper for ``x' = A x`` on a fixed time grid.

    Holds the LU factorization of ``I - dt/2 A`` and the one-step map ``S``
    built from it.  Immutable after construction.
    """

    def __init__(self, A: np.ndarray, grid: TimeGrid):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        N = A.shape[0]
        self.A = A
        self.grid = grid
        h = 0.5 * grid.dt
        self.lhs = np.eye(N) - h * A
        with warnings.catch_warnings():
            # A singular factor is reported below as FactorizationError.
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self.lu = sla.lu_factor(self.lhs, check_finite=True)
        diag = np.abs(np.diag(self.lu[0]))
        if np.any(diag <= np.finfo(float).eps * max(1.0, np.abs(self.lhs).max()) * N):
            raise FactorizationError("I - dt/2 A is numerically singular; shrink the time step")
        self.step = sla.lu_solve(self.lu, np.eye(N) + h * A)
        self.step.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def reconstruction_error(self) -> float:
        lu, piv = self.lu
        N = self.dim
        L = np.tril(lu, -1) + np.eye(N)
        U = np.triu(lu)
        P = np.eye(N)
        for i, p in enumerate(piv):
            P[[i, p]] = P[[p, i]]
        return float(np.linalg.norm(P.T @ L @ U - self.lhs) / np.linalg.norm(self.lhs))

    def input_map(self, B: np.ndarray) -> np.ndarray:
        """``dt/2 * (I - dt/2 A)^{-1} B``: the state increment per unit control sum."""
        B = np.asarray(B, dtype=float).reshape(self.dim, -1)
        return 0.5 * self.grid.dt * sla.lu_solve(self.lu, B)


def propagate_free(prop: Propagator, x0: np.ndarray) -> np.ndarray:
    """Endpoint of the uncontrolled dynamics started at ``x0``."""
    x = np.array(x0, dtype=float)
    S = prop.step
    p = _block_size(prop.grid.steps, prop.dim)
    Sp = np.linalg.matrix_power(S, p)
    q, r = divmod(prop.grid.steps, p)
    for _ in range(q):
        x = Sp @ x
    for _ in range(r):
        x = S @ x
    SWEEPS["free"] += 1 if x.ndim == 1 else x.shape[1]
    return x


def solve_forward(prop: Propagator, B: np.ndarray, u: ControlSignal, x0: np.ndarray, kind: str = "forward"):
    """Controlled trajectory, shape ``(steps + 1, N)``, and its endpoint.

    ``kind`` names the counter bucket the sweep is recorded under.
    """
    if u.grid != prop.grid:
        raise ValueError("control and propagator live on different time grids")
    G = prop.input_map(B)
    if G.shape[1] != u.samples.shape[1]:
        raise ValueError("control dimension does not match B")
    S = prop.step
    n = prop.grid.steps
    traj = np.empty((n + 1, prop.dim))
    traj[0] = x0
    x = np.array(x0, dtype=float)
    usum = u.samples[1:] + u.samples[:-1]
    drive = usum @ G.T
    for j in range(n):
        x = S @ x + drive[j]
        traj[j + 1] = x
    SWEEPS[kind] += 1
    return traj, traj[-1].copy()


def solve_adjoint(prop: Propagator, phiT: np.ndarray) -> np.ndarray:
    """Backward adjoint trajectory with ``traj[steps] = phiT``."""
    St = prop.step.T
    n = prop.grid.steps
    traj = np.empty((n + 1, prop.dim))
    phi = np.array(phiT, dtype=float)
    traj[n] = phi
    for j in range(n - 1, -1, -1):
        phi = St @ phi
        traj[j] = phi
    SWEEPS["adjoint"] += 1
    return traj


def _block_size(steps: int, dim: int) -> int:
    return max(1, min(steps, max(16, dim)))


class SweepOperators:
    """Block sweep operators for one or more ``(A, B)`` pairs on a common grid.

    Arrays carry a leading system axis so that a whole parameter grid can be
    swept at once.  Built from each pair's :class:`Propagator`.
    """

    def __init__(self, props: Sequence[Propagator], Bs: Sequence[np.ndarray], block: int | None = None):
        if not props:
            raise ValueError("need at least one propagator")
        grid = props[0].grid
        if any(pr.grid != grid for pr in props):
            raise ValueError("all propagators must share one time grid")
        N = props[0].dim
        Bs = [np.asarray(B, dtype=float).reshape(N, -1) for B in Bs]
        M = Bs[0].shape[1]
        p = block or _block_size(grid.steps, N)
        self.grid, self.dim, self.controls, self.block = grid, N, M, p
        k = len(props)
        self.S = np.stack([pr.step for pr in props])
        self.G = np.stack([pr.input_map(B) for pr, B in zip(props, Bs)])
        self.Bt = np.stack([B.T for B in Bs])
        self.Sp = np.empty((k, N, N))
        self.obs = np.empty((k, p * M, N))
        self.inj = np.empty((k, N, p * M))
        for s, (pr, B) in enumerate(zip(props, Bs)):
            v = B.copy()
            w = self.G[s].copy()
            for i in range(p):
                self.obs[s, i * M:(i + 1) * M] = v.T
                j = p - 1 - i
                self.inj[s, :, j * M:(j + 1) * M] = w
                v = pr.step @ v
                w = pr.step @ w
            self.Sp[s] = np.linalg.matrix_power(pr.step, p)
        self.St = np.swapaxes(self.S, 1, 2)
        self.SpT = np.swapaxes(self.Sp, 1, 2)

    def __len__(self) -> int:
        return self.S.shape[0]

    def subset(self, index) -> "SweepOperators":
        out = object.__new__(SweepOperators)
        out.grid, out.dim, out.controls, out.block = self.grid, self.dim, self.controls, self.block
        for name in ("S", "G", "Bt", "Sp", "obs", "inj", "St", "SpT"):
            setattr(out, name, getattr(self, name)[index])
        return out

    def adjoint_controls(self, phiT: np.ndarray):
        """Controls ``u[j] = B.T phi[j]`` of the adjoint sweeps from ``phiT``.

        ``phiT`` has shape ``(k, N, K)``.  Returns ``u`` of shape
        ``(steps + 1, k, M, K)`` and ``phi[0]`` of shape ``(k, N, K)``.
        """
        phi = np.array(phiT, dtype=float)
        k, N, K = phi.shape
        n, p, M = self.grid.steps, self.block, self.controls
        u = np.empty((n + 1, k, M, K))
        e = n
        while e >= p:
            blk = (self.obs @ phi).reshape(k, p, M, K)
            u[e - p + 1:e + 1] = np.moveaxis(blk[:, ::-1], 1, 0)
            phi = self.SpT @ phi
            e -= p
        while e >= 0:
            u[e] = self.Bt @ phi
            if e > 0:
                phi = self.St @ phi
            e -= 1
        SWEEPS["adjoint"] += k * K
        return u, phi

    def forward_endpoint(self, u: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """State at ``T`` driven by ``u`` (shape ``(steps + 1, k, M, K)``)."""
        n1, k, M, K = u.shape
        n, p = self.grid.steps, self.block
        x = np.zeros((k, self.dim, K)) if x0 is None else np.array(x0, dtype=float)
        s = 0
        while s + p <= n:
            c = u[s:s + p] + u[s + 1:s + p + 1]
            c = np.moveaxis(c, 0, 1).reshape(k, p * M, K)
            x = self.Sp @ x + self.inj @ c
            s += p
        while s < n:
            x = self.S @ x + self.G @ (u[s] + u[s + 1])
            s += 1
        SWEEPS["forward"] += k * K
        return x

    def free_endpoint(self, x0: np.ndarray) -> np.ndarray:
        x = np.array(x0, dtype=float)
        q, r = divmod(self.grid.steps, self.block)
        for _ in range(q):
            x = self.Sp @ x
        for _ in range(r):
            x = self.S @ x
        SWEEPS["free"] += x.shape[0] * x.shape[2]
        return x


_PADE = {
    3: (1.495585217958292e-2, [120.0, 60.0, 12.0, 1.0]),
    5: (2.539398330063230e-1, [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0]),
    7: (9.504178996162932e-1, [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0]),
    9: (2.097847961257068e0, [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
                              2162160.0, 110880.0, 3960.0, 90.0, 1.0]),
    13: (5.371920351148152e0, [64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                               1187353796428800.0, 129060195264000.0, 10559470521600.0,
                               670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
                               960960.0, 16380.0, 182.0, 1.0]),
}


def matrix_exponential(A: np.ndarray, t: float = 1.0) -> np.ndarray:
    """``exp(t A)`` by scaling and squaring with a diagonal Pade approximant.

    Degree selection and thresholds follow Higham (2005).  Used as a test
    oracle for the time stepper, not inside the greedy loop.
    """
    X = float(t) * np.atleast_2d(np.asarray(A, dtype=float))
    n = X.shape[0]
    if X.shape != (n, n):
        raise ValueError("A must be square")
    ident = np.eye(n)
    norm = np.linalg.norm(X, 1)
    if not np.isfinite(norm):
        raise OverflowError("non-finite matrix")
    if norm == 0.0:
        return ident
    for m in (3, 5, 7, 9):
        theta, b = _PADE[m]
        if norm <= theta:
            X2 = X @ X
            powers = [ident, X2]
            for _ in range((m - 1) // 2 - 1):
                powers.append(powers[-1] @ X2)
            U = X @ sum(b[2 * i + 1] * powers[i] for i in range(len(powers)))
            V = sum(b[2 * i] * powers[i] for i in range(len(powers)))
            return np.linalg.solve(V - U, V + U)
    theta, b = _PADE[13]
    s = max(0, int(math.ceil(math.log2(norm / theta))))
    X = X / 2.0**s
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2) + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * ident)
    V = X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * ident
    E = np.linalg.solve(V - U, V + U)
    with np.errstate(over="raise", invalid="raise"):
        try:
            for _ in range(s):
                E = E @ E
        except FloatingPointError as exc:
            raise OverflowError("matrix exponential overflows") from exc
    if not np.all(np.isfinite(E)):
        raise OverflowError("matrix exponential overflows")
    return E


def write_trajectory_csv(path, grid: TimeGrid, values: np.ndarray, prefix: str = "x") -> None:
    """One row per time node: ``t, <prefix>1, ..., <prefix>N``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != grid.steps + 1:
        raise ValueError("one row per time node expected")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"{prefix}{i + 1}" for i in range(values.shape[1])])
        for t, row in zip(grid.times, values):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])
