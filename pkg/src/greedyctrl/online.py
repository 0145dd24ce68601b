"""Online phase: a control for a new parameter from the stored snapshots."""
from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .gramian import GramianHandle
from .greedy import GreedyResult
from .integrate import ControlSignal, solve_forward
from .model import ParameterGrid, ParametricSystem


class RankDeficientWarning(RuntimeWarning):
    pass


@dataclass
class OnlineOutput:
    nu: np.ndarray
    alpha: np.ndarray
    control: ControlSignal
    endpoint: np.ndarray
    endpoint_error: float
    phi_star: np.ndarray
    projection_residual: float
    consistency: float
    trajectory: np.ndarray | None = None
    elapsed: float = 0.0

    def summary(self) -> dict:
        return {
            "nu": self.nu.tolist(),
            "alpha": self.alpha.tolist(),
            "endpoint_error": self.endpoint_error,
            "projection_residual": self.projection_residual,
            "elapsed": self.elapsed,
        }


def _lstsq_qr(W: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Least squares ``min |b - W a|`` by pivoted QR, truncating tiny pivots."""
    n = W.shape[1]
    Q, R, piv = sla.qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < n:
        warnings.warn(f"snapshot images are rank deficient ({rank} of {n}); truncating",
                      RankDeficientWarning, stacklevel=3)
    alpha = np.zeros(n)
    if rank:
        alpha[piv[:rank]] = sla.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ b)
    return alpha


def online_control(sys: ParametricSystem, nu, result: GreedyResult, n_use: int | None = None,
                   use_cache: bool = True) -> OnlineOutput:
    """Approximate control for ``nu`` built from the first ``n_use`` snapshots.

    The adjoint data of the snapshots are pushed through ``nu``'s own
    Gramian; the best combination of those images matching the defect
    ``x1 - exp(T A) x0`` gives the coefficients, and the same combination of
    the adjoint-generated controls is the answer.  The endpoint is then
    recomputed by an independent forward solve.
    """
    start = time.perf_counter()
    h = GramianHandle(sys, nu, result.time_grid)
    n = result.n if n_use is None else min(int(n_use), result.n)

    b = None
    if use_cache and result.grid_rhs is not None:
        idx = result.grid.index_of(h.nu)
        if idx is not None:
            b = result.grid_rhs[idx]
    if b is None:
        b = h.rhs()
    free = h.x1 - b

    M = h.B.shape[1]
    if n == 0:
        alpha = np.zeros(0)
        phi_star = np.zeros(h.dim)
        samples = np.zeros((h.grid.steps + 1, M))
        projected = np.zeros(h.dim)
    else:
        Phi = result.phis[:, :n]
        u_all, _ = h.ops.adjoint_controls(Phi[None])
        W = h.ops.forward_endpoint(u_all)[0]
        alpha = _lstsq_qr(W, b)
        phi_star = Phi @ alpha
        samples = u_all[:, 0] @ alpha
        projected = W @ alpha
    control = ControlSignal(h.grid, samples)
    trajectory, endpoint = solve_forward(h.prop, h.B, control, h.x0, kind="verify")
    scale = np.linalg.norm(endpoint) + np.linalg.norm(free) + 1.0
    return OnlineOutput(
        nu=h.nu,
        alpha=alpha,
        control=control,
        endpoint=endpoint,
        endpoint_error=float(np.linalg.norm(h.x1 - endpoint)),
        phi_star=phi_star,
        projection_residual=float(np.linalg.norm(b - projected)),
        consistency=float(np.linalg.norm(endpoint - (free + projected)) / scale),
        trajectory=trajectory,
        elapsed=time.perf_counter() - start,
    )


@dataclass
class PerformanceRow:
    nu: np.ndarray
    error: float
    on_grid: bool
    snapshot: bool
    limit: float

    @property
    def ok(self) -> bool:
        return self.error <= self.limit


@dataclass
class PerformanceReport:
    rows: list
    epsilon: float

    def _max(self, on_grid: bool) -> float:
        vals = [r.error for r in self.rows if r.on_grid == on_grid]
        return max(vals) if vals else float("nan")

    @property
    def max_grid_error(self) -> float:
        return self._max(True)

    @property
    def max_midpoint_error(self) -> float:
        return self._max(False)

    @property
    def violations(self) -> list:
        return [r for r in self.rows if not r.ok]

    @property
    def passed(self) -> bool:
        """Grid points are the contract; midpoints are reported only."""
        return all(r.ok for r in self.rows if r.on_grid)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("nu,endpoint_error,on_grid,snapshot,limit,ok\n")
            for r in self.rows:
                nu = ";".join(repr(float(v)) for v in r.nu)
                f.write(f"{nu},{r.error!r},{int(r.on_grid)},{int(r.snapshot)},{r.limit!r},{int(r.ok)}\n")


def performance_report(sys: ParametricSystem, grid: ParameterGrid, result: GreedyResult,
                       midpoints: bool = False) -> PerformanceReport:
    """Online endpoint errors at every grid point, optionally also at cell midpoints.

    Grid rows are checked against ``epsilon``, midpoint rows against
    ``2 epsilon`` (an engineering margin, flagged but not enforced).
    """
    eps = result.epsilon
    chosen = {s.index for s in result.selected}
    rows = []
    for i, nu in enumerate(grid.points):
        out = online_control(sys, nu, result)
        rows.append(PerformanceRow(nu.copy(), out.endpoint_error, True, i in chosen, eps))
    if midpoints and len(grid) > 1:
        for nu in _midpoints(grid):
            out = online_control(sys, nu, result)
            rows.append(PerformanceRow(nu, out.endpoint_error, False, False, 2 * eps))
    return PerformanceReport(rows, eps)


def _midpoints(grid: ParameterGrid) -> np.ndarray:
    """Centres of the grid cells (a single-point axis keeps its point)."""
    axes = []
    for (lo, hi), size in zip(grid.box, grid.shape):
        if size == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            v = np.linspace(lo, hi, size)
            axes.append(0.5 * (v[1:] + v[:-1]))
    return np.array(list(itertools.product(*axes)), dtype=float)
