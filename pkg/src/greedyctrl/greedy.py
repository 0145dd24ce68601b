"""Offline weak-greedy selection of parameter snapshots.

For every grid parameter the algorithm tracks the distance between the
free-dynamics defect ``b = x1 - exp(T A) x0`` and the span of the states
reached by the snapshot controls, ``Lambda_nu phi_i``.  The parameter with
the largest distance is added next, until every distance drops below
``epsilon / 2``.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import integrate
from .gramian import (
    AffineGramian,
    ControllabilityError,
    GramianBounds,
    GramianHandle,
    affine_gramian_terms,
    assemble_gramian,
    estimate_bounds,
    solve_minimizer,
    system_time_grid,
)
from .integrate import SweepOperators, TimeGrid
from .model import ParameterGrid, ParametricSystem

log = logging.getLogger(__name__)

TOLERANCE_MET = "tolerance-met"
CAP = "cap"
DEPENDENCY = "dependency"


@dataclass
class OfflineConfig:
    epsilon: float
    grid: ParameterGrid
    max_snapshots: int | None = None
    steps: int | None = None
    bounds_sample: int = 5
    affine: bool = False
    reuse_snapshots: bool = False
    drop_tol: float = 1e-12

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_snapshots is not None and self.max_snapshots < 1:
            raise ValueError("max_snapshots must be >= 1")
        if len(self.grid) == 0:
            raise ValueError("parameter grid is empty")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "box": [list(b) for b in self.grid.box],
            "k": list(self.grid.shape),
            "max_snapshots": self.max_snapshots,
            "steps": self.steps,
            "bounds_sample": self.bounds_sample,
            "affine": self.affine,
            "reuse_snapshots": self.reuse_snapshots,
            "drop_tol": self.drop_tol,
        }


@dataclass
class Snapshot:
    index: int
    nu: np.ndarray
    phi: np.ndarray


@dataclass
class GreedyResult:
    selected: list[Snapshot]
    history: list[float]
    termination: str
    epsilon: float
    steps: int
    horizon: float
    grid: ParameterGrid
    bounds: GramianBounds | None = None
    bounds_note: str = ""
    config: dict = field(default_factory=dict)
    system_spec: dict = field(default_factory=dict)
    grid_rhs: np.ndarray | None = None
    sweeps: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def n(self) -> int:
        return len(self.selected)

    @property
    def nus(self) -> np.ndarray:
        return np.array([s.nu for s in self.selected]).reshape(self.n, -1)

    @property
    def phis(self) -> np.ndarray:
        """Snapshot minimisers as columns, shape ``(N, n)``."""
        if not self.selected:
            return np.zeros((0, 0))
        return np.column_stack([s.phi for s in self.selected])

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid.from_horizon(self.horizon, self.steps)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "system": self.system_spec,
            "epsilon": self.epsilon,
            "time": {"horizon": self.horizon, "steps": self.steps},
            "grid": {"box": [list(b) for b in self.grid.box], "k": list(self.grid.shape)},
            "termination": self.termination,
            "bounds": None if self.bounds is None else self.bounds.to_dict(),
            "bounds_note": self.bounds_note,
            "snapshots": [
                {"index": s.index, "nu": s.nu.tolist(), "phi": s.phi.tolist()} for s in self.selected
            ],
            "history": list(self.history),
            "grid_rhs": None if self.grid_rhs is None else self.grid_rhs.tolist(),
            "sweeps": dict(self.sweeps),
            "elapsed": self.elapsed,
        }

    def save(self, path) -> None:
        # json writes floats with repr, which round-trips exactly.
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "GreedyResult":
        d = json.loads(Path(path).read_text())
        grid = ParameterGrid.uniform(d["grid"]["box"], d["grid"]["k"])
        bounds = None
        if d.get("bounds"):
            b = d["bounds"]
            bounds = GramianBounds(b["lambda_minus"], b["lambda_plus"], tuple(tuple(s) for s in b["sample"]))
        selected = [
            Snapshot(int(s["index"]), np.array(s["nu"], dtype=float), np.array(s["phi"], dtype=float))
            for s in d["snapshots"]
        ]
        rhs = d.get("grid_rhs")
        return cls(
            selected=selected,
            history=[float(v) for v in d["history"]],
            termination=d["termination"],
            epsilon=float(d["epsilon"]),
            steps=int(d["time"]["steps"]),
            horizon=float(d["time"]["horizon"]),
            grid=grid,
            bounds=bounds,
            bounds_note=d.get("bounds_note", ""),
            config=d.get("config", {}),
            system_spec=d.get("system", {}),
            grid_rhs=None if rhs is None else np.array(rhs, dtype=float),
            sweeps=d.get("sweeps", {}),
            elapsed=float(d.get("elapsed", 0.0)),
        )


def surrogate_distance(b: np.ndarray, Q: np.ndarray) -> float:
    """Euclidean distance from ``b`` to the range of orthonormal ``Q``."""
    b = np.asarray(b, dtype=float)
    if Q.size == 0:
        return float(np.linalg.norm(b))
    return float(np.linalg.norm(b - Q @ (Q.T @ b)))


def orthonormal_extend(Q: np.ndarray, v: np.ndarray, drop_tol: float = 1e-12):
    """Append ``v`` to the orthonormal columns ``Q`` (Gram-Schmidt, twice).

    Returns ``(Q', accepted)``; ``v`` is rejected when less than
    ``drop_tol * |v|`` of it is left after orthogonalisation.
    """
    v = np.asarray(v, dtype=float).copy()
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return Q, False
    for _ in range(2):
        for i in range(Q.shape[1]):
            v -= Q[:, i] * (Q[:, i] @ v)
    rest = np.linalg.norm(v)
    if rest < drop_tol * vnorm:
        return Q, False
    return np.column_stack([Q, v / rest]), True


@dataclass
class OfflineState:
    """Per grid point: defect ``rhs``, orthonormal basis, residual and flag."""

    rhs: np.ndarray
    bases: list
    residuals: np.ndarray
    active: np.ndarray
    raw: list

    @classmethod
    def start(cls, rhs: np.ndarray, epsilon: float) -> "OfflineState":
        k, N = rhs.shape
        return cls(
            rhs=rhs,
            bases=[np.zeros((N, 0)) for _ in range(k)],
            residuals=rhs.copy(),
            active=np.linalg.norm(rhs, axis=1) >= epsilon / 2,
            raw=[[] for _ in range(k)],
        )

    @property
    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.residuals, axis=1)

    def extend(self, i: int, w: np.ndarray, drop_tol: float) -> bool:
        self.raw[i].append(w)
        Q, accepted = orthonormal_extend(self.bases[i], w, drop_tol)
        if accepted:
            q = Q[:, -1]
            self.residuals[i] = self.residuals[i] - q * (q @ self.residuals[i])
            self.bases[i] = Q
        return accepted


def _snapshot_with_reuse(h: GramianHandle, rhs: np.ndarray, phis: list, images: list) -> np.ndarray:
    """Minimiser from Gramian images of earlier snapshots plus canonical vectors.

    Earlier snapshots and their images ``Lambda phi_i`` (already known from
    the grid scan) are completed to a basis with canonical vectors chosen by
    pivoted QR; only those completing vectors cost new sweeps.
    """
    from .gramian import apply_gramian
    import scipy.linalg as sla

    N = h.dim
    P = np.column_stack(phis) if phis else np.zeros((N, 0))
    j = P.shape[1]
    if j:
        Qp, _ = np.linalg.qr(P)
        comp = np.eye(N) - Qp @ Qp.T
        _, _, piv = sla.qr(comp, pivoting=True)
        extra = np.sort(piv[: N - j])
    else:
        extra = np.arange(N)
    E = np.eye(N)[:, extra]
    X = np.column_stack([P, E])
    W = np.column_stack([np.column_stack(images) if images else np.zeros((N, 0)), apply_gramian(h, E)])
    y = np.linalg.solve(W, rhs)
    return X @ y


def greedy_offline(sys: ParametricSystem, cfg: OfflineConfig) -> GreedyResult:
    """Run the offline weak-greedy snapshot selection."""
    start = time.perf_counter()
    sweeps_before = integrate.SWEEPS.copy()
    grid = cfg.grid
    tg = system_time_grid(sys, grid, cfg.steps)
    k = len(grid)
    N = sys.state_dim
    cap = min(N, k, cfg.max_snapshots or N)
    eps = cfg.epsilon

    affine: AffineGramian | None = None
    mode = "matrix-free"
    if cfg.affine:
        affine = affine_gramian_terms(sys, tg)
        mode = "affine"
    handles = [GramianHandle(sys, nu, tg, mode=mode, affine_terms=affine) for nu in grid.points]
    ops = SweepOperators([h.prop for h in handles], [h.B for h in handles])
    x0 = np.stack([h.x0 for h in handles])[:, :, None]
    x1 = np.stack([h.x1 for h in handles])
    rhs = x1 - ops.free_endpoint(x0)[:, :, 0]

    state = OfflineState.start(rhs, eps)
    history = [float(state.distances.max())]
    selected: list[Snapshot] = []
    chosen = np.zeros(k, dtype=bool)
    termination = TOLERANCE_MET
    log.info("offline: k=%d N=%d steps=%d max|b|=%.3e", k, N, tg.steps, history[0])

    while state.active.any():
        if len(selected) >= cap:
            termination = CAP
            break
        dist = state.distances
        candidates = np.where(state.active & ~chosen, dist, -np.inf)
        idx = int(np.argmax(candidates))
        h = handles[idx]
        try:
            if cfg.reuse_snapshots and not cfg.affine:
                phi = _snapshot_with_reuse(h, rhs[idx], [s.phi for s in selected], state.raw[idx])
            else:
                phi = solve_minimizer(h, rhs[idx])
        except ControllabilityError:
            raise
        selected.append(Snapshot(idx, grid.points[idx].copy(), phi))
        chosen[idx] = True

        live = np.flatnonzero(state.active)
        if affine is not None:
            images = [affine.apply(sys.affine.coefficients(grid.points[i]), phi) for i in live]
        else:
            sub = ops.subset(live)
            u, _ = sub.adjoint_controls(np.broadcast_to(phi[None, :, None], (len(live), N, 1)))
            images = list(sub.forward_endpoint(u)[:, :, 0])
        own_accepted = True
        for i, w in zip(live, images):
            accepted = state.extend(i, w, cfg.drop_tol)
            if i == idx:
                own_accepted = accepted
        dist = state.distances
        state.active &= dist >= eps / 2
        history.append(float(dist.max()))
        log.info("offline: snapshot %d at nu=%s, max residual %.3e, %d active",
                 len(selected), grid.points[idx].tolist(), history[-1], int(state.active.sum()))
        if not own_accepted:
            termination = DEPENDENCY
            break
    else:
        termination = TOLERANCE_MET

    bounds, note = None, ""
    if cfg.bounds_sample and cfg.bounds_sample >= 2 and len(grid) >= 2:
        try:
            bounds = estimate_bounds(sys, grid, cfg.bounds_sample, tg)
            note = "empirical: extreme eigenvalues over a grid subsample"
        except ControllabilityError as exc:
            note = f"bounds unavailable: {exc}"
            log.warning(note)

    sweeps = integrate.SWEEPS - sweeps_before
    return GreedyResult(
        selected=selected,
        history=history,
        termination=termination,
        epsilon=eps,
        steps=tg.steps,
        horizon=sys.horizon,
        grid=grid,
        bounds=bounds,
        bounds_note=note,
        config=cfg.to_dict(),
        system_spec=dict(sys.spec),
        grid_rhs=rhs,
        sweeps=dict(sweeps),
        elapsed=time.perf_counter() - start,
    )


def naive_all_minimizers(sys: ParametricSystem, grid: ParameterGrid, steps: int | None = None,
                         time_grid: TimeGrid | None = None) -> dict[int, np.ndarray]:
    """Exact minimiser at every grid point (assembly plus solve each)."""
    tg = time_grid or system_time_grid(sys, grid, steps)
    out = {}
    for i, nu in enumerate(grid.points):
        h = GramianHandle(sys, nu, tg)
        try:
            out[i] = solve_minimizer(h, h.rhs())
        except ControllabilityError as exc:
            warnings.warn(f"skipping grid point {i}: {exc}")
    return out


def _max_distance(vectors: np.ndarray, basis: np.ndarray) -> float:
    if basis.shape[1] == 0:
        return float(np.linalg.norm(vectors, axis=0).max())
    Q, _ = np.linalg.qr(basis)
    return float(np.linalg.norm(vectors - Q @ (Q.T @ vectors), axis=0).max())


def canonical_errors(oracle: dict[int, np.ndarray], n_max: int) -> list[float]:
    """``max_nu dist(phi_nu, span{e_1..e_n})`` for ``n = 0..n_max``."""
    V = np.column_stack(list(oracle.values()))
    return [float(np.linalg.norm(V[n:], axis=0).max()) if n < V.shape[0] else 0.0 for n in range(n_max + 1)]


def greedy_errors(oracle: dict[int, np.ndarray], snapshots: np.ndarray) -> list[float]:
    """``max_nu dist(phi_nu, span of the first n snapshots)`` for ``n = 0..n_snap``."""
    V = np.column_stack(list(oracle.values()))
    return [_max_distance(V, snapshots[:, :n]) for n in range(snapshots.shape[1] + 1)]


def weak_greedy_margins(oracle: dict[int, np.ndarray], snapshots: np.ndarray) -> list[tuple[float, float]]:
    """Pairs ``(dist(phi_{j+1}, Phi_j), max_nu dist(phi_nu, Phi_j))`` for each step."""
    V = np.column_stack(list(oracle.values()))
    out = []
    for j in range(snapshots.shape[1]):
        basis = snapshots[:, :j]
        out.append((_max_distance(snapshots[:, j:j + 1], basis), _max_distance(V, basis)))
    return out


def discretisation_report(sys: ParametricSystem, result: GreedyResult, sample_size: int = 5) -> dict:
    """Finite-difference Lipschitz estimates and the grid spacing they suggest.

    Reports only; the grid is never refined automatically.
    """
    grid = result.grid
    tg = result.time_grid
    idx = grid.subsample(sample_size)
    pts = grid.points[idx]
    handles = [GramianHandle(sys, nu, tg) for nu in pts]
    mats = [assemble_gramian(h) for h in handles]
    rhs = [h.rhs() for h in handles]
    phis = [solve_minimizer(h, b) for h, b in zip(handles, rhs)]

    def lipschitz(values):
        best = 0.0
        for a in range(len(pts) - 1):
            step = np.linalg.norm(pts[a + 1] - pts[a])
            if step > 0:
                best = max(best, np.linalg.norm(values[a + 1] - values[a], 2) / step)
        return float(best)

    c_rhs = lipschitz(rhs)
    c_gram = lipschitz(mats)
    c_phi = lipschitz(phis)
    eps = result.epsilon
    lam_minus = result.bounds.lambda_minus if result.bounds else min(np.linalg.eigvalsh(G)[0] for G in mats)
    candidates = []
    if c_rhs + c_gram > 0:
        candidates.append(eps / (c_rhs + c_gram))
    if c_phi * lam_minus > 0:
        candidates.append(eps / (c_phi * lam_minus))
    recommended = 0.5 * min(candidates) if candidates else float("inf")
    return {
        "lipschitz_rhs": c_rhs,
        "lipschitz_gramian": c_gram,
        "lipschitz_minimiser": c_phi,
        "lambda_minus": float(lam_minus),
        "recommended_delta": recommended,
        "grid_delta": grid.delta,
        "grid_satisfies": bool(grid.delta <= recommended),
    }
