"""Controllability Gramian: application, assembly, inversion and bounds.

The Gramian used everywhere is the discrete one, i.e. the composition of
an adjoint sweep and a forward sweep of the Crank-Nicolson scheme:

    Lambda phi0 = x(T)   where   x' = A x + B u,  x(0) = 0,  u = B.T phi,
                                 -phi' = A.T phi,  phi(T) = phi0.

It is symmetric positive semidefinite by construction, and the duality and
gradient identities of the continuous problem hold for it to roundoff.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .integrate import (
    ControlSignal,
    Propagator,
    SweepOperators,
    TimeGrid,
    control_inner,
    default_steps,
    matrix_exponential,
)
from .model import ParameterGrid, ParametricSystem, eval_system, kalman_rank

log = logging.getLogger(__name__)


class ControllabilityError(np.linalg.LinAlgError):
    """The Gramian at some parameter value is not (numerically) invertible."""

    def __init__(self, message: str, nu=None):
        super().__init__(message)
        self.nu = nu


class UnsupportedModelError(ValueError):
    pass


class IllConditionedGramianWarning(RuntimeWarning):
    pass


def system_time_grid(sys: ParametricSystem, grid: ParameterGrid | None = None, steps: int | None = None) -> TimeGrid:
    """Time grid shared by every parameter value of ``sys``.

    Without an explicit step count the step is small enough for the
    stiffest ``A(nu)`` over the grid points (or the box corners).
    """
    if steps is None:
        if grid is not None:
            points = grid.points
        else:
            points = np.array(np.meshgrid(*sys.box)).reshape(sys.param_dim, -1).T
        a_norm = max(np.linalg.norm(eval_system(sys, nu)[0], 1) for nu in points)
        steps = default_steps(sys.horizon, a_norm)
    return TimeGrid.from_horizon(sys.horizon, steps)


class GramianHandle:
    """Gramian of ``sys`` at a fixed ``nu`` on a fixed time grid.

    ``mode`` is ``"matrix-free"`` (sweeps only), ``"assembled"`` (dense
    matrix cached after the first assembly) or ``"affine"`` (matrix built
    from precomputed affine terms).
    """

    def __init__(self, sys: ParametricSystem, nu, grid: TimeGrid, mode: str = "matrix-free",
                 affine_terms: "AffineGramian | None" = None):
        if mode not in ("matrix-free", "assembled", "affine"):
            raise ValueError(f"unknown Gramian mode {mode!r}")
        if mode == "affine" and affine_terms is None:
            raise UnsupportedModelError("affine mode needs precomputed affine terms")
        self.system = sys
        self.nu = np.atleast_1d(np.asarray(nu, dtype=float))
        self.grid = grid
        self.mode = mode
        self.A, self.B, self.x0, self.x1 = eval_system(sys, self.nu)
        self.prop = Propagator(self.A, grid)
        self._ops: SweepOperators | None = None
        self._matrix: np.ndarray | None = None
        self._affine = affine_terms
        self.asymmetry: float | None = None

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def ops(self) -> SweepOperators:
        if self._ops is None:
            self._ops = SweepOperators([self.prop], [self.B])
        return self._ops

    @property
    def matrix(self) -> np.ndarray | None:
        return self._matrix

    def free_endpoint(self) -> np.ndarray:
        return self.ops.free_endpoint(self.x0[None, :, None])[0, :, 0]

    def rhs(self) -> np.ndarray:
        """``x1 - exp(T A) x0`` for the discrete dynamics."""
        return self.x1 - self.free_endpoint()


def apply_gramian(h: GramianHandle, phi0: np.ndarray) -> np.ndarray:
    """``Lambda phi0`` via one adjoint and one forward sweep per column."""
    phi0 = np.asarray(phi0, dtype=float)
    cols = phi0.reshape(h.dim, -1)
    u, _ = h.ops.adjoint_controls(cols[None])
    out = h.ops.forward_endpoint(u)[0]
    return out.reshape(phi0.shape)


def assemble_gramian(h: GramianHandle) -> np.ndarray:
    """Dense Gramian from its action on the canonical basis (cached)."""
    if h._matrix is not None:
        return h._matrix
    if h.mode == "affine":
        G = h._affine.reconstruct(h.system.affine.coefficients(h.nu))
        h.asymmetry = 0.0
    else:
        G = apply_gramian(h, np.eye(h.dim))
        scale = np.linalg.norm(G)
        h.asymmetry = float(np.linalg.norm(G - G.T) / scale) if scale > 0 else 0.0
        G = 0.5 * (G + G.T)
    G.setflags(write=False)
    h._matrix = G
    return G


def solve_minimizer(h: GramianHandle, rhs: np.ndarray, rtol: float = 1e-8) -> np.ndarray:
    """Solve ``Lambda phi0 = rhs`` for the minimiser ``phi0``.

    Cholesky first.  If it breaks down but the pair ``(A, B)`` passes the
    Kalman test, the Gramian is merely too ill-conditioned for double
    precision; the solve then falls back to a symmetric eigendecomposition
    that discards eigenvalues at roundoff level, and warns.  One step of
    iterative refinement is kept when it lowers the residual.
    """
    G = assemble_gramian(h)
    rhs = np.asarray(rhs, dtype=float)
    rnorm = np.linalg.norm(rhs)
    if rnorm == 0.0:
        return np.zeros_like(rhs)
    try:
        factor = sla.cho_factor(G, lower=True)

        def solve(b):
            return sla.cho_solve(factor, b)
    except np.linalg.LinAlgError:
        if kalman_rank(h.A, h.B) < h.dim:
            raise ControllabilityError(f"system not controllable at nu={h.nu.tolist()}", h.nu)
        warnings.warn(
            f"Gramian at nu={h.nu.tolist()} is positive definite only to roundoff; "
            "using a truncated eigen-solve",
            IllConditionedGramianWarning,
            stacklevel=2,
        )
        w, V = np.linalg.eigh(G)
        c = V.T @ rhs
        # Truncation level picked from a ladder of relative floors by the
        # smallest residual; eigenvalues at and below roundoff carry noise,
        # so neither a fixed nor a zero floor is reliable here.
        best = None
        for floor in abs(w).max() * 10.0 ** -np.arange(8.0, 17.5, 0.5):
            keep = w > floor
            trial = V[:, keep] @ (c[keep] / w[keep])
            r = np.linalg.norm(rhs - G @ trial)
            if best is None or r < best[0]:
                best = (r, keep)
        keep = best[1]

        def solve(b):
            return V[:, keep] @ ((V[:, keep].T @ b) / w[keep])
    phi = solve(rhs)
    res = rhs - G @ phi
    refined = phi + solve(res)
    res2 = rhs - G @ refined
    if np.linalg.norm(res2) < np.linalg.norm(res):
        phi, res = refined, res2
    if np.linalg.norm(res) > rtol * rnorm:
        warnings.warn(
            f"minimiser residual {np.linalg.norm(res) / rnorm:.2e} (relative) at nu={h.nu.tolist()}",
            IllConditionedGramianWarning,
            stacklevel=2,
        )
    return phi


def exact_control(h: GramianHandle, phi0: np.ndarray) -> ControlSignal:
    """Control ``u(t) = B.T phi(t)`` generated by the adjoint datum ``phi0``."""
    u, _ = h.ops.adjoint_controls(np.asarray(phi0, dtype=float).reshape(1, h.dim, 1))
    return ControlSignal(h.grid, u[:, 0, :, 0])


def eval_J(h: GramianHandle, phi0: np.ndarray, x0=None, x1=None) -> float:
    """Quadratic functional whose minimiser generates the minimal-norm control.

    ``J(phi0) = 1/2 |B.T phi|^2 - <x1, phi0> + <x0, phi(0)>``; its gradient is
    ``Lambda phi0 - (x1 - exp(T A) x0)`` for the discrete dynamics.
    """
    x0 = h.x0 if x0 is None else np.asarray(x0, dtype=float)
    x1 = h.x1 if x1 is None else np.asarray(x1, dtype=float)
    phi0 = np.asarray(phi0, dtype=float)
    u, phi_start = h.ops.adjoint_controls(phi0.reshape(1, h.dim, 1))
    u = u[:, 0, :, 0]
    return 0.5 * control_inner(u, u, h.grid.dt) - float(x1 @ phi0) + float(x0 @ phi_start[0, :, 0])


@dataclass(frozen=True)
class GramianBounds:
    lambda_minus: float
    lambda_plus: float
    sample: tuple = field(default=())

    def __post_init__(self):
        if not (self.lambda_minus > 0 and self.lambda_plus >= self.lambda_minus):
            raise ValueError("need 0 < lambda_minus <= lambda_plus")

    @property
    def gamma(self) -> float:
        return self.lambda_minus / (2.0 * self.lambda_plus)

    def to_dict(self) -> dict:
        return {
            "lambda_minus": self.lambda_minus,
            "lambda_plus": self.lambda_plus,
            "gamma": self.gamma,
            "sample": [list(map(float, s)) for s in self.sample],
        }


def estimate_bounds(sys: ParametricSystem, grid: ParameterGrid, sample_size: int,
                    time_grid: TimeGrid | None = None) -> GramianBounds:
    """Extreme Gramian eigenvalues over an evenly spread subsample of ``grid``.

    The result is empirical: it brackets the sampled points only.
    """
    if sample_size < 2 and len(grid) >= 2:
        raise ValueError("sample_size must be >= 2")
    tg = time_grid or system_time_grid(sys, grid)
    lo, hi, used = np.inf, 0.0, []
    for idx in grid.subsample(sample_size):
        nu = grid.points[idx]
        w = np.linalg.eigvalsh(assemble_gramian(GramianHandle(sys, nu, tg)))
        if w[0] <= 0:
            raise ControllabilityError(
                f"Gramian not positive definite at nu={nu.tolist()} (min eigenvalue {w[0]:.3e})", nu)
        lo, hi = min(lo, w[0]), max(hi, w[-1])
        used.append(tuple(nu))
    return GramianBounds(float(lo), float(hi), tuple(used))


class AffineGramian:
    """Precomputed ``Lambda(nu) = sum_{l,m} c_l c_m Lambda_lm``.

    Off-diagonal terms are stored pairwise summed, ``Lambda_lm + Lambda_ml``,
    which is the symmetric combination that enters the sum.
    """

    def __init__(self, terms: dict[tuple[int, int], np.ndarray], size: int):
        self.terms = terms
        self.size = size

    def reconstruct(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, dtype=float)
        out = np.zeros_like(next(iter(self.terms.values())))
        for (l, m), T in self.terms.items():
            out += c[l] * c[m] * T
        return out

    def apply(self, coeffs, phi: np.ndarray) -> np.ndarray:
        c = np.asarray(coeffs, dtype=float)
        return sum(c[l] * c[m] * (T @ phi) for (l, m), T in self.terms.items())


def affine_gramian_terms(sys: ParametricSystem, time_grid: TimeGrid | None = None) -> AffineGramian:
    """Assemble the affine Gramian terms with mixed adjoint/forward sweeps.

    ``Lambda_lm`` couples an adjoint sweep observed through ``B_m`` with a
    forward sweep driven through ``B_l``.
    """
    if sys.affine is None:
        raise UnsupportedModelError("system has no affine control model")
    tg = time_grid or system_time_grid(sys)
    nu_ref = np.array([0.5 * (lo + hi) for lo, hi in sys.box])
    A = eval_system(sys, nu_ref)[0]
    for corner in np.array(np.meshgrid(*sys.box)).reshape(sys.param_dim, -1).T:
        if not np.array_equal(eval_system(sys, corner)[0], A):
            raise UnsupportedModelError("affine Gramian needs a parameter-independent A")
    prop = Propagator(A, tg)
    Bl = sys.affine.terms
    L = len(Bl)
    N = sys.state_dim
    ops = [SweepOperators([prop], [B]) for B in Bl]
    controls = [op.adjoint_controls(np.eye(N)[None])[0] for op in ops]
    terms = {}
    for l in range(L):
        for m in range(l, L):
            G_lm = ops[l].forward_endpoint(controls[m])[0]
            if l == m:
                terms[(l, l)] = 0.5 * (G_lm + G_lm.T)
            else:
                G_ml = ops[m].forward_endpoint(controls[l])[0]
                S = G_lm + G_ml
                terms[(l, m)] = 0.5 * (S + S.T)
    return AffineGramian(terms, N)


def continuous_gramian(A: np.ndarray, B: np.ndarray, T: float, panels: int = 400, order: int = 8) -> np.ndarray:
    """``int_0^T exp(sA) B B.T exp(sA.T) ds`` by composite Gauss-Legendre.

    Exponentials come from :func:`matrix_exponential`; panel exponentials are
    chained so only ``order + 1`` of them are computed.  Test oracle only.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    H = T / panels
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (nodes + 1.0) * H
    weights = 0.5 * weights * H
    E_nodes = [matrix_exponential(A, s) @ B for s in nodes]
    E_panel = matrix_exponential(A, H)
    shift = np.eye(A.shape[0])
    out = np.zeros((A.shape[0], A.shape[0]))
    for _ in range(panels):
        for w, EB in zip(weights, E_nodes):
            V = shift @ EB
            out += w * (V @ V.T)
        shift = E_panel @ shift
    return 0.5 * (out + out.T)


def sandwich_distances(G: np.ndarray, phi: np.ndarray, V: np.ndarray) -> tuple[float, float]:
    """``dist(phi, span V)`` and ``dist(G phi, span G V)``."""
    def dist(x, W):
        Q, _ = np.linalg.qr(W)
        return float(np.linalg.norm(x - Q @ (Q.T @ x)))
    return dist(phi, V), dist(G @ phi, G @ V)
