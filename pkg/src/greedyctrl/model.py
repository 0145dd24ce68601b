"""Parameter-dependent linear control systems and parameter grids.

A :class:`ParametricSystem` maps a parameter vector ``nu`` to the data of

    x'(t) = A(nu) x(t) + B(nu) u(t),   x(0) = x0(nu),   target x1(nu),

on a fixed horizon ``T``.  Two finite-difference benchmarks (boundary
controlled wave and heat equations on the unit interval) are provided.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """Parameter value outside the declared parameter box."""


Box = tuple[tuple[float, float], ...]


def _as_box(box) -> Box:
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"box must be a list of (lower, upper) pairs, got {box!r}")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ValueError(f"box has lower > upper: {box!r}")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


def in_box(box: Box, nu, rtol: float = 1e-12) -> bool:
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if nu.shape != (len(box),):
        return False
    for value, (lo, hi) in zip(nu, box):
        slack = rtol * max(1.0, abs(lo), abs(hi))
        if not (lo - slack <= value <= hi + slack):
            return False
    return True


@dataclass(frozen=True)
class AffineControlModel:
    """Control operator of the form ``B(nu) = sum_l c_l(nu) B_l``.

    ``combine`` maps a parameter vector to the coefficient vector
    ``(c_1, ..., c_L)``; by default the coefficients are the parameter
    components themselves.
    """

    terms: tuple[np.ndarray, ...]
    combine: Callable[[np.ndarray], np.ndarray] | None = None

    def coefficients(self, nu) -> np.ndarray:
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        c = nu if self.combine is None else np.asarray(self.combine(nu), dtype=float)
        if c.shape != (len(self.terms),):
            raise ValueError(f"expected {len(self.terms)} affine coefficients, got {c.shape}")
        return c

    def control_matrix(self, nu) -> np.ndarray:
        c = self.coefficients(nu)
        return sum(cl * Bl for cl, Bl in zip(c, self.terms))


@dataclass(frozen=True)
class ParametricSystem:
    """Parametric linear system with horizon ``horizon`` and parameter box ``box``.

    ``sys_map(nu) -> (A, B)`` and ``data_map(nu) -> (x0, x1)`` must be
    deterministic.  ``affine`` is set when ``A`` does not depend on ``nu``
    and ``B`` is affine in it; it enables the precomputed Gramian path.
    """

    state_dim: int
    control_dim: int
    horizon: float
    sys_map: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    data_map: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    box: Box
    name: str = "custom"
    affine: AffineControlModel | None = None
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if not 1 <= self.control_dim <= self.state_dim:
            raise ValueError("control_dim must satisfy 1 <= M <= N")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "box", _as_box(self.box))

    @property
    def param_dim(self) -> int:
        return len(self.box)


def eval_system(sys: ParametricSystem, nu):
    """Evaluate ``(A, B, x0, x1)`` at parameter ``nu``.

    Raises :class:`DomainError` when ``nu`` lies outside the system's box.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if not in_box(sys.box, nu):
        raise DomainError(f"parameter {nu.tolist()} outside box {list(sys.box)}")
    A, B = sys.sys_map(nu)
    x0, x1 = sys.data_map(nu)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(sys.state_dim, -1)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    x1 = np.asarray(x1, dtype=float).reshape(-1)
    N, M = sys.state_dim, sys.control_dim
    if A.shape != (N, N) or B.shape != (N, M) or x0.shape != (N,) or x1.shape != (N,):
        raise ValueError(
            f"system '{sys.name}' returned shapes A{A.shape} B{B.shape} "
            f"x0{x0.shape} x1{x1.shape}, expected N={N}, M={M}"
        )
    return A, B, x0, x1


@dataclass(frozen=True)
class ParameterGrid:
    """Uniform tensor grid over a parameter box.

    ``delta`` is the largest distance from a box point to its nearest grid
    point: half the diagonal of one grid cell.
    """

    box: Box
    points: np.ndarray
    delta: float
    shape: tuple[int, ...]

    @classmethod
    def uniform(cls, box, k) -> "ParameterGrid":
        box = _as_box(box)
        ks = (k,) * len(box) if np.isscalar(k) else tuple(k)
        if len(ks) != len(box) or any(int(n) < 1 for n in ks):
            raise ValueError(f"invalid grid sizes {k!r} for a {len(box)}-d box")
        axes = []
        half_cells = []
        for (lo, hi), n in zip(box, ks):
            n = int(n)
            if n == 1:
                axes.append(np.array([0.5 * (lo + hi)]))
                half_cells.append(0.5 * (hi - lo))
            elif hi == lo:
                raise ValueError("a degenerate box axis admits a single grid point only")
            else:
                axes.append(np.linspace(lo, hi, n))
                half_cells.append((hi - lo) / (2 * (n - 1)))
        points = np.array(list(itertools.product(*axes)), dtype=float)
        delta = float(math.sqrt(sum(h * h for h in half_cells)))
        return cls(box, points, delta, tuple(len(a) for a in axes))

    @classmethod
    def from_delta(cls, box, delta: float) -> "ParameterGrid":
        """Coarsest uniform grid whose per-axis half spacing is at most ``delta``."""
        if not delta > 0:
            raise ValueError("delta must be positive")
        box = _as_box(box)
        ks = [int(math.ceil((hi - lo) / (2 * delta))) + 1 for lo, hi in box]
        return cls.uniform(box, ks)

    def __len__(self) -> int:
        return len(self.points)

    def index_of(self, nu, atol: float = 0.0) -> int | None:
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        hits = np.flatnonzero(np.all(np.abs(self.points - nu) <= atol, axis=1))
        return int(hits[0]) if hits.size else None

    def nearest_distance(self, samples: np.ndarray) -> np.ndarray:
        samples = np.atleast_2d(samples)
        d = np.linalg.norm(samples[:, None, :] - self.points[None, :, :], axis=2)
        return d.min(axis=1)

    def subsample(self, count: int) -> np.ndarray:
        """Indices of ``count`` evenly spread points including both ends."""
        count = max(1, min(int(count), len(self)))
        return np.unique(np.round(np.linspace(0, len(self) - 1, count)).astype(int))


def second_difference(n: int) -> np.ndarray:
    """Tridiagonal matrix with -2 on the diagonal and 1 off it."""
    return -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)


def build_wave_system(half_dim: int, T: float, nu_box) -> ParametricSystem:
    """Wave equation on (0, 1), Dirichlet at 0, control at 1, ``half_dim`` inner nodes.

    State ordering is positions first, then velocities.
    """
    if half_dim < 1:
        raise ValueError("half_dim must be >= 1")
    n = int(half_dim)
    N = 2 * n
    scale = float((n + 1) ** 2)
    lap = scale * second_difference(n)
    B = np.zeros((N, 1))
    B[-1, 0] = scale
    nodes = np.arange(1, n + 1) / (n + 1)
    x0 = np.concatenate([np.sin(np.pi * nodes), np.zeros(n)])
    x1 = np.zeros(N)

    def sys_map(nu):
        A = np.zeros((N, N))
        A[:n, n:] = np.eye(n)
        A[n:, :n] = nu[0] * lap
        return A, B.copy()

    def data_map(nu):
        return x0.copy(), x1.copy()

    spec = {"builder": "wave", "dim": N, "T": float(T), "box": [list(b) for b in _as_box(nu_box)]}
    return ParametricSystem(N, 1, float(T), sys_map, data_map, nu_box, name="wave", spec=spec)


def build_heat_system(dim: int, T: float, nu_box) -> ParametricSystem:
    """Heat equation on (0, 1) with ``dim`` inner nodes, control at the right end.

    The diffusion coefficient is the parameter; ``B`` does not depend on it.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    N = int(dim)
    scale = float((N + 1) ** 2)
    lap = scale * second_difference(N)
    B = np.zeros((N, 1))
    B[-1, 0] = scale
    nodes = np.arange(1, N + 1) / (N + 1)
    x0 = np.sin(np.pi * nodes)
    x1 = np.zeros(N)

    def sys_map(nu):
        return nu[0] * lap, B.copy()

    def data_map(nu):
        return x0.copy(), x1.copy()

    spec = {"builder": "heat", "dim": N, "T": float(T), "box": [list(b) for b in _as_box(nu_box)]}
    return ParametricSystem(N, 1, float(T), sys_map, data_map, nu_box, name="heat", spec=spec)


def build_affine_system(
    A: np.ndarray,
    B_terms: Sequence[np.ndarray],
    x0: np.ndarray,
    x1: np.ndarray,
    T: float,
    box,
    A_terms: Sequence[np.ndarray] = (),
    B0: np.ndarray | None = None,
    name: str = "affine",
) -> ParametricSystem:
    """System with ``A(nu) = A + sum nu_l A_l`` and ``B(nu) = B0 + sum nu_l B_l``.

    When there are no ``A_terms`` and no ``B0`` the control model is affine
    in the sense of the precomputed Gramian path and ``sys.affine`` is set.
    """
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    B_terms = tuple(np.asarray(Bl, dtype=float).reshape(N, -1) for Bl in B_terms)
    A_terms = tuple(np.asarray(Al, dtype=float) for Al in A_terms)
    if not B_terms and B0 is None:
        raise ValueError("need at least one control matrix")
    M = (B_terms[0] if B_terms else np.asarray(B0).reshape(N, -1)).shape[1]
    B0 = np.zeros((N, M)) if B0 is None else np.asarray(B0, dtype=float).reshape(N, M)
    box = _as_box(box)
    d = len(box)
    if A_terms and len(A_terms) != d:
        raise ValueError("need one A term per parameter")
    if B_terms and len(B_terms) != d:
        raise ValueError("need one B term per parameter")
    x0 = np.asarray(x0, dtype=float).reshape(N)
    x1 = np.asarray(x1, dtype=float).reshape(N)

    def sys_map(nu):
        An = A + sum((v * Al for v, Al in zip(nu, A_terms)), np.zeros_like(A))
        Bn = B0 + sum((v * Bl for v, Bl in zip(nu, B_terms)), np.zeros_like(B0))
        return An, Bn

    def data_map(nu):
        return x0.copy(), x1.copy()

    affine = None
    if not A_terms and B_terms and not np.any(B0):
        affine = AffineControlModel(B_terms)
    return ParametricSystem(N, M, float(T), sys_map, data_map, box, name=name, affine=affine)


def kalman_rank(A: np.ndarray, B: np.ndarray, rtol: float = 1e-12) -> int:
    """Dimension of the Krylov space span[B, AB, ..., A^(N-1) B].

    Computed with an orthogonal staircase (block Arnoldi) rather than by
    forming the Krylov matrix, whose columns differ in scale by powers of
    ``|A|`` and lose rank in floating point long before the system does.
    Singular values of each new orthogonalised block below
    ``max(N, M) * rtol * scale`` count as zero, with ``scale`` the largest
    singular value seen for that block's generator.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    N, M = B.shape
    tol_factor = max(N, M) * rtol
    basis = np.zeros((N, 0))
    block = B
    scale = np.linalg.norm(B, 2)
    while basis.shape[1] < N:
        if scale == 0.0:
            break
        for _ in range(2):
            block = block - basis @ (basis.T @ block)
        U, s, _ = np.linalg.svd(block, full_matrices=False)
        keep = s > tol_factor * scale
        if not np.any(keep):
            break
        new = U[:, keep]
        basis = np.hstack([basis, new])
        block = A @ new
        scale = np.linalg.norm(block, 2)
    return int(basis.shape[1])


# Plain-text dense matrices: first line "rows cols", then row-major entries.

def save_matrix(path, M: np.ndarray) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError("only 2-d arrays can be saved")
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: missing 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = [float(t) for t in tokens[2:]]
    if len(values) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} entries, found {len(values)}")
    return np.array(values, dtype=float).reshape(rows, cols)


def system_from_files(files: dict, T: float, box, base_dir=None) -> ParametricSystem:
    """Build an affine-in-``nu`` system from matrix files.

    ``files`` keys: ``A`` (required), ``x0``, ``x1`` (vectors, required),
    ``B`` (list of per-parameter control matrices), ``B0``, ``A_terms``.
    """
    base = Path(base_dir) if base_dir is not None else Path(".")

    def load(p):
        p = Path(p)
        return load_matrix(p if p.is_absolute() else base / p)

    A = load(files["A"])
    x0 = load(files["x0"]).reshape(-1)
    x1 = load(files["x1"]).reshape(-1)
    B_terms = [load(p) for p in files.get("B", [])]
    A_terms = [load(p) for p in files.get("A_terms", [])]
    B0 = load(files["B0"]) if "B0" in files else None
    system = build_affine_system(A, B_terms, x0, x1, T, box, A_terms=A_terms, B0=B0, name="files")
    resolved = {
        key: ([str((base / v).resolve()) for v in val] if isinstance(val, list) else str((base / val).resolve()))
        for key, val in files.items()
    }
    spec = {"builder": "files", "files": resolved, "T": float(T), "box": [list(b) for b in system.box]}
    object.__setattr__(system, "spec", spec)
    return system


def system_from_spec(spec: dict, base_dir=None) -> ParametricSystem:
    builder = spec.get("builder")
    if builder == "wave":
        dim = int(spec["dim"])
        if dim % 2:
            raise ValueError("wave system dimension must be even")
        return build_wave_system(dim // 2, float(spec["T"]), spec["box"])
    if builder == "heat":
        return build_heat_system(int(spec["dim"]), float(spec["T"]), spec["box"])
    if builder == "files":
        return system_from_files(spec["files"], float(spec["T"]), spec["box"], base_dir=base_dir)
    raise ValueError(f"unknown system builder {builder!r}")
