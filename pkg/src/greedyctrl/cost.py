"""Operation-count models for the offline, online and naive procedures.

``C`` is the price of one time integration with a dense LU-factored
implicit step: ``2/3 N^3`` for the factorisation plus ``4 N^2`` per step.
Every formula counts in units that multiply ``C`` (integrations) plus
lower-order linear-algebra terms; :func:`measure` compares the former with
the integration counters recorded at run time.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    N: int
    k: int
    n: int
    T: float
    dt: float
    M: int = 1
    L: int = 1

    def __post_init__(self):
        for name in ("N", "k", "n", "M", "L"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")

    @property
    def steps(self) -> float:
        return self.T / self.dt

    @property
    def C(self) -> float:
        N = self.N
        return (2.0 / 3.0) * N**3 + self.steps * 4.0 * N**2


def offline_cost(m: CostModel) -> float:
    """Initial scan, grid updates, Gram-Schmidt work and snapshot solves."""
    if m.n > min(m.N, m.k):
        raise ValueError("n cannot exceed min(N, k)")
    C, N, k, n = m.C, m.N, m.k, m.n
    return (
        k * (C + 3 * N)
        + n * (k - n / 2) * (2 * C + 7 * N)
        + 2 * n**2 * N * (k - (2 / 3) * n)
        + 2 * C * n * (N - n / 2)
        + (4 / 3) * N**3 * n
    )


def online_cost(m: CostModel) -> float:
    return m.C * (1 + 2 * m.n) + 4 * m.N * m.n**2 - 2 * m.n**2 / 3


def naive_cost(m: CostModel) -> float:
    """Assemble and solve at every grid point."""
    return m.C * (m.k + 2 * m.k * m.N)


def parameter_independent_cost(m: CostModel) -> float:
    """Dominant offline term when ``A`` and ``B`` do not depend on the parameter."""
    return m.C * (m.k + 2 * m.n + 2 * m.N)


def exact_control_cost(m: CostModel) -> float:
    """One free solve, a Gramian assembly and a dense solve, for a single parameter."""
    return m.C * (1 + 2 * m.N) + (2 / 3) * m.N**3


# Integration counts (the C multipliers) for comparison with the counters.

def offline_sweeps(m: CostModel) -> float:
    n = m.n
    return m.k + 2 * n * (m.k - n / 2) + 2 * n * (m.N - n / 2)


def online_sweeps(m: CostModel) -> int:
    return 1 + 2 * m.n


def naive_sweeps(m: CostModel) -> int:
    return m.k * (1 + 2 * m.N)


_SWEEP_MODELS = {"offline": offline_sweeps, "online": online_sweeps, "naive": naive_sweeps}
_COST_MODELS = {"offline": offline_cost, "online": online_cost, "naive": naive_cost}


def measure(phase: str, m: CostModel, counters: dict, elapsed: float | None = None) -> dict:
    """Model prediction next to the measured number of integrations.

    Only ``free``, ``adjoint`` and ``forward`` sweeps are algorithmic; other
    counter kinds (e.g. the online verification solve) are reported apart.
    """
    if phase not in _SWEEP_MODELS:
        raise ValueError(f"unknown phase {phase!r}")
    core = sum(counters.get(kind, 0) for kind in ("free", "adjoint", "forward"))
    extra = sum(v for kind, v in counters.items() if kind not in ("free", "adjoint", "forward"))
    predicted = _SWEEP_MODELS[phase](m)
    return {
        "phase": phase,
        "model_sweeps": float(predicted),
        "measured_sweeps": int(core),
        "extra_sweeps": int(extra),
        "ratio": core / predicted if predicted else float("nan"),
        "model_flops": _COST_MODELS[phase](m),
        "elapsed": elapsed,
    }


def write_table(path, rows: list[dict]) -> None:
    cols = ["phase", "model_sweeps", "measured_sweeps", "extra_sweeps", "ratio", "model_flops", "elapsed"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join("" if r.get(c) is None else str(r.get(c)) for c in cols) + "\n")
