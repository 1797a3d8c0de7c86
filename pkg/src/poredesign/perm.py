"""Permeability tensors from LBM runs via Darcy's law."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateGradientError,
    ImpermeableError,
    InconsistentRunError,
    PoreDesignError,
    SolverError,
)
from .grid import VoxelGrid, porosity
from .lbm import AXIS_NAMES, FlowConfig, FlowResult, run_to_steady

CSV_COLUMNS = [
    "sample_id", "n_F", "K11_lu", "K22_lu", "K33_lu", "K12_lu", "K13_lu", "K23_lu",
    "steps_x", "steps_y", "steps_z", "status",
]


def diagonal_component(u_avg: float, grad_p: float, nu_l: float) -> float:
    """(K_l)_ii = -nu_l * u_avg,i / grad_i p_l."""
    if grad_p == 0:
        raise ValueError("pressure gradient must be non-zero")
    if not nu_l > 0:
        raise ValueError("lattice viscosity must be positive")
    k = -nu_l * u_avg / grad_p
    if k < 0:
        raise InconsistentRunError(f"negative permeability {k:.3e}: flow runs with the pressure gradient")
    return k + 0.0


def offdiagonal_solve(grad_p, u_slip, k_diag, nu_l: float) -> tuple[float, float, float]:
    """Solve for (K_12, K_13, K_23) from the slip-wall runs.

    ``grad_p[i]`` is the imposed gradient of the run along axis ``i`` and
    ``u_slip[i]`` that run's mean velocity vector; row ``i`` of the system
    uses its component ``i``.
    """
    g = np.asarray(grad_p, dtype=np.float64)
    u = np.asarray(u_slip, dtype=np.float64)
    kd = np.asarray(k_diag, dtype=np.float64)
    u_axis = np.diag(u) if u.ndim == 2 else u
    a = np.array([[g[1], g[2], 0.0], [g[0], 0.0, g[2]], [0.0, g[0], g[1]]])
    # det = -2 g1 g2 g3
    if np.any(g == 0):
        raise DegenerateGradientError("all three pressure gradients must be non-zero")
    rhs = -nu_l * u_axis - kd * g
    k12, k13, k23 = np.linalg.solve(a, rhs)
    return float(k12), float(k13), float(k23)


@dataclass
class PermeabilityTensor:
    lattice: np.ndarray
    diagonal_only: bool = True

    def __post_init__(self):
        k = np.array(self.lattice, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError("permeability tensor must be 3x3")
        k = 0.5 * (k + k.T)
        if self.diagonal_only:
            k = np.diag(np.diag(k))
        if np.any(np.diag(k) < 0):
            raise ValueError("diagonal permeabilities must be non-negative")
        self.lattice = k

    @classmethod
    def from_components(cls, diag, off=None) -> "PermeabilityTensor":
        k = np.diag(np.asarray(diag, dtype=np.float64))
        if off is not None:
            k12, k13, k23 = off
            k[0, 1] = k[1, 0] = k12
            k[0, 2] = k[2, 0] = k13
            k[1, 2] = k[2, 1] = k23
        return cls(k, diagonal_only=off is None)

    def physical(self, spacing) -> np.ndarray:
        return to_physical(self, spacing)


def to_physical(k: PermeabilityTensor | np.ndarray, spacing) -> np.ndarray:
    """K_ij = (K_l)_ij * dx_i * dx_j in m^2."""
    dx = np.asarray(spacing, dtype=np.float64)
    if dx.shape != (3,) or np.any(dx <= 0):
        raise ValueError("spacing must be three positive lengths")
    kl = k.lattice if isinstance(k, PermeabilityTensor) else np.asarray(k, dtype=np.float64)
    return kl * np.outer(dx, dx)


@dataclass
class Homogenization:
    tensor: PermeabilityTensor
    porosity: float
    runs: dict = field(default_factory=dict)
    steps: list = field(default_factory=lambda: [0, 0, 0])
    axes: tuple = (0, 1, 2)

    @property
    def status(self) -> str:
        diag = np.diag(self.tensor.lattice)
        return "ok" if any(diag[a] > 0 for a in self.axes) else "impermeable"

    def record(self) -> dict:
        k = self.tensor.lattice
        return {
            "n_F": self.porosity,
            "K_lu": {f"K{i + 1}{j + 1}": float(k[i, j]) for i in range(3) for j in range(i, 3)},
            "axes": [AXIS_NAMES[a] for a in self.axes],
            "full_tensor": not self.tensor.diagonal_only,
            "runs": self.runs,
            "status": self.status,
        }


def _run(g: VoxelGrid, cfg: FlowConfig) -> FlowResult | None:
    try:
        return run_to_steady(g, cfg)
    except ImpermeableError:
        return None
    except PoreDesignError as exc:
        raise SolverError(f"{AXIS_NAMES[cfg.axis]}/{cfg.lateral}: {exc}", axis=cfg.axis, mode=cfg.lateral) from exc


def homogenize(
    g: VoxelGrid,
    base: FlowConfig | None = None,
    full_tensor: bool = False,
    axes: Sequence[int] = (0, 1, 2),
) -> Homogenization:
    """Diagonal permeabilities from no-slip runs, plus off-diagonals from slip runs.

    Axes without a percolating pore path get K_ii = 0.
    """
    base = base or FlowConfig()
    axes = tuple(sorted(set(axes)))
    if full_tensor and axes != (0, 1, 2):
        raise ValueError("the full tensor needs runs along all three axes")
    diag = np.zeros(3)
    grads = np.zeros(3)
    steps = [0, 0, 0]
    runs = {}
    for a in axes:
        cfg = FlowConfig(**{**base.__dict__, "axis": a, "lateral": "no_slip"})
        grads[a] = cfg.pressure_gradient(g.dims[a])
        res = _run(g, cfg)
        if res is not None:
            diag[a] = diagonal_component(res.u_avg[a], grads[a], cfg.nu_l)
            steps[a] = res.steps
            runs[f"{AXIS_NAMES[a]}_no_slip"] = res.summary(cfg)
    off = None
    if full_tensor:
        u_slip = np.zeros((3, 3))
        for a in axes:
            cfg = FlowConfig(**{**base.__dict__, "axis": a, "lateral": "natural_slip"})
            res = _run(g, cfg)
            if res is not None:
                u_slip[a] = res.u_avg
                runs[f"{AXIS_NAMES[a]}_natural_slip"] = res.summary(cfg)
        off = offdiagonal_solve(grads, u_slip, diag, base.nu_l)
    tensor = PermeabilityTensor.from_components(diag, off)
    return Homogenization(tensor, porosity(g), runs, steps, axes)


def csv_row(sample_id: str, h: Homogenization | None, status: str | None = None, n_f: float | None = None) -> list:
    if h is None:
        return [sample_id, "" if n_f is None else repr(n_f)] + [""] * 9 + [status or "error"]
    k = h.tensor.lattice
    diag = [repr(float(k[a, a])) if a in h.axes else "" for a in range(3)]
    if h.tensor.diagonal_only:
        off = ["0.0"] * 3 if h.axes == (0, 1, 2) else [""] * 3
    else:
        off = [repr(float(k[0, 1])), repr(float(k[0, 2])), repr(float(k[1, 2]))]
    steps = [str(h.steps[a]) if a in h.axes else "" for a in range(3)]
    return [sample_id, repr(h.porosity)] + diag + off + steps + [status or h.status]


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()
