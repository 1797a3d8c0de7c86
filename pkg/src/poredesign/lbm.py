"""Single-phase D3Q19 BGK lattice-Boltzmann solver for pressure-driven flow.

Populations are stored only at fluid nodes, as a ``(19, n_fluid)`` array.
Streaming, half-way bounce-back at solid faces, specular reflection at slip
walls and periodic wrap-around are all folded into a single precomputed
gather index, so one timestep is: collide, gather, then the Zou-He pressure
closure on the inlet/outlet faces.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ConvergenceError, DivergenceError, FormatError, ImpermeableError
from .fileio import atomic_write_bytes
from .grid import VoxelGrid

log = logging.getLogger(__name__)

# rest, 6 axis neighbours, 12 edge diagonals; opposite pairs are adjacent
E = np.array(
    [
        [0, 0, 0],
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0],
        [1, 0, 1], [-1, 0, -1], [1, 0, -1], [-1, 0, 1],
        [0, 1, 1], [0, -1, -1], [0, 1, -1], [0, -1, 1],
    ],
    dtype=np.int64,
)
W = np.array([1 / 3] + [1 / 18] * 6 + [1 / 36] * 12)
Q = 19
CS2 = 1.0 / 3.0
CS = np.sqrt(CS2)
OPP = np.array([int(np.flatnonzero((E == -e).all(axis=1))[0]) for e in E])
_EF = E.astype(np.float64)

AXIS_NAMES = ("x", "y", "z")
LATERAL_MODES = ("no_slip", "natural_slip", "periodic")
_BC_FOR_MODE = {"no_slip": "wall", "natural_slip": "slip", "periodic": "periodic"}


def mirror(q: int, axes) -> int:
    """Index of the direction obtained by negating ``e_q`` along ``axes``."""
    e = E[q].copy()
    for a in axes:
        e[a] = -e[a]
    return int(np.flatnonzero((E == e).all(axis=1))[0])


def tau_from_viscosity(nu_l: float) -> float:
    return 0.5 + nu_l / CS2


def equilibrium(rho, u) -> np.ndarray:
    """Second-order BGK equilibrium.

    ``rho`` has shape ``S`` (scalar allowed) and ``u`` has shape ``(3, *S)``;
    the result has shape ``(19, *S)``.
    """
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.shape[0] != 3:
        raise ValueError(f"velocity must have leading dimension 3, got {u.shape}")
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    speed = np.sqrt((u * u).sum(axis=0))
    if np.any(speed > 0.1):
        warnings.warn("lattice speed above 0.1: outside the low-Mach regime", RuntimeWarning, stacklevel=2)
    eu = np.tensordot(_EF, u, axes=(1, 0))
    usq = (u * u).sum(axis=0)
    wshape = (Q,) + (1,) * rho.ndim
    return W.reshape(wshape) * rho * (1.0 + eu / CS2 + eu**2 / (2 * CS2**2) - usq / (2 * CS2))


def moments(f) -> tuple[np.ndarray, np.ndarray]:
    """Density and velocity of populations ``f`` with shape ``(19, ...)``."""
    f = np.asarray(f, dtype=np.float64)
    rho = f.sum(axis=0)
    if np.any(rho <= 0):
        raise DivergenceError("non-positive density")
    j = np.tensordot(_EF.T, f, axes=(1, 0))
    return rho, j / rho


@dataclass
class FlowConfig:
    axis: int = 0
    nu_l: float = 1.0 / 6.0
    rho_in: float = 1.0005
    rho_out: float = 0.9995
    lateral: str = "no_slip"
    tol: float = 1e-6
    max_steps: int = 200_000
    check_every: int = 100

    @classmethod
    def from_delta(cls, delta_rho: float = 1e-3, **kw) -> "FlowConfig":
        return cls(rho_in=1.0 + delta_rho / 2, rho_out=1.0 - delta_rho / 2, **kw)

    @property
    def tau(self) -> float:
        return tau_from_viscosity(self.nu_l)

    @property
    def delta_rho(self) -> float:
        return self.rho_in - self.rho_out

    def validate(self) -> None:
        if self.axis not in (0, 1, 2):
            raise ConfigError(f"flow axis must be 0, 1 or 2, got {self.axis}")
        if not self.nu_l > 0:
            raise ConfigError("lattice viscosity must be positive (tau > 1/2)")
        if not self.rho_in > self.rho_out > 0:
            raise ConfigError("need rho_in > rho_out > 0")
        if self.lateral not in LATERAL_MODES:
            raise ConfigError(f"lateral mode must be one of {LATERAL_MODES}")
        if not self.tol > 0:
            raise ConfigError("tolerance must be positive")
        if self.max_steps < 1 or self.check_every < 1:
            raise ConfigError("max_steps and check_every must be positive")

    def boundaries(self) -> tuple[str, str, str]:
        bc = [_BC_FOR_MODE[self.lateral]] * 3
        bc[self.axis] = "open"
        return tuple(bc)

    def pressure_gradient(self, length: int) -> float:
        """Lattice pressure gradient c_s^2 (rho_out - rho_in) / (L - 1)."""
        return CS2 * (self.rho_out - self.rho_in) / (length - 1)


@dataclass(frozen=True)
class PhysicalFluid:
    viscosity: float = 1.0e-3  # Pa s
    density: float = 1000.0  # kg / m^3

    def __post_init__(self):
        if not (self.viscosity > 0 and self.density > 0):
            raise ValueError("fluid viscosity and density must be positive")


class LatticeField:
    """D3Q19 populations on the fluid nodes of a voxel mask.

    ``boundaries`` gives one of ``periodic``, ``wall`` (half-way bounce-back),
    ``slip`` (specular reflection) or ``open`` (pressure faces) per axis.
    """

    def __init__(self, fluid: np.ndarray, boundaries=("periodic",) * 3, tau: float = 1.0):
        fluid = np.asarray(fluid, dtype=bool)
        if fluid.ndim != 3:
            raise ValueError("fluid mask must be 3D")
        if tau <= 0.5:
            raise ConfigError("tau must exceed 1/2")
        self.shape = fluid.shape
        self.fluid = fluid
        self.boundaries = tuple(boundaries)
        self.tau = float(tau)
        self.omega = 1.0 / self.tau
        self.nodes = np.argwhere(fluid)
        self.n = len(self.nodes)
        self.index = np.full(self.shape, -1, dtype=np.int64)
        self.index[tuple(self.nodes.T)] = np.arange(self.n)
        self.src = self._build_gather()
        self.faces = self._build_faces()
        self.f = np.zeros((Q, self.n))

    def _lookup(self, pos):
        return self.index[pos[:, 0], pos[:, 1], pos[:, 2]]

    def _build_gather(self) -> np.ndarray:
        n, nodes, shape = self.n, self.nodes, np.array(self.shape)
        ids = np.arange(n)
        src = np.empty((Q, n), dtype=np.int64)
        for q in range(Q):
            s = nodes - E[q]
            unknown = np.zeros(n, dtype=bool)
            bounce = np.zeros(n, dtype=bool)
            slip_axes = []
            for a, kind in enumerate(self.boundaries):
                out = (s[:, a] < 0) | (s[:, a] >= shape[a])
                if kind == "periodic":
                    s[:, a] %= shape[a]
                elif kind == "open":
                    unknown |= out
                elif kind == "wall":
                    bounce |= out
                elif kind == "slip":
                    slip_axes.append((a, out))
                else:
                    raise ConfigError(f"unknown boundary kind {kind!r}")
            bounce &= ~unknown
            qsrc = np.full(n, q)
            for a, out in slip_axes:
                # reflected particle left the node's own layer along axis a
                s[out, a] = nodes[out, a]
            regular = ~(unknown | bounce)
            if slip_axes:
                reflected = np.zeros(n, dtype=bool)
                for _, out in slip_axes:
                    reflected |= out
                reflected &= regular
                for combo in {tuple(a for a, out in slip_axes if out[i]) for i in np.flatnonzero(reflected)}:
                    sel = reflected.copy()
                    for a, out in slip_axes:
                        sel &= out if a in combo else ~out
                    qsrc[sel] = mirror(q, combo)
            j = np.full(n, -1, dtype=np.int64)
            j[regular] = self._lookup(s[regular])
            bounce |= regular & (j < 0)
            src[q] = qsrc * n + j
            src[q, bounce] = OPP[q] * n + ids[bounce]
            src[q, unknown] = q * n + ids[unknown]
        return src.ravel()

    def _build_faces(self) -> list[dict]:
        faces = []
        for a, kind in enumerate(self.boundaries):
            if kind != "open":
                continue
            tangential = [t for t in range(3) if t != a]
            for coord, d in ((0, 1), (self.shape[a] - 1, -1)):
                idx = np.flatnonzero(self.nodes[:, a] == coord)
                unk = np.flatnonzero(E[:, a] == d)
                faces.append(
                    {
                        "axis": a,
                        "coord": coord,
                        "dir": d,
                        "idx": idx,
                        "zero": np.flatnonzero(E[:, a] == 0),
                        "out": np.flatnonzero(E[:, a] == -d),
                        "unk": unk,
                        "opp": OPP[unk],
                        "coef": 6.0 * W[unk],
                        "et": _EF[np.ix_(unk, tangential)],
                        "zt": _EF[np.ix_(np.flatnonzero(E[:, a] == 0), tangential)],
                        "rho": None,
                    }
                )
        return faces

    def set_face_densities(self, rho_lo: float, rho_hi: float) -> None:
        for face in self.faces:
            face["rho"] = rho_lo if face["dir"] == 1 else rho_hi

    def init_equilibrium(self, rho, u=None) -> None:
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (self.n,))
        u = np.zeros((3, self.n)) if u is None else np.broadcast_to(np.asarray(u, dtype=np.float64).reshape(3, -1), (3, self.n))
        self.f = np.ascontiguousarray(equilibrium(rho, u))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return moments(self.f)

    def collide(self) -> None:
        f = self.f
        rho = f.sum(axis=0)
        u = (_EF.T @ f) / rho
        eu = _EF @ u
        usq = (u * u).sum(axis=0)
        feq = eu * (4.5 * eu + 3.0)
        feq += 1.0 - 1.5 * usq
        feq *= W[:, None] * rho
        f += self.omega * (feq - f)

    def stream(self) -> None:
        self.f = self.f.ravel()[self.src].reshape(Q, self.n)

    def apply_pressure(self) -> None:
        f = self.f
        for face in self.faces:
            idx, rho = face["idx"], face["rho"]
            if rho is None or idx.size == 0:
                continue
            fz = f[np.ix_(face["zero"], idx)]
            s0 = fz.sum(axis=0)
            sout = f[np.ix_(face["out"], idx)].sum(axis=0)
            # inward normal speed; tangential velocity is zero on the face
            un = 1.0 - (s0 + 2.0 * sout) / rho
            nt = 0.5 * (face["zt"].T @ fz)
            f[np.ix_(face["unk"], idx)] = (
                f[np.ix_(face["opp"], idx)] + np.outer(face["coef"], rho * un) - face["et"] @ nt
            )

    def step(self) -> None:
        self.collide()
        self.stream()
        self.apply_pressure()

    def check(self, step: int) -> None:
        if not np.isfinite(self.f).all():
            raise DivergenceError(f"non-finite population at step {step}", step=step)
        if self.f.sum(axis=0).min() <= 0:
            raise DivergenceError(f"non-positive density at step {step}", step=step)

    def velocity_field(self) -> np.ndarray:
        """Velocity on the full grid, shape ``(3, nx, ny, nz)``; zero at solids."""
        _, u = self.moments()
        out = np.zeros((3,) + self.shape)
        out[:, self.nodes[:, 0], self.nodes[:, 1], self.nodes[:, 2]] = u
        return out

    def density_field(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[tuple(self.nodes.T)] = self.f.sum(axis=0)
        return out

    def mean_velocity(self) -> np.ndarray:
        """Superficial (Darcy) velocity: the sum over fluid nodes divided by all nodes."""
        _, u = self.moments()
        # numpy reductions along contiguous axes use pairwise summation
        return u.sum(axis=1) / float(np.prod(self.shape))


@dataclass
class FlowResult:
    u_avg: np.ndarray
    u_pore: np.ndarray
    steps: int
    residual: float
    velocity: np.ndarray | None = field(default=None, repr=False)

    def summary(self, cfg: FlowConfig) -> dict:
        return {
            "axis": AXIS_NAMES[cfg.axis],
            "bc_mode": cfg.lateral,
            "nu_l": cfg.nu_l,
            "delta_rho": cfg.delta_rho,
            "steps": self.steps,
            "residual": self.residual,
            "u_avg": [float(v) for v in self.u_avg],
        }


def percolates(fluid: np.ndarray, axis: int, periodic_axes=()) -> bool:
    """6-connected pore path between the two faces normal to ``axis``."""
    labels, n = ndimage.label(fluid)
    if n == 0:
        return False
    parent = np.arange(n + 1)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a in periodic_axes:
        lo = np.take(labels, 0, axis=a)
        hi = np.take(labels, -1, axis=a)
        both = (lo > 0) & (hi > 0)
        for p, r in set(zip(lo[both].tolist(), hi[both].tolist())):
            rp, rr = find(p), find(r)
            if rp != rr:
                parent[rp] = rr
    inlet = {find(i) for i in np.unique(np.take(labels, 0, axis=axis)) if i}
    outlet = {find(i) for i in np.unique(np.take(labels, -1, axis=axis)) if i}
    return bool(inlet & outlet)


def run_to_steady(g: VoxelGrid, cfg: FlowConfig, keep_field: bool = False, boundaries=None) -> FlowResult:
    """Drive flow along ``cfg.axis`` until the mean velocity stops changing.

    ``boundaries`` overrides the per-axis lateral conditions implied by
    ``cfg.lateral``; the flow axis is always open.
    """
    cfg.validate()
    fluid = g.pore_mask
    if fluid.shape[cfg.axis] < 2:
        raise ConfigError("need at least two nodes along the flow axis")
    bc = list(cfg.boundaries() if boundaries is None else boundaries)
    if len(bc) != 3 or any(b not in ("wall", "slip", "periodic", "open") for b in bc):
        raise ConfigError(f"bad boundary spec {boundaries!r}")
    bc[cfg.axis] = "open"
    periodic = [a for a in range(3) if a != cfg.axis and bc[a] == "periodic"]
    if not percolates(fluid, cfg.axis, periodic):
        raise ImpermeableError(f"no pore path along {AXIS_NAMES[cfg.axis]}")
    lat = LatticeField(fluid, tuple(bc), cfg.tau)
    lat.set_face_densities(cfg.rho_in, cfg.rho_out)
    length = fluid.shape[cfg.axis]
    ramp = cfg.rho_in + (cfg.rho_out - cfg.rho_in) * lat.nodes[:, cfg.axis] / (length - 1)
    lat.init_equilibrium(ramp)

    prev = None
    residual = np.inf
    step = 0
    while step < cfg.max_steps:
        for _ in range(min(cfg.check_every, cfg.max_steps - step)):
            lat.step()
        step += min(cfg.check_every, cfg.max_steps - step)
        lat.check(step)
        u = lat.mean_velocity()
        mag = float(np.sqrt(u @ u))
        if prev is not None:
            residual = abs(mag - prev) / mag if mag > 0 else (0.0 if prev == 0 else np.inf)
            if residual < cfg.tol:
                break
        prev = mag
    else:
        raise ConvergenceError(
            f"no steady state after {step} steps (residual {residual:.3e})", residual=residual, steps=step
        )
    u_avg = lat.mean_velocity()
    u_pore = u_avg * float(np.prod(lat.shape)) / lat.n
    log.debug("axis %s: %d steps, residual %.2e", AXIS_NAMES[cfg.axis], step, residual)
    return FlowResult(u_avg, u_pore, step, float(residual), lat.velocity_field() if keep_field else None)


VXF_MAGIC = b"VXF1"
_VXF_HEADER = struct.Struct("<4s3I")


def write_velocity(velocity: np.ndarray, path: str | Path) -> None:
    """Dump a ``(3, nx, ny, nz)`` velocity field as VXF1 (x-fastest, 3 doubles per node)."""
    _, nx, ny, nz = velocity.shape
    body = np.asarray(velocity, dtype="<f8").transpose(3, 2, 1, 0).tobytes()
    atomic_write_bytes(Path(path), _VXF_HEADER.pack(VXF_MAGIC, nx, ny, nz) + body)


def read_velocity(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _VXF_HEADER.size:
        raise FormatError("truncated VXF1 header")
    magic, nx, ny, nz = _VXF_HEADER.unpack_from(data)
    if magic != VXF_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    body = data[_VXF_HEADER.size :]
    if len(body) != 24 * nx * ny * nz:
        raise FormatError("VXF1 body length does not match dimensions")
    return np.frombuffer(body, dtype="<f8").reshape(nz, ny, nx, 3).transpose(3, 2, 1, 0).copy()
