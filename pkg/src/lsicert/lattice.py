"""Discrete-torus geometry, heat-kernel covariance schedules, and exact lattice sums.

The index space is the two-dimensional discrete torus with ``side_sites``
sites per axis (unit lattice after rescaling by the mesh).  The coupling
operator A = -laplacian + eps^2 m^2 is block-circulant, so its full
symmetric eigendecomposition is the torus Fourier basis; every kernel,
row sum, diagonal value and sandwiched eigenvalue used downstream is
evaluated exactly through that symbol instead of a generic dense solve.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

__all__ = [
    "LatticeTorus",
    "LatticeOperator",
    "CovarianceSchedule",
    "HeatKernelTable",
    "AppendixSums",
    "build_torus",
    "build_laplacian",
    "build_operator_A",
    "schedule_heat",
    "schedule_conservative",
    "schedule_piecewise",
    "infinite_heat_kernel",
    "torus_heat_kernel",
    "image_sum_heat_kernel",
    "log_covariance_check",
    "lattice_sums",
    "ctsdiff_fourpoint_min",
    "characteristic_length",
    "LOG_COV_BAND",
]

# Deviation band for C_t(0,0) - (1/2pi) log ell_t, calibrated once on a
# 64x64 torus at mesh 1, mass 0.25 (measured range [0.0, 0.306]) and frozen.
LOG_COV_BAND = (-0.05, 0.50)

_SYM_TOL = 1e-12


class LatticeError(ValueError):
    """Inconsistent lattice geometry or operator data."""


@dataclass(frozen=True)
class LatticeTorus:
    """Square discrete torus: (L/eps)^2 sites on a side-L box with mesh eps."""

    side_sites: int
    mesh: float
    physical_side: float

    def __post_init__(self):
        if self.side_sites < 2:
            raise LatticeError(f"side_sites must be >= 2, got {self.side_sites}")
        if self.mesh <= 0 or self.physical_side <= 0:
            raise LatticeError("mesh and physical side must be positive")
        if abs(self.physical_side - self.mesh * self.side_sites) > 1e-12 * self.physical_side:
            raise LatticeError(
                f"physical side {self.physical_side} != mesh {self.mesh} * "
                f"side_sites {self.side_sites}"
            )

    @property
    def n_sites(self) -> int:
        return self.side_sites * self.side_sites

    def site_coords(self) -> np.ndarray:
        """(n_sites, 2) integer coordinates, row-major (i = r*side + c)."""
        n = self.side_sites
        r, c = np.divmod(np.arange(self.n_sites), n)
        return np.stack([r, c], axis=1)

    def site_index(self, r: int, c: int) -> int:
        n = self.side_sites
        return (r % n) * n + (c % n)

    def neighbors(self, i: int) -> list[int]:
        n = self.side_sites
        r, c = divmod(i, n)
        return [
            self.site_index(r + 1, c),
            self.site_index(r - 1, c),
            self.site_index(r, c + 1),
            self.site_index(r, c - 1),
        ]

    def displacement(self, i: int, j: int) -> tuple[int, int]:
        """Displacement j - i as torus representatives in (-n/2, n/2]."""
        n = self.side_sites
        dr = (j // n - i // n) % n
        dc = (j % n - i % n) % n
        if dr > n // 2:
            dr -= n
        if dc > n // 2:
            dc -= n
        return dr, dc

    def torus_distance(self, i: int, j: int) -> float:
        """Euclidean norm of the minimal displacement representative."""
        n = self.side_sites
        dr = abs(j // n - i // n) % n
        dc = abs(j % n - i % n) % n
        dr = min(dr, n - dr)
        dc = min(dc, n - dc)
        return math.hypot(dr, dc)

    def displacement_index_table(self) -> np.ndarray:
        """(N, N) int32 table: entry (i, j) = flat kernel index of j - i."""
        n = self.side_sites
        idx = np.arange(self.n_sites, dtype=np.int64)
        r, c = np.divmod(idx, n)
        dr = (r[None, :] - r[:, None]) % n
        dc = (c[None, :] - c[:, None]) % n
        return (dr * n + dc).astype(np.int32)


def build_torus(side_sites: int, mesh: float, physical_side: float) -> LatticeTorus:
    return LatticeTorus(side_sites, mesh, physical_side)


def _laplacian_symbol(n: int) -> np.ndarray:
    """Eigenvalues of -laplacian on the torus Fourier grid, shape (n, n)."""
    k = 2.0 * np.pi * np.arange(n) / n
    lam1 = 2.0 - 2.0 * np.cos(k)
    return lam1[:, None] + lam1[None, :]


def _kernel_from_symbol(symbol: np.ndarray) -> np.ndarray:
    """Row (over displacements, shape (n, n)) of the BCCB matrix with given symbol."""
    return np.real(np.fft.ifft2(symbol))


def _dense_from_kernel(kernel: np.ndarray, disp_table: np.ndarray) -> np.ndarray:
    return kernel.reshape(-1)[disp_table]


@dataclass(frozen=True)
class LatticeOperator:
    """Dense symmetric operator over sites with a role tag."""

    matrix: np.ndarray
    kind: str
    torus: LatticeTorus | None = None
    mass: float | None = None

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise LatticeError("operator matrix must be square")
        scale = max(np.max(np.abs(m)), 1.0)
        if np.max(np.abs(m - m.T)) > _SYM_TOL * scale:
            raise LatticeError(f"{self.kind} operator is not symmetric")
        if self.kind == "laplacian":
            rs = np.max(np.abs(m.sum(axis=1)))
            if rs > 1e-10:
                raise LatticeError(f"laplacian row sums nonzero: {rs}")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def build_laplacian(torus: LatticeTorus) -> LatticeOperator:
    """Unit-lattice laplacian Delta (negative semidefinite), dense."""
    n = torus.side_sites
    kernel = np.zeros((n, n))
    kernel[0, 0] = -4.0
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        kernel[dr % n, dc % n] += 1.0
    mat = _dense_from_kernel(kernel, torus.displacement_index_table())
    return LatticeOperator(mat, "laplacian", torus=torus)


def build_operator_A(torus: LatticeTorus, mass: float) -> LatticeOperator:
    """A = -Delta + eps^2 m^2 on the unit lattice; positive definite for m > 0."""
    if mass <= 0:
        raise LatticeError("mass must be positive (massless case unsupported)")
    lap = build_laplacian(torus)
    shift = (torus.mesh * mass) ** 2
    mat = -lap.matrix + shift * np.eye(torus.n_sites)
    return LatticeOperator(mat, "A", torus=torus, mass=mass)


@dataclass(frozen=True)
class HeatKernelTable:
    """Heat-kernel values indexed by displacement (shape (n, n)) at one time."""

    values: np.ndarray
    t: float
    flavor: str  # infinite_plane | torus | torus_mean_zero


class CovarianceSchedule:
    """Family t -> (Q_t, Cdot_t, C_t) decomposing C_inf = A^{-1}.

    heat mode:          Q_t = e^{-tA/2}, Cdot_t = e^{-tA}, C_t = A^{-1}(1 - e^{-tA})
    conservative mode:  same symbols with the constant (k=0) mode projected out
    piecewise mode:     Cdot_t piecewise constant from user PSD blocks

    heat / conservative schedules are evaluable at arbitrary t >= 0 (the grid
    only records intended evaluation points); all spectral data is exact via
    the torus Fourier symbol.
    """

    def __init__(
        self,
        mode: str,
        torus: LatticeTorus | None = None,
        mass: float | None = None,
        time_grid: Sequence[float] | None = None,
        blocks: Sequence[tuple[float, np.ndarray]] | None = None,
    ):
        self.mode = mode
        self.torus = torus
        self.mass = mass
        self.time_grid = np.asarray(list(time_grid) if time_grid is not None else [])
        if self.time_grid.size and (
            np.any(np.diff(self.time_grid) <= 0) or np.any(self.time_grid < 0)
        ):
            raise LatticeError("time grid must be strictly increasing and nonnegative")
        if mode in ("heat", "conservative_heat"):
            assert torus is not None and mass is not None
            n = torus.side_sites
            self._symbol = _laplacian_symbol(n) + (torus.mesh * mass) ** 2
            self._mode_mask = np.ones((n, n), dtype=bool)
            if mode == "conservative_heat":
                self._mode_mask[0, 0] = False
            self._disp = None  # lazy
        elif mode == "piecewise_discrete":
            assert blocks is not None
            self._blocks = []
            for dur, matrix in blocks:
                matrix = np.asarray(matrix, dtype=float)
                if dur <= 0:
                    raise LatticeError("block duration must be positive")
                w = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
                if w.min() < -1e-10 * max(w.max(), 1.0):
                    raise LatticeError(
                        f"piecewise block not PSD: offending eigenvalue {w.min():.3e}"
                    )
                self._blocks.append((float(dur), 0.5 * (matrix + matrix.T)))
            self._edges = np.concatenate([[0.0], np.cumsum([d for d, _ in self._blocks])])
        else:
            raise LatticeError(f"unknown schedule mode {mode}")

    # -- spectral plumbing (heat / conservative) --------------------------

    def _sym(self) -> np.ndarray:
        return self._symbol

    def _active(self) -> np.ndarray:
        return self._mode_mask

    def _kernel(self, f) -> np.ndarray:
        """Displacement kernel of the BCCB matrix with symbol f(lambda)."""
        vals = np.where(self._mode_mask, f(self._symbol), 0.0)
        return _kernel_from_symbol(vals)

    def _disp_table(self) -> np.ndarray:
        if self._disp is None:
            self._disp = self.torus.displacement_index_table()
        return self._disp

    def _dense(self, f) -> np.ndarray:
        return _dense_from_kernel(self._kernel(f), self._disp_table())

    # -- public evaluators -------------------------------------------------

    @property
    def lambda_min(self) -> float:
        """Smallest eigenvalue of A on the active subspace."""
        if self.mode in ("heat", "conservative_heat"):
            return float(self._symbol[self._mode_mask].min())
        raise LatticeError("lambda_min undefined for piecewise schedules")

    @property
    def lambda_max(self) -> float:
        if self.mode in ("heat", "conservative_heat"):
            return float(self._symbol[self._mode_mask].max())
        raise LatticeError("lambda_max undefined for piecewise schedules")

    def _check_heat(self):
        if self.mode not in ("heat", "conservative_heat"):
            raise LatticeError(f"operation requires heat-type schedule, mode={self.mode}")

    def q_kernel(self, t: float) -> np.ndarray:
        self._check_heat()
        return self._kernel(lambda lam: np.exp(-0.5 * t * lam))

    def cdot_kernel(self, t: float) -> np.ndarray:
        self._check_heat()
        return self._kernel(lambda lam: np.exp(-t * lam))

    def c_kernel(self, t: float) -> np.ndarray:
        self._check_heat()
        if math.isinf(t):
            return self._kernel(lambda lam: 1.0 / lam)
        return self._kernel(lambda lam: -np.expm1(-t * lam) / lam)

    def c_diag(self, t) -> np.ndarray | float:
        """C_t(0,0); vectorised over an array of times."""
        self._check_heat()
        lam = self._symbol[self._mode_mask]
        t_arr = np.asarray(t, dtype=float)
        vals = np.where(
            np.isinf(t_arr)[..., None],
            1.0 / lam,
            -np.expm1(-t_arr[..., None] * lam) / lam,
        )
        out = vals.mean(axis=-1) * lam.size / self.torus.n_sites
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out

    def cdot_diag(self, t) -> np.ndarray | float:
        self._check_heat()
        lam = self._symbol[self._mode_mask]
        t_arr = np.asarray(t, dtype=float)
        vals = np.exp(-t_arr[..., None] * lam)
        out = vals.sum(axis=-1) / self.torus.n_sites
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out

    def q_matrix(self, t: float) -> np.ndarray:
        self._check_heat()
        return self._dense(lambda lam: np.exp(-0.5 * t * lam))

    def cdot_matrix(self, t: float) -> np.ndarray:
        if self.mode == "piecewise_discrete":
            j = self._block_index(t)
            dur, mat = self._blocks[j]
            return mat / dur
        return self._dense(lambda lam: np.exp(-t * lam))

    def c_matrix(self, t: float) -> np.ndarray:
        if self.mode == "piecewise_discrete":
            return self._piecewise_c(t)
        if math.isinf(t):
            return self._dense(lambda lam: 1.0 / lam)
        return self._dense(lambda lam: -np.expm1(-t * lam) / lam)

    def c_infinity_matrix(self) -> np.ndarray:
        if self.mode == "piecewise_discrete":
            return sum(mat for _, mat in self._blocks)
        return self.c_matrix(math.inf)

    def cov_between(self, s: float, t: float) -> np.ndarray:
        """C_t - C_s (positive semidefinite for t >= s)."""
        if not (0 <= s <= t or math.isinf(t)):
            raise LatticeError(f"need 0 <= s <= t, got s={s}, t={t}")
        if self.mode == "piecewise_discrete":
            return self._piecewise_c(t) - self._piecewise_c(s)
        if math.isinf(t):
            return self._dense(lambda lam: np.exp(-s * lam) / lam)
        return self._dense(lambda lam: (np.exp(-s * lam) - np.exp(-t * lam)) / lam)

    def projector_matrix(self) -> np.ndarray:
        """Mean-zero projector P (conservative mode)."""
        n = self.torus.n_sites
        return np.eye(n) - np.full((n, n), 1.0 / n)

    def cdot_rowsum_abs(self, t) -> np.ndarray | float:
        """Row sum of |Cdot_t| (exact; equals e^{-eps^2 m^2 t} in heat mode)."""
        self._check_heat()
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.array([np.abs(self.cdot_kernel(float(ti))).sum() for ti in t_arr])
        return float(out[0]) if np.isscalar(t) or np.asarray(t).ndim == 0 else out

    def sandwiched_max_eigenvalue(self, t: float, kernel: np.ndarray, sign: int) -> float:
        """Largest eigenvalue of Q_t (D -/+ M) Q_t for a displacement kernel M.

        M is the BCCB matrix with row ``kernel`` (shape (n, n)); D is the
        diagonal of its (constant) row sums.  sign=-1 gives the difference
        form D - M, sign=+1 the sum form D + M.  Exact via the shared
        Fourier basis.
        """
        self._check_heat()
        rho = float(kernel.sum())
        mhat = np.real(np.fft.fft2(kernel))
        middle = rho - mhat if sign < 0 else rho + mhat
        qq = np.exp(-t * self._symbol)
        vals = np.where(self._mode_mask, qq * middle, 0.0)
        return float(max(vals.max(), 0.0))

    # -- piecewise internals ------------------------------------------------

    def _block_index(self, t: float) -> int:
        # Cdot_t uses block j for t in (edge_j, edge_{j+1}]
        edges = self._edges
        if t <= edges[0]:
            return 0
        j = int(np.searchsorted(edges, t, side="left")) - 1
        return min(max(j, 0), len(self._blocks) - 1)

    def _piecewise_c(self, t: float) -> np.ndarray:
        if math.isinf(t):
            return self.c_infinity_matrix()
        acc = np.zeros_like(self._blocks[0][1])
        for (dur, mat), lo in zip(self._blocks, self._edges[:-1]):
            frac = np.clip((t - lo) / dur, 0.0, 1.0)
            if frac <= 0:
                break
            acc = acc + frac * mat
        return acc

    @property
    def blocks(self):
        return list(self._blocks)

    @property
    def block_edges(self) -> np.ndarray:
        return self._edges.copy()

    # -- serialization -------------------------------------------------------

    def to_manifest(self) -> dict:
        if self.mode == "piecewise_discrete":
            digest = hashlib.sha256()
            for dur, mat in self._blocks:
                digest.update(np.asarray([dur]).tobytes())
                digest.update(np.ascontiguousarray(mat).tobytes())
            return {
                "mode": self.mode,
                "blocks": len(self._blocks),
                "eigenvectors_digest": digest.hexdigest()[:16],
            }
        eigs = np.sort(self._symbol[self._mode_mask].ravel())
        digest = hashlib.sha256(np.ascontiguousarray(self._symbol).tobytes()).hexdigest()
        return {
            "mode": self.mode,
            "side_sites": self.torus.side_sites,
            "mesh": self.torus.mesh,
            "mass": self.mass,
            "time_grid": self.time_grid.tolist(),
            "eigenvalues": [float(eigs[0]), float(eigs[-1])],
            "eigenvectors_digest": digest[:16],
        }


def schedule_heat(a_op: LatticeOperator, time_grid: Sequence[float]) -> CovarianceSchedule:
    if a_op.kind != "A" or a_op.torus is None or a_op.mass is None:
        raise LatticeError("schedule_heat needs an A operator carrying torus and mass")
    return CovarianceSchedule("heat", a_op.torus, a_op.mass, time_grid)


def schedule_conservative(
    a_op: LatticeOperator, time_grid: Sequence[float]
) -> CovarianceSchedule:
    if a_op.kind != "A" or a_op.torus is None or a_op.mass is None:
        raise LatticeError("schedule_conservative needs an A operator with torus and mass")
    return CovarianceSchedule("conservative_heat", a_op.torus, a_op.mass, time_grid)


def schedule_piecewise(blocks: Sequence[tuple[float, np.ndarray]]) -> CovarianceSchedule:
    return CovarianceSchedule("piecewise_discrete", blocks=blocks)


# -- heat kernels ------------------------------------------------------------


def infinite_heat_kernel(x: tuple[int, int], t: float, method: str = "bessel") -> float:
    """p_t(x) for the continuous-time nearest-neighbour walk on Z^2.

    bessel:  p_t(x) = e^{-4t} I_{x1}(2t) I_{x2}(2t)          (product form)
    fourier: 1d quadrature of the momentum-space representation, per axis
    """
    if t < 0:
        raise LatticeError("time must be nonnegative")
    a, b = abs(int(x[0])), abs(int(x[1]))
    if method == "bessel":
        if t == 0:
            return float(a == 0 and b == 0)
        # ive(n, z) = e^{-z} I_n(z), so the product is exp-normalised exactly
        return float(special.ive(a, 2 * t) * special.ive(b, 2 * t))
    if method == "fourier":
        def one_dim(j: int) -> float:
            val, _ = integrate.quad(
                lambda k: math.exp(-2 * t * (1 - math.cos(k))) * math.cos(k * j),
                0.0,
                math.pi,
                limit=200,
            )
            return val / math.pi
        return one_dim(a) * one_dim(b)
    raise LatticeError(f"unknown method {method}")


def torus_heat_kernel(torus: LatticeTorus, t: float, flavor: str = "torus") -> HeatKernelTable:
    """p_t^L over displacements via the spectral (matrix-exponential) route."""
    if t < 0:
        raise LatticeError("time must be nonnegative")
    n = torus.side_sites
    sym = _laplacian_symbol(n)
    values = _kernel_from_symbol(np.exp(-t * sym))
    if flavor == "torus":
        return HeatKernelTable(values, t, "torus")
    if flavor == "torus_mean_zero":
        return HeatKernelTable(values - 1.0 / torus.n_sites, t, "torus_mean_zero")
    raise LatticeError(f"unknown flavor {flavor}")


def image_sum_heat_kernel(torus: LatticeTorus, t: float, truncation: int | None = None) -> np.ndarray:
    """Independent oracle: p_t^L(x) = sum_y p_t(x + L y), truncated image sum."""
    n = torus.side_sites
    if truncation is None:
        truncation = max(2, int(math.ceil(8.0 * math.sqrt(max(t, 1.0)) / n)) + 1)
    out = np.zeros((n, n))
    for dr in range(n):
        for dc in range(n):
            acc = 0.0
            for yr in range(-truncation, truncation + 1):
                for yc in range(-truncation, truncation + 1):
                    acc += infinite_heat_kernel((dr + n * yr, dc + n * yc), t)
            out[dr, dc] = acc
    return out


def characteristic_length(t: float, mesh: float, mass: float) -> float:
    """ell_t = (1 v sqrt(t)) ^ 1/(eps m)."""
    return min(max(1.0, math.sqrt(max(t, 0.0))), 1.0 / (mesh * mass))


def log_covariance_check(
    schedule: CovarianceSchedule,
    t_grid: Sequence[float],
    band: tuple[float, float] = LOG_COV_BAND,
) -> dict:
    """Tabulate C_t(0,0) - (1/2pi) log ell_t and flag band violations.

    Grid points violating the admissibility assumption (Lm >= 1 or
    t <= eps^{-2}(m^{-2} ^ L^2)) are flagged and excluded from the range.
    """
    schedule._check_heat()
    torus, mass = schedule.torus, schedule.mass
    eps, L = torus.mesh, torus.physical_side
    lm_ok = L * mass >= 1.0
    t_cap = (1.0 / eps**2) * min(1.0 / mass**2, L**2)
    rows, flagged = [], []
    for t in t_grid:
        if not lm_ok and t > t_cap:
            flagged.append(float(t))
            continue
        ell = characteristic_length(t, eps, mass)
        dev = schedule.c_diag(t) - math.log(ell) / (2 * math.pi)
        rows.append({"t": float(t), "deviation": float(dev)})
    devs = [r["deviation"] for r in rows]
    lo, hi = (min(devs), max(devs)) if devs else (0.0, 0.0)
    return {
        "rows": rows,
        "range": (lo, hi),
        "band": band,
        "violation": bool(devs) and (lo < band[0] or hi > band[1]),
        "flagged": flagged,
    }


@dataclass(frozen=True)
class AppendixSums:
    """Exact finite-lattice values of the smoothed-kernel sums at one scale."""

    t: float
    beta: float
    s1: float          # sup_x sum_y |1 - e^{-beta C_t(x,y)}|
    s2: float          # lambda_max(Q_t (D - M) Q_t), M = |U_t|
    s3: float | None   # ell^2-scaled threefold delta sum
    s4: float | None   # ell^2-scaled fourfold delta-delta sum
    grad_sum: float | None  # ell-scaled worst-case |U| |Qf(x)-Qf(y)| sum over unit l1 f
    u_diag: float      # U_t(0,0)

    def __post_init__(self):
        for name in ("s1", "s2", "u_diag"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < -1e-12:
                raise LatticeError(f"appendix sum {name} invalid: {v}")


def _u_kernel(schedule: CovarianceSchedule, beta: float, t: float) -> np.ndarray:
    """U_t over displacements, computed through expm1 with finiteness check."""
    arg = beta * schedule.c_kernel(t)
    if np.max(arg) > 700.0:
        raise LatticeError(f"e^(beta C_t) overflows: max exponent {np.max(arg):.1f}")
    u = np.expm1(arg)
    if not np.all(np.isfinite(u)):
        raise LatticeError("non-finite U_t kernel")
    return u


def lattice_sums(
    schedule: CovarianceSchedule,
    beta: float,
    t: float,
    include_threefold: bool = True,
    include_fourfold: bool = True,
) -> AppendixSums:
    """Exact lattice values of the kernel sums the asymptotic bounds control."""
    if beta <= 0:
        raise LatticeError("beta must be positive")
    schedule._check_heat()
    torus = schedule.torus
    n = torus.side_sites
    ell = characteristic_length(t, torus.mesh, schedule.mass)

    c_ker = schedule.c_kernel(t)
    u_ker = _u_kernel(schedule, beta, t)
    one_minus = np.abs(-np.expm1(-beta * c_ker))
    s1 = float(one_minus.sum())
    s2 = schedule.sandwiched_max_eigenvalue(t, np.abs(u_ker), sign=-1)

    s3 = s4 = gs = None
    cdot = schedule.cdot_kernel(t)
    q_ker = schedule.q_kernel(t)
    if include_threefold or include_fourfold:
        disp = torus.displacement_index_table()
        u_abs_row = np.abs(u_ker).reshape(-1)          # |U(0, x2)| by displacement
        cdot_flat = cdot.reshape(-1)
        # g[x2, x3] = Cdot(0,x3) - Cdot(x2,x3)
        g_all = cdot_flat[None, :] - cdot_flat[disp]
        if include_threefold:
            s3 = float((u_abs_row * np.abs(g_all).sum(axis=1)).sum() * ell**2)
        if include_fourfold:
            u_abs_mat = u_abs_row[disp]
            acc = 0.0
            for x2 in range(torus.n_sites):
                if u_abs_row[x2] == 0.0:
                    continue
                g = g_all[x2]
                acc += u_abs_row[x2] * float(
                    (u_abs_mat * np.abs(g[:, None] - g[None, :])).sum()
                )
            s4 = float(acc * ell**2)
        # worst-case gradient-type sum over unit l1 vectors (translation
        # invariance makes the sup over the pinned site trivial)
        q_flat = q_ker.reshape(-1)
        dq = q_flat[None, :] - q_flat[disp]
        gs = float((u_abs_row[:, None] * np.abs(dq)).sum() * ell)
    return AppendixSums(
        t=float(t), beta=float(beta), s1=s1, s2=s2, s3=s3, s4=s4,
        grad_sum=gs, u_diag=float(u_ker.reshape(-1)[0]),
    )


def ctsdiff_fourpoint_min(
    schedule: CovarianceSchedule, s: float, t: float, sample_count: int | None = None
) -> float:
    """Minimum over site triples of the four-point increment combination.

    (C_t-C_s)(0,0) - (C_t-C_s)(x,y) + (C_t-C_s)(x,z) - (C_t-C_s)(y,z).
    Translation invariance reduces the triple scan to two displacements, so
    the minimisation is exhaustive at every lattice size; sample_count is
    accepted for interface compatibility and ignored.
    """
    if not (0 <= s <= t):
        raise LatticeError("need 0 <= s <= t")
    schedule._check_heat()
    if s == t:
        return 0.0
    torus = schedule.torus
    n = torus.side_sites
    diff = schedule.c_kernel(t) - schedule.c_kernel(s)
    flat = diff.reshape(-1)
    disp = torus.displacement_index_table()
    # d1 = y - x, d2 = z - y ; x - z displacement index via the table
    # value(d1, d2) = D(0) - D(d1) + D(d1 + d2) - D(d2)
    vals = flat[0] - flat[:, None] + flat[disp] - flat[None, :]
    return float(vals.min())
