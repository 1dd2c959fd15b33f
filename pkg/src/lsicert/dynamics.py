"""Langevin (non-conservative) and conservative lattice dynamics with
relaxation-rate estimation, for empirical validation of certificates.

Both dynamics run on the unit-lattice rescaling: the drift is the negative
gradient of H(phi) = (phi, A phi)/2 + V_0(phi) with A = -Delta + eps^2 m^2.
The conservative variant applies the lattice Laplacian to the local chemical
potential and drives with the discrete divergence of independent edge noises,
which conserves the field sum exactly and realises the edge-difference
Dirichlet form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sinegordon import SineGordonParams

__all__ = [
    "DynamicsRun",
    "Trajectories",
    "RelaxationEstimate",
    "glauber_simulate",
    "kawasaki_simulate",
    "estimate_relaxation",
    "metropolis_sample",
    "slowest_mode_observable",
    "cosine_observable",
    "local_average_observable",
]


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DynamicsRun:
    kind: str  # glauber | kawasaki
    params: SineGordonParams
    dt: float | None = None
    horizon: float = 20.0
    replicas: int = 8
    seed: int = 0
    thin: int = 1
    initial: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("glauber", "kawasaki"):
            raise ValueError(f"unknown dynamics kind {self.kind}")
        if self.replicas < 2:
            raise ValueError("need at least 2 replicas")

    def stiffest_rate(self) -> float:
        n = self.params.side_sites
        lam_max_a = 8.0 + (self.params.mesh * self.params.mass) ** 2
        return lam_max_a + self.params.beta * abs(self.params.z0)

    def step_size(self) -> float:
        dt = self.dt if self.dt is not None else 0.05 / self.stiffest_rate()
        if dt * self.stiffest_rate() > 0.1 + 1e-12:
            raise SimulationError(
                f"unstable step: dt * stiffest rate = {dt * self.stiffest_rate():.3f} > 0.1"
            )
        return dt


@dataclass(frozen=True)
class Trajectories:
    """Thinned sample paths, shape (replicas, n_samples, n_sites)."""

    fields: np.ndarray
    sample_dt: float
    kind: str
    params: SineGordonParams
    conservation_drift: float = 0.0


@dataclass(frozen=True)
class RelaxationEstimate:
    observable: str
    rate: float
    ci: tuple[float, float]
    r_squared: float
    flagged: bool
    stationary: bool


def _lap(phi: np.ndarray) -> np.ndarray:
    """Unit-lattice laplacian on (..., n, n) fields."""
    return (
        np.roll(phi, 1, axis=-1)
        + np.roll(phi, -1, axis=-1)
        + np.roll(phi, 1, axis=-2)
        + np.roll(phi, -1, axis=-2)
        - 4.0 * phi
    )


def _grad_h(phi: np.ndarray, p: SineGordonParams) -> np.ndarray:
    """grad H = A phi + grad V_0 = -lap phi + eps^2 m^2 phi - sqrt(beta) z0 sin(sqrt(beta) phi)."""
    sqb = math.sqrt(p.beta)
    return -_lap(phi) + (p.mesh * p.mass) ** 2 * phi - sqb * p.z0 * np.sin(sqb * phi)


def glauber_simulate(run: DynamicsRun) -> Trajectories:
    """Euler-Maruyama for d phi = -grad H dt + sqrt(2) dW, per site."""
    if run.kind != "glauber":
        raise ValueError("run.kind must be glauber")
    p = run.params
    n = p.side_sites
    dt = run.step_size()
    steps = int(math.ceil(run.horizon / dt))
    rng = np.random.default_rng(run.seed)
    phi = (
        np.array(run.initial, dtype=float, copy=True)
        if run.initial is not None
        else np.zeros((run.replicas, n, n))
    )
    noise_scale = math.sqrt(2.0 * dt)
    out = [phi.reshape(run.replicas, -1).copy()]
    for j in range(steps):
        incr = -_grad_h(phi, p) * dt + noise_scale * rng.standard_normal(phi.shape)
        if np.max(np.abs(incr)) > 10.0:
            raise SimulationError(
                f"field increment {np.max(np.abs(incr)):.2f} > 10 at step {j}; aborting"
            )
        phi = phi + incr
        if (j + 1) % run.thin == 0:
            out.append(phi.reshape(run.replicas, -1).copy())
    return Trajectories(np.stack(out, axis=1), dt * run.thin, "glauber", p)


def kawasaki_simulate(run: DynamicsRun) -> Trajectories:
    """Conservative dynamics: d phi = lap(grad H) dt + sqrt(2) div(edge noise) sqrt(dt)."""
    if run.kind != "kawasaki":
        raise ValueError("run.kind must be kawasaki")
    p = run.params
    n = p.side_sites
    dt = run.step_size() / 8.0  # mobility -lap stiffens the system by lam_max(-lap)
    steps = int(math.ceil(run.horizon / dt))
    rng = np.random.default_rng(run.seed)
    phi = (
        np.array(run.initial, dtype=float, copy=True)
        if run.initial is not None
        else np.zeros((run.replicas, n, n))
    )
    if np.max(np.abs(phi.mean(axis=(-2, -1)))) > 1e-12:
        raise SimulationError("initial field must have zero mean per replica")
    total0 = phi.sum(axis=(-2, -1)).copy()
    noise_scale = math.sqrt(2.0 * dt)
    out = [phi.reshape(run.replicas, -1).copy()]
    worst_drift = 0.0
    thin = max(run.thin, 1)
    for j in range(steps):
        w = _grad_h(phi, p)
        eta1 = rng.standard_normal(phi.shape)
        eta2 = rng.standard_normal(phi.shape)
        div = (
            eta1
            - np.roll(eta1, 1, axis=-1)
            + eta2
            - np.roll(eta2, 1, axis=-2)
        )
        incr = _lap(w) * dt + noise_scale * div
        phi = phi + incr
        drift = float(np.max(np.abs(phi.sum(axis=(-2, -1)) - total0)))
        worst_drift = max(worst_drift, drift)
        if drift > 1e-6:
            raise SimulationError(f"conservation drift {drift:.2e} > 1e-6; aborting")
        if (j + 1) % thin == 0:
            out.append(phi.reshape(run.replicas, -1).copy())
    return Trajectories(np.stack(out, axis=1), dt * thin, "kawasaki", p, worst_drift)


# -- observables --------------------------------------------------------------


def slowest_mode_observable(params: SineGordonParams, conservative: bool) -> tuple[str, Callable]:
    """Projection onto the slowest relaxing spatial mode (k = 0, or the first
    nonzero momentum for conservative dynamics)."""
    n = params.side_sites
    if not conservative:
        def obs(fields):
            return fields.mean(axis=-1)

        return "zero_mode", obs

    k = 2.0 * math.pi / n
    c = np.cos(k * np.arange(n))
    weights = np.tile(c, n) / math.sqrt(n * n / 2.0)

    def obs(fields):
        return fields @ weights

    return "first_mode", obs


def cosine_observable(params: SineGordonParams) -> tuple[str, Callable]:
    sqb = math.sqrt(params.beta)

    def obs(fields):
        return np.cos(sqb * fields).mean(axis=-1)

    return "site_cosine", obs


def local_average_observable(params: SineGordonParams, block: int = 2) -> tuple[str, Callable]:
    n = params.side_sites
    mask = np.zeros((n, n))
    mask[:block, :block] = 1.0 / block**2
    flat = mask.reshape(-1)

    def obs(fields):
        return fields @ flat

    return f"block_average_{block}", obs


# -- relaxation fitting ----------------------------------------------------------


def _geweke_stationary(series: np.ndarray) -> bool:
    """Two-window mean comparison at the 5% level, pooled over replicas."""
    m = series.shape[1]
    a = series[:, : m // 4].ravel()
    b = series[:, -m // 4 :].ravel()
    var = a.var() / a.size + b.var() / b.size
    if var == 0:
        return True
    zstat = abs(a.mean() - b.mean()) / math.sqrt(var)
    return bool(zstat < 1.96)


def _autocorr(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Replica-averaged normalised autocorrelation up to max_lag."""
    x = series - series.mean(axis=1, keepdims=True)
    denom = (x**2).mean(axis=1)
    out = np.empty((series.shape[0], max_lag + 1))
    for lag in range(max_lag + 1):
        if lag == 0:
            out[:, 0] = 1.0
        else:
            out[:, lag] = (x[:, :-lag] * x[:, lag:]).mean(axis=1) / np.maximum(denom, 1e-300)
    return out


def estimate_relaxation(
    traj: Trajectories,
    observables: Sequence[tuple[str, Callable]],
    burn_fraction: float = 0.25,
    floor: float = 0.15,
) -> list[RelaxationEstimate]:
    """Exponential autocorrelation fits per observable; slowest rate matters.

    The fit window runs from lag 1 to where the pooled autocorrelation first
    drops below ``floor``.  Confidence intervals come from the replica spread
    of per-replica fitted slopes; fits with pooled R^2 < 0.9 are flagged.
    """
    results = []
    n_samp = traj.fields.shape[1]
    start = int(burn_fraction * n_samp)
    for name, obs in observables:
        series = obs(traj.fields[:, start:, :])
        stationary = _geweke_stationary(series)
        max_lag = min(series.shape[1] // 4, 2000)
        rho = _autocorr(series, max_lag)
        pooled = rho.mean(axis=0)
        below = np.nonzero(pooled < floor)[0]
        lag_hi = int(below[0]) if below.size else max_lag
        lag_hi = max(lag_hi, 4)
        lags = np.arange(1, lag_hi)
        taus = lags * traj.sample_dt
        y = np.log(np.maximum(pooled[1:lag_hi], 1e-12))
        slope, intercept = np.polyfit(taus, y, 1)
        fit = slope * taus + intercept
        ss_res = float(((y - fit) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / max(ss_tot, 1e-300)
        rates = []
        for r in range(series.shape[0]):
            yr = np.log(np.maximum(rho[r, 1:lag_hi], 1e-12))
            sr, _ = np.polyfit(taus, yr, 1)
            rates.append(-sr)
        rates = np.asarray(rates)
        rate = -slope
        half = 1.96 * rates.std(ddof=1) / math.sqrt(len(rates))
        results.append(
            RelaxationEstimate(
                observable=name,
                rate=float(rate),
                ci=(float(rate - half), float(rate + half)),
                r_squared=float(r2),
                flagged=bool(r2 < 0.9),
                stationary=stationary,
            )
        )
    return results


def metropolis_sample(
    params: SineGordonParams,
    n_samples: int,
    seed: int = 0,
    chains: int = 64,
    burn_in: int = 2000,
    step: float = 0.5,
    thin: int = 10,
) -> np.ndarray:
    """Random-walk Metropolis oracle for the equilibrium measure e^{-H}."""
    p = params
    n = p.side_sites
    rng = np.random.default_rng(seed)
    sqb = math.sqrt(p.beta)
    shift = (p.mesh * p.mass) ** 2

    def energy(phi):
        kin = -0.5 * (phi * _lap(phi)).sum(axis=(-2, -1))
        mass = 0.5 * shift * (phi**2).sum(axis=(-2, -1))
        inter = p.z0 * np.cos(sqb * phi).sum(axis=(-2, -1))
        return kin + mass + inter

    phi = rng.standard_normal((chains, n, n)) * 0.1
    e = energy(phi)
    samples = []
    total = burn_in + thin * (n_samples // chains + 1)
    for it in range(total):
        prop = phi + step * rng.standard_normal(phi.shape)
        ep = energy(prop)
        accept = np.log(rng.random(chains)) < (e - ep)
        phi[accept] = prop[accept]
        e[accept] = ep[accept]
        if it >= burn_in and (it - burn_in) % thin == 0:
            samples.append(phi.reshape(chains, -1).copy())
    return np.concatenate(samples, axis=0)[:n_samples]
