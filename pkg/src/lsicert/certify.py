"""Assembly of certified log-Sobolev constants from scale-wise convexity bounds.

Three routes: the heat-schedule bound 1/gamma = int e^{-lambda t - 2 mu_t} dt,
its general-schedule variant 1/gamma = |Cdot_0| int e^{-2 lambda_t} dt, and the
piecewise-decomposition variant 1/gamma = int e^{-2 lambda_t} |Cdot_t| dt.
Mu schedules carry provenance: only phi-uniform analytic pipelines certify;
sampled scans are flagged empirical.  The scale integral is never silently
extrapolated: a tail descriptor is required whenever mu_dot can be negative
beyond the grid.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .flow import FlowEvaluator, PotentialModel

__all__ = [
    "TailDescriptor",
    "MuSchedule",
    "Certificate",
    "NoCertificate",
    "gamma_heat",
    "gamma_mon",
    "gamma_asy",
    "mu_scan",
    "bakry_emery_baseline",
    "lsi_empirical_check",
]


class NoCertificate(RuntimeError):
    """A gate failed and no certified constant can be produced."""


@dataclass(frozen=True)
class TailDescriptor:
    """Behaviour of mu_dot beyond the grid maximum.

    form "nonneg":    mu_dot >= 0 for t >= t_max (tail slack 0)
    form "exp_decay": |mu_dot_t| <= c e^{-rate t}; slack = (c/rate) e^{-rate t_max}
    """

    t_max: float
    form: str
    params: dict = field(default_factory=dict)

    def slack(self) -> float:
        if self.form == "nonneg":
            return 0.0
        if self.form == "exp_decay":
            c, rate = self.params["c"], self.params["rate"]
            if rate <= 0:
                raise NoCertificate("tail decay rate must be positive")
            return (c / rate) * math.exp(-rate * self.t_max)
        raise NoCertificate(f"unknown tail form {self.form}")


@dataclass(frozen=True)
class MuSchedule:
    """Grid of scale-wise convexity lower bounds mu_dot_t."""

    ts: np.ndarray
    mu_dots: np.ndarray
    provenance: str  # certified_pipeline | sampled_scan
    tail: TailDescriptor | None = None

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=float)
        md = np.asarray(self.mu_dots, dtype=float)
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "mu_dots", md)
        if ts.ndim != 1 or ts.shape != md.shape:
            raise ValueError("ts and mu_dots must be matching 1-d arrays")
        if ts[0] != 0.0 or np.any(np.diff(ts) <= 0):
            raise ValueError("grid must start at 0 and be strictly increasing")
        if not np.all(np.isfinite(md)):
            raise ValueError("mu_dot values must be finite")
        if self.provenance not in ("certified_pipeline", "sampled_scan"):
            raise ValueError(f"unknown provenance {self.provenance}")

    def mu_values(self) -> np.ndarray:
        """mu_t = int_0^t mu_dot by trapezoid, on the grid."""
        out = np.zeros_like(self.ts)
        incr = 0.5 * (self.mu_dots[1:] + self.mu_dots[:-1]) * np.diff(self.ts)
        out[1:] = np.cumsum(incr)
        return out

    def thin(self) -> "MuSchedule":
        """Every-other-point schedule (keeping endpoints) for refinement reports."""
        idx = np.unique(np.concatenate([np.arange(0, len(self.ts), 2), [len(self.ts) - 1]]))
        return MuSchedule(self.ts[idx], self.mu_dots[idx], self.provenance, self.tail)


@dataclass
class Certificate:
    gamma: float | None
    theorem: str  # heat | mon | asy
    lambda_min: float
    mu: MuSchedule | None
    diagnostics: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    certified: bool = False

    def __post_init__(self):
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("certificate gamma must be positive when present")
        if self.mu is not None and self.mu.provenance == "sampled_scan":
            self.certified = False

    def to_json(self) -> str:
        mu_grid = (
            [{"t": float(t), "mu_dot": float(m)} for t, m in zip(self.mu.ts, self.mu.mu_dots)]
            if self.mu is not None
            else []
        )
        tail = None
        if self.mu is not None and self.mu.tail is not None:
            tail = {
                "T": self.mu.tail.t_max,
                "form": self.mu.tail.form,
                "params": self.mu.tail.params,
            }
        return json.dumps(
            {
                "gamma": self.gamma,
                "theorem": self.theorem,
                "lambda_min": self.lambda_min,
                "mu_grid": mu_grid,
                "tail": tail,
                "certified": self.certified,
                "diagnostics": _jsonable(self.diagnostics),
                "config_fingerprint": self.config_fingerprint,
            },
            indent=1,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _segment_exp_integral(a: float, b: float, f_a: float, slope: float) -> float:
    """int_a^b exp(-(f_a + slope (t - a))) dt, exactly."""
    width = b - a
    if abs(slope) * width < 1e-12:
        return math.exp(-f_a) * width * (1.0 - 0.5 * slope * width)
    return math.exp(-f_a) * (1.0 - math.exp(-slope * width)) / slope


def _grid_integral(lam: float, mu: MuSchedule) -> float:
    """int over the grid of e^{-lam t - 2 mu_t} with piecewise-linear mu."""
    ts = mu.ts
    mu_t = mu.mu_values()
    total = 0.0
    for i in range(len(ts) - 1):
        slope_mu = (mu_t[i + 1] - mu_t[i]) / (ts[i + 1] - ts[i])
        f_a = lam * ts[i] + 2.0 * mu_t[i]
        total += _segment_exp_integral(ts[i], ts[i + 1], f_a, lam + 2.0 * slope_mu)
    return total


def _tail_integral(lam: float, mu: MuSchedule) -> float:
    """Upper bound on the integral beyond the grid; raises without a descriptor."""
    t_max = float(mu.ts[-1])
    mu_end = float(mu.mu_values()[-1])
    if mu.tail is None:
        if mu.mu_dots[-1] < 0:
            raise NoCertificate(
                "mu_dot negative at the grid end and no tail descriptor supplied"
            )
        # without a descriptor, only the (conservative) frozen-mu bound is safe
        slack = 0.0
    else:
        slack = mu.tail.slack()
    return math.exp(-lam * t_max - 2.0 * mu_end + 2.0 * slack) / lam


def _refinement_report(lam: float, mu: MuSchedule, inv_gamma: float) -> dict:
    if len(mu.ts) < 5:
        return {"refinement_rel_change": None}
    thin = mu.thin()
    inv_thin = _grid_integral(lam, thin) + _tail_integral(lam, thin)
    return {"refinement_rel_change": abs(inv_thin - inv_gamma) / inv_gamma}


def gamma_heat(lambda_min: float, mu: MuSchedule, fingerprint: str = "") -> Certificate:
    """1/gamma = int_0^inf e^{-lambda t - 2 mu_t} dt with an explicit tail bound."""
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    try:
        inv_gamma = _grid_integral(lambda_min, mu) + _tail_integral(lambda_min, mu)
    except NoCertificate as exc:
        return Certificate(
            gamma=None,
            theorem="heat",
            lambda_min=lambda_min,
            mu=mu,
            diagnostics={"reason": str(exc)},
            config_fingerprint=fingerprint,
            certified=False,
        )
    if not math.isfinite(inv_gamma) or inv_gamma <= 0:
        return Certificate(
            gamma=None,
            theorem="heat",
            lambda_min=lambda_min,
            mu=mu,
            diagnostics={"reason": "scale integral diverges"},
            config_fingerprint=fingerprint,
            certified=False,
        )
    diag = {"inv_gamma": inv_gamma}
    diag.update(_refinement_report(lambda_min, mu, inv_gamma))
    return Certificate(
        gamma=1.0 / inv_gamma,
        theorem="heat",
        lambda_min=lambda_min,
        mu=mu,
        diagnostics=diag,
        config_fingerprint=fingerprint,
        certified=(mu.provenance == "certified_pipeline"),
    )


def gamma_mon(
    schedule,
    ts: Sequence[float],
    lambda_dots: Sequence[float],
    tail: TailDescriptor | None = None,
    provenance: str = "certified_pipeline",
    fingerprint: str = "",
) -> Certificate:
    """1/gamma = |Cdot_0| int_0^inf e^{-2 lambda_t} dt for differentiable schedules."""
    if getattr(schedule, "mode", "heat") not in ("heat", "conservative_heat"):
        raise ValueError("gamma_mon requires a differentiable (heat-type) schedule")
    lam_sched = MuSchedule(np.asarray(ts, float), np.asarray(lambda_dots, float), provenance, tail)
    cdot0 = schedule.cdot_matrix(0.0)
    top = float(np.linalg.eigvalsh(cdot0)[-1])
    # reuse the heat machinery with lam = 0 by folding lambda_t into mu_t:
    # e^{-2 lambda_t} = e^{-0 t - 2 mu_t} with mu = lambda schedule
    try:
        inv_gamma = top * (
            _grid_integral(0.0, lam_sched) + _tail_integral_mon(lam_sched)
        )
    except NoCertificate as exc:
        return Certificate(None, "mon", schedule.lambda_min, lam_sched,
                           {"reason": str(exc)}, fingerprint, False)
    if not math.isfinite(inv_gamma) or inv_gamma <= 0:
        return Certificate(None, "mon", schedule.lambda_min, lam_sched,
                           {"reason": "scale integral diverges"}, fingerprint, False)
    return Certificate(
        gamma=1.0 / inv_gamma,
        theorem="mon",
        lambda_min=schedule.lambda_min,
        mu=lam_sched,
        diagnostics={"inv_gamma": inv_gamma, "cdot0_top": top},
        config_fingerprint=fingerprint,
        certified=(provenance == "certified_pipeline"),
    )


def _tail_integral_mon(lam_sched: MuSchedule) -> float:
    """Tail of int e^{-2 lambda_t} dt; needs a strictly positive end slope."""
    t_max = float(lam_sched.ts[-1])
    lam_end = float(lam_sched.mu_values()[-1])
    rate = float(lam_sched.mu_dots[-1])
    if lam_sched.tail is not None:
        slack = lam_sched.tail.slack()
        if rate <= 0:
            raise NoCertificate("lambda_dot must be positive at the grid end")
        return math.exp(-2.0 * lam_end + 2.0 * slack) / (2.0 * rate)
    if rate <= 0:
        raise NoCertificate(
            "lambda_dot nonpositive at the grid end and no tail descriptor supplied"
        )
    return math.exp(-2.0 * lam_end) / (2.0 * rate)


def gamma_asy(
    schedule,
    lambda_dots: Sequence[float],
    provenance: str = "certified_pipeline",
    fingerprint: str = "",
) -> Certificate:
    """1/gamma = int e^{-2 lambda_t} |Cdot_t| dt for piecewise decompositions.

    lambda_dots supplies one rate per block, understood as a bound on the
    symmetrised product restricted to the image of C_inf - C_t (vectors are
    projected onto that image; this projection convention is recorded).
    """
    if getattr(schedule, "mode", None) != "piecewise_discrete":
        raise ValueError("gamma_asy requires a piecewise schedule")
    blocks = schedule.blocks
    if len(lambda_dots) != len(blocks):
        raise ValueError("need one lambda_dot per block")
    edges = schedule.block_edges
    lam_t = 0.0
    inv_gamma = 0.0
    for (dur, mat), ld in zip(blocks, lambda_dots):
        top = float(np.linalg.eigvalsh(mat)[-1]) / dur  # |Cdot| on the block
        if top > 0:
            inv_gamma += top * _segment_exp_integral(0.0, dur, 2.0 * lam_t, 2.0 * ld)
        lam_t += ld * dur
    if not math.isfinite(inv_gamma) or inv_gamma <= 0:
        return Certificate(None, "asy", float("nan"), None,
                           {"reason": "scale integral diverges"}, fingerprint, False)
    return Certificate(
        gamma=1.0 / inv_gamma,
        theorem="asy",
        lambda_min=float("nan"),
        mu=None,
        diagnostics={
            "inv_gamma": inv_gamma,
            "blocks": len(blocks),
            "projection": "vectors projected onto range(C_inf - C_t)",
        },
        config_fingerprint=fingerprint,
        certified=(provenance == "certified_pipeline"),
    )


def _coordinate_descent(objective, x0: np.ndarray, span: float, iters: int = 3) -> tuple[np.ndarray, float]:
    x = x0.copy()
    best = objective(x)
    step = span / 4.0
    for _ in range(iters):
        for i in range(len(x)):
            for sgn in (+1.0, -1.0):
                cand = x.copy()
                cand[i] += sgn * step
                val = objective(cand)
                if val < best:
                    best, x = val, cand
        step *= 0.5
    return x, best


def mu_scan(
    flow: FlowEvaluator,
    t_grid: Sequence[float],
    phi_sampler: Callable[[np.random.Generator], np.ndarray] | None = None,
    restarts: int = 8,
    seed: int = 0,
) -> MuSchedule:
    """Empirical (non-certified) mu_dot_t by minimising the smoothed Hessian.

    Per scale t, minimises the smallest eigenvalue of Q_t He V_t(phi) Q_t over
    phi with random restarts followed by coordinate descent.
    """
    rng = np.random.default_rng(seed)
    dim = flow.potential.dim
    period = flow.potential.period

    if phi_sampler is None:
        if period is not None:
            def phi_sampler(r):
                return r.random(dim) * period
        else:
            def phi_sampler(r):
                return r.standard_normal(dim)

    ts = np.asarray(sorted(t_grid), dtype=float)
    if ts[0] != 0.0:
        ts = np.concatenate([[0.0], ts])
    mu_dots = np.empty_like(ts)
    span = float(period[0]) if period is not None else 2.0
    for i, t in enumerate(ts):
        Q = flow.schedule.q_matrix(t)

        def objective(phi):
            H = (
                flow.potential.hess(phi)
                if t == 0
                else flow.hess_renormalized(t, phi)
            )
            return float(np.linalg.eigvalsh(Q @ H @ Q)[0])

        best = objective(np.zeros(dim))
        starts = [np.zeros(dim)]
        if period is not None:
            starts.append(0.5 * period)
        starts += [phi_sampler(rng) for _ in range(restarts)]
        for x0 in starts:
            _, val = _coordinate_descent(objective, np.asarray(x0, float), span)
            best = min(best, val)
        mu_dots[i] = best
    return MuSchedule(ts, mu_dots, provenance="sampled_scan")


def bakry_emery_baseline(model: PotentialModel, lam: float, fingerprint: str = "") -> Certificate:
    """Classical comparator: convex base potential with A = lam * id gives gamma = lam."""
    if not model.convex:
        raise ValueError("baseline requires a declared convex base potential")
    if lam <= 0:
        raise ValueError("lam must be positive")
    mu = MuSchedule(np.array([0.0, 1.0]), np.zeros(2), provenance="certified_pipeline")
    return Certificate(
        gamma=lam,
        theorem="heat",
        lambda_min=lam,
        mu=mu,
        diagnostics={"baseline": "uniform convexity"},
        config_fingerprint=fingerprint,
        certified=True,
    )


def lsi_empirical_check(
    flow: FlowEvaluator,
    certificate: Certificate,
    battery: Sequence,
    slack: float = 0.01,
) -> dict:
    """Check Ent(F) <= (2/gamma)(1 + slack) E (grad sqrt F)^2 per battery member."""
    if flow.potential.dim > 4:
        raise ValueError("empirical check gated at dim <= 4")
    if certificate.gamma is None:
        raise ValueError("certificate carries no gamma")
    rows = []
    for obs in battery:
        def phi_fun(x):
            return x * np.log(x)

        fvals_probe = obs.value(np.zeros((1, flow.potential.dim)))
        if np.any(fvals_probe <= 0):
            raise ValueError("battery member must be strictly positive")
        ef = flow.nu_expectation(0.0, obs.value).value
        ephif = flow.nu_expectation(0.0, lambda X: phi_fun(obs.value(X))).value
        ent = ephif - phi_fun(ef)

        def grad_sqrt_sq(X):
            f = obs.value(X)
            g = obs.grad(X)
            return np.einsum("bi,bi->b", g, g) / (4.0 * f)

        dirichlet = flow.nu_expectation(0.0, grad_sqrt_sq).value
        bound = (2.0 / certificate.gamma) * (1.0 + slack) * dirichlet
        rows.append(
            {
                "entropy": ent,
                "dirichlet": dirichlet,
                "bound": bound,
                "pass": bool(ent <= bound + 1e-14),
            }
        )
    return {"rows": rows, "all_pass": all(r["pass"] for r in rows)}


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
