"""Renormalised potential, scale semigroup, and the scale-flow identity checks.

The renormalised potential V_t is minus the log of the Gaussian convolution
of e^{-V_0} at covariance C_t; the associated time-dependent semigroup is
evaluated in self-normalised form (weighted averages under e^{-V_s}), which
makes P 1 = 1 exact and removes all normalisation constants.  Integration is
tensor Gauss-Hermite (dimension gate 6) or importance-weighted Monte Carlo
with effective-sample-size tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

__all__ = [
    "PotentialModel",
    "SmoothObservable",
    "SemigroupQuery",
    "Estimate",
    "FlowEvaluator",
    "DenseHeatSchedule",
    "DegenerateWeightsError",
    "quadratic_potential",
    "cosine_potential",
    "double_well_potential",
    "zero_potential",
    "exp_tilt_observable",
    "trig_observable",
    "constant_observable",
    "validate_derivatives",
]

_RANK_TOL = 1e-12


class DegenerateWeightsError(RuntimeError):
    """Importance weights collapsed below the effective-sample-size floor."""


@dataclass(frozen=True)
class Estimate:
    value: float
    error: float

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class PotentialModel:
    """Base potential with batched value/gradient/Hessian evaluators.

    Evaluators accept arrays of shape (..., dim) and return shapes
    (...), (..., dim), (..., dim, dim) respectively.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    smooth: bool = True
    convex: bool = False
    period: np.ndarray | None = None
    is_zero: bool = False


@dataclass(frozen=True)
class SmoothObservable:
    """Strictly positive smooth observable with derivatives, for identity checks."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SemigroupQuery:
    s: float
    t: float
    observable: Callable[[np.ndarray], np.ndarray]
    point: np.ndarray

    def __post_init__(self):
        if not (0 <= self.s <= self.t or math.isinf(self.t)):
            raise ValueError(f"need 0 <= s <= t, got ({self.s}, {self.t})")


def quadratic_potential(b_matrix: np.ndarray) -> PotentialModel:
    """V_0 = phi' B phi / 2 for symmetric B (closed-form flow exists)."""
    B = np.atleast_2d(np.asarray(b_matrix, dtype=float))
    dim = B.shape[0]
    convex = bool(np.linalg.eigvalsh(B)[0] >= 0)

    def value(x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, B, x)

    def grad(x):
        return x @ B

    def hess(x):
        return np.broadcast_to(B, x.shape[:-1] + (dim, dim)).copy()

    return PotentialModel(dim, value, grad, hess, convex=convex)


def cosine_potential(dim: int, freq: float, amplitude: float) -> PotentialModel:
    """V_0 = amplitude * sum_i cos(freq * phi_i) (per-site cosine interaction)."""

    def value(x):
        return amplitude * np.cos(freq * x).sum(axis=-1)

    def grad(x):
        return -amplitude * freq * np.sin(freq * x)

    def hess(x):
        d = -amplitude * freq**2 * np.cos(freq * x)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        idx = np.arange(dim)
        out[..., idx, idx] = d
        return out

    period = np.full(dim, 2 * np.pi / freq)
    return PotentialModel(dim, value, grad, hess, period=period, is_zero=amplitude == 0.0)


def double_well_potential(dim: int, a: float, b: float) -> PotentialModel:
    """V_0 = a * sum_i (phi_i^2 - b)^2, the standard non-convex toy."""

    def value(x):
        return a * ((x**2 - b) ** 2).sum(axis=-1)

    def grad(x):
        return 4 * a * x * (x**2 - b)

    def hess(x):
        d = 4 * a * (3 * x**2 - b)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        idx = np.arange(dim)
        out[..., idx, idx] = d
        return out

    return PotentialModel(dim, value, grad, hess)


def zero_potential(dim: int) -> PotentialModel:
    def value(x):
        return np.zeros(x.shape[:-1])

    def grad(x):
        return np.zeros_like(x)

    def hess(x):
        return np.zeros(x.shape[:-1] + (dim, dim))

    return PotentialModel(dim, value, grad, hess, convex=True, is_zero=True)


def exp_tilt_observable(v: np.ndarray, cap: float = 3.0) -> SmoothObservable:
    """F = exp(cap * tanh((v, phi)/cap)): exponential tilt, smoothly saturated."""
    v = np.asarray(v, dtype=float)

    def u(x):
        return x @ v

    def value(x):
        return np.exp(cap * np.tanh(u(x) / cap))

    def grad(x):
        s = 1.0 / np.cosh(u(x) / cap) ** 2
        return (value(x) * s)[..., None] * v

    def hess(x):
        z = u(x) / cap
        s = 1.0 / np.cosh(z) ** 2
        f = value(x)
        coeff = f * (s**2 - 2.0 * np.tanh(z) * s / cap)
        return coeff[..., None, None] * np.einsum("i,j->ij", v, v)

    return SmoothObservable(value, grad, hess)


def trig_observable(v: np.ndarray, amplitude: float = 0.5, offset: float = 1.0) -> SmoothObservable:
    """F = offset + amplitude * cos((v, phi)); positive when |amplitude| < offset."""
    v = np.asarray(v, dtype=float)
    if abs(amplitude) >= offset:
        raise ValueError("need |amplitude| < offset for positivity")

    def value(x):
        return offset + amplitude * np.cos(x @ v)

    def grad(x):
        return (-amplitude * np.sin(x @ v))[..., None] * v

    def hess(x):
        return (-amplitude * np.cos(x @ v))[..., None, None] * np.einsum("i,j->ij", v, v)

    return SmoothObservable(value, grad, hess)


def constant_observable(dim: int, c: float = 1.0) -> SmoothObservable:
    def value(x):
        return np.full(x.shape[:-1], c)

    def grad(x):
        return np.zeros_like(x)

    def hess(x):
        return np.zeros(x.shape[:-1] + (dim, dim))

    return SmoothObservable(value, grad, hess)


def validate_derivatives(model: PotentialModel, rng: np.random.Generator, n_points: int = 20) -> dict:
    """Finite-difference audit of grad (1e-6 rel) and Hessian (1e-5) evaluators."""
    h = 1e-5
    worst_g = worst_h = worst_sym = 0.0
    for _ in range(n_points):
        x = rng.standard_normal(model.dim)
        g = model.grad(x)
        scale_g = max(np.max(np.abs(g)), 1.0)
        for i in range(model.dim):
            e = np.zeros(model.dim)
            e[i] = h
            fd = (model.value(x + e) - model.value(x - e)) / (2 * h)
            worst_g = max(worst_g, abs(fd - g[i]) / scale_g)
        H = model.hess(x)
        worst_sym = max(worst_sym, float(np.max(np.abs(H - H.T))))
        scale_h = max(np.max(np.abs(H)), 1.0)
        for i in range(model.dim):
            e = np.zeros(model.dim)
            e[i] = h
            fd = (model.grad(x + e) - model.grad(x - e)) / (2 * h)
            worst_h = max(worst_h, float(np.max(np.abs(fd - H[i]))) / scale_h)
    return {"grad_rel": worst_g, "hess_rel": worst_h, "hess_asym": worst_sym}


class DenseHeatSchedule:
    """Heat-kernel schedule for an arbitrary symmetric positive definite A.

    Serves the small toy models and doubles as an independent dense-eigh
    oracle for the Fourier-symbol lattice schedules.
    """

    mode = "heat"

    def __init__(self, a_matrix: np.ndarray):
        A = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        if np.max(np.abs(A - A.T)) > 1e-12 * max(np.max(np.abs(A)), 1.0):
            raise ValueError("A must be symmetric")
        self._w, self._E = np.linalg.eigh(A)
        if self._w.min() <= 0:
            raise ValueError("A must be positive definite")
        self.dim = A.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(self._w[0])

    @property
    def lambda_max(self) -> float:
        return float(self._w[-1])

    def _apply(self, f) -> np.ndarray:
        return (self._E * f(self._w)) @ self._E.T

    def q_matrix(self, t: float) -> np.ndarray:
        return self._apply(lambda w: np.exp(-0.5 * t * w))

    def cdot_matrix(self, t: float) -> np.ndarray:
        return self._apply(lambda w: np.exp(-t * w))

    def c_matrix(self, t: float) -> np.ndarray:
        if math.isinf(t):
            return self._apply(lambda w: 1.0 / w)
        return self._apply(lambda w: -np.expm1(-t * w) / w)

    def c_infinity_matrix(self) -> np.ndarray:
        return self.c_matrix(math.inf)

    def cov_between(self, s: float, t: float) -> np.ndarray:
        if math.isinf(t):
            return self._apply(lambda w: np.exp(-s * w) / w)
        return self._apply(lambda w: (np.exp(-s * w) - np.exp(-t * w)) / w)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Rank-revealing factor S with S S' = cov (columns = retained modes)."""
    w, E = np.linalg.eigh(0.5 * (cov + cov.T))
    top = max(w.max(), 0.0)
    keep = w > _RANK_TOL * max(top, 1.0)
    return E[:, keep] * np.sqrt(w[keep])


def _obs_value(F, X):
    return F.value(X) if isinstance(F, SmoothObservable) else F(X)


class FlowEvaluator:
    """Evaluates V_t, its derivatives, and the scale semigroup for one model."""

    def __init__(
        self,
        potential: PotentialModel,
        schedule,
        method: str = "quadrature",
        nodes_per_dim: int = 12,
        samples: int = 100_000,
        seed: int = 0,
        chunk: int = 4096,
    ):
        if method not in ("quadrature", "monte_carlo"):
            raise ValueError(f"unknown method {method}")
        if method == "quadrature" and potential.dim > 6:
            raise ValueError(
                f"tensor quadrature gated at dim <= 6, model has dim {potential.dim}"
            )
        self.potential = potential
        self.schedule = schedule
        self.method = method
        self.nodes_per_dim = nodes_per_dim
        self.samples = samples
        self.seed = seed
        self.chunk = chunk
        self._point_cache: dict = {}
        self._tinf = None

    # -- scale bookkeeping ---------------------------------------------------

    def _effective_t(self, t: float) -> float:
        """Map the infinity token to a scale with e^{-lam t} < 1e-14."""
        if math.isinf(t):
            if self._tinf is None:
                self._tinf = 14 * math.log(10.0) / self.schedule.lambda_min
            return math.inf
        return t

    def _cov(self, s: float, t: float) -> np.ndarray:
        if math.isinf(t):
            return self.schedule.cov_between(s, math.inf)
        return self.schedule.cov_between(s, t)

    # -- Gaussian nodes -------------------------------------------------------

    def _points(self, cov: np.ndarray, key) -> tuple[np.ndarray, np.ndarray]:
        """(K, N) displacement points and normalised log-weights for E_cov."""
        if key in self._point_cache:
            return self._point_cache[key]
        S = _psd_factor(cov)
        r = S.shape[1]
        dim = cov.shape[0]
        if r == 0:
            pts = np.zeros((1, dim))
            logw = np.zeros(1)
        elif self.method == "quadrature":
            x, w = hermgauss(self.nodes_per_dim)
            grids = np.meshgrid(*([x] * r), indexing="ij")
            u = np.stack([g.ravel() for g in grids], axis=1)
            lw = np.log(w)
            lw_grids = np.meshgrid(*([lw] * r), indexing="ij")
            logw = sum(g.ravel() for g in lw_grids)
            logw = logw - logsumexp(logw)
            pts = (math.sqrt(2.0) * u) @ S.T
        else:
            rng = np.random.default_rng((self.seed, len(self._point_cache)))
            u = rng.standard_normal((self.samples, r))
            pts = u @ S.T
            logw = np.full(self.samples, -math.log(self.samples))
        self._point_cache[key] = (pts, logw)
        return pts, logw

    def _points_for(self, s: float, t: float) -> tuple[np.ndarray, np.ndarray]:
        return self._points(self._cov(s, t), ("cov", s, t))

    # -- core weighted evaluation ---------------------------------------------

    def _check_ess(self, log_weights: np.ndarray):
        """log_weights: (..., K) unnormalised; enforce the MC 10% ESS floor."""
        if not np.all(np.isfinite(logsumexp(log_weights, axis=-1))):
            raise DegenerateWeightsError("non-finite integrand in weighted expectation")
        if self.method == "monte_carlo":
            ln = logsumexp(log_weights, axis=-1)
            l2 = logsumexp(2.0 * log_weights, axis=-1)
            ess = np.exp(2.0 * ln - l2)
            if np.min(ess) < 0.1 * log_weights.shape[-1]:
                raise DegenerateWeightsError(
                    f"effective sample size {np.min(ess):.1f} below 10% of "
                    f"{log_weights.shape[-1]} samples"
                )

    def _map_chunked(self, X: np.ndarray, fn):
        """Apply fn over the leading axis of X in chunks, concatenating results."""
        if X.shape[0] <= self.chunk:
            return fn(X)
        outs = [fn(X[i : i + self.chunk]) for i in range(0, X.shape[0], self.chunk)]
        return np.concatenate(outs, axis=0)

    def _vt_batch(self, t: float, Phi: np.ndarray) -> np.ndarray:
        """V_t over a batch of field points, shape (B, N) -> (B,)."""
        t = self._effective_t(t)
        if self.potential.is_zero:
            return np.zeros(Phi.shape[0])
        pts, logw = self._points_for(0.0, t)

        def one(block):
            X = block[:, None, :] + pts[None, :, :]
            lw = logw[None, :] - self.potential.value(X)
            self._check_ess(lw)
            return -logsumexp(lw, axis=1)

        return self._map_chunked(Phi, one)

    def renormalized_potential(self, t: float, phi: np.ndarray) -> Estimate:
        """V_t(phi) = -log E_{C_t} e^{-V_0(phi + zeta)}."""
        phi = np.asarray(phi, dtype=float)
        if t == 0:
            return Estimate(float(self.potential.value(phi)), 0.0)
        val = float(self._vt_batch(t, phi[None, :])[0])
        err = 0.0
        if self.method == "monte_carlo":
            pts, _ = self._points_for(0.0, self._effective_t(t))
            e = np.exp(-self.potential.value(phi[None, :] + pts))
            err = float(e.std() / (math.sqrt(len(e)) * e.mean()))
        return Estimate(val, err)

    def _weighted_moments(self, t: float, Phi: np.ndarray, want_hess: bool):
        """Self-normalised weights under e^{-V_0}; returns (w_grad, w_hess)."""
        t = self._effective_t(t)
        pts, logw = self._points_for(0.0, t)

        def one(block):
            X = block[:, None, :] + pts[None, :, :]
            lw = logw[None, :] - self.potential.value(X)
            self._check_ess(lw)
            w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
            g = self.potential.grad(X)
            mean_g = np.einsum("bk,bki->bi", w, g)
            if not want_hess:
                return mean_g, None
            H = self.potential.hess(X)
            mean_h = np.einsum("bk,bkij->bij", w, H)
            sec = np.einsum("bk,bki,bkj->bij", w, g, g)
            cov = sec - np.einsum("bi,bj->bij", mean_g, mean_g)
            return mean_g, mean_h - cov

        if Phi.shape[0] <= self.chunk:
            return one(Phi)
        gs, hs = [], []
        for i in range(0, Phi.shape[0], self.chunk):
            g, h = one(Phi[i : i + self.chunk])
            gs.append(g)
            hs.append(h)
        return np.concatenate(gs), (np.concatenate(hs) if want_hess else None)

    def grad_renormalized(self, t: float, phi: np.ndarray) -> np.ndarray:
        """gradient of V_t as the reweighted average of grad V_0."""
        phi = np.asarray(phi, dtype=float)
        if self.potential.is_zero:
            return np.zeros_like(phi)
        g, _ = self._weighted_moments(t, phi[None, :], want_hess=False)
        return g[0]

    def grad_renormalized_batch(self, t: float, Phi: np.ndarray) -> np.ndarray:
        if self.potential.is_zero:
            return np.zeros_like(Phi)
        g, _ = self._weighted_moments(t, Phi, want_hess=False)
        return g

    def hess_renormalized(self, t: float, phi: np.ndarray) -> np.ndarray:
        """Hessian of V_t: reweighted Hessian minus the weighted gradient covariance."""
        phi = np.asarray(phi, dtype=float)
        if self.potential.is_zero:
            return np.zeros((self.potential.dim, self.potential.dim))
        _, h = self._weighted_moments(t, phi[None, :], want_hess=True)
        return h[0]

    # -- semigroup -------------------------------------------------------------

    def apply_semigroup(self, query: SemigroupQuery) -> Estimate:
        return self.semigroup_value(query.s, query.t, query.observable, query.point)

    def semigroup_value(self, s: float, t: float, F, phi: np.ndarray) -> Estimate:
        """P_{s,t} F (phi): self-normalised average of F under weight e^{-V_s}."""
        phi = np.asarray(phi, dtype=float)
        t_eff = self._effective_t(t)
        if s == t:
            return Estimate(float(_obs_value(F, phi[None, :])[0]), 0.0)
        pts, logw = self._points_for(s, t_eff)
        X = phi[None, :] + pts
        lw = logw - self._vs_weight(s, X)
        self._check_ess(lw[None, :])
        w = np.exp(lw - logsumexp(lw))
        fx = np.asarray(_obs_value(F, X), dtype=float)
        val = float(w @ fx)
        err = 0.0
        if self.method == "monte_carlo":
            err = float(math.sqrt(np.sum(w**2 * (fx - val) ** 2)))
        return Estimate(val, err)

    def _vs_weight(self, s: float, X: np.ndarray) -> np.ndarray:
        if s == 0:
            return self.potential.value(X)
        return self._vt_batch(s, X)

    def semigroup_function(self, s: float, t: float, F):
        """P_{s,t}F as a batched callable (for composition checks)."""
        t_eff = self._effective_t(t)
        pts, logw = self._points_for(s, t_eff)

        def g(Phi):
            Phi = np.atleast_2d(np.asarray(Phi, dtype=float))

            def one(block):
                X = block[:, None, :] + pts[None, :, :]
                flat = X.reshape(-1, X.shape[-1])
                lw = logw[None, :] - self._vs_weight(s, flat).reshape(X.shape[:2])
                w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
                fx = np.asarray(_obs_value(F, flat), dtype=float).reshape(X.shape[:2])
                return np.einsum("bk,bk->b", w, fx)

            return self._map_chunked(Phi, one)

        return g

    def nu_expectation(self, t: float, F) -> Estimate:
        """E_{nu_t} F = P_{t,inf} F (0); t = inf returns F(0) exactly."""
        dim = self.potential.dim
        if math.isinf(t):
            return Estimate(float(_obs_value(F, np.zeros((1, dim)))[0]), 0.0)
        pts, logw = self._points(self._cov(t, math.inf), ("nu", t))
        lw = logw - self._vs_weight(t, pts)
        self._check_ess(lw[None, :])
        w = np.exp(lw - logsumexp(lw))
        fx = np.asarray(_obs_value(F, pts), dtype=float)
        val = float(w @ fx)
        err = 0.0
        if self.method == "monte_carlo":
            err = float(math.sqrt(np.sum(w**2 * (fx - val) ** 2)))
        return Estimate(val, err)

    # -- identity checks --------------------------------------------------------

    def flow_equation_residual(self, t: float, phi: np.ndarray, dt: float | None = None) -> float:
        """|d/dt V_t - (1/2) Delta_{Cdot} V_t + (1/2)(grad V_t)^2_{Cdot}|."""
        if dt is None:
            dt = max(1e-3, 1e-3 * t)
        if not (t > dt > 0):
            raise ValueError("need t > dt > 0")
        phi = np.asarray(phi, dtype=float)
        vp = self._vt_batch(t + dt, phi[None, :])[0]
        vm = self._vt_batch(t - dt, phi[None, :])[0]
        dv_dt = (vp - vm) / (2 * dt)
        cdot = self.schedule.cdot_matrix(t)
        g = self.grad_renormalized(t, phi)
        H = self.hess_renormalized(t, phi)
        lap = float(np.sum(cdot * H))
        grad2 = float(g @ cdot @ g)
        return abs(dv_dt - 0.5 * lap + 0.5 * grad2)

    def derivative_relation_residuals(
        self, s: float, t: float, f: np.ndarray, phi: np.ndarray
    ) -> tuple[float, float]:
        """Residuals of the transported-gradient and Hessian-variance relations."""
        f = np.asarray(f, dtype=float)
        phi = np.asarray(phi, dtype=float)
        g_t = self.grad_renormalized(t, phi)
        h_t = self.hess_renormalized(t, phi)
        lhs1 = float(f @ g_t)
        lhs2 = float(f @ h_t @ f)
        if s == t:
            return 0.0, 0.0

        def fdot(X):
            return self._grad_inner(s, X) @ f

        def fdot_sq(X):
            return (self._grad_inner(s, X) @ f) ** 2

        def fhess(X):
            Hs = self._hess_inner(s, X)
            return np.einsum("i,bij,j->b", f, Hs, f)

        p_fdot = self.semigroup_value(s, t, fdot, phi).value
        p_fdot_sq = self.semigroup_value(s, t, fdot_sq, phi).value
        p_fhess = self.semigroup_value(s, t, fhess, phi).value
        rhs2 = p_fhess - (p_fdot_sq - p_fdot**2)
        return abs(lhs1 - p_fdot), abs(lhs2 - rhs2)

    def _grad_inner(self, s: float, X: np.ndarray) -> np.ndarray:
        if s == 0:
            return self.potential.grad(X)
        return self.grad_renormalized_batch(s, X)

    def _hess_inner(self, s: float, X: np.ndarray) -> np.ndarray:
        if s == 0:
            return self.potential.hess(X)
        if self.potential.is_zero:
            d = self.potential.dim
            return np.zeros(X.shape[:-1] + (d, d))
        _, h = self._weighted_moments(s, X, want_hess=True)
        return h

    # -- semigroup with analytic derivatives (for the commutation identity) ----

    def semigroup_with_derivatives(self, t: float, obs: SmoothObservable, Phi: np.ndarray):
        """(G, grad G, He G) for G = P_{0,t} obs, by differentiating the integral."""
        t_eff = self._effective_t(t)
        pts, logw = self._points_for(0.0, t_eff)
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        dim = self.potential.dim

        def one(block):
            X = block[:, None, :] + pts[None, :, :]
            v0 = self.potential.value(X)
            lw = logw[None, :] - v0
            norm = logsumexp(lw, axis=1, keepdims=True)
            w = np.exp(lw - norm)  # normalised T_j / D
            F = obs.value(X)
            dF = obs.grad(X)
            HF = obs.hess(X)
            g0 = self.potential.grad(X)
            H0 = self.potential.hess(X)
            G = np.einsum("bk,bk->b", w, F)
            dN = np.einsum("bk,bki->bi", w, dF - F[..., None] * g0)
            dD = -np.einsum("bk,bki->bi", w, g0)
            outer = np.einsum("bki,bkj->bkij", g0, g0)
            HN = np.einsum(
                "bk,bkij->bij",
                w,
                HF
                - np.einsum("bki,bkj->bkij", dF, g0)
                - np.einsum("bki,bkj->bkij", g0, dF)
                + F[..., None, None] * (outer - H0),
            )
            HD = np.einsum("bk,bkij->bij", w, outer - H0)
            dG = dN - G[:, None] * dD
            HG = (
                HN
                - G[:, None, None] * HD
                - np.einsum("bi,bj->bij", dG, dD)
                - np.einsum("bi,bj->bij", dD, dG)
            )
            return G, dG, HG

        if Phi.shape[0] <= self.chunk:
            return one(Phi)
        Gs, dGs, HGs = [], [], []
        for i in range(0, Phi.shape[0], self.chunk):
            g, dg, hg = one(Phi[i : i + self.chunk])
            Gs.append(g)
            dGs.append(dg)
            HGs.append(hg)
        return np.concatenate(Gs), np.concatenate(dGs), np.concatenate(HGs)

    def _sqrt_grad_data(self, t: float, obs: SmoothObservable, Phi: np.ndarray):
        G, dG, HG = self.semigroup_with_derivatives(t, obs, Phi)
        if np.any(G <= 0):
            raise ValueError("observable must be strictly positive for sqrt/log")
        s = np.sqrt(G)
        ds = dG / (2 * s[:, None])
        Hs = HG / (2 * s[:, None, None]) - np.einsum("bi,bj->bij", dG, dG) / (
            4 * G[:, None, None] ** 1.5
        )
        return G, dG, HG, s, ds, Hs

    def _r_and_grad(self, t: float, obs: SmoothObservable, Q: np.ndarray, Phi: np.ndarray):
        _, _, _, _, ds, Hs = self._sqrt_grad_data(t, obs, Phi)
        R = np.einsum("bi,ij,bj->b", ds, Q, ds)
        gradR = 2 * np.einsum("bij,jk,bk->bi", Hs, Q, ds)
        return R, gradR

    def commutation_residual(
        self,
        t: float,
        Q: np.ndarray,
        obs: SmoothObservable,
        phi: np.ndarray,
        dt: float | None = None,
        fd_step: float = 1e-4,
    ) -> float:
        """Residual of the local convexity-commutation identity at (t, phi).

        Checks (L_t - d/dt)(grad sqrt(P_{0,t}F))^2_Q against the curvature
        term plus the Frobenius-norm dissipation term, with d/dt by central
        difference and the Q-form Laplacian by finite differences of the
        analytic gradient.
        """
        if self.potential.dim > 3:
            raise ValueError("commutation check gated at dim <= 3")
        if dt is None:
            dt = max(1e-3, 1e-3 * t)
        phi = np.asarray(phi, dtype=float)
        dim = self.potential.dim
        Q = np.asarray(Q, dtype=float)

        R0, gradR = self._r_and_grad(t, obs, Q, phi[None, :])
        R0, gradR = R0[0], gradR[0]

        # Hessian of R by central differences of the analytic gradient
        HR = np.zeros((dim, dim))
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = fd_step
            _, gp = self._r_and_grad(t, obs, Q, (phi + e)[None, :])
            _, gm = self._r_and_grad(t, obs, Q, (phi - e)[None, :])
            HR[k] = (gp[0] - gm[0]) / (2 * fd_step)
        HR = 0.5 * (HR + HR.T)

        cdot = self.schedule.cdot_matrix(t)
        g_v = self.grad_renormalized(t, phi)
        lhs_L = 0.5 * float(np.sum(cdot * HR)) - float(g_v @ cdot @ gradR)

        Rp, _ = self._r_and_grad(t + dt, obs, Q, phi[None, :])
        Rm, _ = self._r_and_grad(t - dt, obs, Q, phi[None, :])
        dR_dt = (Rp[0] - Rm[0]) / (2 * dt)

        G, dG, HG, _, ds, _ = self._sqrt_grad_data(t, obs, phi[None, :])
        G, dG, HG, ds = G[0], dG[0], HG[0], ds[0]
        HeV = self.hess_renormalized(t, phi)
        rhs_curv = 2 * float(ds @ Q @ (HeV @ (cdot @ ds)))
        Hlog = HG / G - np.outer(dG, dG) / G**2
        sq_cdot = _psd_sqrt(cdot)
        sq_Q = _psd_sqrt(Q)
        frob = float(np.sum((sq_cdot @ Hlog @ sq_Q) ** 2))
        rhs = rhs_curv + 0.25 * G * frob
        return abs((lhs_L - dR_dt) - rhs)

    # -- entropy decomposition ----------------------------------------------------

    def entropy_decomposition(self, obs: SmoothObservable, t_grid: Sequence[float]) -> dict:
        """Relative entropy of F vs its scale-resolved dissipation integral."""
        t_grid = np.asarray(sorted(t_grid), dtype=float)
        if t_grid[0] != 0.0:
            t_grid = np.concatenate([[0.0], t_grid])

        def phi_fun(x):
            return x * np.log(x)

        ef = self.nu_expectation(0.0, obs.value).value
        e_phif = self.nu_expectation(0.0, lambda X: phi_fun(obs.value(X))).value
        left = e_phif - phi_fun(ef)

        integrand = np.empty_like(t_grid)
        entropy_curve = np.empty_like(t_grid)
        for i, t in enumerate(t_grid):
            cdot = self.schedule.cdot_matrix(t)
            pts, logw = self._points(self._cov(t, math.inf), ("nu", float(t)))
            lw = logw - self._vs_weight(t, pts)
            w = np.exp(lw - logsumexp(lw))
            if t == 0:
                G = obs.value(pts)
                dG = obs.grad(pts)
            else:
                G, dG, _ = self.semigroup_with_derivatives(t, obs, pts)
            ds = dG / (2 * np.sqrt(G)[:, None])
            h = np.einsum("bi,ij,bj->b", ds, cdot, ds)
            integrand[i] = float(w @ h)
            entropy_curve[i] = float(w @ phi_fun(G))

        right_main = 2.0 * float(np.trapezoid(integrand, t_grid))
        tail = 2.0 * integrand[-1] / self.schedule.lambda_min
        right = right_main + tail
        if right > 0 and tail > 0.05 * right:
            raise ValueError(
                f"scale grid too short: tail estimate {tail:.3e} exceeds 5% of {right:.3e}"
            )
        return {
            "left": left,
            "right": right,
            "residual": left - right,
            "tail": tail,
            "t_grid": t_grid,
            "integrand": integrand,
            "entropy_curve": entropy_curve,
        }

    # -- backward sampler ------------------------------------------------------------

    def backward_sample(
        self,
        t_start: float,
        steps: int,
        seed: int,
        replicas: int,
        burn_in: int = 1000,
    ) -> np.ndarray:
        """Integrate the reverse scale SDE from t_start down to 0.

        Initialises from nu_{t_start} by independence Metropolis with the
        Gaussian(C_inf - C_{t_start}) proposal reweighted by e^{-V_{t_start}},
        then Euler-Maruyama for
        d phi = -Cdot_{T-r} grad V_{T-r}(phi) dr + sqrt(Cdot_{T-r}) dB_r.
        Returns (replicas, dim) fields distributed approximately as nu_0.
        """
        rng = np.random.default_rng(seed)
        dim = self.potential.dim
        cov_init = self._cov(t_start, math.inf)
        S = _psd_factor(cov_init)

        def draw(n):
            return rng.standard_normal((n, S.shape[1])) @ S.T

        phi = draw(replicas)
        if not self.potential.is_zero:
            v_curr = self._vt_batch(t_start, phi)
            for _ in range(burn_in):
                prop = draw(replicas)
                v_prop = self._vt_batch(t_start, prop)
                accept = np.log(rng.random(replicas)) < (v_curr - v_prop)
                phi[accept] = prop[accept]
                v_curr[accept] = v_prop[accept]

        dt = t_start / steps
        sq_dt = math.sqrt(dt)
        for j in range(steps):
            # midpoint scale stamp: second-order accurate noise variance
            u = t_start - (j + 0.5) * dt
            cdot = self.schedule.cdot_matrix(u)
            g = self.grad_renormalized_batch(u, phi)
            drift = -(g @ cdot) * dt
            if np.max(np.abs(drift)) > 1.0:
                raise RuntimeError(
                    f"backward step unstable at scale {u:.4g}: "
                    f"|drift*dt| = {np.max(np.abs(drift)):.3g} > 1"
                )
            noise = rng.standard_normal((replicas, dim)) @ _psd_sqrt(cdot).T
            phi = phi + drift + sq_dt * noise
        return phi


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, E = np.linalg.eigh(0.5 * (mat + mat.T))
    return (E * np.sqrt(np.clip(w, 0.0, None))) @ E.T
