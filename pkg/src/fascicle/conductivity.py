"""Scalar nonlinear conductivity laws sigma(eta) and their potentials.

A law must satisfy, on its validated range [0, eta_max],

    0 < sigma_lo <= sigma(eta) <= sigma_hi          (uniform bounds)
    sigma_lo <= eta * sigma'(eta) + sigma(eta)       (monotonicity)

with a single certified constant sigma_lo taken as the minimum of both
expressions; that constant is exactly the one entering the monotonicity
estimate  (sigma(|a|)a - sigma(|b|)b) . (a - b) >= sigma_lo |a - b|^2.

The error function used by the sigmoid law is a rational (Chebyshev
fitted) approximation with absolute error below 1.2e-7, chosen over the
platform libm so that results are bit-stable across systems.

Potentials Q(eta) = integral of sigma(z) z dz are evaluated by adaptive
panel-doubling Gauss-Legendre quadrature; the same code path serves both
the public scalar evaluations and the vectorized inner loops of the cell
solver, so energy comparisons are self-consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from fascicle.errors import NegativeEta, RangeExceeded

__all__ = [
    "ConductivityLaw",
    "Constant",
    "Sigmoid",
    "TableSpline",
    "ScaledLaw",
    "H5Report",
    "erf_rational",
    "sigma_eval",
    "q_potential",
    "validate_h5",
    "monotonicity_gap",
    "lambda_transform",
]


def erf_rational(x):
    """Error function by a rational Chebyshev fit; |abs error| < 1.2e-7.

    Evaluated via the complementary function for x >= 0 and reflected,
    so the bound holds uniformly.  Deterministic across platforms.
    """
    x = np.asarray(x, dtype=float)
    z = np.abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    tau = t * np.exp(
        -z * z - 1.26551223 + t * (1.00002368 + t * (0.37409196 + t * (
            0.09678418 + t * (-0.18628806 + t * (0.27886807 + t * (
                -1.13520398 + t * (1.48851587 + t * (
                    -0.82215223 + t * 0.17087277)))))))))
    out = np.where(x >= 0.0, 1.0 - tau, tau - 1.0)
    return out if out.ndim else float(out)


def _check_eta(eta):
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0.0):
        raise NegativeEta("field strength must be nonnegative")
    return eta


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass
class H5Report:
    eta_max: float
    n_grid: int
    sigma_lower: float
    sigma_upper: float
    passed: bool
    worst_eta: float
    violations: list


class ConductivityLaw:
    """Base class; subclasses provide sigma(eta) and dsigma(eta)."""

    kind = "abstract"

    def sigma(self, eta):
        raise NotImplementedError

    def dsigma(self, eta):
        raise NotImplementedError

    # cached H5 certification (set by validate_h5)
    _h5: Optional[H5Report] = None

    def q(self, eta):
        """Potential Q(eta) = int_0^eta sigma(z) z dz, vectorized.

        Adaptive panel-doubling Gauss-Legendre on the normalized interval;
        panels double until the relative change drops below 1e-12.
        """
        eta = _check_eta(eta)
        scalar = eta.ndim == 0
        e = np.atleast_1d(eta)
        # Q = eta^2 * int_0^1 sigma(eta s) s ds
        prev = None
        m = 1
        result = np.zeros_like(e)
        active = np.ones(e.shape, dtype=bool)
        while m <= 256:
            val = np.zeros_like(e)
            for p in range(m):
                s = (p + 0.5 * (_GL_NODES + 1.0)) / m
                w = _GL_WEIGHTS / (2.0 * m)
                z = e[active, None] * s[None, :]
                val_a = (self.sigma(z.ravel()).reshape(z.shape) * s[None, :]
                         * w[None, :]).sum(axis=1)
                val[active] += val_a
            val = val * e * e
            if prev is not None:
                done = np.abs(val - prev) <= 1e-12 * (1.0 + np.abs(val))
                result = np.where(active, val, result)
                newly = active & done
                active = active & ~done
                if not np.any(active):
                    result = np.where(newly, val, result)
                    break
            prev = val.copy()
            result = np.where(active, val, result)
            m *= 2
        return float(result[0]) if scalar else result.reshape(eta.shape)


@dataclass
class Constant(ConductivityLaw):
    value: float
    kind = "constant"

    def sigma(self, eta):
        eta = _check_eta(eta)
        return np.full_like(np.asarray(eta, dtype=float), self.value) if np.ndim(eta) else self.value

    def dsigma(self, eta):
        eta = _check_eta(eta)
        return np.zeros_like(np.asarray(eta, dtype=float)) if np.ndim(eta) else 0.0

    def q(self, eta):
        eta = _check_eta(eta)
        out = 0.5 * self.value * np.square(eta)
        return float(out) if np.ndim(eta) == 0 else out


@dataclass
class Sigmoid(ConductivityLaw):
    """sigma0 + (sigma1 - sigma0)/2 * (1 + erf(k_ep (eta - e_th)))."""

    sigma0: float
    sigma1: float
    k_ep: float
    e_th: float
    kind = "sigmoid"

    def sigma(self, eta):
        eta = _check_eta(eta)
        half = 0.5 * (self.sigma1 - self.sigma0)
        return self.sigma0 + half * (1.0 + erf_rational(self.k_ep * (eta - self.e_th)))

    def dsigma(self, eta):
        eta = _check_eta(eta)
        half = 0.5 * (self.sigma1 - self.sigma0)
        u = self.k_ep * (eta - self.e_th)
        return half * self.k_ep * (2.0 / math.sqrt(math.pi)) * np.exp(-u * u)


@dataclass
class TableSpline(ConductivityLaw):
    """C1 (shape-preserving cubic) interpolant of (eta, sigma) knots.

    Held constant beyond the last knot; certified only on the knot range.
    """

    knots: tuple
    kind = "table"
    _interp: PchipInterpolator = field(init=False, repr=False, compare=False)
    _deriv: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = sorted((float(e), float(s)) for e, s in self.knots)
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        if len(x) < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("table knots must have strictly increasing eta")
        object.__setattr__(self, "knots", tuple(pts))
        self._interp = PchipInterpolator(x, y, extrapolate=False)
        self._deriv = self._interp.derivative()

    @property
    def eta_range(self):
        return self.knots[0][0], self.knots[-1][0]

    def _clamped(self, eta):
        lo, hi = self.eta_range
        return np.clip(eta, lo, hi)

    def sigma(self, eta):
        eta = _check_eta(eta)
        out = self._interp(self._clamped(eta))
        return float(out) if np.ndim(eta) == 0 else out

    def dsigma(self, eta):
        eta = _check_eta(eta)
        e = np.asarray(eta, dtype=float)
        lo, hi = self.eta_range
        out = np.where((e < lo) | (e > hi), 0.0, self._deriv(self._clamped(e)))
        return float(out) if np.ndim(eta) == 0 else out


@dataclass
class ScaledLaw(ConductivityLaw):
    """eta -> base.sigma(scale * eta); the time-transformed conductivity.

    Preserves the uniform bounds of the base law (the argument is only
    rescaled), so the H5 constants carry over on the rescaled range.
    """

    base: ConductivityLaw
    scale: float
    kind = "scaled"

    def sigma(self, eta):
        eta = _check_eta(eta)
        return self.base.sigma(self.scale * np.asarray(eta, dtype=float)) if np.ndim(eta) \
            else self.base.sigma(self.scale * float(eta))

    def dsigma(self, eta):
        eta = _check_eta(eta)
        d = self.base.dsigma(self.scale * np.asarray(eta, dtype=float))
        out = self.scale * np.asarray(d, dtype=float)
        return float(out) if np.ndim(eta) == 0 else out


def sigma_eval(law: ConductivityLaw, eta):
    """Value of sigma(eta); eta must be nonnegative."""
    return law.sigma(_check_eta(eta))


def q_potential(law: ConductivityLaw, eta):
    """Potential Q(eta); Q(0) = 0, convex under the H5 conditions."""
    return law.q(_check_eta(eta))


def validate_h5(law: ConductivityLaw, eta_max: float, n_grid: int = 512) -> H5Report:
    """Certify the uniform bounds and the monotonicity constant on [0, eta_max].

    sigma_lower is the minimum over the grid (polished by local
    continuous minimization around grid minima) of
    min(sigma(eta), eta sigma'(eta) + sigma(eta)); the law passes iff
    sigma_lower > 0.  The certification is attached to the law for use by
    the monotonicity check.
    """
    if n_grid < 100:
        raise ValueError("n_grid must be >= 100")
    grid = np.linspace(0.0, eta_max, n_grid)
    s = np.asarray(law.sigma(grid), dtype=float)
    ds = np.asarray(law.dsigma(grid), dtype=float)
    expr = np.minimum(s, grid * ds + s)

    def local_min(fun, lo, hi):
        res = minimize_scalar(fun, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12 * max(1.0, eta_max)})
        return float(res.fun)

    f_expr = lambda e: float(min(law.sigma(e), e * law.dsigma(e) + law.sigma(e)))
    j = int(np.argmin(expr))
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, n_grid - 1)]
    sigma_lower = min(float(expr[j]), local_min(f_expr, lo, hi))
    jmax = int(np.argmax(s))
    f_neg = lambda e: -float(law.sigma(e))
    sigma_upper = max(float(s[jmax]),
                      -local_min(f_neg, grid[max(jmax - 1, 0)],
                                 grid[min(jmax + 1, n_grid - 1)]))
    violations = [(float(grid[i]), float(expr[i]))
                  for i in np.nonzero(expr <= 0.0)[0][:20]]
    report = H5Report(eta_max=float(eta_max), n_grid=n_grid,
                      sigma_lower=sigma_lower, sigma_upper=sigma_upper,
                      passed=sigma_lower > 0.0,
                      worst_eta=float(grid[j]), violations=violations)
    law._h5 = report
    return report


def monotonicity_gap(law: ConductivityLaw, xi: Sequence[float],
                     eta_vec: Sequence[float]) -> float:
    """(sigma(|a|)a - sigma(|b|)b).(a-b) - sigma_lower |a-b|^2 for 3-vectors.

    Requires an H5 certification covering the two magnitudes (run
    validate_h5 first; a default certification over a covering range is
    created if absent).  A law that failed certification is tested against
    the boundary constant 0, i.e. against plain monotonicity of the flux,
    which such laws genuinely violate.
    """
    a = np.asarray(xi, dtype=float)
    b = np.asarray(eta_vec, dtype=float)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if law._h5 is None:
        validate_h5(law, max(4.0, 2.0 * max(na, nb, 1.0)))
    if max(na, nb) > law._h5.eta_max * (1.0 + 1e-12):
        raise RangeExceeded(
            f"|xi|={na}, |eta|={nb} outside certified range [0, {law._h5.eta_max}]")
    fa = law.sigma(na) * a
    fb = law.sigma(nb) * b
    d = a - b
    sigma_lower = max(law._h5.sigma_lower, 0.0)
    return float(np.dot(fa - fb, d) - sigma_lower * np.dot(d, d))


def lambda_transform(law: ConductivityLaw, lam: float, t: float) -> ConductivityLaw:
    """The law eta -> sigma(exp(lam * t) * eta) used by the time factorization."""
    if lam < 0.0 or t < 0.0:
        raise ValueError("lambda and t must be nonnegative")
    scale = math.exp(lam * t)
    if scale == 1.0:
        return law
    if isinstance(law, Constant):
        return law
    if isinstance(law, ScaledLaw):
        return ScaledLaw(base=law.base, scale=law.scale * scale)
    return ScaledLaw(base=law, scale=scale)
