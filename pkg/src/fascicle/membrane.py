"""FitzHugh-Nagumo membrane dynamics and the monotonizing time transform.

The ionic current and recovery dynamics are

    I_ion(v, g) = v^3/3 - v - g,      dg/dt = theta v + a - b g.

The substitution v = exp(lam t) v_hat, g = exp(lam t) g_hat turns the
evolution into a monotone one provided

    lam >= (theta + 3) / 2   and   lam >= (theta + 1) / 2 - b,

with the transformed current

    I_hat(v, g, t) = exp(2 lam t)/3 v^3 + (c_m lam - 1) v - g

and recovery  dg_hat/dt = theta v_hat + a exp(-lam t) - (b + lam) g_hat.

The module also provides the class-wise projection used by the
multidomain limit: recovery data on the membrane prototype is replaced by
its per-radius-class average, weighted by the Palm masses mu_k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fascicle.errors import EmptyClass, LambdaTooSmall

__all__ = [
    "FhnParams",
    "ClassField",
    "Equilibrium",
    "i_ion",
    "recovery_rhs",
    "recovery_rhs_hat",
    "equilibrium",
    "lambda_bound",
    "i_ion_hat",
    "hat_increment_form",
    "project_classwise",
    "DEFAULT_FHN",
]


@dataclass(frozen=True)
class FhnParams:
    c_m: float = 1.0
    theta: float = 0.08
    a: float = 0.7
    b: float = 0.8

    def __post_init__(self):
        if self.theta <= 0 or self.b <= 0 or self.c_m <= 0:
            raise ValueError("theta, b, c_m must be positive")
        if self.a < 0:
            raise ValueError("a must be nonnegative")


DEFAULT_FHN = FhnParams()


def i_ion(v, g):
    """Cubic ionic current v^3/3 - v - g."""
    v = np.asarray(v, dtype=float) if np.ndim(v) else v
    return v ** 3 / 3.0 - v - g


def recovery_rhs(v, g, p: FhnParams):
    """Recovery dynamics theta v + a - b g."""
    return p.theta * v + p.a - p.b * g


def recovery_rhs_hat(v_hat, g_hat, t: float, lam: float, p: FhnParams):
    """Transformed recovery dynamics theta v + a e^{-lam t} - (b + lam) g."""
    return p.theta * v_hat + p.a * math.exp(-lam * t) - (p.b + lam) * g_hat


@dataclass
class Equilibrium:
    roots: list          # [(v, g)] all real equilibria
    rest: tuple          # the flagged rest state (v*, g*)


def equilibrium(p: FhnParams) -> Equilibrium:
    """Real equilibria of the membrane ODE; flags the rest state.

    Eliminating g gives the depressed cubic
        v^3 - 3 (1 + theta/b) v - 3 a/b = 0.
    Roots from the companion matrix are polished by Newton.  The largest
    real root is flagged as the rest state: it is the unique root when
    the cubic is monotone-bracketed and the stable branch otherwise.
    """
    pcoef = 3.0 * (1.0 + p.theta / p.b)
    qcoef = 3.0 * p.a / p.b
    roots = np.roots([1.0, 0.0, -pcoef, -qcoef])
    real = []
    for z in roots:
        if abs(z.imag) < 1e-8 * (1.0 + abs(z)):
            v = float(z.real)
            for _ in range(60):
                f = v ** 3 - pcoef * v - qcoef
                df = 3.0 * v ** 2 - pcoef
                if df == 0.0:
                    break
                step = f / df
                v -= step
                if abs(step) < 1e-15 * (1.0 + abs(v)):
                    break
            real.append(v)
    real = sorted(set(round(v, 14) for v in real))
    pairs = [(v, (p.theta * v + p.a) / p.b) for v in real]
    rest = pairs[-1]
    return Equilibrium(roots=pairs, rest=rest)


def lambda_bound(p: FhnParams) -> float:
    """Smallest transform rate making the coupled increment monotone."""
    return max(0.5 * (p.theta + 3.0), 0.5 * (p.theta + 1.0) - p.b)


def i_ion_hat(v_hat, g_hat, t: float, lam: float, p: FhnParams):
    """Transformed ionic current; requires lam >= lambda_bound(p)."""
    if lam < lambda_bound(p) - 1e-12:
        raise LambdaTooSmall(
            f"lambda={lam} below bound {lambda_bound(p)}")
    v_hat = np.asarray(v_hat, dtype=float) if np.ndim(v_hat) else v_hat
    return (math.exp(2.0 * lam * t) / 3.0) * v_hat ** 3 \
        + (p.c_m * lam - 1.0) * v_hat - g_hat


def hat_increment_form(s1, s2, t: float, lam: float, p: FhnParams) -> float:
    """Monotonicity increment of the transformed system for two states.

    For states s = (v_hat, g_hat) the quantity

        (I_hat(s1) - I_hat(s2)) (v1 - v2)
      + ((b + lam)(g1 - g2) - theta (v1 - v2)) (g1 - g2)

    is nonnegative for all pairs precisely when lam meets the bound.
    Raising LambdaTooSmall is deliberately avoided here: the form is used
    as a negative control below the bound.
    """
    v1, g1 = s1
    v2, g2 = s2
    e2 = math.exp(2.0 * lam * t)
    di = (e2 / 3.0) * (v1 ** 3 - v2 ** 3) + (p.c_m * lam - 1.0) * (v1 - v2) - (g1 - g2)
    dv = v1 - v2
    dg = g1 - g2
    return float(di * dv + ((p.b + lam) * dg - p.theta * dv) * dg)


@dataclass
class ClassField:
    """Per-radius-class scalar fields with consistent Palm/volume weights.

    The volume fractions are derived from the Palm masses through
    lambda_k = (r_k / 2) mu_k, evaluated with that exact expression so the
    identity holds to the last bit.
    """

    values: list                 # per class: np.ndarray (arbitrary shape)
    radii: np.ndarray            # (K,)
    mu: np.ndarray               # (K,) Palm masses
    lambda_: np.ndarray = field(init=False)

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if np.any(self.mu < 0.0):
            raise ValueError("Palm masses must be nonnegative")
        if len(self.values) != len(self.radii) or len(self.radii) != len(self.mu):
            raise ValueError("values, radii, mu must have one entry per class")
        self.lambda_ = (self.radii / 2.0) * self.mu


def project_classwise(samples: Sequence[np.ndarray], radii: Sequence[float],
                      mu: Sequence[float]) -> ClassField:
    """Replace each class's sampled values by their class average.

    ``samples[k]`` stacks equally weighted membrane samples of class k
    along axis 0 (any residual axes are spatial).  The projection is the
    per-class mean, hence idempotent.
    """
    out = []
    for k, s in enumerate(samples):
        s = np.asarray(s, dtype=float)
        if s.size == 0:
            raise EmptyClass(f"class {k + 1} received no samples")
        out.append(np.mean(np.atleast_1d(s), axis=0))
    return ClassField(values=out, radii=np.asarray(radii, dtype=float),
                      mu=np.asarray(mu, dtype=float))
