"""Macroscopic multidomain solver for the homogenized fascicle model.

Unknowns on a structured grid over the fascicle domain: one extracellular
potential u_e and, per axon radius class k, the transmembrane potential
v_k and recovery g_k.  The intracellular potential is derived,
u_ik = v_k + u_e, so the jump identity holds exactly at every node.

Per class, the cable equation

    c_m dv_k/dt + I_ion(v_k, g_k) = (r_k/2) d/dx1 ( sigma_i(|d u_ik|) d u_ik )

couples to the extracellular balance

    sum_k lambda_k d/dx1(sigma_i(|d u_ik|) d u_ik) + div sigma_hom(grad u_e) = -S,

with lambda_k = (r_k/2) mu_k, Dirichlet (grounded) or zero-flux (sealed)
conditions at the fascicle bases, and either a lateral Neumann stimulus
(2D) or an interior current density (1D, where no lateral boundary
exists).

Two time steppers are provided.  "imex": exact integrating-factor update
of g, explicit ionic current, backward Euler in v coupled to the
extracellular solve through an outer fixed point.  "implicit_lambda":
backward Euler on the exponentially rescaled variables with rate
lambda >= max((theta+3)/2, (theta+1)/2 - b), where the full increment
operator is monotone, then rescaled back; this mode is slower but
unconditionally safe and serves as a cross-check of the imex path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from fascicle.cell_problem import EffectiveLawTable
from fascicle.conductivity import ConductivityLaw, lambda_transform
from fascicle.errors import (LambdaTooSmall, NewtonDivergence, NonConvergence,
                             StepRejected, TableRange)
from fascicle.membrane import FhnParams, equilibrium, i_ion, lambda_bound

__all__ = [
    "AxonClass",
    "Stimulus",
    "MacroConfig",
    "MacroState",
    "EnergyDiagnostics",
    "TimeSeries",
    "classes_from_lattice",
    "solve_extracellular",
    "step",
    "run",
    "energy_diagnostics",
    "front_positions",
    "front_speed",
]


@dataclass(frozen=True)
class AxonClass:
    """Radius class with Palm mass mu; the volume weight is (r/2) mu."""

    r: float
    mu: float

    @property
    def lam(self) -> float:
        return (self.r / 2.0) * self.mu


def classes_from_lattice(radius_classes: Sequence[tuple[float, float]]) -> list:
    """Classes for the lattice models: mu_k = 2 pi r_k p_k."""
    return [AxonClass(r=r, mu=2.0 * math.pi * r * p) for r, p in radius_classes]


def _c1_pulse(t: float, t_on: float, t_off: float, t_ramp: float) -> float:
    """C1 ramped square pulse in time (smoothstep edges)."""
    if t <= t_on or t >= t_off:
        return 0.0
    s = 1.0
    if t < t_on + t_ramp:
        x = (t - t_on) / t_ramp
        s = x * x * (3.0 - 2.0 * x)
    elif t > t_off - t_ramp:
        x = (t_off - t) / t_ramp
        s = x * x * (3.0 - 2.0 * x)
    return s


@dataclass(frozen=True)
class Stimulus:
    """Ramped stimulus; interpretation depends on kind.

    kind "interior": current density on cells with |x - x_center| < width/2
    (the 1D stand-in for the lateral electrode).  kind "lateral": Neumann
    flux on both lateral sides, bipolar: positive electrode at x_center,
    negative at x_center2.
    """

    kind: str                    # "interior" | "lateral"
    amplitude: float
    t_on: float
    t_off: float
    t_ramp: float
    x_center: float
    width: float
    x_center2: Optional[float] = None

    def time_factor(self, t: float) -> float:
        return _c1_pulse(t, self.t_on, self.t_off, self.t_ramp)

    def spatial_profile(self, x: np.ndarray) -> np.ndarray:
        def bump(c):
            s = np.clip(np.abs(x - c) / (0.5 * self.width), 0.0, 1.0)
            return (1.0 - s * s) ** 2
        prof = bump(self.x_center)
        if self.x_center2 is not None:
            prof = prof - bump(self.x_center2)
        return prof

    def density(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.amplitude * self.time_factor(t) * self.spatial_profile(x)


@dataclass
class MacroConfig:
    length: float
    nx: int
    dt: float
    t_end: float
    classes: list
    law_i: ConductivityLaw
    fhn: FhnParams = field(default_factory=FhnParams)
    scheme: str = "imex"
    width: Optional[float] = None      # transverse extent; None means 1D
    ny: Optional[int] = None
    extracellular: str = "law"         # "law" | "table" | "clamped"
    sigma_hom_law: Optional[ConductivityLaw] = None
    sigma_hom_table: Optional[EffectiveLawTable] = None
    bc: str = "grounded"               # "grounded" | "sealed"
    stimulus: Optional[Stimulus] = None
    v_init: Union[str, Callable] = "rest"
    g_init: Union[str, Callable] = "rest"
    lam: Union[str, float] = "auto"
    fp_tol: float = 1e-9
    newton_tol: float = 1e-10
    max_fp_iter: int = 60
    max_newton_iter: int = 50
    snapshot_every: int = 1
    ceilings: Optional[dict] = None

    @property
    def is_2d(self) -> bool:
        return self.width is not None

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dy(self) -> float:
        return self.width / self.ny if self.is_2d else 1.0

    @property
    def cell_measure(self) -> float:
        return self.dx * (self.dy if self.is_2d else 1.0)

    def lambda_value(self) -> float:
        lb = lambda_bound(self.fhn)
        if self.lam == "auto":
            return lb
        lam = float(self.lam)
        if lam < lb - 1e-12:
            raise LambdaTooSmall(f"lambda={lam} below bound {lb}")
        return lam

    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def validate(self) -> None:
        if self.dt <= 0.0 or self.t_end < 0.0:
            raise ValueError("dt must be positive, t_end nonnegative")
        if self.scheme not in ("imex", "implicit_lambda"):
            raise ValueError(f"unknown scheme {self.scheme}")
        if self.bc not in ("grounded", "sealed"):
            raise ValueError(f"unknown bc {self.bc}")
        if self.extracellular not in ("law", "table", "clamped"):
            raise ValueError(f"unknown extracellular mode {self.extracellular}")
        if self.extracellular == "law" and self.sigma_hom_law is None:
            raise ValueError("extracellular='law' requires sigma_hom_law")
        if self.extracellular == "table" and self.sigma_hom_table is None:
            raise ValueError("extracellular='table' requires sigma_hom_table")
        if self.is_2d and not self.ny:
            raise ValueError("2D configs need ny")
        if self.stimulus and self.stimulus.kind == "lateral" and not self.is_2d:
            raise ValueError("lateral stimulus needs a 2D domain")
        if self.scheme == "implicit_lambda":
            self.lambda_value()


@dataclass
class MacroState:
    t: float
    u_e: np.ndarray              # (nx,) or (nx, ny)
    v: list                      # per class
    g: list

    def u_i(self, k: int) -> np.ndarray:
        """Intracellular potential of class k; the jump identity by construction."""
        return self.v[k] + self.u_e

    def copy(self) -> "MacroState":
        return MacroState(self.t, self.u_e.copy(),
                          [x.copy() for x in self.v],
                          [x.copy() for x in self.g])


@dataclass
class EnergyDiagnostics:
    sup_v4: float = 0.0
    cum_dvdt2: float = 0.0
    sup_g2: float = 0.0
    cum_dgdt2: float = 0.0

    def as_dict(self) -> dict:
        return {"sup_v4": self.sup_v4, "cum_dvdt2": self.cum_dvdt2,
                "sup_g2": self.sup_g2, "cum_dgdt2": self.cum_dgdt2}


@dataclass
class TimeSeries:
    times: list
    states: list
    diagnostics: EnergyDiagnostics
    config: MacroConfig
    step_count: int = 0
    monotone_violations: int = 0


# ---------------------------------------------------------------------------
# extracellular flux models
# ---------------------------------------------------------------------------

class _LawFlux:
    def __init__(self, law: ConductivityLaw):
        self.law = law

    def flux(self, d: np.ndarray) -> np.ndarray:
        return self.law.sigma(np.abs(d)) * d

    def tangent(self, d: np.ndarray) -> np.ndarray:
        a = np.abs(d)
        return self.law.sigma(a) + self.law.dsigma(a) * a

    def flux2(self, d1, d2):
        mag = np.hypot(d1, d2)
        s = self.law.sigma(mag)
        return s * d1, s * d2


class _TableFlux:
    def __init__(self, table: EffectiveLawTable):
        self.t = table
        self.long0 = table.sigma_long[:, 0]

    def _check(self, a: np.ndarray, axis_max: float):
        if np.any(a > axis_max * (1.0 + 1e-12)):
            raise TableRange(
                f"gradient magnitude {float(np.max(a))} exceeds table range {axis_max}")

    def flux(self, d: np.ndarray) -> np.ndarray:
        a = np.abs(d)
        self._check(a, self.t.xi1_grid[-1])
        return np.sign(d) * np.interp(a, self.t.xi1_grid, self.long0)

    def tangent(self, d: np.ndarray) -> np.ndarray:
        eps = 1e-7 * (1.0 + np.abs(d))
        return (self.flux(np.minimum(d + eps, self.t.xi1_grid[-1]))
                - self.flux(np.maximum(d - eps, -self.t.xi1_grid[-1]))) / (2.0 * eps)

    def flux2(self, d1, d2):
        from fascicle.cell_problem import interpolate_sigma_hom

        out1 = np.zeros_like(d1)
        out2 = np.zeros_like(d2)
        it = np.nditer(d1, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            f = interpolate_sigma_hom(self.t, (d1[idx], d2[idx], 0.0))
            out1[idx], out2[idx] = f[0], f[1]
        return out1, out2


class _ScaledFlux:
    """Time-transformed flux  D -> F(s D) / s  (s = exp(lambda t))."""

    def __init__(self, base, scale: float):
        self.base = base
        self.s = scale

    def flux(self, d):
        return self.base.flux(self.s * d) / self.s

    def tangent(self, d):
        return self.base.tangent(self.s * d)

    def flux2(self, d1, d2):
        f1, f2 = self.base.flux2(self.s * d1, self.s * d2)
        return f1 / self.s, f2 / self.s


def _extracellular_flux_model(cfg: MacroConfig):
    if cfg.extracellular == "law":
        return _LawFlux(cfg.sigma_hom_law)
    if cfg.extracellular == "table":
        return _TableFlux(cfg.sigma_hom_table)
    return None


def _intra_flux_model(law: ConductivityLaw):
    return _LawFlux(law)


# ---------------------------------------------------------------------------
# extracellular solve
# ---------------------------------------------------------------------------

def _face_diff_1d(field: np.ndarray, dx: float, bc: str):
    """Face-centered derivative with Dirichlet-0 or sealed boundary faces."""
    n = field.shape[0]
    d = np.zeros(n + 1)
    d[1:n] = (field[1:] - field[:-1]) / dx
    if bc == "grounded":
        d[0] = field[0] / (0.5 * dx)
        d[n] = -field[-1] / (0.5 * dx)
    return d


def _face_weights_1d(n: int, dx: float, bc: str) -> np.ndarray:
    """1/denominator of each face difference (0 at sealed boundary faces)."""
    w = np.full(n + 1, 1.0 / dx)
    if bc == "grounded":
        w[0] = w[n] = 1.0 / (0.5 * dx)
    else:
        w[0] = w[n] = 0.0
    return w


def _residual_1d(u: np.ndarray, v: list, cfg: MacroConfig, flux_e, flux_i,
                 source: Optional[np.ndarray]):
    dx = cfg.dx
    fe = flux_e.flux(_face_diff_1d(u, dx, cfg.bc)) if flux_e else 0.0
    total = fe if flux_e else np.zeros(cfg.nx + 1)
    for k, cls in enumerate(cfg.classes):
        dik = _face_diff_1d(v[k] + u, dx, cfg.bc)
        total = total + cls.lam * flux_i.flux(dik)
    if cfg.bc == "sealed":
        total[0] = total[-1] = 0.0
    r = -(total[1:] - total[:-1]) / dx
    if source is not None:
        r = r - source
    return r


def _tangent_faces_1d(u: np.ndarray, v: list, cfg: MacroConfig, flux_e, flux_i):
    dx = cfg.dx
    tau = np.zeros(cfg.nx + 1)
    if flux_e:
        tau = tau + flux_e.tangent(_face_diff_1d(u, dx, cfg.bc))
    for k, cls in enumerate(cfg.classes):
        tau = tau + cls.lam * flux_i.tangent(_face_diff_1d(v[k] + u, dx, cfg.bc))
    return tau


def _solve_newton_1d(u0: np.ndarray, residual, tangent_faces, cfg: MacroConfig,
                     tol: float, max_iter: int):
    """Damped Newton on a face-flux 1D system with tridiagonal Jacobian.

    With sealed ends the system is pure-Neumann, determined up to a
    constant; the mean of u is pinned to zero as the gauge.
    """
    n = cfg.nx
    dx = cfg.dx
    pin_mean = cfg.bc == "sealed"
    w = _face_weights_1d(n, dx, cfg.bc)
    u = u0.copy()
    if pin_mean:
        u = u - u.mean()
    r = residual(u)
    rn = float(np.max(np.abs(r)))
    history = [rn]
    for _ in range(max_iter):
        if rn <= tol:
            return u, history
        tau = tangent_faces(u) * w
        # rows: dR[j]/du = (tau[j] + tau[j+1])/dx diag, -tau/dx off-diag
        ab = np.zeros((3, n))
        ab[1, :] = (tau[:-1] + tau[1:]) / dx
        ab[0, 1:] = -tau[1:-1] / dx
        ab[2, :-1] = -tau[1:-1] / dx
        if pin_mean:
            ab[1, :] += 1e-12 * float(np.max(np.abs(ab[1, :])))
        delta = solve_banded((1, 1), ab, -r)
        if pin_mean:
            delta = delta - delta.mean()
        alpha = 1.0
        for _ in range(50):
            u_try = u + alpha * delta
            r_try = residual(u_try)
            rn_try = float(np.max(np.abs(r_try)))
            if rn_try <= (1.0 - 1e-4 * alpha) * rn + 1e-30:
                u, r, rn = u_try, r_try, rn_try
                break
            alpha *= 0.5
        else:
            raise NewtonDivergence("1D extracellular line search exhausted")
        history.append(rn)
    if rn <= tol:
        return u, history
    raise NonConvergence(f"extracellular Newton stalled at residual {rn}")


def _grad_y_at_xfaces(u: np.ndarray, dy: float) -> np.ndarray:
    """Tangential derivative reconstructed at interior x-faces."""
    nx, ny = u.shape
    dudy = np.zeros((nx, ny))
    dudy[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * dy)
    dudy[:, 0] = (u[:, 1] - u[:, 0]) / dy
    dudy[:, -1] = (u[:, -1] - u[:, -2]) / dy
    return 0.5 * (dudy[:-1, :] + dudy[1:, :])


def _grad_x_at_yfaces(u: np.ndarray, dx: float) -> np.ndarray:
    nx, ny = u.shape
    dudx = np.zeros((nx, ny))
    dudx[1:-1, :] = (u[2:, :] - u[:-2, :]) / (2.0 * dx)
    dudx[0, :] = (u[1, :] - u[0, :]) / dx
    dudx[-1, :] = (u[-1, :] - u[-2, :]) / dx
    return 0.5 * (dudx[:, :-1] + dudx[:, 1:])


def _residual_2d(u: np.ndarray, v: list, cfg: MacroConfig, flux_e, flux_i,
                 source: Optional[np.ndarray], t: float, lateral_scale: float):
    nx, ny = cfg.nx, cfg.ny
    dx, dy = cfg.dx, cfg.dy
    # x-faces (nx+1, ny): intracellular + extracellular x-flux
    fx = np.zeros((nx + 1, ny))
    dn_x = np.zeros((nx + 1, ny))
    dn_x[1:nx, :] = (u[1:, :] - u[:-1, :]) / dx
    if cfg.bc == "grounded":
        dn_x[0, :] = u[0, :] / (0.5 * dx)
        dn_x[nx, :] = -u[-1, :] / (0.5 * dx)
    if flux_e:
        dt_x = np.zeros((nx + 1, ny))
        dt_x[1:nx, :] = _grad_y_at_xfaces(u, dy)
        f1, _ = flux_e.flux2(dn_x, dt_x)
        fx += f1
    for k, cls in enumerate(cfg.classes):
        uik = v[k] + u
        dik = np.zeros((nx + 1, ny))
        dik[1:nx, :] = (uik[1:, :] - uik[:-1, :]) / dx
        if cfg.bc == "grounded":
            dik[0, :] = uik[0, :] / (0.5 * dx)
            dik[nx, :] = -uik[-1, :] / (0.5 * dx)
        fx += cls.lam * flux_i.flux(dik)
    if cfg.bc == "sealed":
        fx[0, :] = fx[nx, :] = 0.0
    # y-faces (nx, ny+1): extracellular only; lateral Neumann data
    fy = np.zeros((nx, ny + 1))
    if flux_e:
        dn_y = np.zeros((nx, ny + 1))
        dn_y[:, 1:ny] = (u[:, 1:] - u[:, :-1]) / dy
        dt_y = np.zeros((nx, ny + 1))
        dt_y[:, 1:ny] = _grad_x_at_yfaces(u, dx)
        _, f2 = flux_e.flux2(dt_y, dn_y)
        fy += f2
    if cfg.stimulus is not None and cfg.stimulus.kind == "lateral":
        x = cfg.x_centers()
        j = cfg.stimulus.density(t, x) * lateral_scale
        # outward flux = J on both lateral sides
        fy[:, ny] = j
        fy[:, 0] = -j
    else:
        fy[:, 0] = 0.0
        fy[:, ny] = 0.0
    r = -((fx[1:, :] - fx[:-1, :]) / dx + (fy[:, 1:] - fy[:, :-1]) / dy)
    if source is not None:
        r = r - source
    return r


def _solve_newton_2d(u0: np.ndarray, v: list, cfg: MacroConfig, flux_e, flux_i,
                     source, t: float, tol: float, max_iter: int,
                     lateral_scale: float):
    """Quasi-Newton with normal-direction tangents (5-point sparse Jacobian)."""
    nx, ny = cfg.nx, cfg.ny
    dx, dy = cfg.dx, cfg.dy
    u = u0.copy()

    def resid(uu):
        return _residual_2d(uu, v, cfg, flux_e, flux_i, source, t, lateral_scale)

    r = resid(u)
    rn = float(np.max(np.abs(r)))
    history = [rn]
    for _ in range(max_iter):
        if rn <= tol:
            return u, history
        taux = np.zeros((nx + 1, ny))
        dn_x = np.zeros((nx + 1, ny))
        dn_x[1:nx, :] = (u[1:, :] - u[:-1, :]) / dx
        wfx = np.zeros((nx + 1, ny))
        wfx[1:nx, :] = 1.0 / dx
        if cfg.bc == "grounded":
            dn_x[0, :] = u[0, :] / (0.5 * dx)
            dn_x[nx, :] = -u[-1, :] / (0.5 * dx)
            wfx[0, :] = wfx[nx, :] = 1.0 / (0.5 * dx)
        if flux_e:
            taux += flux_e.tangent(dn_x) if hasattr(flux_e, "tangent") else 0.0
        for k, cls in enumerate(cfg.classes):
            uik = v[k] + u
            dik = np.zeros((nx + 1, ny))
            dik[1:nx, :] = (uik[1:, :] - uik[:-1, :]) / dx
            if cfg.bc == "grounded":
                dik[0, :] = uik[0, :] / (0.5 * dx)
                dik[nx, :] = -uik[-1, :] / (0.5 * dx)
            taux += cls.lam * flux_i.tangent(dik)
        taux *= wfx
        tauy = np.zeros((nx, ny + 1))
        if flux_e:
            dn_y = np.zeros((nx, ny + 1))
            dn_y[:, 1:ny] = (u[:, 1:] - u[:, :-1]) / dy
            tauy[:, 1:ny] = flux_e.tangent(dn_y[:, 1:ny]) / dy

        N = nx * ny
        idx = np.arange(N).reshape(nx, ny)
        rows, cols, vals = [], [], []

        def add(rr, cc, vv):
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(vv.ravel())

        diag = (taux[1:, :] + taux[:-1, :]) / dx + (tauy[:, 1:] + tauy[:, :-1]) / dy
        add(idx, idx, diag)
        add(idx[1:, :], idx[:-1, :], -taux[1:nx, :] / dx)
        add(idx[:-1, :], idx[1:, :], -taux[1:nx, :] / dx)
        add(idx[:, 1:], idx[:, :-1], -tauy[:, 1:ny] / dy)
        add(idx[:, :-1], idx[:, 1:], -tauy[:, 1:ny] / dy)
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N, N)).tocsr()
        if cfg.bc == "sealed":
            A = A + sp.identity(N, format="csr") * (1e-12 * float(np.max(diag)))
        delta = spla.spsolve(A, -r.ravel()).reshape(nx, ny)
        if cfg.bc == "sealed":
            delta = delta - delta.mean()
        alpha = 1.0
        for _ in range(50):
            u_try = u + alpha * delta
            r_try = resid(u_try)
            rn_try = float(np.max(np.abs(r_try)))
            if rn_try <= (1.0 - 1e-4 * alpha) * rn + 1e-30:
                u, r, rn = u_try, r_try, rn_try
                break
            alpha *= 0.5
        else:
            raise NewtonDivergence("2D extracellular line search exhausted")
        history.append(rn)
    if rn <= tol:
        return u, history
    raise NonConvergence(f"extracellular Newton stalled at residual {rn}")


def solve_extracellular(v: list, cfg: MacroConfig, tol: Optional[float] = None,
                        t: float = 0.0, source: Optional[np.ndarray] = None,
                        u_init: Optional[np.ndarray] = None,
                        lam_scale: float = 1.0) -> np.ndarray:
    """Solve the nonlinear extracellular balance for given class potentials.

    `source` is an optional volume current density (used by the 1D interior
    stimulus and by manufactured-solution verification).  `lam_scale` is
    exp(lambda t) when solving in transformed variables.
    """
    cfg.validate()
    tol = cfg.newton_tol if tol is None else tol
    shape = (cfg.nx, cfg.ny) if cfg.is_2d else (cfg.nx,)
    if cfg.extracellular == "clamped":
        return np.zeros(shape)
    flux_e = _extracellular_flux_model(cfg)
    law_i = cfg.law_i if lam_scale == 1.0 else None
    flux_i = _LawFlux(cfg.law_i) if lam_scale == 1.0 else \
        _ScaledFlux(_LawFlux(cfg.law_i), lam_scale)
    if lam_scale != 1.0 and flux_e is not None:
        flux_e = _ScaledFlux(flux_e, lam_scale)
    u0 = np.zeros(shape) if u_init is None else u_init.copy()
    if cfg.is_2d:
        u, _ = _solve_newton_2d(u0, v, cfg, flux_e, flux_i, source, t, tol,
                                cfg.max_newton_iter,
                                lateral_scale=1.0 / lam_scale)
        return u
    full_source = source
    if cfg.stimulus is not None and cfg.stimulus.kind == "interior":
        stim = cfg.stimulus.density(t, cfg.x_centers()) / lam_scale
        full_source = stim if source is None else source + stim
    resid = lambda u: _residual_1d(u, v, cfg, flux_e, flux_i, full_source)
    tang = lambda u: _tangent_faces_1d(u, v, cfg, flux_e, flux_i)
    u, _ = _solve_newton_1d(u0, resid, tang, cfg, tol, cfg.max_newton_iter)
    return u


# ---------------------------------------------------------------------------
# per-class cable solves
# ---------------------------------------------------------------------------

def _class_cable_solve(v_old: np.ndarray, rhs_fixed: np.ndarray,
                       u_e: np.ndarray, cls: AxonClass, cfg: MacroConfig,
                       dt: float, flux_i, reaction, reaction_tangent,
                       tol: float):
    """Backward-Euler cable step: Newton on

        c_m (v - v_old)/dt + reaction(v) - (r/2) div1 flux_i(d(v + u_e)) + rhs_fixed = 0

    Works on 1D arrays or 2D (x1-lines along axis 0, independent columns).
    Returns (v_new, residual_history).
    """
    cm = cfg.fhn.c_m
    dx = cfg.dx
    half_r = 0.5 * cls.r
    is2d = v_old.ndim == 2
    w = _face_weights_1d(cfg.nx, dx, cfg.bc)

    def div_flux(v):
        uik = v + u_e
        if is2d:
            d = np.zeros((cfg.nx + 1, uik.shape[1]))
            d[1:cfg.nx, :] = (uik[1:, :] - uik[:-1, :]) / dx
            if cfg.bc == "grounded":
                d[0, :] = uik[0, :] / (0.5 * dx)
                d[cfg.nx, :] = -uik[-1, :] / (0.5 * dx)
            f = flux_i.flux(d)
            if cfg.bc == "sealed":
                f[0, :] = f[cfg.nx, :] = 0.0
            return (f[1:, :] - f[:-1, :]) / dx
        d = _face_diff_1d(uik, dx, cfg.bc)
        f = flux_i.flux(d)
        if cfg.bc == "sealed":
            f[0] = f[-1] = 0.0
        return (f[1:] - f[:-1]) / dx

    def residual(v):
        return cm * (v - v_old) / dt + reaction(v) - half_r * div_flux(v) + rhs_fixed

    def tangent_faces(v):
        uik = v + u_e
        if is2d:
            d = np.zeros((cfg.nx + 1, uik.shape[1]))
            d[1:cfg.nx, :] = (uik[1:, :] - uik[:-1, :]) / dx
            if cfg.bc == "grounded":
                d[0, :] = uik[0, :] / (0.5 * dx)
                d[cfg.nx, :] = -uik[-1, :] / (0.5 * dx)
            return flux_i.tangent(d) * w[:, None]
        return flux_i.tangent(_face_diff_1d(uik, dx, cfg.bc)) * w

    v = v_old.copy()
    r = residual(v)
    rn = float(np.max(np.abs(r)))
    history = [rn]
    for _ in range(cfg.max_newton_iter):
        if rn <= tol:
            return v, history
        tau = tangent_faces(v)
        diag_r = reaction_tangent(v)
        if is2d:
            v_new = np.empty_like(v)
            for col in range(v.shape[1]):
                ab = np.zeros((3, cfg.nx))
                ab[1, :] = cm / dt + diag_r[:, col] \
                    + half_r * (tau[:-1, col] + tau[1:, col]) / dx
                ab[0, 1:] = -half_r * tau[1:cfg.nx, col] / dx
                ab[2, :-1] = -half_r * tau[1:cfg.nx, col] / dx
                v_new[:, col] = solve_banded((1, 1), ab, -r[:, col])
            delta = v_new
        else:
            ab = np.zeros((3, cfg.nx))
            ab[1, :] = cm / dt + diag_r + half_r * (tau[:-1] + tau[1:]) / dx
            ab[0, 1:] = -half_r * tau[1:cfg.nx] / dx
            ab[2, :-1] = -half_r * tau[1:cfg.nx] / dx
            delta = solve_banded((1, 1), ab, -r)
        alpha = 1.0
        for _ in range(50):
            v_try = v + alpha * delta
            r_try = residual(v_try)
            rn_try = float(np.max(np.abs(r_try)))
            if rn_try <= (1.0 - 1e-4 * alpha) * rn + 1e-30:
                v, r, rn = v_try, r_try, rn_try
                break
            alpha *= 0.5
        else:
            raise NewtonDivergence("cable line search exhausted")
        history.append(rn)
    if rn <= tol:
        return v, history
    raise NonConvergence(f"cable Newton stalled at residual {rn}")


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def _step_imex(state: MacroState, cfg: MacroConfig):
    p = cfg.fhn
    dt = cfg.dt
    t_new = state.t + dt
    # (i) exact integrating-factor recovery update with v frozen
    g_new = []
    for k in range(len(cfg.classes)):
        ginf = (p.theta * state.v[k] + p.a) / p.b
        g_new.append(ginf + (state.g[k] - ginf) * math.exp(-p.b * dt))
    # (ii) explicit ionic current at (v, g_new)
    i_exp = [i_ion(state.v[k], g_new[k]) for k in range(len(cfg.classes))]
    # (iii) backward Euler in v coupled to the extracellular solve
    flux_i = _LawFlux(cfg.law_i)
    zero_reac = lambda v: 0.0 * v
    zero_tan = lambda v: np.zeros_like(v)
    v_new = [v.copy() for v in state.v]
    u_e = state.u_e.copy()
    mono = 0
    for it in range(cfg.max_fp_iter):
        v_prev = [v.copy() for v in v_new]
        u_prev = u_e.copy()
        for k, cls in enumerate(cfg.classes):
            v_new[k], hist = _class_cable_solve(
                state.v[k], i_exp[k], u_e, cls, cfg, dt, flux_i,
                zero_reac, zero_tan, cfg.newton_tol)
            mono += sum(1 for a, b in zip(hist[:-1], hist[1:]) if b > a + 1e-30)
        if cfg.extracellular != "clamped":
            u_e = solve_extracellular(v_new, cfg, t=t_new, u_init=u_e)
        res = max(max(float(np.max(np.abs(v_new[k] - v_prev[k])))
                      for k in range(len(cfg.classes))),
                  float(np.max(np.abs(u_e - u_prev))))
        scale = 1.0 + max(float(np.max(np.abs(v_new[k]))) for k in range(len(cfg.classes)))
        if res <= cfg.fp_tol * scale:
            break
    else:
        raise NonConvergence("imex outer fixed point did not converge")
    return MacroState(t_new, u_e, v_new, g_new), mono


def _step_implicit_lambda(state: MacroState, cfg: MacroConfig):
    p = cfg.fhn
    dt = cfg.dt
    lam = cfg.lambda_value()
    t0, t1 = state.t, state.t + dt
    s0, s1 = math.exp(-lam * t0), math.exp(-lam * t1)
    e1 = 1.0 / s1  # exp(lam t1)
    vh = [v * s0 for v in state.v]
    gh = [g * s0 for g in state.g]
    # transformed laws at t1
    flux_i = _ScaledFlux(_LawFlux(cfg.law_i), e1)
    cg = 1.0 / (1.0 + dt * (p.b + lam))
    a_term = p.a * s1

    def ghat_plus(vhp, k):
        return cg * (gh[k] + dt * (p.theta * vhp + a_term))

    e2 = math.exp(2.0 * lam * t1)

    def reaction(vhp, k):
        return (e2 / 3.0) * vhp ** 3 + (p.c_m * lam - 1.0) * vhp - ghat_plus(vhp, k)

    def reaction_tangent(vhp):
        return e2 * vhp ** 2 + (p.c_m * lam - 1.0) - cg * dt * p.theta

    uh_e = state.u_e * s0
    vh_new = [v.copy() for v in vh]
    mono = 0
    for it in range(cfg.max_fp_iter):
        v_prev = [v.copy() for v in vh_new]
        u_prev = uh_e.copy()
        for k, cls in enumerate(cfg.classes):
            vh_new[k], hist = _class_cable_solve(
                vh[k], np.zeros_like(vh[k]), uh_e, cls, cfg, dt, flux_i,
                lambda v, kk=k: reaction(v, kk), reaction_tangent,
                cfg.newton_tol)
            mono += sum(1 for a, b in zip(hist[:-1], hist[1:]) if b > a + 1e-30)
        if cfg.extracellular != "clamped":
            uh_e = solve_extracellular(vh_new, cfg, t=t1, u_init=uh_e,
                                       lam_scale=e1)
        res = max(max(float(np.max(np.abs(vh_new[k] - v_prev[k])))
                      for k in range(len(cfg.classes))),
                  float(np.max(np.abs(uh_e - u_prev))))
        scale = 1.0 + max(float(np.max(np.abs(vh_new[k])))
                          for k in range(len(cfg.classes)))
        if res <= cfg.fp_tol * scale:
            break
    else:
        raise NonConvergence("implicit_lambda outer fixed point did not converge")
    g_new = [ghat_plus(vh_new[k], k) * e1 for k in range(len(cfg.classes))]
    v_new = [vh_new[k] * e1 for k in range(len(cfg.classes))]
    return MacroState(t1, uh_e * e1, v_new, g_new), mono


def step(state: MacroState, cfg: MacroConfig):
    """Advance one time step; returns (new_state, monotonicity_violations)."""
    cfg.validate()
    if cfg.scheme == "imex":
        return _step_imex(state, cfg)
    return _step_implicit_lambda(state, cfg)


def initial_state(cfg: MacroConfig) -> MacroState:
    """Initial data: callables of x (1D) or broadcast constants, or rest values."""
    cfg.validate()
    shape = (cfg.nx, cfg.ny) if cfg.is_2d else (cfg.nx,)
    x = cfg.x_centers()
    eq = equilibrium(cfg.fhn)
    v_rest, g_rest = eq.rest

    def build(spec, rest_value):
        if isinstance(spec, str) and spec == "rest":
            return np.full(shape, rest_value)
        if callable(spec):
            prof = np.asarray(spec(x), dtype=float)
            if cfg.is_2d:
                return np.broadcast_to(prof[:, None], shape).copy()
            return prof.copy()
        return np.full(shape, float(spec))

    v = [build(cfg.v_init, v_rest) for _ in cfg.classes]
    g = [build(cfg.g_init, g_rest) for _ in cfg.classes]
    u_e = solve_extracellular(v, cfg, t=0.0)
    return MacroState(0.0, u_e, v, g)


def _accumulate(diag: EnergyDiagnostics, old: MacroState, new: MacroState,
                cfg: MacroConfig) -> None:
    meas = cfg.cell_measure
    dt = cfg.dt
    v4 = sum(cls.mu * float(np.sum(new.v[k] ** 4)) * meas
             for k, cls in enumerate(cfg.classes))
    g2 = sum(cls.mu * float(np.sum(new.g[k] ** 2)) * meas
             for k, cls in enumerate(cfg.classes))
    diag.sup_v4 = max(diag.sup_v4, v4)
    diag.sup_g2 = max(diag.sup_g2, g2)
    diag.cum_dvdt2 += dt * sum(
        cls.mu * float(np.sum(((new.v[k] - old.v[k]) / dt) ** 2)) * meas
        for k, cls in enumerate(cfg.classes))
    diag.cum_dgdt2 += dt * sum(
        cls.mu * float(np.sum(((new.g[k] - old.g[k]) / dt) ** 2)) * meas
        for k, cls in enumerate(cfg.classes))


def run(cfg: MacroConfig, state0: Optional[MacroState] = None) -> TimeSeries:
    """Integrate to t_end, emitting snapshots and energy diagnostics."""
    cfg.validate()
    state = state0.copy() if state0 is not None else initial_state(cfg)
    diag = EnergyDiagnostics()
    _accumulate(diag, state, state, cfg)
    diag.cum_dvdt2 = 0.0
    diag.cum_dgdt2 = 0.0
    times = [state.t]
    states = [state.copy()]
    n_steps = int(round(cfg.t_end / cfg.dt))
    mono_total = 0
    for n in range(n_steps):
        new_state, mono = step(state, cfg)
        mono_total += mono
        _accumulate(diag, state, new_state, cfg)
        state = new_state
        if cfg.ceilings:
            for key, ceiling in cfg.ceilings.items():
                if getattr(diag, key) > ceiling:
                    raise StepRejected(
                        f"energy diagnostic {key}={getattr(diag, key)} "
                        f"exceeded ceiling {ceiling} at t={state.t}")
        if (n + 1) % cfg.snapshot_every == 0 or n == n_steps - 1:
            times.append(state.t)
            states.append(state.copy())
    return TimeSeries(times=times, states=states, diagnostics=diag,
                      config=cfg, step_count=n_steps,
                      monotone_violations=mono_total)


def energy_diagnostics(series: TimeSeries) -> EnergyDiagnostics:
    """Discrete a priori quantities recomputed from stored snapshots."""
    cfg = series.config
    diag = EnergyDiagnostics()
    prev = None
    for state in series.states:
        meas = cfg.cell_measure
        v4 = sum(cls.mu * float(np.sum(state.v[k] ** 4)) * meas
                 for k, cls in enumerate(cfg.classes))
        g2 = sum(cls.mu * float(np.sum(state.g[k] ** 2)) * meas
                 for k, cls in enumerate(cfg.classes))
        diag.sup_v4 = max(diag.sup_v4, v4)
        diag.sup_g2 = max(diag.sup_g2, g2)
        if prev is not None:
            dt_snap = state.t - prev.t
            if dt_snap > 0:
                diag.cum_dvdt2 += dt_snap * sum(
                    cls.mu * float(np.sum(((state.v[k] - prev.v[k]) / dt_snap) ** 2)) * meas
                    for k, cls in enumerate(cfg.classes))
                diag.cum_dgdt2 += dt_snap * sum(
                    cls.mu * float(np.sum(((state.g[k] - prev.g[k]) / dt_snap) ** 2)) * meas
                    for k, cls in enumerate(cfg.classes))
        prev = state
    return diag


# ---------------------------------------------------------------------------
# wave diagnostics
# ---------------------------------------------------------------------------

def front_positions(series: TimeSeries, class_k: int, threshold: float,
                    rising: bool = True) -> list:
    """(t, x) pairs of the rightmost threshold crossing of v_k per snapshot."""
    cfg = series.config
    x = cfg.x_centers()
    out = []
    for t, state in zip(series.times, series.states):
        v = state.v[class_k]
        if v.ndim == 2:
            v = v.mean(axis=1)
        above = v >= threshold if rising else v <= threshold
        idx = np.nonzero(above)[0]
        if len(idx) == 0 or idx[-1] == cfg.nx - 1:
            continue
        i = idx[-1]
        # linear interpolation of the crossing between cells i, i+1
        v0, v1 = v[i], v[i + 1]
        if v1 == v0:
            xf = x[i]
        else:
            xf = x[i] + (threshold - v0) / (v1 - v0) * (x[i + 1] - x[i])
        out.append((t, float(xf)))
    return out


def front_speed(series: TimeSeries, class_k: int, threshold: float,
                x_window: tuple[float, float], rising: bool = True) -> float:
    """Least-squares front speed while the crossing is inside x_window."""
    pts = [(t, xf) for t, xf in front_positions(series, class_k, threshold, rising)
           if x_window[0] <= xf <= x_window[1]]
    if len(pts) < 3:
        raise NonConvergence(
            f"front of class {class_k} produced {len(pts)} usable samples")
    t = np.array([p[0] for p in pts])
    xf = np.array([p[1] for p in pts])
    return float(np.polyfit(t, xf, 1)[0])
