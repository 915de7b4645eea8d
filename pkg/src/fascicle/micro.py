"""Desk-scale verification of the homogenization limit.

Stationary, decoupled stand-ins for the extracellular and intracellular
problems are solved on resolved geometries at a sequence of scales
epsilon and their minimum energies compared with the homogenized
predictions.

Extracellular: on a planar cross-section S with disks of radius
epsilon * r removed,

    min over u:  sum_{conducting cells} Q_e(|grad u|)
                 - integral_lateral J u ds
                 - epsilon * sum_circles contour integral of f u,

with Dirichlet data on two opposite sides standing in for the grounded
fascicle bases.  The homogenized limit replaces the perforated energy
density by the effective transverse potential and the membrane term by
its Palm-weighted volume average (total mass mu_tot = sum_k mu_k):

    min over u:  integral_S Phi_t(|grad u|) - integral J u - mu_tot integral f u.

Intracellular: axons decouple; for an axial source f(x1) the minimizer on
each cylinder depends on x1 only, so each radius class reduces to one
convex two-point problem

    min over w, w(0)=w(L)=0:  integral Q_i(|w'|) + (2/r) integral f w,

and the aggregate energy is sum over axons of pi (eps r)^2 times the
class objective.  Its limit is |S| sum_k mu_k [ (r_k/2) int Q_i(|w_k'|)
+ int f w_k ].

Discretization is P1 on structured triangles.  For grid-refinement
studies the disk mask is rasterized once at the finest level and
agglomerated (a coarse cell is interior only if all its children are),
which makes the discrete admissible sets nested so minima cannot
increase under refinement.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from fascicle.conductivity import Constant, ConductivityLaw
from fascicle.errors import InsufficientData, MaskDegenerate, NonConvergence
from fascicle.geometry import ScaledFascicle

__all__ = [
    "StationaryMicroResult",
    "ConvergenceReport",
    "solve_stationary_extracellular",
    "solve_stationary_intracellular",
    "solve_homogenized_extracellular",
    "intracellular_limit_energy",
    "convergence_report",
    "raster_mask_fine",
    "coarsen_mask",
]


@dataclass
class StationaryMicroResult:
    epsilon: float
    grid_h: float
    u: np.ndarray                  # nodal field (extracellular) or per-class profiles
    energy: float
    n_disks: int
    meta: dict


@dataclass
class ConvergenceReport:
    epsilons: list
    gaps: list                     # |mean E_eps - E_hom|
    spreads: list                  # std over realizations
    e_hom: float
    passed: bool


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def raster_mask_fine(scaled: ScaledFascicle, grid_h: float) -> np.ndarray:
    """Exterior cell mask of the cross-section at resolution grid_h."""
    x0, y0, x1, y1 = scaled.cross_section
    nx = int(round((x1 - x0) / grid_h))
    ny = int(round((y1 - y0) / grid_h))
    interior = np.zeros((nx, ny), dtype=bool)
    for (cx, cy), r in zip(scaled.centers, scaled.radii):
        i0 = max(int(math.floor((cx - x0 - r) / grid_h - 0.5)), 0)
        i1 = min(int(math.ceil((cx - x0 + r) / grid_h - 0.5)), nx - 1)
        j0 = max(int(math.floor((cy - y0 - r) / grid_h - 0.5)), 0)
        j1 = min(int(math.ceil((cy - y0 + r) / grid_h - 0.5)), ny - 1)
        if i1 < i0 or j1 < j0:
            continue
        xs = x0 + (np.arange(i0, i1 + 1) + 0.5) * grid_h - cx
        ys = y0 + (np.arange(j0, j1 + 1) + 0.5) * grid_h - cy
        interior[i0:i1 + 1, j0:j1 + 1] |= xs[:, None] ** 2 + ys[None, :] ** 2 < r * r
    return ~interior


def coarsen_mask(mask_fine: np.ndarray, factor: int) -> np.ndarray:
    """Coarse exterior mask: a coarse cell is interior iff all children are.

    This orientation makes coarse admissible regions contain the fine
    ones, so nested-grid minima are monotone nonincreasing.
    """
    nx, ny = mask_fine.shape
    assert nx % factor == 0 and ny % factor == 0
    blocks = mask_fine.reshape(nx // factor, factor, ny // factor, factor)
    return blocks.any(axis=(1, 3))


# ---------------------------------------------------------------------------
# P1 machinery on a masked structured grid
# ---------------------------------------------------------------------------

class _P1Problem:
    """Convex minimization of sum_tri area Q(|grad u|) - ell(u) with P1 elements.

    Dirichlet data on the two x-sides; the unknowns are nodes adjacent to
    at least one exterior cell and not on a Dirichlet side.
    """

    def __init__(self, mask: np.ndarray, grid_h: float, law: ConductivityLaw,
                 origin=(0.0, 0.0), dirichlet: Callable = lambda y: 0.0 * y):
        self.mask = mask
        self.h = float(grid_h)
        self.nx, self.ny = mask.shape
        self.law = law
        if not np.any(mask):
            raise MaskDegenerate("no conducting cells")
        nxn, nyn = self.nx + 1, self.ny + 1
        self.node_shape = (nxn, nyn)
        adj = np.zeros(self.node_shape, dtype=bool)
        adj[:-1, :-1] |= mask
        adj[1:, :-1] |= mask
        adj[:-1, 1:] |= mask
        adj[1:, 1:] |= mask
        self.active = adj
        self.dir_nodes = np.zeros(self.node_shape, dtype=bool)
        self.dir_nodes[0, :] = True
        self.dir_nodes[-1, :] = True
        self.free = self.active & ~self.dir_nodes
        self.free_idx = np.flatnonzero(self.free.ravel())
        x0, y0 = origin
        ys = y0 + np.arange(nyn) * self.h
        self.u_fixed = np.zeros(self.node_shape)
        self.u_fixed[0, :] = dirichlet(ys)
        self.u_fixed[-1, :] = dirichlet(ys)
        self.ell = np.zeros(self.node_shape)  # linear functional, nodal coefficients
        self.maskf = mask.astype(float)

    # triangle A: (i,j), (i+1,j), (i,j+1); triangle B: (i+1,j+1), (i,j+1), (i+1,j)
    def _tri_grads(self, u):
        h = self.h
        gax = (u[1:, :-1] - u[:-1, :-1]) / h
        gay = (u[:-1, 1:] - u[:-1, :-1]) / h
        gbx = (u[1:, 1:] - u[:-1, 1:]) / h
        gby = (u[1:, 1:] - u[1:, :-1]) / h
        return gax, gay, gbx, gby

    def energy(self, u: np.ndarray) -> float:
        gax, gay, gbx, gby = self._tri_grads(u)
        area = 0.5 * self.h * self.h
        qa = self.law.q(np.hypot(gax, gay).ravel()).reshape(gax.shape)
        qb = self.law.q(np.hypot(gbx, gby).ravel()).reshape(gbx.shape)
        return float(np.sum((qa + qb) * self.maskf)) * area - float(np.sum(self.ell * u))

    def gradient(self, u: np.ndarray) -> np.ndarray:
        gax, gay, gbx, gby = self._tri_grads(u)
        area = 0.5 * self.h * self.h
        ta = np.hypot(gax, gay)
        tb = np.hypot(gbx, gby)
        sa = self.law.sigma(ta) * self.maskf * area / self.h
        sb = self.law.sigma(tb) * self.maskf * area / self.h
        g = np.zeros(self.node_shape)
        g[:-1, :-1] += -sa * (gax + gay)
        g[1:, :-1] += sa * gax
        g[:-1, 1:] += sa * gay
        g[1:, 1:] += sb * (gbx + gby)
        g[:-1, 1:] += -sb * gbx
        g[1:, :-1] += -sb * gby
        return g - self.ell

    def _hessian(self, u: np.ndarray) -> sp.csr_matrix:
        gax, gay, gbx, gby = self._tri_grads(u)
        area = 0.5 * self.h * self.h
        nxn, nyn = self.node_shape
        ids = np.arange(nxn * nyn).reshape(self.node_shape)
        n00 = ids[:-1, :-1].ravel()
        n10 = ids[1:, :-1].ravel()
        n01 = ids[:-1, 1:].ravel()
        n11 = ids[1:, 1:].ravel()
        m = self.maskf.ravel()
        rows, cols, vals = [], [], []

        def tri_block(gx, gy, nodes, dx_coef, dy_coef):
            # nodes: 3 index arrays; dx_coef/dy_coef: per-node gradient coefficients
            t = np.hypot(gx, gy).ravel()
            s = self.law.sigma(t)
            tt = np.maximum(t, 1e-12)
            c = np.where(t > 0, self.law.dsigma(t) / tt, 0.0) \
                if not isinstance(self.law, Constant) else np.zeros_like(t)
            gxf, gyf = gx.ravel(), gy.ravel()
            m2xx = (s + c * gxf * gxf) * m * area
            m2yy = (s + c * gyf * gyf) * m * area
            m2xy = (c * gxf * gyf) * m * area
            for a in range(3):
                for b in range(3):
                    val = (m2xx * dx_coef[a] * dx_coef[b]
                           + m2yy * dy_coef[a] * dy_coef[b]
                           + m2xy * (dx_coef[a] * dy_coef[b] + dy_coef[a] * dx_coef[b]))
                    rows.append(nodes[a])
                    cols.append(nodes[b])
                    vals.append(val)

        ih = 1.0 / self.h
        tri_block(gax, gay, [n00, n10, n01],
                  [-ih, ih, 0.0], [-ih, 0.0, ih])
        tri_block(gbx, gby, [n11, n01, n10],
                  [ih, -ih, 0.0], [ih, 0.0, -ih])
        N = nxn * nyn
        return sp.coo_matrix((np.concatenate(vals),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N)).tocsr()

    def solve(self, tol: float = 1e-10, max_iter: int = 60) -> np.ndarray:
        u = self.u_fixed.copy()
        g = self.gradient(u)
        gres = float(np.max(np.abs(g.ravel()[self.free_idx]))) / self.h ** 2
        e = self.energy(u)
        it = 0
        while gres > tol:
            if it >= max_iter:
                raise NonConvergence(f"P1 Newton stalled at residual {gres}")
            H = self._hessian(u)
            Hff = H[self.free_idx, :][:, self.free_idx].tocsc()
            rhs = -g.ravel()[self.free_idx]
            delta_f = spla.spsolve(Hff + sp.identity(len(self.free_idx), format="csc")
                                   * (1e-14 * abs(Hff.diagonal()).max()), rhs)
            delta = np.zeros(self.node_shape)
            delta.ravel()[self.free_idx] = delta_f
            gd = float(np.sum(g * delta))
            alpha = 1.0
            for _ in range(50):
                u_try = u + alpha * delta
                e_try = self.energy(u_try)
                if e_try <= e + 1e-4 * alpha * gd + 1e-14 * (1.0 + abs(e)):
                    u, e = u_try, e_try
                    break
                alpha *= 0.5
            else:
                raise NonConvergence("P1 line search exhausted")
            g = self.gradient(u)
            gres = float(np.max(np.abs(g.ravel()[self.free_idx]))) / self.h ** 2
            it += 1
        return u

    # -- linear functionals ------------------------------------------------

    def add_lateral_flux(self, j_bottom: Callable, j_top: Callable,
                         origin=(0.0, 0.0)):
        """Trapezoid quadrature of integral J u ds on the two y-sides."""
        x0, _ = origin
        xs = x0 + np.arange(self.node_shape[0]) * self.h
        wb = np.asarray(j_bottom(xs), dtype=float) * np.ones_like(xs) * self.h
        wt = np.asarray(j_top(xs), dtype=float) * np.ones_like(xs) * self.h
        wb[0] *= 0.5
        wb[-1] *= 0.5
        wt[0] *= 0.5
        wt[-1] *= 0.5
        self.ell[:, 0] += wb
        self.ell[:, -1] += wt

    def add_volume_source(self, density: Callable, origin=(0.0, 0.0)):
        """Lumped P1 quadrature of integral density * u dx over the domain."""
        x0, y0 = origin
        nxn, nyn = self.node_shape
        xs = x0 + np.arange(nxn) * self.h
        ys = y0 + np.arange(nyn) * self.h
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        w = np.full(self.node_shape, self.h * self.h)
        w[0, :] *= 0.5
        w[-1, :] *= 0.5
        w[:, 0] *= 0.5
        w[:, -1] *= 0.5
        self.ell += np.asarray(density(X, Y), dtype=float) * w

    def add_membrane_term(self, scaled: ScaledFascicle, f: Callable,
                          sign: float, n_quad_min: int = 16):
        """epsilon-weighted contour quadrature of f u over every circle.

        Quadrature weights land on the P1 vertices of the containing
        triangle; weights on inactive vertices are renormalized onto the
        active ones (local O(h) consistency, vanishing under refinement).
        """
        x0, y0, _, _ = scaled.cross_section
        h = self.h
        for (cx, cy), a in zip(scaled.centers, scaled.radii):
            n_q = max(n_quad_min, int(math.ceil(2.0 * math.pi * a / h)) * 2)
            theta = (np.arange(n_q) + 0.5) * (2.0 * math.pi / n_q)
            wq = scaled.epsilon * a * (2.0 * math.pi / n_q)
            for th in theta:
                px, py = cx + a * math.cos(th), cy + a * math.sin(th)
                fx = f(px, py)
                gx = (px - x0) / h
                gy = (py - y0) / h
                i = min(max(int(gx), 0), self.nx - 1)
                j = min(max(int(gy), 0), self.ny - 1)
                sx, sy = gx - i, gy - j
                if sx + sy <= 1.0:
                    nodes = [(i, j), (i + 1, j), (i, j + 1)]
                    wts = [1.0 - sx - sy, sx, sy]
                else:
                    nodes = [(i + 1, j + 1), (i, j + 1), (i + 1, j)]
                    wts = [sx + sy - 1.0, 1.0 - sx, 1.0 - sy]
                act = [self.active[n] for n in nodes]
                tot = sum(w for w, a_ in zip(wts, act) if a_)
                if tot <= 0.0:
                    continue
                for n, w_ in zip(nodes, wts):
                    if self.active[n]:
                        self.ell[n] += sign * fx * wq * w_ / tot


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------

def solve_stationary_extracellular(scaled: ScaledFascicle,
                                   law_e: ConductivityLaw,
                                   f: Callable,
                                   j_lateral: Callable,
                                   grid_h: float,
                                   tol: float = 1e-10,
                                   dirichlet: Callable = None,
                                   mask: Optional[np.ndarray] = None) -> StationaryMicroResult:
    """Minimize the perforated extracellular energy on the cross-section.

    f(x, y) is the membrane source, j_lateral(x, side) the boundary flux on
    the two y-sides; Dirichlet data (default zero) is applied on the two
    x-sides.  A precomputed exterior mask may be supplied for nested-grid
    studies.
    """
    if mask is None:
        mask = raster_mask_fine(scaled, grid_h)
    x0, y0, _, _ = scaled.cross_section
    prob = _P1Problem(mask, grid_h, law_e, origin=(x0, y0),
                      dirichlet=dirichlet if dirichlet else lambda y: 0.0 * y)
    prob.add_lateral_flux(lambda x: j_lateral(x, "bottom"),
                          lambda x: j_lateral(x, "top"), origin=(x0, y0))
    if f is not None:
        prob.add_membrane_term(scaled, f, sign=1.0)
    u = prob.solve(tol=tol)
    return StationaryMicroResult(epsilon=scaled.epsilon, grid_h=grid_h, u=u,
                                 energy=prob.energy(u),
                                 n_disks=scaled.n_disks,
                                 meta={"kind": "extracellular",
                                       "n_free": len(prob.free_idx)})


def solve_homogenized_extracellular(section, law_eff: ConductivityLaw,
                                    f: Callable, j_lateral: Callable,
                                    mu_total: float, grid_h: float,
                                    tol: float = 1e-10,
                                    dirichlet: Callable = None) -> StationaryMicroResult:
    """Solve the limit problem: effective law, Palm-weighted volume source."""
    x0, y0, x1, y1 = section
    nx = int(round((x1 - x0) / grid_h))
    ny = int(round((y1 - y0) / grid_h))
    mask = np.ones((nx, ny), dtype=bool)
    prob = _P1Problem(mask, grid_h, law_eff, origin=(x0, y0),
                      dirichlet=dirichlet if dirichlet else lambda y: 0.0 * y)
    prob.add_lateral_flux(lambda x: j_lateral(x, "bottom"),
                          lambda x: j_lateral(x, "top"), origin=(x0, y0))
    if f is not None and mu_total != 0.0:
        prob.add_volume_source(lambda X, Y: mu_total * np.asarray(f(X, Y)),
                               origin=(x0, y0))
    u = prob.solve(tol=tol)
    return StationaryMicroResult(epsilon=0.0, grid_h=grid_h, u=u,
                                 energy=prob.energy(u), n_disks=0,
                                 meta={"kind": "homogenized"})


def _axial_profile_solve(law_i: ConductivityLaw, r_model: float, f_axial: Callable,
                         length: float, n: int, tol: float = 1e-12):
    """Two-point problem per radius class: min int Q(|w'|) + (2/r) int f w."""
    x = np.linspace(0.0, length, n + 1)
    hx = length / n
    fl = (2.0 / r_model) * np.asarray(f_axial(x), dtype=float) * hx
    fl[0] = fl[-1] = 0.0  # Dirichlet ends
    w = np.zeros(n + 1)

    def grads(w):
        return (w[1:] - w[:-1]) / hx

    def energy(w):
        d = grads(w)
        return float(np.sum(law_i.q(np.abs(d)))) * hx + float(np.sum(fl * w))

    def gradient(w):
        d = grads(w)
        s = law_i.sigma(np.abs(d)) * d
        g = np.zeros(n + 1)
        g[:-1] -= s
        g[1:] += s
        return g + fl

    e = energy(w)
    for _ in range(80):
        g = gradient(w)
        gi = g[1:-1]
        if float(np.max(np.abs(gi))) / hx <= tol * (1.0 + abs(e)):
            break
        d = grads(w)
        a = np.abs(d)
        tau = (law_i.sigma(a) + law_i.dsigma(a) * a) / hx
        ab = np.zeros((3, n - 1))
        ab[1, :] = tau[:-1] + tau[1:]
        ab[0, 1:] = -tau[1:-1]
        ab[2, :-1] = -tau[1:-1]
        from scipy.linalg import solve_banded

        delta = np.zeros(n + 1)
        delta[1:-1] = solve_banded((1, 1), ab, -gi)
        gd = float(np.sum(g * delta))
        alpha = 1.0
        for _ in range(50):
            w_try = w + alpha * delta
            e_try = energy(w_try)
            if e_try <= e + 1e-4 * alpha * gd + 1e-15 * (1.0 + abs(e)):
                w, e = w_try, e_try
                break
            alpha *= 0.5
        else:
            raise NonConvergence("axial line search exhausted")
    qpart = float(np.sum(law_i.q(np.abs(grads(w))))) * hx
    fpart = float(np.sum(fl * w)) * (r_model / 2.0)  # = int f w  up to the 2/r factor
    return w, e, qpart, fpart


def solve_stationary_intracellular(scaled: ScaledFascicle,
                                   law_i: ConductivityLaw,
                                   f_axial: Callable,
                                   grid_h: float,
                                   tol: float = 1e-12) -> StationaryMicroResult:
    """Aggregate intracellular energy: per-axon axial two-point problems.

    For an axial source the per-axon minimizer depends only on x1, so one
    solve per radius class suffices; the aggregate scales each class
    objective by pi (eps r)^2 times the class count.
    """
    eps = scaled.epsilon
    length = scaled.axial_length
    n = max(int(round(length / grid_h)), 8)
    classes = np.unique(scaled.classes) if scaled.n_disks else []
    profiles = {}
    total = 0.0
    for k in classes:
        sel = scaled.classes == k
        a_phys = float(scaled.radii[sel][0])
        r_model = a_phys / eps
        count = int(np.count_nonzero(sel))
        w, e_obj, _, _ = _axial_profile_solve(law_i, r_model, f_axial, length, n,
                                              tol=tol)
        profiles[int(k)] = w
        total += count * math.pi * (eps * r_model) ** 2 * e_obj
    return StationaryMicroResult(epsilon=eps, grid_h=grid_h,
                                 u=profiles, energy=total,
                                 n_disks=scaled.n_disks,
                                 meta={"kind": "intracellular",
                                       "classes": [int(k) for k in classes]})


def intracellular_limit_energy(law_i: ConductivityLaw,
                               radius_classes: Sequence[tuple[float, float]],
                               f_axial: Callable, length: float,
                               section_area: float, n: int = 2048) -> float:
    """|S| sum_k mu_k [ (r_k/2) int Q(|w_k'|) + int f w_k ] with mu_k = 2 pi r_k p_k."""
    total = 0.0
    for r, p in radius_classes:
        mu = 2.0 * math.pi * r * p
        w, e_obj, qpart, fpart = _axial_profile_solve(law_i, r, f_axial, length, n)
        total += mu * ((r / 2.0) * qpart + fpart)
    return section_area * total


def convergence_report(energies_by_eps: dict, e_hom: float) -> ConvergenceReport:
    """Gap table |mean E_eps - E_hom| with a monotone-decrease pass rule.

    Requires at least three scales with two realizations each.  Passing
    means every gap decrement from coarse to fine is no worse than the
    combined realization spread, and the finest gap improves on the
    coarsest.
    """
    eps = sorted(energies_by_eps.keys(), reverse=True)
    if len(eps) < 3:
        raise InsufficientData("need at least three epsilon values")
    gaps, spreads = [], []
    for e in eps:
        vals = np.asarray(energies_by_eps[e], dtype=float)
        if len(vals) < 2:
            raise InsufficientData(f"epsilon={e} has fewer than two realizations")
        gaps.append(abs(float(vals.mean()) - e_hom))
        spreads.append(float(vals.std(ddof=1)) / math.sqrt(len(vals)))
    ok = gaps[-1] < gaps[0]
    for i in range(len(eps) - 1):
        slack = 2.0 * (spreads[i] + spreads[i + 1])
        if gaps[i + 1] > gaps[i] + slack:
            ok = False
    return ConvergenceReport(epsilons=list(eps), gaps=gaps, spreads=spreads,
                             e_hom=e_hom, passed=ok)


def report_to_csv(rep: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "gap", "spread", "e_hom"])
    for e, g, s in zip(rep.epsilons, rep.gaps, rep.spreads):
        w.writerow([f"{e:.17g}", f"{g:.17g}", f"{s:.17g}", f"{rep.e_hom:.17g}"])
    return buf.getvalue()
