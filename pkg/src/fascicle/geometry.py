"""Stationary ergodic random disk processes on the unit lattice.

A geometry model colors the cells of the integer lattice independently:
cell ``z`` receives no disk with probability ``p_0`` or a disk of radius
``r_k`` with probability ``p_k``.  Disk centers sit at ``z + (1/2, 1/2)``,
optionally jittered uniformly inside a ball of radius ``jitter_radius``,
and the whole structure carries a global shift drawn uniformly from the
unit cell so that the process is stationary.  Because the packing
constraint ``max_k r_k + jitter_radius < 1/2`` keeps every disk strictly
inside its own cell, disks from distinct cells never touch and the
minimal surface-to-surface gap is

    d_0 = 1 - 2 * (max_k r_k + jitter_radius) > 0.

Realizations are generated from a counter-based RNG keyed by
``(seed, cell index, stream)``: the color of a cell is a pure function of
the seed and the cell, so enlarging the window extends a realization
without perturbing it, which is what ergodic-limit studies need.

Translations act by the standard lattice factorization: a shift ``x``
decomposes into an integer relabeling of cells plus a fractional offset,
and the composition of shifts is exact on the integer part.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from fascicle.errors import InvalidModel, OutsideWindow, WindowTooSmall

__all__ = [
    "GeometryModel",
    "Realization",
    "ScaledFascicle",
    "Location",
    "ValidationReport",
    "sample_realization",
    "sample_periodic_realization",
    "shift_realization",
    "membership",
    "rescale_and_clip",
    "validate_hypotheses",
    "realization_to_json",
    "realization_from_json",
    "derive_seed",
]

Rect = tuple[float, float, float, float]  # (x0, y0, x1, y1)

# streams of the per-cell counter-based generator
_STREAM_COLOR = 0
_STREAM_JIT_R = 1
_STREAM_JIT_T = 2
_STREAM_SHIFT_X = 3
_STREAM_SHIFT_Y = 4
_STREAM_SEED = 5

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xD1B54A32D192ED03)
_C3 = np.uint64(0x8CB92BA72F3D8DD7)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; bijective on uint64 (multiplication wraps)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _cell_hash(seed: int, ix, iy, stream: int) -> np.ndarray:
    """Deterministic 64-bit hash of (seed, cell, stream), vectorized."""
    ux = np.asarray(ix, dtype=np.int64).view(np.uint64)
    uy = np.asarray(iy, dtype=np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _C1)
        z = _mix64(z ^ (ux * _C2))
        z = _mix64(z ^ (uy * _C3))
        z = _mix64(z ^ np.uint64(stream))
    return z


def _cell_uniform(seed: int, ix, iy, stream: int) -> np.ndarray:
    """Uniform [0,1) variate keyed by (seed, cell, stream)."""
    return (_cell_hash(seed, ix, iy, stream) >> np.uint64(11)) * (2.0 ** -53)


def derive_seed(seed: int, index: int) -> int:
    """Child seed for sample `index`, independent of all cell streams."""
    return int(_cell_hash(seed, index, 0, _STREAM_SEED))


@dataclass(frozen=True)
class GeometryModel:
    """Parametric description of a stationary ergodic disk process.

    radius_classes holds ``(r_k, p_k)`` pairs for k = 1..K; the empty-cell
    probability is ``p_0 = 1 - sum(p_k)``.  ``jitter_radius = 0``
    reproduces the pure lattice coloring.
    """

    radius_classes: tuple[tuple[float, float], ...]
    jitter_radius: float = 0.0
    lattice_pitch: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "radius_classes",
                           tuple((float(r), float(p)) for r, p in self.radius_classes))
        self.validate()

    @property
    def radii(self) -> np.ndarray:
        return np.array([r for r, _ in self.radius_classes])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.radius_classes])

    @property
    def p0(self) -> float:
        return 1.0 - float(np.sum(self.probabilities))

    @property
    def d0(self) -> float:
        """Certified minimal gap between disk boundaries (packing bound)."""
        return 1.0 - 2.0 * (float(np.max(self.radii)) + self.jitter_radius)

    def validate(self) -> None:
        if self.lattice_pitch != 1.0:
            raise InvalidModel("lattice_pitch is fixed to 1 in model units")
        if len(self.radius_classes) == 0:
            raise InvalidModel("at least one radius class is required")
        p = self.probabilities
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise InvalidModel("class probabilities must lie in [0, 1]")
        if float(np.sum(p)) > 1.0 + 1e-12:
            raise InvalidModel(
                f"class probabilities sum to {float(np.sum(p))} > 1")
        r = self.radii
        if np.any(r <= 0.0) or np.any(r >= 0.5):
            raise InvalidModel("radii must satisfy 0 < r < 1/2")
        if self.jitter_radius < 0.0:
            raise InvalidModel("jitter_radius must be nonnegative")
        if float(np.max(r)) + self.jitter_radius >= 0.5:
            raise InvalidModel(
                "max radius + jitter must stay below 1/2 so that disks from "
                "adjacent cells cannot overlap "
                f"(got {float(np.max(r)) + self.jitter_radius})")

    def covering_radius_bound(self, window_side: float = 0.0,
                              failure_prob: float = 1e-6) -> float:
        """Bound on the covering radius R_0.

        For ``p_0 = 0`` the bound is deterministic: every point is within
        half a cell diagonal of an occupied cell center.  For ``p_0 > 0``
        the vacancy process admits arbitrarily large empty squares almost
        surely, so the returned value is a probabilistic certificate: with
        probability >= 1 - failure_prob no empty m x m block of cells
        occurs in a window of the given side.
        """
        slack = self.jitter_radius - float(np.min(self.radii))
        if self.p0 <= 0.0:
            return math.sqrt(0.5) + slack
        if self.p0 >= 1.0:
            return math.inf
        m = 1
        n_blocks = max(window_side, 1.0) ** 2
        while n_blocks * self.p0 ** (m * m) > failure_prob:
            m += 1
        return (m + 1) * math.sqrt(0.5) + slack


@dataclass(frozen=True)
class Realization:
    """One sampled disk configuration restricted to a finite window.

    ``lattice_offset`` and ``global_shift`` encode the translation state:
    the disk of (relabeled) cell ``z`` is colored by the counter-based RNG
    at ``z + lattice_offset`` and centered at
    ``z + (1/2,1/2) + jitter - global_shift``.
    """

    model: Optional[GeometryModel]
    window: Rect
    seed: int
    global_shift: tuple[float, float]
    lattice_offset: tuple[int, int]
    centers: np.ndarray      # (n, 2)
    radii: np.ndarray        # (n,)
    classes: np.ndarray      # (n,), labels 1..K
    cells: np.ndarray        # (n, 2) relabeled cell indices

    @property
    def n_disks(self) -> int:
        return len(self.radii)

    def window_area(self) -> float:
        x0, y0, x1, y1 = self.window
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class ScaledFascicle:
    """Disks rescaled by epsilon inside a physical cross-section."""

    epsilon: float
    cross_section: Rect
    axial_length: float
    centers: np.ndarray
    radii: np.ndarray
    classes: np.ndarray
    excluded_count: int
    boundary_margin: float   # the d0 * epsilon separation that was enforced

    @property
    def n_disks(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class Location:
    """Membership of a point: interior/boundary of a class-k disk, or exterior."""

    kind: str                # "interior" | "boundary" | "exterior"
    class_index: int         # 1..K, or 0 for exterior
    radius: float            # class radius on the closed disk, else 0


@dataclass
class ValidationReport:
    h1_pass: bool
    h1_min_gap: float
    h1_violations: list
    h2_pass: bool
    h2_uncovered: list
    h3_pass: bool
    h3_violations: list
    note: str = ""

    @property
    def all_pass(self) -> bool:
        return self.h1_pass and self.h2_pass and self.h3_pass


def _enumerate_disks(model: GeometryModel, seed: int, window: Rect,
                     shift: tuple[float, float],
                     offset: tuple[int, int]):
    """All disks whose closure intersects the window, in deterministic cell order."""
    x0, y0, x1, y1 = window
    reach = float(np.max(model.radii)) + model.jitter_radius
    sx, sy = shift
    # cell z covers centers z + (1/2,1/2) + jitter - shift
    zx_lo = math.floor(x0 + sx - 0.5 - reach)
    zx_hi = math.ceil(x1 + sx - 0.5 + reach)
    zy_lo = math.floor(y0 + sy - 0.5 - reach)
    zy_hi = math.ceil(y1 + sy - 0.5 + reach)
    zx = np.arange(zx_lo, zx_hi + 1)
    zy = np.arange(zy_lo, zy_hi + 1)
    ZX, ZY = np.meshgrid(zx, zy, indexing="ij")
    ZX, ZY = ZX.ravel(), ZY.ravel()
    ox, oy = offset
    u = _cell_uniform(seed, ZX + ox, ZY + oy, _STREAM_COLOR)
    cum = np.concatenate(([model.p0], model.p0 + np.cumsum(model.probabilities)))
    labels = np.searchsorted(cum, u, side="right")  # 0 = empty, 1..K = class
    occ = labels > 0
    ZX, ZY, labels = ZX[occ], ZY[occ], labels[occ]
    cx = ZX + 0.5 - sx
    cy = ZY + 0.5 - sy
    if model.jitter_radius > 0.0 and len(ZX):
        ur = _cell_uniform(seed, ZX + ox, ZY + oy, _STREAM_JIT_R)
        ut = _cell_uniform(seed, ZX + ox, ZY + oy, _STREAM_JIT_T)
        rho = model.jitter_radius * np.sqrt(ur)
        cx = cx + rho * np.cos(2.0 * np.pi * ut)
        cy = cy + rho * np.sin(2.0 * np.pi * ut)
    rad = model.radii[labels - 1] if len(labels) else np.empty(0)
    # keep exactly the disks whose closure meets the window rectangle
    dx = np.maximum(np.maximum(x0 - cx, cx - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - cy, cy - y1), 0.0)
    keep = dx * dx + dy * dy <= rad * rad + 1e-300
    cells = np.stack([ZX[keep], ZY[keep]], axis=1).astype(np.int64)
    centers = np.stack([cx[keep], cy[keep]], axis=1)
    return centers, rad[keep], labels[keep].astype(np.int64), cells


def sample_realization(model: GeometryModel, window: Rect, seed: int) -> Realization:
    """Sample one realization of the disk process inside a window.

    Deterministic given (model, window, seed); the global shift is drawn
    uniformly from the unit cell so that window statistics are stationary.
    """
    model.validate()
    x0, y0, x1, y1 = (float(v) for v in window)
    if not (x1 > x0 and y1 > y0):
        raise InvalidModel("window must have positive area")
    sx = float(_cell_uniform(seed, 0, 0, _STREAM_SHIFT_X))
    sy = float(_cell_uniform(seed, 0, 0, _STREAM_SHIFT_Y))
    centers, radii, classes, cells = _enumerate_disks(
        model, seed, (x0, y0, x1, y1), (sx, sy), (0, 0))
    return Realization(model=model, window=(x0, y0, x1, y1), seed=seed,
                       global_shift=(sx, sy), lattice_offset=(0, 0),
                       centers=centers, radii=radii, classes=classes,
                       cells=cells)


def sample_periodic_realization(model: GeometryModel, n_cells: int,
                                seed: int) -> Realization:
    """Realization on the torus [0, n_cells)^2 with zero global shift.

    Exactly n_cells^2 lattice cells are colored; since every disk stays
    strictly inside its own cell, no disk crosses the periodic boundary.
    Used for representative-volume solves.
    """
    model.validate()
    if n_cells < 1:
        raise InvalidModel("n_cells must be a positive integer")
    window = (0.0, 0.0, float(n_cells), float(n_cells))
    centers, radii, classes, cells = _enumerate_disks(
        model, seed, window, (0.0, 0.0), (0, 0))
    inside = ((cells[:, 0] >= 0) & (cells[:, 0] < n_cells)
              & (cells[:, 1] >= 0) & (cells[:, 1] < n_cells))
    return Realization(model=model, window=window, seed=seed,
                       global_shift=(0.0, 0.0), lattice_offset=(0, 0),
                       centers=centers[inside], radii=radii[inside],
                       classes=classes[inside], cells=cells[inside])


def shift_realization(real: Realization, x: Sequence[float]) -> Realization:
    """Translate the configuration by -x while keeping the window fixed.

    The shift acts on the lattice state as an integer relabeling plus a
    fractional offset, so composing shifts is exact on cell indices.
    """
    if real.model is None:
        raise ValueError("realization was loaded without its generating model; "
                         "shifts require regeneration")
    xx, xy = float(x[0]), float(x[1])
    sx, sy = real.global_shift
    ox, oy = real.lattice_offset
    mx = math.floor(xx + sx)
    my = math.floor(xy + sy)
    new_shift = (xx + sx - mx, xy + sy - my)
    new_offset = (ox + mx, oy + my)
    centers, radii, classes, cells = _enumerate_disks(
        real.model, real.seed, real.window, new_shift, new_offset)
    return Realization(model=real.model, window=real.window, seed=real.seed,
                       global_shift=new_shift, lattice_offset=new_offset,
                       centers=centers, radii=radii, classes=classes,
                       cells=cells)


def membership(real: Realization, x: Sequence[float], tol: float = 1e-12) -> Location:
    """Classify a point as interior/boundary of a disk or exterior.

    Also reports the pointwise radius function: the class radius if the
    point lies in the closed disk (boundary included), zero otherwise.
    """
    px, py = float(x[0]), float(x[1])
    x0, y0, x1, y1 = real.window
    if not (x0 <= px <= x1 and y0 <= py <= y1):
        raise OutsideWindow(f"point {(px, py)} outside window {real.window}")
    if real.n_disks == 0:
        return Location("exterior", 0, 0.0)
    d = np.hypot(real.centers[:, 0] - px, real.centers[:, 1] - py)
    j = int(np.argmin(d - real.radii))
    dist, r, k = float(d[j]), float(real.radii[j]), int(real.classes[j])
    if abs(dist - r) <= tol:
        return Location("boundary", k, r)
    if dist < r:
        return Location("interior", k, r)
    return Location("exterior", 0, 0.0)


def rescale_and_clip(real: Realization, epsilon: float, section: Rect,
                     axial_length: float, d0: float) -> ScaledFascicle:
    """Scale disks by epsilon and drop those too close to the section boundary.

    A disk is retained when its distance to the section boundary exceeds
    d0 * epsilon; removals are counted, not silently ignored.
    """
    if epsilon <= 0.0:
        raise InvalidModel("epsilon must be positive")
    sx0, sy0, sx1, sy1 = (float(v) for v in section)
    wx0, wy0, wx1, wy1 = real.window
    if not (wx0 <= sx0 / epsilon and wy0 <= sy0 / epsilon
            and wx1 >= sx1 / epsilon and wy1 >= sy1 / epsilon):
        raise WindowTooSmall(
            "realization window does not cover section/epsilon: "
            f"window={real.window}, needed={(sx0/epsilon, sy0/epsilon, sx1/epsilon, sy1/epsilon)}")
    centers = real.centers * epsilon
    radii = real.radii * epsilon
    # candidates: scaled closure intersects the section
    dx = np.maximum(np.maximum(sx0 - centers[:, 0], centers[:, 0] - sx1), 0.0)
    dy = np.maximum(np.maximum(sy0 - centers[:, 1], centers[:, 1] - sy1), 0.0)
    cand = dx * dx + dy * dy <= radii * radii + 1e-300
    margin = np.minimum.reduce([
        centers[:, 0] - sx0, sx1 - centers[:, 0],
        centers[:, 1] - sy0, sy1 - centers[:, 1]]) - radii
    keep = cand & (margin > d0 * epsilon)
    excluded = int(np.count_nonzero(cand) - np.count_nonzero(keep))
    return ScaledFascicle(epsilon=float(epsilon), cross_section=(sx0, sy0, sx1, sy1),
                          axial_length=float(axial_length),
                          centers=centers[keep], radii=radii[keep],
                          classes=real.classes[keep], excluded_count=excluded,
                          boundary_margin=d0 * epsilon)


def validate_hypotheses(real: Realization, d0: float, r_lo: float, r_hi: float,
                        R0: float, probe_spacing: Optional[float] = None) -> ValidationReport:
    """Empirical check of the separation, radius-bound and covering hypotheses.

    Violations are reported as data.  The covering check is performed on
    the window interior eroded by R0 and certifies the sampled window
    only; for p_0 > 0 vacancy makes an almost-sure covering radius
    impossible, so the certificate is inherently probabilistic.
    """
    n = real.n_disks
    h1_violations: list = []
    min_gap = math.inf
    if n >= 2:
        diff = real.centers[:, None, :] - real.centers[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        gap = dist - real.radii[:, None] - real.radii[None, :]
        iu = np.triu_indices(n, k=1)
        gaps = gap[iu]
        min_gap = float(np.min(gaps))
        bad = np.nonzero(gaps < d0 - 1e-12)[0]
        h1_violations = [(int(iu[0][b]), int(iu[1][b]), float(gaps[b])) for b in bad[:100]]
    h1_pass = (n < 2) or (min_gap >= d0 - 1e-12)

    h3_bad = np.nonzero((real.radii <= r_lo) | (real.radii >= r_hi))[0]
    h3_violations = [(int(i), float(real.radii[i])) for i in h3_bad[:100]]
    h3_pass = len(h3_bad) == 0

    x0, y0, x1, y1 = real.window
    ex0, ey0, ex1, ey1 = x0 + R0, y0 + R0, x1 - R0, y1 - R0
    h2_uncovered: list = []
    if ex1 <= ex0 or ey1 <= ey0:
        h2_pass = True  # eroded window empty: nothing to check
    elif n == 0:
        h2_pass = False
        h2_uncovered = [((ex0 + ex1) / 2.0, (ey0 + ey1) / 2.0)]
    else:
        spacing = probe_spacing if probe_spacing else max(min(0.25, R0 / 4.0), 1e-3)
        gx = np.arange(ex0, ex1 + spacing / 2, spacing)
        gy = np.arange(ey0, ey1 + spacing / 2, spacing)
        GX, GY = np.meshgrid(gx, gy, indexing="ij")
        P = np.stack([GX.ravel(), GY.ravel()], axis=1)
        # distance from probe point to nearest disk, chunked to bound memory
        uncovered_idx = []
        for lo in range(0, len(P), 4096):
            chunk = P[lo:lo + 4096]
            d = np.hypot(chunk[:, None, 0] - real.centers[None, :, 0],
                         chunk[:, None, 1] - real.centers[None, :, 1])
            dmin = np.min(d - real.radii[None, :], axis=1)
            for i in np.nonzero(dmin > R0)[0]:
                uncovered_idx.append(lo + int(i))
        h2_uncovered = [tuple(map(float, P[i])) for i in uncovered_idx[:100]]
        h2_pass = len(uncovered_idx) == 0

    note = ("covering certified on the sampled window only; almost-sure "
            "covering holds only for full occupancy (p_0 = 0)")
    return ValidationReport(h1_pass=h1_pass, h1_min_gap=min_gap,
                            h1_violations=h1_violations,
                            h2_pass=h2_pass, h2_uncovered=h2_uncovered,
                            h3_pass=h3_pass, h3_violations=h3_violations,
                            note=note)


def _fmt(v: float) -> float:
    return float(f"{float(v):.17g}")


def realization_to_json(real: Realization) -> str:
    """Serialize to the interchange schema; deterministic byte-for-byte."""
    disks = [
        {"cx": _fmt(real.centers[i, 0]), "cy": _fmt(real.centers[i, 1]),
         "r": _fmt(real.radii[i]), "class": int(real.classes[i])}
        for i in range(real.n_disks)
    ]
    doc = {
        "window": [_fmt(v) for v in real.window],
        "global_shift": [_fmt(v) for v in real.global_shift],
        "seed": int(real.seed),
        "disks": disks,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def realization_from_json(text: str) -> Realization:
    """Load a serialized realization (frozen: shifts require the model)."""
    doc = json.loads(text)
    disks = doc["disks"]
    centers = np.array([[d["cx"], d["cy"]] for d in disks], dtype=float).reshape(-1, 2)
    radii = np.array([d["r"] for d in disks], dtype=float)
    classes = np.array([d["class"] for d in disks], dtype=np.int64)
    return Realization(model=None, window=tuple(doc["window"]), seed=int(doc["seed"]),
                       global_shift=tuple(doc["global_shift"]), lattice_offset=(0, 0),
                       centers=centers, radii=radii, classes=classes,
                       cells=np.zeros((len(radii), 2), dtype=np.int64))
