"""TOML configuration loading, validation, and run manifests.

Numerical parameters live in config files (sections [domain], [grid],
[time], [classes], [conductivity], [stimulus], [initial], plus [model]
and task-specific sections); command-line flags only select files, paths
and verbosity.  Validation failures name the offending field.  A manifest
records the fully resolved configuration, seeds, versions and content
hashes so that reruns are reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fascicle.conductivity import (Constant, ConductivityLaw, Sigmoid,
                                   TableSpline, validate_h5)
from fascicle.errors import ParseError, ValidationError
from fascicle.geometry import GeometryModel
from fascicle.macro import AxonClass, MacroConfig, Stimulus, classes_from_lattice
from fascicle.membrane import FhnParams, lambda_bound

__all__ = [
    "load_toml",
    "model_from_dict",
    "law_from_dict",
    "fhn_from_dict",
    "macro_config_from_dict",
    "RunManifest",
    "sha256_file",
]


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise ParseError(f"{path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"{path}: {e}") from e


def _require(d: dict, key: str, section: str):
    if key not in d:
        raise ValidationError(f"[{section}] missing required key '{key}'")
    return d[key]


def model_from_dict(d: dict) -> GeometryModel:
    rc = _require(d, "radius_classes", "model")
    try:
        classes = tuple((float(r), float(p)) for r, p in rc)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"[model] radius_classes must be [r, p] pairs: {e}")
    psum = sum(p for _, p in classes)
    if psum > 1.0 + 1e-12:
        raise ValidationError(
            f"[model] radius_classes probabilities sum to {psum} > 1")
    try:
        return GeometryModel(radius_classes=classes,
                             jitter_radius=float(d.get("jitter_radius", 0.0)))
    except Exception as e:
        raise ValidationError(f"[model] {e}") from e


def law_from_dict(d: dict, section: str = "conductivity") -> ConductivityLaw:
    kind = _require(d, "kind", section)
    if kind == "constant":
        sigma = float(_require(d, "sigma", section))
        if sigma <= 0:
            raise ValidationError(f"[{section}] sigma must be positive")
        return Constant(sigma)
    if kind == "sigmoid":
        law = Sigmoid(sigma0=float(_require(d, "sigma0", section)),
                      sigma1=float(_require(d, "sigma1", section)),
                      k_ep=float(_require(d, "k_ep", section)),
                      e_th=float(_require(d, "e_th", section)))
        if law.sigma0 <= 0 or law.sigma1 < law.sigma0:
            raise ValidationError(
                f"[{section}] needs 0 < sigma0 <= sigma1")
        return law
    if kind == "table":
        knots = _require(d, "knots", section)
        try:
            law = TableSpline(knots=tuple((float(e), float(s)) for e, s in knots))
        except Exception as e:
            raise ValidationError(f"[{section}] bad knots: {e}") from e
        return law
    raise ValidationError(f"[{section}] unknown law kind '{kind}'")


def fhn_from_dict(d: dict) -> FhnParams:
    try:
        return FhnParams(c_m=float(d.get("c_m", 1.0)),
                         theta=float(d.get("theta", 0.08)),
                         a=float(d.get("a", 0.7)),
                         b=float(d.get("b", 0.8)))
    except ValueError as e:
        raise ValidationError(f"[fhn] {e}") from e


def macro_config_from_dict(doc: dict, table=None) -> MacroConfig:
    dom = _require(doc, "domain", "file")
    grid = _require(doc, "grid", "file")
    tim = _require(doc, "time", "file")
    cls = _require(doc, "classes", "file")
    cond = _require(doc, "conductivity", "file")
    fhn = fhn_from_dict(doc.get("fhn", {}))

    classes = classes_from_lattice(
        [(float(r), float(p)) for r, p in _require(cls, "radius_classes", "classes")])
    law_i = law_from_dict(_require(cond, "intracellular", "conductivity"),
                          "conductivity.intracellular")
    eta_max = float(cond.get("eta_max", 10.0))
    rep = validate_h5(law_i, eta_max)
    if not rep.passed:
        raise ValidationError(
            f"[conductivity.intracellular] fails the uniform-bound check on "
            f"[0, {eta_max}]: sigma_lower={rep.sigma_lower}")

    extr = cond.get("extracellular", {"kind": "clamped"})
    sigma_hom_law = None
    sigma_hom_table = table
    if isinstance(extr, dict) and extr.get("kind") == "clamped":
        mode = "clamped"
    elif isinstance(extr, dict) and extr.get("kind") == "table":
        mode = "table"
        if sigma_hom_table is None:
            raise ValidationError(
                "[conductivity.extracellular] kind='table' requires a table "
                "(pass --table on the command line)")
    else:
        mode = "law"
        sigma_hom_law = law_from_dict(extr, "conductivity.extracellular")
        rep_e = validate_h5(sigma_hom_law, eta_max)
        if not rep_e.passed:
            raise ValidationError(
                "[conductivity.extracellular] fails the uniform-bound check")

    stim = None
    sd = doc.get("stimulus")
    if sd and sd.get("kind", "none") != "none":
        stim = Stimulus(kind=_require(sd, "kind", "stimulus"),
                        amplitude=float(_require(sd, "amplitude", "stimulus")),
                        t_on=float(sd.get("t_on", 0.0)),
                        t_off=float(_require(sd, "t_off", "stimulus")),
                        t_ramp=float(sd.get("t_ramp", 0.1)),
                        x_center=float(_require(sd, "x_center", "stimulus")),
                        width=float(_require(sd, "width", "stimulus")),
                        x_center2=(float(sd["x_center2"])
                                   if "x_center2" in sd else None))
        if stim.kind not in ("interior", "lateral"):
            raise ValidationError(f"[stimulus] unknown kind '{stim.kind}'")

    init = doc.get("initial", {})

    def init_spec(key):
        val = init.get(key, "rest")
        if isinstance(val, str):
            if val != "rest":
                raise ValidationError(f"[initial] {key} must be 'rest' or a number")
            return "rest"
        return float(val)

    lam = doc.get("fhn", {}).get("lambda", "auto")
    scheme = tim.get("scheme", "imex")
    if lam != "auto":
        lam = float(lam)
        lb = lambda_bound(fhn)
        if scheme == "implicit_lambda" and lam < lb - 1e-12:
            raise ValidationError(
                f"[fhn] lambda = {lam} is below the monotonicity bound "
                f"max((theta+3)/2, (theta+1)/2 - b) = {lb}")

    cfg = MacroConfig(
        length=float(_require(dom, "length", "domain")),
        nx=int(_require(grid, "nx", "grid")),
        width=(float(dom["width"]) if "width" in dom else None),
        ny=(int(grid["ny"]) if "ny" in grid else None),
        dt=float(_require(tim, "dt", "time")),
        t_end=float(_require(tim, "t_end", "time")),
        scheme=scheme,
        snapshot_every=int(tim.get("snapshot_every", 1)),
        classes=classes,
        fhn=fhn,
        law_i=law_i,
        extracellular=mode,
        sigma_hom_law=sigma_hom_law,
        sigma_hom_table=sigma_hom_table,
        bc=dom.get("bc", "grounded"),
        stimulus=stim,
        v_init=init_spec("v"),
        g_init=init_spec("g"),
        lam=lam,
    )
    try:
        cfg.validate()
    except (ValueError, ValidationError) as e:
        raise ValidationError(str(e)) from e
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    resolved_config: dict
    seeds: dict
    versions: dict = field(default_factory=dict)
    input_hashes: dict = field(default_factory=dict)
    output_hashes: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.versions:
            import scipy

            import fascicle

            self.versions = {"fascicle": fascicle.__version__,
                             "numpy": np.__version__,
                             "scipy": scipy.__version__,
                             "python": sys.version.split()[0]}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path
