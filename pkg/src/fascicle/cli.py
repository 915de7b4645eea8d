"""Command-line entry point.

Subcommands cover the pipeline end to end: geometry sampling, density and
Palm statistics, identity checks, effective-conductivity tabulation, the
macroscopic multidomain run, and the homogenization convergence study.

Discipline: data goes to files, diagnostics to stderr; the only thing
printed on stdout is the path of the run manifest (when one is written).
Exit codes: 0 success, 1 configuration/validation failure, 2 solver
failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from fascicle import geometry, micro, stats
from fascicle.cell_problem import (solve_corrector, effective_flux,
                                   table_from_csv, table_to_csv,
                                   tabulate_sigma_hom)
from fascicle.config import (RunManifest, law_from_dict, load_toml,
                             macro_config_from_dict, model_from_dict,
                             sha256_file)
from fascicle.conductivity import Constant
from fascicle.errors import (FascicleError, NewtonDivergence, NonConvergence,
                             ParseError, ValidationError)
from fascicle.macro import energy_diagnostics, run as run_macro_sim

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_USAGE = 64


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("FASCICLE_THREADS", "1"))


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate_config(args) -> int:
    doc = load_toml(args.config)
    if "model" in doc:
        model_from_dict(doc["model"])
    if "domain" in doc:
        macro_config_from_dict(doc)
    elif "conductivity" in doc and "kind" in doc["conductivity"]:
        law_from_dict(doc["conductivity"])
    _log(f"{args.config}: valid")
    return EXIT_OK


def cmd_sample_geometry(args) -> int:
    doc = load_toml(args.model)
    model = model_from_dict(doc.get("model", doc))
    real = geometry.sample_realization(
        model, (0.0, 0.0, args.window, args.window), args.seed)
    out = _write(Path(args.out), geometry.realization_to_json(real) + "\n")
    rep = geometry.validate_hypotheses(
        real, d0=model.d0, r_lo=float(np.min(model.radii)) * 0.5,
        r_hi=float(np.max(model.radii)) * 1.5 + model.jitter_radius,
        R0=model.covering_radius_bound(args.window))
    _log(f"sampled {real.n_disks} disks; separation={rep.h1_pass} "
         f"radius-bounds={rep.h3_pass} covering={rep.h2_pass}")
    manifest = RunManifest(
        command="sample-geometry",
        resolved_config={"model": doc, "window": args.window, "seed": args.seed},
        seeds={"seed": args.seed},
        input_hashes={str(args.model): sha256_file(args.model)},
        output_hashes={str(out): sha256_file(out)})
    mpath = manifest.write(out.with_suffix(".manifest.json"))
    print(mpath)
    return EXIT_OK


def cmd_estimate_densities(args) -> int:
    doc = load_toml(args.model)
    model = model_from_dict(doc.get("model", doc))
    t0 = time.perf_counter()
    dens = stats.estimate_volume_fractions(model, args.window, args.samples,
                                           args.seed)
    palm = stats.estimate_perimeter_intensity(model, args.window, args.samples,
                                              args.seed)
    out = _write(Path(args.out), stats.density_csv(model, dens, palm))
    _log(f"lambda_total={dens.lambda_total:.6f} "
         f"(analytic {sum(math.pi * r * r * p for r, p in model.radius_classes):.6f})")
    manifest = RunManifest(
        command="estimate-densities",
        resolved_config={"model": doc, "window": args.window,
                         "samples": args.samples, "seed": args.seed},
        seeds={"seed": args.seed},
        input_hashes={str(args.model): sha256_file(args.model)},
        output_hashes={str(out): sha256_file(out)},
        wall_clock={"estimate": time.perf_counter() - t0})
    mpath = manifest.write(out.with_suffix(".manifest.json"))
    print(mpath)
    return EXIT_OK


def cmd_check_identities(args) -> int:
    doc = load_toml(args.model)
    model = model_from_dict(doc.get("model", doc))
    K = len(model.radius_classes)
    rng = np.random.default_rng(args.seed)
    reports = []
    for i in range(args.vectors):
        f = rng.uniform(-2.0, 2.0, K)
        rep = stats.check_radius_identity(model, f, args.window, args.samples,
                                          args.seed + 1000 + i)
        reports.append({"f": f.tolist(), "lhs": rep.lhs, "rhs": rep.rhs,
                        "diff": rep.diff, "se": rep.combined_se,
                        "passed": rep.passed})
    camp = stats.check_campbell(
        model, stats.CampbellTest(h_values=tuple([1.0] * K),
                                  support=(0.0, 0.0, 1.0, 1.0)),
        args.window, args.samples, args.seed)
    payload = {"radius_identity": reports,
               "campbell": {"lhs": camp.lhs, "rhs": camp.rhs,
                            "diff": camp.diff, "se": camp.combined_se,
                            "passed": camp.passed},
               "all_passed": camp.passed and all(r["passed"] for r in reports)}
    out = _write(Path(args.out), json.dumps(payload, indent=2) + "\n")
    _log(f"radius identity: {sum(r['passed'] for r in reports)}/{len(reports)} "
         f"passed; campbell: {camp.passed}")
    print(out)
    return EXIT_OK if payload["all_passed"] else EXIT_SOLVER


def cmd_tabulate_sigma_hom(args) -> int:
    doc = load_toml(args.config)
    model = model_from_dict(doc.get("model", {}))
    law = law_from_dict(doc.get("conductivity", {}))
    tab = doc.get("table", {})
    t0 = time.perf_counter()
    table = tabulate_sigma_hom(
        model, law,
        xi1_grid=[float(v) for v in tab.get("xi1_grid", [0.0, 0.5, 1.0])],
        xit_grid=[float(v) for v in tab.get("xit_grid", [0.0, 0.5, 1.0])],
        N=int(tab.get("n_torus", 8)),
        replicates=int(tab.get("replicates", 2)),
        grid_h=float(tab.get("grid_h", 1.0 / 16)),
        tol=float(tab.get("tol", 1e-8)),
        seed=int(tab.get("seed", 0)),
        n_threads=_threads(args))
    csv_text, prov = table_to_csv(table)
    out = _write(Path(args.out), csv_text)
    side = _write(Path(str(args.out) + ".provenance.json"), prov + "\n")
    manifest = RunManifest(
        command="tabulate-sigma-hom",
        resolved_config=doc,
        seeds={"seed": int(tab.get("seed", 0))},
        input_hashes={str(args.config): sha256_file(args.config)},
        output_hashes={str(out): sha256_file(out), str(side): sha256_file(side)},
        wall_clock={"tabulate": time.perf_counter() - t0})
    mpath = manifest.write(out.with_suffix(".manifest.json"))
    print(mpath)
    return EXIT_OK


def _snapshots_csv(series) -> str:
    cfg = series.config
    import csv as _csv
    import io as _io

    buf = _io.StringIO()
    w = _csv.writer(buf, lineterminator="\n")
    K = len(cfg.classes)
    cols = ["t", "x1"] + (["x2"] if cfg.is_2d else []) + ["u_e"]
    for k in range(K):
        cols += [f"v_{k + 1}", f"g_{k + 1}", f"u_i{k + 1}"]
    w.writerow(cols)
    x = cfg.x_centers()
    for t, st in zip(series.times, series.states):
        if cfg.is_2d:
            ys = (np.arange(cfg.ny) + 0.5) * cfg.dy
            for i in range(cfg.nx):
                for j in range(cfg.ny):
                    row = [f"{t:.17g}", f"{x[i]:.17g}", f"{ys[j]:.17g}",
                           f"{st.u_e[i, j]:.17g}"]
                    for k in range(K):
                        row += [f"{st.v[k][i, j]:.17g}", f"{st.g[k][i, j]:.17g}",
                                f"{st.u_i(k)[i, j]:.17g}"]
                    w.writerow(row)
        else:
            for i in range(cfg.nx):
                row = [f"{t:.17g}", f"{x[i]:.17g}", f"{st.u_e[i]:.17g}"]
                for k in range(K):
                    row += [f"{st.v[k][i]:.17g}", f"{st.g[k][i]:.17g}",
                            f"{st.u_i(k)[i]:.17g}"]
                w.writerow(row)
    return buf.getvalue()


def cmd_run_macro(args) -> int:
    doc = load_toml(args.config)
    table = None
    if args.table:
        table = table_from_csv(Path(args.table).read_text())
    cfg = macro_config_from_dict(doc, table=table)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    series = run_macro_sim(cfg)
    wall = time.perf_counter() - t0
    snap = _write(outdir / "snapshots.csv", _snapshots_csv(series))
    diag = _write(outdir / "diagnostics.json",
                  json.dumps({**series.diagnostics.as_dict(),
                              "steps": series.step_count,
                              "monotone_violations": series.monotone_violations},
                             indent=2) + "\n")
    inputs = {str(args.config): sha256_file(args.config)}
    if args.table:
        inputs[str(args.table)] = sha256_file(args.table)
    manifest = RunManifest(
        command="run-macro", resolved_config=doc, seeds={},
        input_hashes=inputs,
        output_hashes={str(snap): sha256_file(snap), str(diag): sha256_file(diag)},
        wall_clock={"run": wall})
    mpath = manifest.write(outdir / "manifest.json")
    _log(f"{series.step_count} steps in {wall:.1f}s; diagnostics in {diag}")
    print(mpath)
    return EXIT_OK


def cmd_verify_cell_convergence(args) -> int:
    doc = load_toml(args.config)
    model = model_from_dict(doc.get("model", {}))
    law = law_from_dict(doc.get("conductivity", {"kind": "constant", "sigma": 1.0}))
    sweep = doc.get("sweep", {})
    epsilons = [float(e) for e in sweep.get("epsilons", [0.25, 0.125, 0.0625])]
    reals = int(sweep.get("realizations", 4))
    seed = int(sweep.get("seed", 0))
    cells_per_disk = int(sweep.get("cells_per_pitch", 16))
    f_amp = float(sweep.get("membrane_source", 0.5))
    j_amp = float(sweep.get("lateral_flux", 1.0))
    d0 = float(sweep.get("boundary_gap", 0.2))
    S = (0.0, 0.0, 1.0, 1.0)
    f = lambda x, y: f_amp + 0.0 * np.asarray(x)
    jlat = lambda x, side: (j_amp if side == "top" else -j_amp) * np.sin(np.pi * np.asarray(x))
    mu_tot = sum(2.0 * math.pi * r * p for r, p in model.radius_classes)
    t0 = time.perf_counter()
    real1 = geometry.sample_periodic_realization(model, 1, seed)
    corr = solve_corrector(real1, law, (0.0, 1.0, 0.0),
                           grid_h=1.0 / cells_per_disk, tol=1e-10)
    sig_t = effective_flux(corr, law)[1]
    hom = micro.solve_homogenized_extracellular(
        S, Constant(sig_t), f, jlat, mu_tot, grid_h=1.0 / 256)
    energies = {}
    for eps in epsilons:
        vals = []
        for rep in range(reals):
            real = geometry.sample_realization(
                model, (0, 0, 1.2 / eps, 1.2 / eps),
                geometry.derive_seed(seed, rep))
            sf = geometry.rescale_and_clip(real, eps, S, 1.0, d0=d0)
            res = micro.solve_stationary_extracellular(
                sf, law, f, jlat, grid_h=eps / cells_per_disk)
            vals.append(res.energy)
        energies[eps] = vals
        _log(f"eps={eps}: mean energy {np.mean(vals):.8f} "
             f"sd {np.std(vals, ddof=1):.2e}")
    report = micro.convergence_report(energies, hom.energy)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = _write(outdir / "convergence_report.csv",
                      micro.report_to_csv(report))
    summary = _write(outdir / "summary.json", json.dumps(
        {"passed": report.passed, "e_hom": report.e_hom,
         "epsilons": report.epsilons, "gaps": report.gaps,
         "spreads": report.spreads, "sigma_t": sig_t}, indent=2) + "\n")
    manifest = RunManifest(
        command="verify-cell-convergence", resolved_config=doc,
        seeds={"seed": seed},
        input_hashes={str(args.config): sha256_file(args.config)},
        output_hashes={str(csv_path): sha256_file(csv_path),
                       str(summary): sha256_file(summary)},
        wall_clock={"sweep": time.perf_counter() - t0})
    mpath = manifest.write(outdir / "manifest.json")
    _log(f"convergence {'PASSED' if report.passed else 'FAILED'}: "
         f"gaps {report.gaps}")
    print(mpath)
    return EXIT_OK if report.passed else EXIT_SOLVER


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fascicle",
        description="Stochastic homogenization pipeline for axon bundles")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap for parameter sweeps "
                        "(default: FASCICLE_THREADS or 1)")
    sub = p.add_subparsers(dest="command")

    q = sub.add_parser("sample-geometry", help="sample a disk realization")
    q.add_argument("--model", required=True)
    q.add_argument("--window", type=float, required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sample_geometry)

    q = sub.add_parser("estimate-densities",
                       help="Monte Carlo volume fractions and Palm masses")
    q.add_argument("--model", required=True)
    q.add_argument("--window", type=float, required=True)
    q.add_argument("--samples", type=int, required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_estimate_densities)

    q = sub.add_parser("check-identities",
                       help="radius identity and Campbell formula checks")
    q.add_argument("--model", required=True)
    q.add_argument("--window", type=float, default=30.0)
    q.add_argument("--samples", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--vectors", type=int, default=20)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_check_identities)

    q = sub.add_parser("tabulate-sigma-hom",
                       help="tabulate the effective conductivity")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_tabulate_sigma_hom)

    q = sub.add_parser("run-macro", help="integrate the multidomain model")
    q.add_argument("--config", required=True)
    q.add_argument("--table", default=None,
                   help="effective-law table CSV (for extracellular kind='table')")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_run_macro)

    q = sub.add_parser("verify-cell-convergence",
                       help="stationary homogenization-limit check")
    q.add_argument("--config", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_verify_cell_convergence)

    q = sub.add_parser("validate-config", help="validate a configuration file")
    q.add_argument("config")
    q.set_defaults(func=cmd_validate_config)
    return p


def dispatch(argv) -> int:
    parser = build_parser()
    known = {"sample-geometry", "estimate-densities", "check-identities",
             "tabulate-sigma-hom", "run-macro", "verify-cell-convergence",
             "validate-config"}
    positional = [a for a in argv if not a.startswith("-")]
    if not positional or positional[0] not in known:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ParseError, ValidationError) as e:
        _log(f"error: {e}")
        return EXIT_VALIDATION
    except (NonConvergence, NewtonDivergence) as e:
        _log(f"solver failure: {e}")
        return EXIT_SOLVER
    except FascicleError as e:
        _log(f"error: {e}")
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
