"""Batch front end: fit, ungroup, predict, simulate.

All commands read a key-value tree config (YAML) whose defaults match the
standard analysis setup: 1-year age bins on [50, 100], half-year follow-up
bins on [0, 10.5], 16 x 10 cubic spline bases, second-order differences,
BIC-selected smoothing, and ungrouping of ages 90+ onto [90, 100) when
enabled.  Outputs are long-format CSVs (u, s, value, extrapolated) with 17
significant digits plus JSON summaries; reruns with the same config and
seed are byte-identical.

Exit codes: 0 success, 2 data or domain errors, 3 non-convergence.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .basis import KnotVector, evaluate_basis, make_knots
from .errors import ConvergenceError, DataError, DomainError
from .incidence import compute_surfaces, in_support, support_hull, to_age_coordinates, surfaces_at_points
from .lexis import BinnedData, LexisGrid, bin_records, build_grid, read_records_csv, write_records_csv
from .pclm import CompositionSpec, composition_matrix, select_pclm_smoothing, ungroup_events, ungroup_exposure
from .simulate import ScenarioSpec, grouped_view, hazard_family, simulate_cohort
from .smooth2d import FitControl, FittedHazard, PenaltyConfig, SearchConfig, select_smoothing
from .uncertainty import (
    MonteCarloConfig,
    cif_standard_errors,
    coefficient_covariance,
    se_log_hazard,
    se_log_hazard_points,
)

CAUSES = (1, 2)
_FMT = "{:.17g}"


# --------------------------------------------------------------------------
# configuration

@dataclass
class GridConfig:
    u_lo: float = 50.0
    u_hi: float = 100.0
    h_u: float = 1.0
    s_lo: float = 0.0
    s_hi: float = 10.5
    h_s: float = 0.5


@dataclass
class BasisConfig:
    c_u: int = 16
    c_s: int = 10
    degree: int = 3


@dataclass
class SelectionConfig:
    criterion: str = "BIC"
    log10_rho_u_range: tuple = (-2.0, 7.0)
    log10_rho_s_range: tuple = (-2.0, 7.0)
    coarse_step: float = 1.0
    refine_resolution: float = 0.1


@dataclass
class PclmConfig:
    enabled: bool = False
    first_grouped_age: float = 90.0
    closing_age: float = 100.0
    log10_phi_lo: float = -1.0
    log10_phi_hi: float = 2.0
    log10_phi_step: float = 0.5

    def grid(self) -> np.ndarray:
        return np.arange(self.log10_phi_lo, self.log10_phi_hi + 1e-9, self.log10_phi_step)


@dataclass
class ConvergenceConfig:
    max_iter: int = 50
    dev_rel_tol: float = 1e-8
    score_rel_tol: float = 1e-6


@dataclass
class MonteCarloBlock:
    n_draws: int = 1000


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    d: int = 2
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    pclm: PclmConfig = field(default_factory=PclmConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    montecarlo: MonteCarloBlock = field(default_factory=MonteCarloBlock)
    delta: float = None  # quadrature step; None means h_s / 10
    seed: int = 20120501

    def fit_control(self) -> FitControl:
        return FitControl(max_iter=self.convergence.max_iter,
                          dev_rel_tol=self.convergence.dev_rel_tol,
                          score_rel_tol=self.convergence.score_rel_tol)

    def search_config(self) -> SearchConfig:
        sel = self.selection
        return SearchConfig(log10_rho_u_range=tuple(sel.log10_rho_u_range),
                            log10_rho_s_range=tuple(sel.log10_rho_s_range),
                            coarse_step=sel.coarse_step,
                            refine_resolution=sel.refine_resolution)

    def quadrature_delta(self) -> float:
        return self.grid.h_s / 10.0 if self.delta is None else self.delta


def _update_dataclass(obj, data, prefix=""):
    for key, val in data.items():
        if not hasattr(obj, key):
            raise DataError(f"unknown config key {prefix}{key!r}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and isinstance(val, dict):
            _update_dataclass(cur, val, prefix=f"{prefix}{key}.")
        else:
            setattr(obj, key, tuple(val) if isinstance(val, list) else val)


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise DataError(f"{path}: config must be a mapping")
        _update_dataclass(cfg, data)
    if cfg.pclm.enabled and abs(cfg.pclm.closing_age - cfg.grid.u_hi) > 1e-9:
        raise DataError(
            f"pclm.closing_age ({cfg.pclm.closing_age}) must equal grid.u_hi ({cfg.grid.u_hi})"
        )
    return cfg


def make_bases(grid: LexisGrid, basis_cfg: BasisConfig):
    if basis_cfg.c_u <= basis_cfg.degree or basis_cfg.c_s <= basis_cfg.degree:
        raise DataError("basis size must exceed the spline degree")
    kv_u = make_knots(grid.u_edges[0], grid.u_edges[-1],
                      basis_cfg.c_u - basis_cfg.degree, basis_cfg.degree)
    kv_s = make_knots(grid.s_edges[0], grid.s_edges[-1],
                      basis_cfg.c_s - basis_cfg.degree, basis_cfg.degree)
    return kv_u, kv_s


# --------------------------------------------------------------------------
# grouped-tail assembly

def assemble_ungrouped(grouped, body_R, kv_u, kv_s, d, phi_grid, ctrl):
    """Build a full fine-grid BinnedData from grouped counts and body exposure.

    Event tails come from composite-link fits per cause; the exposure tail
    is reconstructed from the ungrouped at-risk numbers by the half-bin
    rule.  Returns (BinnedData, diagnostics dict).
    """
    grid = grouped.grid
    spec = CompositionSpec(g=grouped.g, n_u=grid.n_u)
    Bu_mid = evaluate_basis(grid.u_mid, kv_u)
    Bs_mid = evaluate_basis(grid.s_mid, kv_s)
    Bs_edges = evaluate_basis(grid.s_edges, kv_s)

    diagnostics = {}
    Y = {}
    for ell, Z in sorted(grouped.Z.items()):
        Y[ell], fit = ungroup_events(Z, spec, Bu_mid, Bs_mid, d=d,
                                     log10_phi_grid=phi_grid, ctrl=ctrl)
        diagnostics[f"cause{ell}"] = _pclm_diag(fit)

    C_u = composition_matrix(spec)
    at_risk_fit = select_pclm_smoothing(grouped.at_risk, C_u, Bu_mid, Bs_edges, d=d,
                                        log10_phi_grid=phi_grid, ctrl=ctrl)
    diagnostics["at_risk"] = _pclm_diag(at_risk_fit)
    tail_exposure = ungroup_exposure(at_risk_fit.Gamma[spec.g - 1:], grid.h_s)
    R = np.vstack([np.asarray(body_R), tail_exposure])
    return BinnedData(grid=grid, Y=Y, R=R), diagnostics


def _pclm_diag(fit):
    return {
        "log10_phi_u": fit.phis[0],
        "log10_phi_s": fit.phis[1],
        "aic": fit.aic,
        "ed": fit.ed,
        "deviance": fit.deviance,
        "iterations": fit.n_iter,
        "candidates": [
            {"log10_phi_u": lu, "log10_phi_s": ls, "aic": aic}
            for lu, ls, aic in fit.candidates
        ],
    }


# --------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    return _FMT.format(float(x))


def write_long_csv(path, u_points, s_points, values, extrapolated=None, name="value"):
    """Long-format table over the product grid: u, s, value[, extrapolated]."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        header = ["u", "s", name] + (["extrapolated"] if extrapolated is not None else [])
        fh.write(",".join(header) + "\n")
        for i, u in enumerate(u_points):
            for j, s in enumerate(s_points):
                row = [_fmt(u), _fmt(s), _fmt(values[i, j])]
                if extrapolated is not None:
                    row.append("true" if extrapolated[i, j] else "false")
                fh.write(",".join(row) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _knots_payload(kv: KnotVector):
    return {"degree": kv.degree, "lo": kv.boundary_lo, "hi": kv.boundary_hi,
            "n_segments": kv.n_basis - kv.degree}


def save_model(path, cfg: RunConfig, grid: LexisGrid, fits: dict, Sigmas: dict):
    """Serialize fitted models as one human-inspectable JSON document."""
    causes = {}
    for ell, fit in sorted(fits.items()):
        kind, data = support_hull(fit)
        causes[str(ell)] = {
            "knots_u": _knots_payload(fit.kv_u),
            "knots_s": _knots_payload(fit.kv_s),
            "coefficients": fit.A.tolist(),
            "covariance": np.asarray(Sigmas[ell]).tolist(),
            "penalty": {"d": fit.penalty.d,
                        "log10_rho_u": fit.penalty.log10_rho_u,
                        "log10_rho_s": fit.penalty.log10_rho_s},
            "deviance": fit.deviance, "ed": fit.ed, "aic": fit.aic, "bic": fit.bic,
            "n_bin": fit.n_bin, "iterations": fit.n_iter,
            "support": {"kind": kind,
                        "data": np.asarray(data).tolist()},
        }
    payload = {
        "format": "hazard2ts-model",
        "version": __version__,
        "config": dataclasses.asdict(cfg),
        "grid": {"u_edges": grid.u_edges.tolist(), "s_edges": grid.s_edges.tolist()},
        "causes": causes,
    }
    write_json(path, payload)


def load_model(path):
    """Rebuild evaluation-ready fits, covariances, and support hulls."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "hazard2ts-model":
        raise DataError(f"{path}: not a model file")
    grid = LexisGrid(u_edges=np.asarray(payload["grid"]["u_edges"]),
                     s_edges=np.asarray(payload["grid"]["s_edges"]))
    fits, Sigmas, hulls = {}, {}, {}
    for key, entry in payload["causes"].items():
        ell = int(key)
        ku, ks = entry["knots_u"], entry["knots_s"]
        kv_u = make_knots(ku["lo"], ku["hi"], ku["n_segments"], ku["degree"])
        kv_s = make_knots(ks["lo"], ks["hi"], ks["n_segments"], ks["degree"])
        pen = entry["penalty"]
        fits[ell] = FittedHazard(
            A=np.asarray(entry["coefficients"]),
            penalty=PenaltyConfig(log10_rho_u=pen["log10_rho_u"],
                                  log10_rho_s=pen["log10_rho_s"], d=pen["d"]),
            kv_u=kv_u, kv_s=kv_s, grid=grid,
            W_hat=None, deviance=entry["deviance"], ed=entry["ed"],
            aic=entry["aic"], bic=entry["bic"], n_bin=entry["n_bin"],
            converged=True, n_iter=entry["iterations"], score_rel=0.0,
            gram=None, factor=None, support=None,
        )
        Sigmas[ell] = np.asarray(entry["covariance"])
        sup = entry["support"]
        hulls[ell] = (sup["kind"],
                      np.asarray(sup["data"]) if sup["kind"] == "polygon"
                      else tuple(sup["data"]))
    return payload, grid, fits, Sigmas, hulls


# --------------------------------------------------------------------------
# commands

@click.group()
@click.version_option(version=__version__)
def main():
    """Cause-specific hazards over two time scales (age at diagnosis, time
    since diagnosis): smoothing, cumulative incidence, standard errors, and
    ungrouping of a coarse final age interval."""


def _fail(exc, code):
    click.echo(f"error: {exc}", err=True)
    for detail in getattr(exc, "details", [])[:50]:
        click.echo(f"  {detail}", err=True)
    for point in getattr(exc, "points", [])[:50]:
        click.echo(f"  out of domain: {point}", err=True)
    sys.exit(code)


@main.command("fit")
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="YAML config; defaults are used when omitted.")
@click.option("--out", "outdir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--draws", type=int, default=None, help="Monte-Carlo draws for CIF SEs.")
def cmd_fit(input_csv, config_path, outdir, seed, draws):
    """Fit both cause-specific hazards from an individual-record CSV and
    write hazard, SE, cumulative-hazard, CIF, and survival tables."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg.seed = seed
        if draws is not None:
            cfg.montecarlo.n_draws = draws
        records = read_records_csv(input_csv)
        run_fit_pipeline(cfg, records, Path(outdir))
    except (DataError, DomainError) as exc:
        _fail(exc, 2)
    except ConvergenceError as exc:
        _fail(exc, 3)


def run_fit_pipeline(cfg: RunConfig, records, outdir: Path):
    """Everything cmd_fit does after argument parsing (importable for tests)."""
    outdir.mkdir(parents=True, exist_ok=True)
    g = cfg.grid
    grid = build_grid(g.u_lo, g.u_hi, g.h_u, g.s_lo, g.s_hi, g.h_s)
    kv_u, kv_s = make_bases(grid, cfg.basis)
    ctrl = cfg.fit_control()

    pclm_diag = None
    if cfg.pclm.enabled:
        grouped, fine = grouped_view(records, grid, cfg.pclm.first_grouped_age)
        binned, pclm_diag = assemble_ungrouped(
            grouped, fine.R[: grouped.g - 1], kv_u, kv_s, cfg.d, cfg.pclm.grid(), ctrl
        )
    else:
        binned = bin_records(records, grid)

    fits = {}
    for ell in CAUSES:
        fits[ell] = select_smoothing(binned, ell, kv_u, kv_s, d=cfg.d,
                                     criterion=cfg.selection.criterion,
                                     search=cfg.search_config(), ctrl=ctrl)
    Sigmas = {ell: coefficient_covariance(fits[ell]) for ell in CAUSES}

    delta = cfg.quadrature_delta()
    u_pts, s_pts = grid.u_mid, grid.s_mid
    surf = compute_surfaces(fits, u_pts, s_pts, delta=delta)
    mc = MonteCarloConfig(n_draws=cfg.montecarlo.n_draws, seed=cfg.seed)

    for ell in CAUSES:
        sub = outdir / f"cause{ell}"
        sub.mkdir(exist_ok=True)
        se_eta = se_log_hazard(fits[ell], Sigmas[ell], u_pts, s_pts)
        cif_se = cif_standard_errors(fits, Sigmas, ell, u_pts, s_pts, mc=mc, delta=delta)
        write_long_csv(sub / "hazard.csv", u_pts, s_pts, surf.hazard[ell],
                       surf.extrapolated, name="hazard")
        write_long_csv(sub / "log_hazard_se.csv", u_pts, s_pts, se_eta,
                       surf.extrapolated, name="log_hazard_se")
        write_long_csv(sub / "cumhaz.csv", u_pts, s_pts, surf.cumhaz[ell],
                       surf.extrapolated, name="cumhaz")
        write_long_csv(sub / "cif.csv", u_pts, s_pts, surf.cif[ell],
                       surf.extrapolated, name="cif")
        write_long_csv(sub / "cif_se.csv", u_pts, s_pts, cif_se,
                       surf.extrapolated, name="cif_se")
    write_long_csv(outdir / "survival.csv", u_pts, s_pts, surf.survival,
                   surf.extrapolated, name="survival")

    summary = {
        "criterion": cfg.selection.criterion,
        "quadrature_delta": delta,
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "causes": {
            str(ell): {
                "log10_rho_u": fits[ell].penalty.log10_rho_u,
                "log10_rho_s": fits[ell].penalty.log10_rho_s,
                "ed": fits[ell].ed,
                "deviance": fits[ell].deviance,
                "aic": fits[ell].aic,
                "bic": fits[ell].bic,
                "n_bin": fits[ell].n_bin,
                "iterations": fits[ell].n_iter,
            }
            for ell in CAUSES
        },
        "extrapolation_mask": surf.extrapolated.astype(int).tolist(),
    }
    if pclm_diag is not None:
        summary["pclm"] = pclm_diag
    write_json(outdir / "fit_summary.json", summary)
    save_model(outdir / "model.json", cfg, grid, fits, Sigmas)
    return fits, Sigmas, surf


@main.command("ungroup")
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--out", "outdir", type=click.Path(file_okay=False), required=True)
def cmd_ungroup(input_csv, config_path, outdir):
    """Ungroup the final wide age interval of a cohort CSV onto the fine grid
    (records in the grouped tail carry any age at or above the first grouped
    age), writing fine-grid event counts, exposures, and search diagnostics."""
    try:
        cfg = load_config(config_path)
        records = read_records_csv(input_csv)
        run_ungroup_pipeline(cfg, records, Path(outdir))
    except (DataError, DomainError) as exc:
        _fail(exc, 2)
    except ConvergenceError as exc:
        _fail(exc, 3)


def run_ungroup_pipeline(cfg: RunConfig, records, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    g = cfg.grid
    grid = build_grid(g.u_lo, g.u_hi, g.h_u, g.s_lo, g.s_hi, g.h_s)
    kv_u, kv_s = make_bases(grid, cfg.basis)
    grouped, fine = grouped_view(records, grid, cfg.pclm.first_grouped_age)
    binned, diagnostics = assemble_ungrouped(
        grouped, fine.R[: grouped.g - 1], kv_u, kv_s, cfg.d, cfg.pclm.grid(),
        cfg.fit_control(),
    )
    for ell in CAUSES:
        write_long_csv(outdir / f"ungrouped_events_cause{ell}.csv",
                       grid.u_mid, grid.s_mid, binned.Y[ell], name="count")
    write_long_csv(outdir / "ungrouped_exposure.csv",
                   grid.u_mid, grid.s_mid, binned.R, name="exposure")
    write_json(outdir / "ungroup_diagnostics.json", diagnostics)
    return binned, diagnostics


@main.command("simulate")
@click.argument("scenario_yaml", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_csv", type=click.Path(dir_okay=False), required=True)
@click.option("--n", type=int, default=None, help="Override the cohort size.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
def cmd_simulate(scenario_yaml, out_csv, n, seed):
    """Draw a synthetic cohort from configured hazard closures and write it
    in the same CSV schema that `fit` ingests."""
    try:
        with open(scenario_yaml, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        spec = scenario_from_dict(raw, n_override=n, seed_override=seed)
        records = simulate_cohort(spec)
        write_records_csv(out_csv, records)
        click.echo(f"wrote {len(records)} records to {out_csv}")
    except (DataError, DomainError, KeyError, ValueError) as exc:
        _fail(exc, 2)


def scenario_from_dict(raw: dict, n_override=None, seed_override=None) -> ScenarioSpec:
    def closure(block):
        block = dict(block)
        return hazard_family(block.pop("name"), **block)

    age = raw.get("age", {})
    return ScenarioSpec(
        hazard1=closure(raw["cause1"]),
        hazard2=closure(raw["cause2"]),
        u_lo=float(age.get("lo", 50.0)),
        u_hi=float(age.get("hi", 100.0)),
        s_max=float(raw.get("s_max", 10.5)),
        n=int(n_override if n_override is not None else raw.get("n", 1000)),
        seed=int(seed_override if seed_override is not None else raw.get("seed", 1)),
        step=float(raw.get("step", 1e-3)),
        age_weights=age.get("weights"),
    )


@main.command("predict")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--points", "points_csv", type=click.Path(exists=True, dir_okay=False),
              required=True, help="CSV with columns u,s (or t,s with --coords ts).")
@click.option("--coords", type=click.Choice(["us", "ts"]), default="us")
@click.option("--out", "out_csv", type=click.Path(dir_okay=False), required=True)
def cmd_predict(model_path, points_csv, coords, out_csv):
    """Evaluate a saved model at arbitrary points: hazards, their SEs, CIFs,
    survival, and an extrapolation flag per point."""
    try:
        run_predict_pipeline(model_path, points_csv, coords, out_csv)
    except (DataError, DomainError) as exc:
        _fail(exc, 2)


def _read_points(path, coords):
    import csv as _csv

    first = "u" if coords == "us" else "t"
    a_vals, s_vals = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or first not in reader.fieldnames or "s" not in reader.fieldnames:
            raise DataError(f"{path}: need columns {first!r} and 's'")
        problems = []
        for rownum, row in enumerate(reader, start=2):
            try:
                a_vals.append(float(row[first]))
                s_vals.append(float(row["s"]))
            except (TypeError, ValueError) as exc:
                problems.append(f"row {rownum}: {exc}")
        if problems:
            raise DataError(f"{path}: {len(problems)} bad row(s)", details=problems)
    return np.asarray(a_vals), np.asarray(s_vals)


def run_predict_pipeline(model_path, points_csv, coords, out_csv):
    payload, grid, fits, Sigmas, hulls = load_model(model_path)
    first, s_arr = _read_points(points_csv, coords)
    cfg = payload["config"]
    delta = cfg.get("delta") or grid.h_s / 10.0

    if coords == "ts":
        surf = to_age_coordinates(fits, first, s_arr, delta=delta)
        u_arr = first - s_arr
    else:
        surf = surfaces_at_points(fits, first, s_arr, delta=delta)
        u_arr = first

    se_eta = {ell: se_log_hazard_points(fits[ell], Sigmas[ell], u_arr, s_arr)
              for ell in fits}
    hull = hulls[sorted(hulls)[0]]
    extrapolated = np.array([not in_support(hull, u, s) for u, s in zip(u_arr, s_arr)])

    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        cols = ["u", "s"] + (["t"] if coords == "ts" else [])
        for ell in sorted(fits):
            cols += [f"hazard{ell}", f"log_hazard_se{ell}", f"hazard_se{ell}", f"cif{ell}"]
        cols += ["survival", "extrapolated"]
        fh.write(",".join(cols) + "\n")
        for i in range(len(u_arr)):
            row = [_fmt(u_arr[i]), _fmt(s_arr[i])]
            if coords == "ts":
                row.append(_fmt(first[i]))
            for ell in sorted(fits):
                lam = surf.hazard[ell][i, 0]
                row += [_fmt(lam), _fmt(se_eta[ell][i]), _fmt(lam * se_eta[ell][i]),
                        _fmt(surf.cif[ell][i, 0])]
            row += [_fmt(surf.survival[i, 0]), "true" if extrapolated[i] else "false"]
            fh.write(",".join(row) + "\n")
    return out_csv


if __name__ == "__main__":
    main()
