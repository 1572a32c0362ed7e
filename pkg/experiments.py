import json
import hashlib
import logging
from dataclasses import dataclass, replace, asdict
from pathlib import Path
from typing import Dict, List, Optional, Any

import numpy as np
import pandas as pd
from plotly.graph_objects import Figure, Table

import mfbsde
from mfbsde.types import SolveReport, ParticleEnsemble, ConditionReport, ConvexityParams, RiccatiSolution
from mfbsde.errors import ConfigError, ValidationError
from mfbsde.stochastic import BrownianDriver
from mfbsde.coefficients import (
    CoefficientSet, LQModel, Assumption25,
    builtin_model, lq_fbsde_coefficients, lq_assumption22_constants
)
from mfbsde.solvers import FBSDESolver
from mfbsde.lq_oracle import riccati_solve, lq_closed_loop, lq_fixed_point_gap
from mfbsde.utils.config import ExperimentConfig, locate_key
from mfbsde.utils.timer import Timer
from mfbsde import verification as checks

logger = logging.getLogger("mfbsde")

_FLOAT_FORMAT_ = "%.17g"
_HTML_ROWS_ = 500
_HTML_HEADERS_ = {
    "mean_x": "E[X_t]",
    "var_x": "Var X_t",
    "mean_y": "E[Y_t]",
    "var_y": "Var Y_t",
    "mean_z": "E[Z_t]",
    "y_solver_mean": "E[Y_t] solver",
    "y_oracle_mean": "E[Y_t] Riccati",
    "abs_gap": "|gap|",
    "eta_bar": "η̄",
    "x_bar": "E[X_t] Riccati",
    "eta": "η",
    "chi": "χ"
}


@dataclass
class OracleComparison:
    report: SolveReport
    riccati: RiccatiSolution
    frame: pd.DataFrame
    gap: float


@dataclass
class RunManifest:
    command: str
    version: str
    seed: int
    config: Dict[str, Any]
    config_path: Optional[str]
    wall_clock: float
    files: Dict[str, str]
    timing: Optional[Dict[str, Any]] = None

    def to_dict(self) -> dict:
        record = asdict(self)
        if self.timing is None:
            del record["timing"]
        return record


def _config_error(cfg: ExperimentConfig, dotted: str, message: str) -> ConfigError:
    return ConfigError(message, key=dotted, line=locate_key(cfg.text, dotted))


def _discount(cfg: ExperimentConfig) -> float:
    lq = cfg.model.lq_model
    return lq.r if lq is not None else cfg.model.r


def _require_lq(cfg: ExperimentConfig, purpose: str) -> LQModel:
    lq = cfg.model.lq_model
    if lq is None:
        raise _config_error(cfg, "model", f"{purpose} needs an LQ model, got builtin '{cfg.model.builtin}'")
    return lq


def build_coefficients(cfg: ExperimentConfig) -> CoefficientSet:
    lq = cfg.model.lq_model
    if lq is None:
        return builtin_model(cfg.model.builtin, cfg.problem)

    try:
        assumption22 = lq_assumption22_constants(lq, cfg.solver.grid(lq.r))
    except ValidationError:
        assumption22 = None

    return lq_fbsde_coefficients(lq, cfg.problem, assumption22)


def build_solver(cfg: ExperimentConfig) -> FBSDESolver:
    solver_cfg = cfg.solver.solver_config(_discount(cfg))
    driver = BrownianDriver.generate(cfg.seed, solver_cfg.n_particles, solver_cfg.grid)
    return FBSDESolver(solver_cfg, driver, cfg.model.xi)


def run_solve(cfg: ExperimentConfig, solver: Optional[FBSDESolver] = None) -> SolveReport:
    coeffs = build_coefficients(cfg)
    solver = solver or build_solver(cfg)

    logger.info(
        f"Solving '{coeffs.name}' with {cfg.solver.method}: N={cfg.solver.n_particles}, "
        f"T={cfg.solver.T}, dt={cfg.solver.dt}, seed={cfg.seed}"
    )

    if cfg.solver.method == "picard":
        return solver.picard_solve(coeffs)

    kappa = cfg.solver.kappa
    l = cfg.solver.l
    if coeffs.assumption22 is not None:
        kappa = coeffs.assumption22.kappa if kappa is None else kappa
        l = coeffs.assumption22.l if l is None else l
    if kappa is None or l is None:
        raise _config_error(cfg, "solver", "continuation needs 'kappa' and 'l' for this model")

    return solver.continuation_solve(coeffs, kappa, l)


def run_lambda0(cfg: ExperimentConfig) -> ParticleEnsemble:
    section = cfg.lambda0
    solver = build_solver(cfg)

    logger.info(f"Base case: kappa={section.kappa}, phi={section.phi}, psi={section.psi}")
    return solver.solve_lambda0(section.kappa, section.phi, section.psi, sigma=cfg.model.sigma)


def _convexity(cfg: ExperimentConfig, lq: LQModel, variant: str) -> ConvexityParams:
    overrides = cfg.checks.convexity
    try:
        if all(k in overrides for k in ("eta", "iota", "zeta", "l")):
            return ConvexityParams(**overrides)
        return replace(checks.lq_convexity_params(lq, cfg.solver.grid(lq.r), variant), **overrides)
    except ValidationError as e:
        raise _config_error(cfg, "checks.convexity", str(e)) from None


def _constants(cfg: ExperimentConfig, table: str, given: Dict[str, Any], declared, keys) -> Dict[str, float]:
    values = {}
    for key in keys:
        if key in given:
            values[key] = given[key]
        elif declared is not None:
            values[key] = getattr(declared, key)
        else:
            raise _config_error(cfg, f"checks.{table}", f"missing constant '{key}'")
    return values


def _assumption25(cfg: ExperimentConfig, coeffs: CoefficientSet) -> Optional[Assumption25]:
    if coeffs.assumption25 is not None:
        return coeffs.assumption25

    lq = cfg.model.lq_model
    if lq is not None and cfg.problem == "mfc":
        return checks.mfc_to_assumption25_constants(lq, _convexity(cfg, lq, "primary"), cfg.solver.grid(lq.r))
    return None


def run_check(cfg: ExperimentConfig) -> List[ConditionReport]:
    requested = cfg.checks.run
    reports: List[ConditionReport] = []
    if not requested:
        logger.info("No conditions requested")
        return reports

    grid = cfg.solver.grid(_discount(cfg))
    mc = dict(seed=cfg.seed, horizon=grid.T)
    a1 = cfg.checks.assumption1
    mc_a1 = dict(mc, **{k: a1[k] for k in ("n_pairs", "cloud_size") if k in a1})

    needs_coeffs = any(c.startswith(("A1", "A2")) for c in requested)
    coeffs = build_coefficients(cfg) if needs_coeffs else None

    a3 = None
    for condition in requested:
        if condition == "A1-i":
            values = _constants(cfg, "assumption1", a1, coeffs.assumption22, ("l",))
            reports.append(checks.check_assumption1_lipschitz_mc(coeffs, values["l"], **mc_a1))

        elif condition == "A1-ii":
            values = _constants(cfg, "assumption1", a1, coeffs.assumption22, ("K", "kappa"))
            reports.append(checks.check_assumption1_mc(coeffs, values["K"], values["kappa"], **mc_a1))

        elif condition.startswith("A2") and condition != "A2-iv":
            values = _constants(
                cfg, "assumption2", cfg.checks.assumption2, _assumption25(cfg, coeffs),
                ("kappa1", "kappa2", "l1", "l2", "eps1", "eps2", "K")
            )
            if condition == "A2-i":
                reports.append(checks.check_assumption2_monotonicity_mc(
                    coeffs, values["kappa1"], values["kappa2"], **mc))
            elif condition == "A2-ii":
                reports.append(checks.check_assumption2_lipschitz_mc(coeffs, values["l1"], values["l2"], **mc))
            else:
                reports.append(checks.check_assumption2_constants(**values))

        elif condition == "A2-iv":
            reports.append(checks.check_assumption2_integrability(coeffs, grid))

        elif condition.startswith("T3"):
            lq = _require_lq(cfg, f"condition {condition}")
            variant = "primary" if condition.endswith("fwd") else "alternate"
            check = checks.check_theorem31_conditions if condition.startswith("T31") else checks.check_theorem32_conditions
            params = _convexity(cfg, lq, variant)
            reports.append(check(lq, grid, variant, params))

            values = lq.on(grid)
            bound = checks.alpha_hat_lipschitz_bound(
                params, float(np.max(np.abs(values["b2"]))), float(np.max(np.abs(values["b1_bar"])))
            )
            logger.info(
                f"{condition}: alpha_hat Lipschitz in x {bound['x']:.4g}, y {bound['y']:.4g}, "
                f"measure {bound['measure']:.4g}"
            )

        else:
            lq = _require_lq(cfg, f"condition {condition}")
            if a3 is None:
                l = cfg.checks.convexity.get("l")
                if l is None:
                    l = _convexity(cfg, lq, "primary").l
                a3 = {r.condition_id: r for r in checks.check_assumption3(lq, l, grid, seed=cfg.seed)}
            reports.append(a3[condition])

    for report in reports:
        logger.info(
            f"{report.condition_id}: {'holds' if report.holds else 'fails'} "
            f"(margin {report.margin:.4g}, {report.method})"
        )
    return reports


def run_oracle_compare(cfg: ExperimentConfig) -> OracleComparison:
    if not cfg.oracle.enabled:
        raise _config_error(cfg, "oracle", "the Riccati cross-check is disabled; set 'enabled = true'")
    lq = _require_lq(cfg, "the Riccati cross-check")

    solver = build_solver(cfg)
    report = run_solve(cfg, solver)
    if report.final is None:
        raise ValidationError("solver returned no final ensemble to compare")

    grid = solver.grid
    ric = riccati_solve(lq, grid, cfg.model.xi.expectation, cfg.problem)
    oracle = lq_closed_loop(lq, ric, cfg.model.xi, solver.driver)

    y_solver = report.final.y.mean(axis=0)
    y_oracle = oracle.y.mean(axis=0)
    frame = pd.DataFrame(dict(
        t=grid.times,
        y_solver_mean=y_solver,
        y_oracle_mean=y_oracle,
        abs_gap=np.abs(y_solver - y_oracle)
    ))

    gap = lq_fixed_point_gap(report.final, ric, grid)
    logger.info(f"Relative gap to the Riccati feedback: {gap:.4e} (tolerance {cfg.oracle.tolerance})")

    return OracleComparison(report=report, riccati=ric, frame=frame, gap=gap)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _html_cell(value) -> str:
    if isinstance(value, float):
        return "" if np.isnan(value) else f"{value:.6g}"
    return str(value)


def _write_html(df: pd.DataFrame, path: Path, title: str):
    """Grid summary as a plotly table, thinned to at most _HTML_ROWS_ time points"""

    stride = max(1, -(-len(df) // _HTML_ROWS_))
    shown = df.iloc[::stride]
    if len(df) and shown.index[-1] != df.index[-1]:
        shown = pd.concat([shown, df.iloc[[-1]]])

    fig = Figure(
        data=[Table(
            columnwidth=[1] + [2] * (len(shown.columns) - 1),
            header=dict(
                values=[f"<b>{_HTML_HEADERS_.get(col, col)}</b>" for col in shown.columns],
                fill_color="darkslategray",
                font=dict(color="white", size=13),
                align="center"
            ),
            cells=dict(
                values=[[_html_cell(v) for v in shown[col].tolist()] for col in shown.columns],
                fill_color="whitesmoke",
                line_color="lightgray",
                align="right"
            )
        )]
    )

    every = f", every {stride}th grid point" if stride > 1 else ""
    fig.update_layout(
        title=dict(text=f"{title}<br><sup>{len(shown)} of {len(df)} rows{every}</sup>", x=0.02),
        margin=dict(l=20, r=20, t=80, b=20)
    )

    fig.write_html(path)


def write_outputs(
        out_dir: Path,
        cfg: ExperimentConfig,
        command: str,
        frames: Dict[str, pd.DataFrame],
        documents: Dict[str, Any],
        timer: Timer,
        timing: Optional[Dict[str, Any]] = None
    ) -> Path:
    """Write CSV/JSON/HTML artifacts and a manifest with their checksums"""

    out_dir.mkdir(parents=True, exist_ok=True)
    formats = cfg.output.formats
    written: List[Path] = []

    if "csv" in formats:
        for name, df in frames.items():
            path = out_dir / name
            df.to_csv(path, index=False, float_format=_FLOAT_FORMAT_)
            written.append(path)

    if "json" in formats:
        for name, document in documents.items():
            path = out_dir / name
            path.write_text(json.dumps(document, indent=2, allow_nan=False) + "\n", encoding="utf-8")
            written.append(path)

    if "html" in formats and frames:
        name, df = next(iter(frames.items()))
        path = out_dir / f"{Path(name).stem}.html"
        solver = cfg.solver
        _write_html(
            df, path,
            f"mfbsde {command}: {Path(name).stem} (N={solver.n_particles}, T={solver.T}, dt={solver.dt}, seed={cfg.seed})"
        )
        written.append(path)

    timer.stop()
    manifest = RunManifest(
        command=command,
        version=mfbsde.__version__,
        seed=cfg.seed,
        config=cfg.to_dict(),
        config_path=str(cfg.source) if cfg.source else None,
        wall_clock=timer.seconds_elapsed(),
        files={path.name: _sha256(path) for path in written},
        timing=timing or None
    )

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")

    logger.info(f"Results saved to {out_dir.absolute()}")
    return manifest_path
