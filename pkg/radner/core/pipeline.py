"""
Stage orchestration: validate -> solve-ad -> price -> completeness -> radner.
Each stage writes its reports and an .npz cache that later stages reload.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from radner.config import settings
from radner.core.completeness import completeness_report, determinant_field, normalize_prices
from radner.core.economy import Economy, load_economy, validate_assumptions
from radner.core.markov import Grid, build_grid, export_paths_csv, simulate_paths
from radner.core.planner import ADEquilibrium, BudgetQuadrature, assemble_allocation, expected_utilities, \
    negishi_solve
from radner.core.pricing import asset_integrands, build_gains, martingale_drift_test, mc_expectation, \
    price_all_assets, restore_pricing
from radner.core.radner import simulate_radner
from radner.core.registry import resolve_economy_document
from radner.core.state_manager import StageStore
from radner.exceptions import EconomyConfigError, RadnerError
from radner.models import Command, QuadratureConfig, RunConfig
from radner.utils.io import config_hash, grid_frame, read_report, write_csv, write_report
from radner.utils.logger import logger

STAGES = ("validate", "solve-ad", "price", "completeness", "radner")
EXIT_PATHS = 2000


@dataclass
class ResolvedRun:
    """RunConfig merged over Settings, with command-line overrides applied."""

    economy: Economy
    economy_document: Dict[str, Any]
    seed: int
    nodes: List[int]
    time_steps: int
    mc_paths: int
    mc_steps: int
    negishi_tol: float
    det_threshold: float
    validation_samples: int
    out_dir: Path
    digest: str = ""

    def fingerprint(self) -> Dict[str, Any]:
        return {
            "economy": self.economy_document,
            "seed": self.seed,
            "nodes": self.nodes,
            "time_steps": self.time_steps,
            "mc_paths": self.mc_paths,
            "mc_steps": self.mc_steps,
            "negishi_tol": self.negishi_tol,
            "det_threshold": self.det_threshold,
            "validation_samples": self.validation_samples,
            "theta": settings.theta,
            "rannacher_steps": settings.rannacher_steps,
        }


def resolve_run(config: RunConfig, base: Path = Path("."), out: Optional[str] = None,
                seed: Optional[int] = None, grid_scale: float = 1.0) -> ResolvedRun:
    if grid_scale <= 0:
        raise EconomyConfigError("--grid-scale must be positive", errors=[{"loc": "grid_scale", "input": grid_scale}])
    document = resolve_economy_document(config.economy, base)
    econ = load_economy(document)
    K = econ.K
    nodes = list(config.grid.nodes) or [settings.grid_nodes[min(K, len(settings.grid_nodes)) - 1]] * K
    if len(nodes) != K:
        raise EconomyConfigError(f"grid.nodes needs {K} entries, got {len(nodes)}",
                                 errors=[{"loc": "grid.nodes", "input": nodes}])
    time_steps = config.grid.time_steps or settings.grid_time_steps
    run = ResolvedRun(
        economy=econ,
        economy_document=econ.document.model_dump(mode="json"),
        seed=seed if seed is not None else (config.mc.seed if config.mc.seed is not None else settings.seed),
        nodes=[max(3, int(round(n * grid_scale))) for n in nodes],
        time_steps=max(1, int(round(time_steps * grid_scale))),
        mc_paths=config.mc.paths or settings.mc_paths,
        mc_steps=config.mc.steps or settings.mc_steps,
        negishi_tol=config.tolerances.negishi or settings.negishi_tol,
        det_threshold=config.tolerances.det_threshold or settings.det_threshold,
        validation_samples=config.validation_samples or settings.validation_samples,
        out_dir=Path(out or config.output_dir or settings.output_dir),
    )
    run.digest = config_hash(run.fingerprint())
    return run


def load_run_config(path: Path) -> RunConfig:
    try:
        return RunConfig.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError as e:
        raise EconomyConfigError(f"config file not found: {path}") from e
    except ValueError as e:
        raise EconomyConfigError(f"run config {path} is invalid: {e}") from e


@dataclass
class StageResult:
    stage: str
    exit_code: int
    verdict: str
    files: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


class Pipeline:
    def __init__(self, run: ResolvedRun):
        self.run = run
        self.econ = run.economy
        self.out = run.out_dir
        self.store = StageStore(run.out_dir, run.digest)
        self._grid: Optional[Grid] = None
        self._assumptions: Optional[Dict[str, str]] = None

    @property
    def grid(self) -> Grid:
        if self._grid is None:
            self._grid = build_grid(self.econ.region, self.run.nodes, self.econ.T, self.run.time_steps,
                                    x0=self.econ.diffusion.x0)
        return self._grid

    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(n_paths=self.run.mc_paths, steps=self.run.mc_steps, seed=self.run.seed)

    def _report(self, name: str, stage: str, body: Dict[str, Any]) -> Path:
        return write_report(self.out / name, stage, body, self.run.digest, self.run.seed, self.assumptions())

    def assumptions(self) -> Dict[str, str]:
        """Validation verdicts every report embeds; reused from validation.json when it matches."""
        if self._assumptions is None:
            path = self.out / "validation.json"
            if path.exists():
                report = read_report(path)
                if report.header.config_hash == self.run.digest:
                    self._assumptions = {c["assumption"]: c["verdict"] for c in report.body["checks"]}
            if self._assumptions is None:
                report = validate_assumptions(self.econ, self.run.validation_samples, self.run.seed)
                self._assumptions = report.verdicts()
        return self._assumptions

    def equilibrium(self) -> ADEquilibrium:
        arrays = self.store.load("ad", required_by="downstream stages")
        return ADEquilibrium(
            lam=arrays["lam"], residuals=arrays["residuals"], relative_residuals=arrays["relative_residuals"],
            endowment_values=arrays["endowment_values"], converged=bool(arrays["converged"]),
            iterations=int(arrays["iterations"]), allocation=assemble_allocation(self.econ, arrays["lam"], self.grid),
        )

    def pricing(self, eq: ADEquilibrium):
        return restore_pricing(self.econ, eq, self.grid, self.store.load("price", required_by="downstream stages"))

    # ============= Stages =============

    def validate(self) -> StageResult:
        exit_paths = min(self.run.mc_paths, EXIT_PATHS)
        report = validate_assumptions(self.econ, self.run.validation_samples, self.run.seed, exit_paths=exit_paths)
        self._assumptions = report.verdicts()
        path = self._report("validation.json", "validate", report.model_dump(mode="json"))
        failed = [c.assumption for c in report.checks if c.verdict == "FAIL"]
        return StageResult("validate", 0 if report.passed else 1, "PASS" if report.passed else "FAIL", [path],
                           {"verdicts": report.verdicts(), "failed": failed})

    def solve_ad(self) -> StageResult:
        quad = BudgetQuadrature(self.econ, self.quadrature())
        eq = negishi_solve(self.econ, tol=self.run.negishi_tol, quad=quad, grid=self.grid)
        utilities = expected_utilities(self.econ, eq.lam, quad)
        summary = eq.summary(utilities)
        self.store.save("ad", lam=eq.lam, residuals=eq.residuals, relative_residuals=eq.relative_residuals,
                        endowment_values=eq.endowment_values, converged=np.array(eq.converged),
                        iterations=np.array(eq.iterations))

        g, alloc = self.grid, eq.allocation
        files = [self._report("ad_equilibrium.json", "solve-ad", {
            "negishi": summary.model_dump(mode="json"),
            "quadrature": self.quadrature().model_dump(mode="json"),
            "exit_fraction": quad.exit_fraction,
            "individually_rational": bool(np.all(utilities[0] >= utilities[1] - 1e-12)),
        })]
        files.append(write_csv(grid_frame(g.times, g.points, {"psi": alloc.psi}), self.out / "psi.csv"))
        for i in range(self.econ.I):
            frame = grid_frame(g.times, g.points, {"consumption": alloc.consumption[i], "endowment": alloc.endowment[i]})
            files.append(write_csv(frame, self.out / f"alloc_{i + 1}.csv"))
        return StageResult("solve-ad", 0 if eq.converged else 1, "converged" if eq.converged else "not-converged",
                           files, {"lambda": eq.lam.tolist(), "max_relative_residual": float(np.max(np.abs(eq.relative_residuals)))})

    def price(self) -> StageResult:
        eq = self.equilibrium()
        g = self.grid
        p = price_all_assets(self.econ, eq, g)
        self.store.save("price", s=p.s, source=p.source, terminal=p.terminal, residuals=p.residuals,
                        theta=np.array(p.theta), rannacher_steps=np.array(p.rannacher_steps))

        diagnostics = p.diagnostics()
        x0 = self.econ.diffusion.x0
        mc_checks = []
        for k in range(self.econ.K + 1):
            source, terminal = asset_integrands(self.econ, eq, k)
            estimate, stderr = mc_expectation(self.econ.diffusion, source, terminal, 0.0, x0,
                                              self.run.mc_paths, self.run.mc_steps, self.run.seed + 3, T=self.econ.T)
            pde = float(g.interpolate(p.s[k], 0.0, x0[None])[0])
            agree = abs(pde - estimate) <= 3.0 * stderr + settings.drift_bias_allowance * max(1.0, abs(estimate))
            mc_checks.append({"asset": k, "pde": pde, "mc": estimate, "stderr": stderr, "agree": agree})

        paths = simulate_paths(self.econ.diffusion, self.econ.T, self.run.mc_steps, self.run.mc_paths, self.run.seed + 2)
        martingale = martingale_drift_test(build_gains(p, paths))

        files = [self._report("pricing_diag.json", "price", {
            "diagnostics": diagnostics.model_dump(mode="json"),
            "mc_cross_check": mc_checks,
            "martingale": martingale.model_dump(mode="json"),
        })]
        columns = {f"s{k}": p.s[k] for k in range(p.s.shape[0])}
        files.append(write_csv(grid_frame(g.times, g.points, columns), self.out / "prices.csv"))
        ok = all(c["agree"] for c in mc_checks) and not martingale.flagged
        return StageResult("price", 0 if ok else 1, "PASS" if ok else "FAIL", files,
                           {"initial_prices": diagnostics.initial_prices,
                            "max_pde_residual": diagnostics.max_pde_residual,
                            "martingale_flags": sum(c.flagged for c in martingale.checks)})

    def completeness(self) -> StageResult:
        eq = self.equilibrium()
        p = self.pricing(eq)
        nz = normalize_prices(p, self.econ.rank_region)
        abs_det, scaled = determinant_field(self.econ, p, nz)
        report = completeness_report(self.econ, p, self.run.det_threshold, normalized=nz, fields=(abs_det, scaled),
                                     samples=self.run.validation_samples, seed=self.run.seed)
        g = self.grid
        files = [self._report("completeness.json", "completeness", report.model_dump(mode="json"))]
        files.append(write_csv(grid_frame(g.times, g.points, {"abs_det": abs_det, "scaled_det": scaled}),
                               self.out / "det.csv"))
        ok = report.verdict == "COMPLETE-ON-GRID"
        return StageResult("completeness", 0 if ok else 1, report.verdict, files,
                           {"min_abs_det": report.min_abs_det, "fraction_below": report.fraction_below,
                            "witnesses": len(report.witnesses)})

    def radner(self, paths_csv: bool = False) -> StageResult:
        eq = self.equilibrium()
        p = self.pricing(eq)
        paths = simulate_paths(self.econ.diffusion, self.econ.T, self.run.mc_steps, self.run.mc_paths, self.run.seed + 1)
        outcome = simulate_radner(self.econ, eq, p, paths, self.run.det_threshold)
        files = [self._report("radner.json", "radner", outcome.summary.model_dump(mode="json"))]
        if paths_csv:
            files.append(export_paths_csv(paths, self.out / "paths.csv"))
        s = outcome.summary
        ok = s.valid and s.portfolio_clearing_max <= 1e-6
        return StageResult("radner", 0 if ok else 1, "PASS" if ok else "FAIL", files,
                           {"portfolio_clearing_max": s.portfolio_clearing_max,
                            "exit_fraction": s.exit_fraction, "valid": s.valid})


def run(command: Command, pipeline: Pipeline, paths_csv: bool = False,
        on_stage: Optional[Callable[[StageResult], None]] = None) -> Tuple[int, List[StageResult]]:
    """
    Run one stage, or every stage in order for ``all`` (stopping at the first
    failing stage). A RadnerError becomes exit code 1 and an error.json report.
    """
    handlers: Dict[str, Callable[[], StageResult]] = {
        "validate": pipeline.validate,
        "solve-ad": pipeline.solve_ad,
        "price": pipeline.price,
        "completeness": pipeline.completeness,
        "radner": lambda: pipeline.radner(paths_csv),
    }
    stages = STAGES if command == "all" else (command,)
    results: List[StageResult] = []
    pipeline.out.mkdir(parents=True, exist_ok=True)
    for stage in stages:
        logger.info(f"Stage '{stage}' started")
        try:
            result = handlers[stage]()
        except RadnerError as e:
            logger.error(f"Stage '{stage}' failed: {e.message}")
            path = write_report(pipeline.out / "error.json", stage, {**e.to_report(), "module": e.stage, "stage": stage},
                                pipeline.run.digest, pipeline.run.seed)
            result = StageResult(stage, 1, "ERROR", [path], e.to_report())
        results.append(result)
        if on_stage is not None:
            on_stage(result)
        logger.info(f"Stage '{stage}' finished: {result.verdict}")
        if result.exit_code != 0:
            return 1, results
    return 0, results
