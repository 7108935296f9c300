from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Literal, Optional

SCHEMA_VERSION = "1.0"

Verdict = Literal["PASS", "FAIL", "UNVERIFIABLE"]
CompletenessVerdict = Literal["COMPLETE-ON-GRID", "INCOMPLETE-ON-GRID"]
Command = Literal["validate", "solve-ad", "price", "completeness", "radner", "all"]

# ============= Economy document =============

class BoxSection(BaseModel):
    lo: List[float]
    hi: List[float]

    @model_validator(mode="after")
    def _check_bounds(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("box bounds lo and hi must have the same length")
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError("box is degenerate: every lo must be strictly below hi")
        return self

    def contains(self, point: List[float]) -> bool:
        return all(l <= p <= h for l, p, h in zip(self.lo, point, self.hi))


class DiffusionSection(BaseModel):
    K: int = Field(gt=0, le=3, description="state dimension; the PDE grid supports K <= 3")
    b: List[str]
    sigma: List[List[str]]
    x0: List[float]


class AgentSection(BaseModel):
    gamma: float = Field(gt=0, description="relative risk aversion, 1 means log utility")
    rho: float = Field(0.0, ge=0, description="time preference rate")
    entitlement: str
    shares: List[float]

    @model_validator(mode="after")
    def _check_shares(self):
        if any(n < 0 for n in self.shares):
            raise ValueError("initial shares must be nonnegative")
        return self


class AssetSection(BaseModel):
    dividend: str = "0"
    terminal: Optional[str] = Field(None, description="payoff at T, defaults to the flow dividend")


class EconomyDocument(BaseModel):
    name: Optional[str] = None
    description: Optional[str] = None
    diffusion: DiffusionSection
    agents: List[AgentSection] = Field(min_length=1)
    assets: List[AssetSection]
    T: float = Field(gt=0)
    region: BoxSection
    rank_region: BoxSection

    @model_validator(mode="after")
    def _check_dimensions(self):
        K = self.diffusion.K
        if len(self.diffusion.b) != K:
            raise ValueError(f"drift has {len(self.diffusion.b)} components, expected K={K}")
        if len(self.diffusion.sigma) != K or any(len(row) != K for row in self.diffusion.sigma):
            raise ValueError(f"dispersion must be a {K}x{K} matrix")
        if len(self.diffusion.x0) != K:
            raise ValueError(f"initial state has {len(self.diffusion.x0)} components, expected K={K}")
        if len(self.assets) != K + 1:
            raise ValueError(f"expected exactly K+1={K + 1} assets, got {len(self.assets)}")
        for i, agent in enumerate(self.agents):
            if len(agent.shares) != K + 1:
                raise ValueError(f"agent {i} holds {len(agent.shares)} share entries, expected {K + 1}")
        for label, box in (("region", self.region), ("rank_region", self.rank_region)):
            if len(box.lo) != K:
                raise ValueError(f"{label} must have K={K} bounds")
        if not self.region.contains(self.diffusion.x0):
            raise ValueError("initial state x0 must lie in the verification region")
        if not (self.region.contains(self.rank_region.lo) and self.region.contains(self.rank_region.hi)):
            raise ValueError("rank_region must be a sub-box of the verification region")
        return self

# ============= Run configuration =============

class GridSettings(BaseModel):
    nodes: List[int] = Field(default_factory=list, description="nodes per dimension, empty means settings default")
    time_steps: Optional[int] = Field(None, gt=0)


class MonteCarloSettings(BaseModel):
    paths: Optional[int] = Field(None, gt=0)
    steps: Optional[int] = Field(None, gt=0)
    seed: Optional[int] = None


class ToleranceSettings(BaseModel):
    negishi: Optional[float] = Field(None, gt=0)
    det_threshold: Optional[float] = Field(None, gt=0)


class RunConfig(BaseModel):
    economy: str
    grid: GridSettings = GridSettings()
    mc: MonteCarloSettings = MonteCarloSettings()
    tolerances: ToleranceSettings = ToleranceSettings()
    validation_samples: Optional[int] = Field(None, gt=0)
    output_dir: Optional[str] = None


class QuadratureConfig(BaseModel):
    n_paths: int = Field(gt=0)
    steps: int = Field(gt=0)
    seed: int

# ============= Reports =============

class AssumptionCheck(BaseModel):
    assumption: str
    verdict: Verdict
    witnesses: Dict[str, float] = {}
    message: str = ""
    location: Optional[List[float]] = None
    region_relative: bool = True


class ValidationReport(BaseModel):
    checks: List[AssumptionCheck]
    samples: int
    seed: int
    caveats: List[str] = []

    @property
    def passed(self) -> bool:
        return all(c.verdict != "FAIL" for c in self.checks)

    def verdicts(self) -> Dict[str, Verdict]:
        return {c.assumption: c.verdict for c in self.checks}

    def check(self, assumption: str) -> AssumptionCheck:
        for c in self.checks:
            if c.assumption == assumption:
                return c
        raise KeyError(assumption)


class NegishiSummary(BaseModel):
    weights: List[float]
    converged: bool
    iterations: int
    residuals: List[float]
    relative_residuals: List[float]
    endowment_values: List[float]
    expected_utility: List[float] = []
    endowment_utility: List[float] = []


class PricingDiagnostics(BaseModel):
    theta: float
    time_steps: int
    rannacher_steps: int
    nodes: List[int]
    max_pde_residual: List[float]
    min_numeraire_price: float
    initial_prices: List[float]
    analyticity: Verdict = "UNVERIFIABLE"


class WitnessNode(BaseModel):
    t: float
    x: List[float]
    scaled_det: float


class TerminalRankResult(BaseModel):
    min_abs_det: float
    location: List[float]
    samples: int
    passed: bool


class CompletenessReport(BaseModel):
    verdict: CompletenessVerdict
    threshold: float
    nodes_checked: int
    min_abs_det: float
    min_location: WitnessNode
    fraction_below: float
    condition_quantiles: Dict[str, Optional[float]]
    terminal_rank: TerminalRankResult
    witnesses: List[WitnessNode] = []
    quotient_rule_gap: float = 0.0


class MartingaleCheck(BaseModel):
    asset: int
    t1: float
    t2: float
    mean: float
    stderr: float
    flagged: bool


class MartingaleReport(BaseModel):
    checks: List[MartingaleCheck]
    allowance: float

    @property
    def flagged(self) -> bool:
        return any(c.flagged for c in self.checks)


class AgentRadnerStats(BaseModel):
    agent: int
    initial_value: float
    replication_rms: List[float]
    terminal_replication_rms: float
    mid_replication_rms: float
    max_replication_error: float
    admissibility_margin: float


class RadnerSummary(BaseModel):
    agents: List[AgentRadnerStats]
    portfolio_clearing_max: float
    consumption_clearing_max: float
    exit_fraction: float
    singular_fraction: float
    excluded_paths: int
    n_paths: int
    steps: int
    valid: bool
    admissibility_note: str = "sampled surrogate of a path-space condition"

# ============= Report envelope =============

class ReportHeader(BaseModel):
    schema_version: str = SCHEMA_VERSION
    stage: str
    config_hash: str
    seed: int
    generated_at: str
    assumptions: Dict[str, Verdict] = {}


class Report(BaseModel):
    header: ReportHeader
    body: Dict[str, Any]
