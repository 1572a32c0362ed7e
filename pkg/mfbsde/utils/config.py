import re
import sys
import math
from pathlib import Path
from dataclasses import dataclass, field, asdict
from typing import Optional, List, Dict, Any, Union

if  sys.version_info.major < 3 \
    or (sys.version_info.major >= 3 and sys.version_info.minor < 11):

    import tomli as tomllib
else:
    import tomllib

from ..types import TimeGrid, InitialCondition
from ..errors import ConfigError, ValidationError
from ..coefficients import PiecewiseConstant, LQModel, BUILTIN_NAMES, lq_benchmark
from ..solvers import SolverConfig

LQ_KEYS = ("b1", "b1_bar", "b2", "q", "q_bar", "p")
CONDITION_IDS = (
    "A1-i", "A1-ii", "A2-i", "A2-ii", "A2-iii", "A2-iv",
    "T31-fwd", "T31-alt", "T32-fwd", "T32-alt", "A3-i", "A3-ii", "A3-iii"
)
OUTPUT_FORMATS = ("csv", "json", "html")

Number = (int, float)
TimeTable = (int, float, list)

# accepted keys per dotted table path and the python types of their values
_SCHEMA_ = {
    "": dict(seed=int, problem=str, model=dict, solver=dict, lambda0=dict, oracle=dict, checks=dict, output=dict),
    "model": dict(builtin=str, sigma=Number, r=Number, xi=dict, **{k: TimeTable for k in LQ_KEYS}),
    "model.xi": dict(kind=str, value=Number, mean=Number, variance=Number, lo=Number, hi=Number),
    "solver": dict(
        method=str, T=Number, dt=Number, K=Number, n_particles=int, picard_tol=Number,
        max_picard_iters=int, inner_law_iters=int, regression_basis=str, degree=int,
        damping=Number, conditional_expectation=str, kappa=Number, l=Number,
        max_inner_solves=int, continuation_forcing=Number
    ),
    "lambda0": dict(kappa=Number, phi=Number, psi=Number),
    "oracle": dict(enabled=bool, tolerance=Number),
    "checks": dict(run=list, assumption1=dict, assumption2=dict, convexity=dict),
    "checks.assumption1": dict(K=Number, kappa=Number, l=Number, n_pairs=int, cloud_size=int),
    "checks.assumption2": dict(kappa1=Number, kappa2=Number, l1=Number, l2=Number, eps1=Number, eps2=Number, K=Number),
    "checks.convexity": dict(eta=Number, iota=Number, zeta=Number, l=Number),
    "output": dict(directory=str, formats=list),
}

_HEADER_ = re.compile(r"^\[\s*([A-Za-z0-9_.\-\s]+?)\s*\]")
_KEY_ = re.compile(r"^([A-Za-z0-9_\-]+)\s*=")
_DECODE_LINE_ = re.compile(r"line (\d+)")


def parse_toml(text: str) -> dict:
    """Decode TOML text, reporting syntax errors with their line number"""

    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _DECODE_LINE_.search(str(e))
        raise ConfigError(f"invalid TOML: {e}", line=int(match.group(1)) if match else None) from None


def locate_key(text: str, dotted: str) -> Optional[int]:
    """Line number of a dotted key (or table header) in TOML text"""

    parts = dotted.split(".")
    table, key = ".".join(parts[:-1]), parts[-1]

    current = ""
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = _HEADER_.match(stripped)
        if header:
            current = re.sub(r"\s+", "", header.group(1))
            if current == dotted:
                return n
            continue

        match = _KEY_.match(stripped)
        if match and current == table and match.group(1) == key:
            return n

    return None


class _Reader:
    """Typed access to one parsed config with line-anchored errors"""

    def __init__(self, data: dict, text: str):
        self.data = data
        self.text = text

    def error(self, dotted: str, message: str) -> ConfigError:
        return ConfigError(message, key=dotted, line=locate_key(self.text, dotted))

    def check_schema(self, table: dict, path: str = ""):
        schema = _SCHEMA_[path]
        for key, value in table.items():
            dotted = f"{path}.{key}" if path else key
            if key not in schema:
                raise self.error(dotted, f"unknown key, expected one of {', '.join(schema)}")

            expected = schema[key]
            if isinstance(value, bool) and expected is not bool:
                raise self.error(dotted, f"expected {_type_name(expected)}, got a boolean")
            if not isinstance(value, expected):
                raise self.error(dotted, f"expected {_type_name(expected)}, got {type(value).__name__}")
            if isinstance(value, float) and not math.isfinite(value):
                raise self.error(dotted, f"must be finite, got {value}")

            if expected is dict:
                self.check_schema(value, dotted)

    def table(self, path: str) -> dict:
        table = self.data
        for part in path.split("."):
            table = table.get(part, {})
        return table

    def positive(self, path: str, key: str, value, strict: bool = True):
        if value is None:
            return None
        if (strict and not value > 0) or (not strict and not value >= 0):
            raise self.error(f"{path}.{key}", f"must be {'>' if strict else '>='} 0, got {value}")
        return value


def _type_name(expected) -> str:
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def _time_function(reader: _Reader, key: str, value: Union[int, float, list]) -> PiecewiseConstant:
    if isinstance(value, Number):
        return PiecewiseConstant.constant(float(value))
    try:
        return PiecewiseConstant(value)
    except (ValidationError, TypeError, ValueError) as e:
        raise reader.error(f"model.{key}", str(e)) from None


@dataclass
class ModelSection:
    builtin: Optional[str] = None
    lq: Optional[LQModel] = None
    xi: InitialCondition = field(default_factory=InitialCondition)
    sigma: float = 1.0
    r: float = 0.5

    @property
    def lq_model(self) -> Optional[LQModel]:
        if self.lq is not None:
            return self.lq
        if self.builtin == "lq-benchmark":
            return lq_benchmark(self.sigma)
        return None

    def to_dict(self) -> dict:
        record = dict(sigma=self.sigma, r=self.r, xi=self.xi.to_dict())
        if self.builtin is not None:
            record["builtin"] = self.builtin
        if self.lq is not None:
            record["lq"] = self.lq.to_dict()
        return record


@dataclass
class SolverSection:
    method: str = "picard"
    T: float = 10.0
    dt: float = 0.01
    K: Optional[float] = None
    n_particles: int = 1000
    picard_tol: float = 1e-4
    max_picard_iters: int = 50
    inner_law_iters: int = 3
    regression_basis: str = "affine"
    degree: int = 1
    damping: float = 0.0
    conditional_expectation: str = "regress_now"
    kappa: Optional[float] = None
    l: Optional[float] = None
    max_inner_solves: int = 10_000
    continuation_forcing: float = 1.0

    def grid(self, r: float) -> TimeGrid:
        return TimeGrid(self.T, self.dt, r if self.K is None else self.K)

    def solver_config(self, r: float) -> SolverConfig:
        return SolverConfig(
            grid=self.grid(r),
            n_particles=self.n_particles,
            picard_tol=self.picard_tol,
            max_picard_iters=self.max_picard_iters,
            inner_law_iters=self.inner_law_iters,
            regression_basis=self.regression_basis,
            degree=self.degree,
            damping=self.damping,
            conditional_expectation=self.conditional_expectation,
            max_inner_solves=self.max_inner_solves,
            continuation_forcing=self.continuation_forcing
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Lambda0Section:
    kappa: float = 1.0
    phi: float = 0.0
    psi: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OracleSection:
    enabled: bool = False
    tolerance: float = 0.05

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChecksSection:
    run: List[str] = field(default_factory=list)
    assumption1: Dict[str, Any] = field(default_factory=dict)
    assumption2: Dict[str, Any] = field(default_factory=dict)
    convexity: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OutputSection:
    directory: str = "results"
    formats: List[str] = field(default_factory=lambda: ["csv", "json"])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    seed: int = 0
    problem: str = "mfg"
    model: ModelSection = field(default_factory=ModelSection)
    solver: SolverSection = field(default_factory=SolverSection)
    lambda0: Lambda0Section = field(default_factory=Lambda0Section)
    oracle: OracleSection = field(default_factory=OracleSection)
    checks: ChecksSection = field(default_factory=ChecksSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: Optional[Path] = None
    text: str = field(default="", repr=False)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        text = Path(path).read_text(encoding="utf-8")
        config = cls.from_text(text)
        config.source = Path(path)
        return config

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        data = parse_toml(text)
        reader = _Reader(data, text)
        reader.check_schema(data)

        config = cls(text=text)
        config.seed = data.get("seed", 0)
        if not 0 <= config.seed < 2 ** 64:
            raise reader.error("seed", f"must be an unsigned 64-bit integer, got {config.seed}")
        config.problem = data.get("problem", "mfg")
        if config.problem not in ("mfc", "mfg"):
            raise reader.error("problem", f"must be 'mfc' or 'mfg', got '{config.problem}'")

        config.model = _model_section(reader)
        config.solver = _solver_section(reader)
        config.lambda0 = Lambda0Section(**reader.table("lambda0"))
        reader.positive("lambda0", "kappa", config.lambda0.kappa)

        config.oracle = OracleSection(**reader.table("oracle"))
        reader.positive("oracle", "tolerance", config.oracle.tolerance, strict=False)

        config.checks = _checks_section(reader)
        config.output = _output_section(reader)

        return config

    def to_dict(self) -> dict:
        return dict(
            seed=self.seed,
            problem=self.problem,
            model=self.model.to_dict(),
            solver=self.solver.to_dict(),
            lambda0=self.lambda0.to_dict(),
            oracle=self.oracle.to_dict(),
            checks=self.checks.to_dict(),
            output=self.output.to_dict()
        )


def _model_section(reader: _Reader) -> ModelSection:
    table = reader.table("model")
    section = ModelSection(
        builtin=table.get("builtin"),
        sigma=float(table.get("sigma", 1.0)),
        r=float(table.get("r", 0.5))
    )
    reader.positive("model", "sigma", section.sigma)
    reader.positive("model", "r", section.r)

    lq_keys = [k for k in LQ_KEYS if k in table]
    if section.builtin is not None:
        if section.builtin not in BUILTIN_NAMES:
            raise reader.error("model.builtin", f"unknown builtin model, available: {', '.join(BUILTIN_NAMES)}")
        if lq_keys:
            raise reader.error(f"model.{lq_keys[0]}", "LQ coefficients cannot be combined with a builtin model")
    else:
        if "p" not in table:
            raise reader.error("model", "needs either 'builtin' or the LQ coefficient 'p'")

        functions = {k: _time_function(reader, k, table.get(k, 0.0)) for k in LQ_KEYS}
        try:
            section.lq = LQModel(sigma=section.sigma, r=section.r, name="lq", **functions)
        except ValidationError as e:
            raise reader.error("model", str(e)) from None

    xi = reader.table("model.xi")
    try:
        section.xi = InitialCondition(**{k: (float(v) if k != "kind" else v) for k, v in xi.items()})
    except ValidationError as e:
        raise reader.error("model.xi", str(e)) from None

    return section


def _solver_section(reader: _Reader) -> SolverSection:
    table = reader.table("solver")
    section = SolverSection(**table)

    if section.method not in ("picard", "continuation"):
        raise reader.error("solver.method", f"must be 'picard' or 'continuation', got '{section.method}'")

    for key in ("T", "dt", "picard_tol", "n_particles", "max_picard_iters", "inner_law_iters",
                "max_inner_solves", "continuation_forcing", "kappa"):
        reader.positive("solver", key, getattr(section, key))
    for key in ("K", "l"):
        reader.positive("solver", key, getattr(section, key), strict=False)

    try:
        section.solver_config(0.5)
    except ValidationError as e:
        raise reader.error("solver", str(e)) from None

    return section


def _checks_section(reader: _Reader) -> ChecksSection:
    table = reader.table("checks")
    section = ChecksSection(
        run=list(table.get("run", [])),
        assumption1=dict(reader.table("checks.assumption1")),
        assumption2=dict(reader.table("checks.assumption2")),
        convexity=dict(reader.table("checks.convexity"))
    )

    for condition in section.run:
        if condition not in CONDITION_IDS:
            raise reader.error("checks.run", f"unknown condition '{condition}', expected one of {', '.join(CONDITION_IDS)}")

    for key in ("n_pairs", "cloud_size"):
        reader.positive("checks.assumption1", key, section.assumption1.get(key))
    for key in ("eps1", "eps2"):
        reader.positive("checks.assumption2", key, section.assumption2.get(key))
    for key in ("eta", "zeta"):
        reader.positive("checks.convexity", key, section.convexity.get(key))
    for key in ("iota", "l"):
        reader.positive("checks.convexity", key, section.convexity.get(key), strict=False)

    return section


def _output_section(reader: _Reader) -> OutputSection:
    section = OutputSection(**reader.table("output"))
    for fmt in section.formats:
        if fmt not in OUTPUT_FORMATS:
            raise reader.error("output.formats", f"unknown format '{fmt}', expected a subset of {', '.join(OUTPUT_FORMATS)}")
    return section
