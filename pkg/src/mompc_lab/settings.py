import tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    CliPositionalArg,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from mompc_lab.constants import (
    CUBE_EDGE,
    DEFAULT_DELTA,
    STOP_THRESHOLD,
    DmMethod,
    ExampleName,
    ExperimentKind,
    Formulation,
)
from mompc_lab.exceptions import ExperimentConfigError, InvalidInputError
from mompc_lab.mompc import TerminalConfig
from mompc_lab.nlp import SolverConfig
from mompc_lab.pf_geom import ReconstructionConfig
from mompc_lab.room_climate import ALL_CASES, HorizonConfig, RoomParams, parse_case

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
REDUCED_CASES = ["a1", "b4"]


class CliArgs(BaseSettings):
    """Command line of ``mompc-lab``."""

    model_config = SettingsConfigDict(
        cli_parse_args=True,
        cli_prog_name="mompc-lab",
        cli_kebab_case=True,
        cli_implicit_flags=True,
        cli_avoid_json=True,
        case_sensitive=False,
        extra="ignore",
    )

    kind: CliPositionalArg[ExperimentKind] = Field(description="Experiment to run")
    config: Path = Field(description="Experiment file (TOML)")
    out: Path | None = Field(default=None, description="Output directory, overrides the file")
    seed: int | None = Field(default=None, description="Random seed, overrides the file")
    reduced: bool = Field(default=False, description="Run the reduced CI-sized variant")
    log_level: str = Field(default="INFO", description="Logging level")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # the command line is the only other source
        return (init_settings,)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level is a valid logging level."""
        if v.upper() not in VALID_LOG_LEVELS:
            raise ValueError(f"Log level must be one of {VALID_LOG_LEVELS}")
        return v.upper()


class RuntimeEnv(BaseSettings):
    """Process environment: worker threads for concurrent solves and jobs."""

    model_config = SettingsConfigDict(
        env_prefix="MOMPC_LAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    threads: int = Field(default=1, ge=1, description="Worker threads")


class ExperimentConfig(BaseModel):
    """Validated contents of an experiment file."""

    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind | None = Field(default=None, description="Must match the CLI kind when given")
    example: ExampleName = ExampleName.ELLIPSOID_1
    methods: list[DmMethod] = Field(default_factory=lambda: list(DmMethod))
    preferences: list[list[float]] | None = Field(default=None, description="Explicit preferences, else a grid")
    grid_resolution: int = Field(default=20, ge=1, description="Simplex grid resolution for DM evaluation")
    reduced_grid_resolution: int = Field(default=8, ge=1)
    front_samples: int = Field(default=3500, ge=16)
    reduced_front_samples: int = Field(default=800, ge=16)
    ray_family: Literal["sri", "nbi"] = "sri"
    chim_scale: float = Field(default=0.0, ge=0, description="Outward push of the CHIM for NBI rays")
    delta: float | None = Field(default=None, ge=0, description="IM regularization, 0 for static examples by default")
    formulation: Formulation = Formulation.PS_UNIFIED
    cases: list[str] = Field(default_factory=lambda: list(ALL_CASES))
    k_max: int = Field(default=2000, ge=0)
    stop_threshold: float = Field(default=STOP_THRESHOLD, gt=0)
    ws_case: str = "a1"
    ws_resolution: int = Field(default=73, ge=1, description="Weight grid resolution, 2775 weights for three objectives")
    reduced_ws_resolution: int = Field(default=16, ge=1, description="153 weights for three objectives")
    cube_edge: float = Field(default=CUBE_EDGE, gt=0)
    terminal_samples: int = Field(default=2000, ge=1)
    seed: int = 0
    output_dir: Path = Path("results")
    record_timing: bool = False
    reduced: bool = False
    solver: SolverConfig = Field(default_factory=SolverConfig)
    mpc_solver: SolverConfig = Field(default_factory=SolverConfig.for_mpc)
    reconstruction: ReconstructionConfig = Field(default_factory=ReconstructionConfig)
    terminal: TerminalConfig = Field(default_factory=TerminalConfig)
    room: RoomParams = Field(default_factory=RoomParams)
    horizon: HorizonConfig = Field(default_factory=HorizonConfig)

    @field_validator("cases")
    @classmethod
    def validate_cases(cls, v):
        """Validate every case label names a benchmark case."""
        for case_id in v:
            try:
                parse_case(case_id)
            except InvalidInputError as e:
                raise ValueError(str(e)) from e
        return v

    @field_validator("ws_case")
    @classmethod
    def validate_ws_case(cls, v):
        """Validate the sweep case label."""
        try:
            parse_case(v)
        except InvalidInputError as e:
            raise ValueError(str(e)) from e
        return v

    @field_validator("preferences")
    @classmethod
    def validate_preferences(cls, v):
        """Validate explicit preferences lie in the unit simplex."""
        if v is None:
            return v
        for beta in v:
            if any(b < 0.0 or b > 1.0 for b in beta) or abs(sum(beta) - 1.0) > 1e-12:
                raise ValueError(f"preference {beta} is not in the unit simplex")
        return v

    @model_validator(mode="after")
    def validate_kind_fields(self):
        """Validate fields a specific experiment kind depends on."""
        static = self.example is not ExampleName.ROOM_CLIMATE
        if self.kind in (ExperimentKind.DM_EVAL, ExperimentKind.PARETO_SAMPLE) and not static:
            raise ValueError(f"{self.kind} needs a static example, got {self.example}")
        return self

    @property
    def effective_delta(self) -> float:
        if self.delta is not None:
            return self.delta
        static_kinds = (ExperimentKind.DM_EVAL, ExperimentKind.PARETO_SAMPLE)
        return 0.0 if self.kind in static_kinds else DEFAULT_DELTA

    @property
    def grid(self) -> int:
        return self.reduced_grid_resolution if self.reduced else self.grid_resolution

    @property
    def n_front_samples(self) -> int:
        return self.reduced_front_samples if self.reduced else self.front_samples

    @property
    def weight_resolution(self) -> int:
        return self.reduced_ws_resolution if self.reduced else self.ws_resolution

    @property
    def run_cases(self) -> list[str]:
        if not self.reduced:
            return self.cases
        return [c for c in self.cases if c in REDUCED_CASES] or list(REDUCED_CASES)


def load_experiment_config(path: Path, kind: ExperimentKind, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a TOML experiment file and merge CLI overrides over it.

    Raises:
        ExperimentConfigError: If the file is missing, malformed, invalid or made for another kind
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ExperimentConfigError(f"experiment file {path} not found") from e
    except tomllib.TOMLDecodeError as e:
        raise ExperimentConfigError(f"experiment file {path} is not valid TOML: {e}") from e

    file_kind = data.get("kind")
    if file_kind is not None and file_kind != kind.value:
        raise ExperimentConfigError(f"experiment file {path} is for {file_kind!r}, not {kind.value!r}")
    data["kind"] = kind.value
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ExperimentConfigError(f"invalid experiment file {path}: {e}") from e


def experiment_config_from_cli(args: CliArgs) -> ExperimentConfig:
    """Experiment configuration for a parsed command line."""
    overrides: dict[str, Any] = {"output_dir": args.out, "seed": args.seed}
    if args.reduced:
        overrides["reduced"] = True
    return load_experiment_config(args.config, args.kind, overrides)
