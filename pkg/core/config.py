import math
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.exceptions import ConfigError

load_dotenv()


class Settings(BaseSettings):
    """
    Consists of process wide settings, read from PLUMESEEK_* environment variables
    """
    model_config = SettingsConfigDict(env_prefix="PLUMESEEK_", extra="ignore")

    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    OUTPUT_ROOT: str = "runs"
    RENDER_DPI: int = 120


settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PlumeConfig(_Section):
    opening_angle_h_deg: float = Field(12.7, gt=0.0, lt=90.0)
    opening_angle_v_deg: float = Field(12.7, gt=0.0, lt=90.0)
    abl_depth_m: float = Field(400.0, gt=0.0)
    wind_bias_deg: float = 0.0
    image_terms: int = Field(16, ge=2)
    source_height_m: float = Field(0.0, ge=0.0)

    def geometry(self):
        from plume.schema import PlumeGeometry

        return PlumeGeometry(
            opening_angle_h=math.radians(self.opening_angle_h_deg),
            opening_angle_v=math.radians(self.opening_angle_v_deg),
            abl_depth=self.abl_depth_m,
            wind_bias=math.radians(self.wind_bias_deg),
            image_terms=self.image_terms,
        )


class BackgroundConfig(_Section):
    kind: Literal["mrf", "chebyshev"] = "mrf"
    c_t: float = Field(0.005, gt=0.0)
    c_d: float = Field(0.0005, gt=0.0)
    mu: Optional[float] = Field(None, ge=0.0)  # unset: calibrated by the optimizer
    beta0: Optional[float] = None  # unset: beta0_percentile of the data
    beta0_percentile: float = Field(5.0, ge=0.0, le=100.0)
    cheby_degree_x: int = Field(2, ge=0)
    cheby_degree_y: int = Field(2, ge=0)
    cheby_degree_z: int = Field(0, ge=0)
    cheby_degree_t: int = Field(2, ge=0)
    cheby_mu1: float = Field(1e-6, ge=0.0)
    cheby_mu2: float = Field(1.0, ge=0.0)
    cheby_mu3: float = Field(1.0, ge=0.0)
    cheby_grid_points: int = Field(5, ge=1)

    @property
    def cheby_degrees(self) -> Tuple[int, int, int, int]:
        return (self.cheby_degree_x, self.cheby_degree_y, self.cheby_degree_z, self.cheby_degree_t)


class OptimizerSection(_Section):
    cell_size_m: float = Field(1000.0, gt=0.0)
    grid_nx: int = Field(40, ge=1)
    grid_ny: int = Field(40, ge=1)
    origin_east_m: float = 0.0
    origin_north_m: float = 0.0
    sigma_ppb: float = Field(3.0, gt=0.0)
    lam: Optional[float] = Field(None, ge=0.0)  # unset: calibrated
    tau: Optional[float] = Field(None, ge=0.0)  # unset: 3 sigma
    s_max: float = Field(10.0, gt=0.0)
    eta: float = Field(1.0, gt=0.0)
    max_outer: int = Field(200, ge=1)
    tol: float = Field(1e-8, gt=0.0)
    background_max_iter: int = Field(50, ge=1)
    newton_max_iter: int = Field(50, ge=1)
    sources_max_iter: int = Field(5000, ge=1)
    sources_tol: float = Field(1e-8, gt=0.0)


class SamplerConfig(_Section):
    iterations: int = Field(13000, ge=1)
    burn_in: int = Field(3000, ge=0)
    thin: int = Field(1, ge=1)
    background_thin: int = Field(10, ge=1)
    m_max: int = Field(30, ge=0)
    init_sources: int = Field(15, ge=0)
    sigma_min_ppb: float = Field(0.01, gt=0.0)
    sigma_max_ppb: float = Field(1000.0, gt=0.0)
    width_max_m: float = Field(1000.0, gt=0.0)
    rate_max: float = Field(1.0, gt=0.0)
    step_location_m: float = Field(250.0, gt=0.0)
    step_width_m: float = Field(20.0, gt=0.0)
    step_rate: float = Field(0.01, gt=0.0)
    step_log_sigma: float = Field(0.1, gt=0.0)
    step_bias_deg: float = Field(0.5, gt=0.0)
    step_log_angle: float = Field(0.05, gt=0.0)
    split_location_m: Optional[float] = Field(None, gt=0.0)  # unset: twice the step
    split_width_m: Optional[float] = Field(None, gt=0.0)
    split_rate: Optional[float] = Field(None, gt=0.0)
    sample_bias: bool = True
    sample_angles: bool = False
    angle_min_deg: float = Field(5.0, gt=0.0, lt=90.0)
    angle_max_deg: float = Field(30.0, gt=0.0, lt=90.0)
    audit_every: int = Field(1000, ge=1)
    log_every: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.sigma_min_ppb >= self.sigma_max_ppb:
            raise ValueError("sigma range is empty")
        if self.angle_min_deg >= self.angle_max_deg:
            raise ValueError("opening angle range is empty")
        return self


class SynthConfig(_Section):
    domain_east_m: float = Field(40000.0, gt=0.0)
    domain_north_m: float = Field(40000.0, gt=0.0)
    source_count: int = Field(10, ge=0)
    source_rate: float = Field(0.1, ge=0.0)
    source_half_width_m: float = Field(100.0, ge=0.0)
    min_peak_ppb: float = Field(1.0, ge=0.0)
    wind_speed_min_ms: float = Field(6.3, gt=0.0)
    wind_speed_max_ms: float = Field(6.6, gt=0.0)
    wind_speed_step_ms: float = Field(0.02, ge=0.0)
    wind_dir_min_deg: float = 218.0
    wind_dir_max_deg: float = 222.0
    wind_dir_step_deg: float = Field(0.2, ge=0.0)
    angle_min_deg: float = Field(11.5, gt=0.0, lt=90.0)
    angle_max_deg: float = Field(13.9, gt=0.0, lt=90.0)
    angle_step_deg: float = Field(0.1, ge=0.0)
    duration_s: float = Field(4140.0, gt=0.0)
    interval_s: float = Field(3.0, gt=0.0)
    altitude_m: float = Field(200.0, ge=0.0)
    aircraft_speed_ms: float = Field(50.0, gt=0.0)
    leg_count: int = Field(5, ge=1)
    background_ppb: float = 1800.0
    noise_ppb: float = Field(3.0, ge=0.0)
    wind_bias_deg: float = 0.0


class ReportConfig(_Section):
    match_radius_m: float = Field(1500.0, gt=0.0)
    map_threshold: float = Field(0.01, ge=0.0)  # m3/s per cell
    band_low: float = Field(2.5, ge=0.0, le=100.0)
    band_high: float = Field(97.5, ge=0.0, le=100.0)


class RunConfig(BaseModel):
    """
    Every tunable of a pipeline run, grouped by stage.
    """
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    plume: PlumeConfig = Field(default_factory=PlumeConfig)
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)

    @classmethod
    def flat_defaults(cls) -> List[Tuple[str, object]]:
        """
        Every dotted key with its default value, in declaration order.

        Returns:
            List[Tuple[str, object]]: (key, default) pairs.
        """
        pairs: List[Tuple[str, object]] = []
        for name, field in cls.model_fields.items():
            annotation = field.annotation
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                for key, sub in annotation.model_fields.items():
                    pairs.append((f"{name}.{key}", sub.default))
            else:
                pairs.append((name, field.default))
        return pairs

    def flat(self) -> Dict[str, object]:
        """Current values keyed by dotted name."""
        out: Dict[str, object] = {}
        for key, _ in self.flat_defaults():
            value = self
            for part in key.split("."):
                value = getattr(value, part)
            out[key] = value
        return out


_NONE_TOKENS = {"none", "null"}


def parse_assignment(text: str, where: str = "") -> Tuple[str, Optional[str]]:
    """
    Split a ``key=value`` assignment.

    Raises:
        ConfigError: If the text has no ``=`` or an empty key.
    """
    if "=" not in text:
        raise ConfigError(f"{where}expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    key, value = key.strip(), value.strip()
    if not key:
        raise ConfigError(f"{where}empty key")
    if value.lower() in _NONE_TOKENS:
        return key, None
    return key, value


def read_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """
    Read a flat dotted ``key=value`` file; ``#`` starts a comment.

    Raises:
        ConfigError: On a missing file, a malformed line or a repeated key.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values: Dict[str, Optional[str]] = {}
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, where=f"{path}:{number}: ")
        if key in values:
            raise ConfigError(f"{path}:{number}: key {key} appears twice")
        values[key] = value
    return values


def _nest(values: Dict[str, Optional[str]]) -> dict:
    nested: dict = {}
    for key, value in values.items():
        parts = key.split(".")
        if len(parts) > 2:
            raise ConfigError(f"unknown key {key}")
        if len(parts) == 1:
            nested[key] = value
        else:
            section = nested.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"unknown key {key}")
            section[parts[1]] = value
    return nested


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Build a run configuration from defaults, an optional file, overrides and a seed.

    Args:
        path: Optional dotted ``key=value`` file.
        overrides: ``key=value`` strings applied after the file.
        seed: Seed taking precedence over both.

    Returns:
        RunConfig: Validated configuration.

    Raises:
        ConfigError: For unknown keys or invalid values.
    """
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        values.update(read_config_file(path))
    for item in overrides:
        key, value = parse_assignment(item, where="--set: ")
        values[key] = value
    if seed is not None:
        values["seed"] = str(seed)
    try:
        return RunConfig.model_validate(_nest(values))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e
