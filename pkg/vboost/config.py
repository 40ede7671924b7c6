"""
Run configuration files for the command line.

A run file is a JSON object with the keys `target`, `vboost`, `oracle` and
`output_dir`. Unknown keys at any level are rejected, relative data paths
resolve against the file's directory, and `resolved_dict` gives back a fully
explicit configuration that reproduces the run.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .boosting import VBoostConfig
from .exceptions import ConfigError, DataFormatError
from .init_em import EmConfig
from .targets import (
    TargetModel,
    factor_gaussian_target,
    gauss_target,
    gen_poisson_data,
    gmm_target,
    hierarchical_binomial,
    load_binomial_csv,
    load_poisson_csv,
    multilevel_poisson,
)

TOP_LEVEL_KEYS = {"target", "vboost", "oracle", "output_dir"}

TARGET_KEYS = {
    "gaussian": {"mean", "cov"},
    "gmm": {"components"},
    "factor_gaussian": {"dim", "n_factors", "factor_scale", "diag", "seed"},
    "baseball": {"data_path"},
    "frisk": {"data_path", "synthetic"},
}

SYNTHETIC_DEFAULTS = {
    "seed": 0,
    "n_ethnicities": 3,
    "n_precincts": 31,
    "mu": -1.0,
    "log_var_alpha": math.log(0.25),
    "log_var_beta": math.log(0.5),
}


@dataclass(frozen=True)
class OracleConfig:
    """Settings for the `compare` oracle: random-walk Metropolis or quadrature"""

    n_steps: int = 200000
    burn_in: int = 20000
    proposal_scale: float = 0.1
    seed: int = 0
    grid_points: int = 401
    grid_width: float = 10.0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_steps:
            raise ConfigError("oracle needs 0 <= burn_in < n_steps")
        if self.proposal_scale <= 0 or self.grid_width <= 0 or self.seed < 0:
            raise ConfigError("oracle proposal_scale and grid_width must be positive")
        if self.grid_points < 11 or self.grid_points % 2 == 0:
            raise ConfigError("oracle grid_points must be odd and at least 11")


@dataclass(frozen=True)
class RunConfig:
    target: Dict[str, Any]
    vboost: VBoostConfig = field(default_factory=VBoostConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output_dir: Optional[Path] = None


def _reject_unknown(section: str, data: Dict[str, Any], allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


def _build(section: str, cls, data: Dict[str, Any], **extra):
    _reject_unknown(section, data, {f.name for f in fields(cls)} - set(extra))
    try:
        return cls(**data, **extra)
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _resolve_path(value: Any, base_dir: Path) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError("data_path must be a non-empty string")
    path = Path(value)
    if not path.is_absolute():
        path = base_dir / path
    return str(path.resolve())


def _target_spec(data: Dict[str, Any], base_dir: Path) -> Dict[str, Any]:
    if not isinstance(data, dict) or "name" not in data:
        raise ConfigError("target must be an object with a name")
    name = data["name"]
    if name not in TARGET_KEYS:
        raise ConfigError(f"target: unknown name {name!r}, expected one of {sorted(TARGET_KEYS)}")
    _reject_unknown(f"target ({name})", data, TARGET_KEYS[name] | {"name"})
    spec = dict(data)

    if name == "factor_gaussian":
        spec.setdefault("diag", 1.0)
        spec.setdefault("seed", 0)
        missing = {"dim", "n_factors", "factor_scale"} - set(spec)
        if missing:
            raise ConfigError(f"target (factor_gaussian): missing {sorted(missing)}")
    elif name == "baseball":
        if "data_path" not in spec:
            raise ConfigError("target (baseball): data_path is required")
        spec["data_path"] = _resolve_path(spec["data_path"], base_dir)
    elif name == "frisk":
        if ("data_path" in spec) == ("synthetic" in spec):
            raise ConfigError("target (frisk): give exactly one of data_path and synthetic")
        if "data_path" in spec:
            spec["data_path"] = _resolve_path(spec["data_path"], base_dir)
        else:
            _reject_unknown("target (frisk).synthetic", spec["synthetic"], SYNTHETIC_DEFAULTS)
            spec["synthetic"] = {**SYNTHETIC_DEFAULTS, **spec["synthetic"]}
    else:
        missing = TARGET_KEYS[name] - set(spec)
        if missing:
            raise ConfigError(f"target ({name}): missing {sorted(missing)}")
    return spec


def parse_config(data: Dict[str, Any], base_dir: Union[str, Path] = ".") -> RunConfig:
    """Validate a decoded run file; nothing is loaded or computed"""
    _reject_unknown("config", data, TOP_LEVEL_KEYS)
    if "target" not in data:
        raise ConfigError("config: target is required")
    base_dir = Path(base_dir)

    vboost_data = dict(data.get("vboost", {}))
    _reject_unknown("vboost", vboost_data, {f.name for f in fields(VBoostConfig)})
    em = _build("vboost.em", EmConfig, vboost_data.pop("em", {}))
    vboost = _build("vboost", VBoostConfig, vboost_data, em=em)
    oracle = _build("oracle", OracleConfig, data.get("oracle", {}))

    output_dir = data.get("output_dir")
    if output_dir is not None:
        if not isinstance(output_dir, str):
            raise ConfigError("output_dir must be a string")
        output_dir = (base_dir / output_dir).resolve()
    return RunConfig(_target_spec(data["target"], base_dir), vboost, oracle, output_dir)


def load_config(
    path: Union[str, Path],
    seed: Optional[int] = None,
    eval_samples: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Read a run file and apply command-line overrides"""
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    cfg = parse_config(data, path.parent)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if eval_samples is not None:
        overrides["eval_samples"] = eval_samples
    if overrides:
        try:
            cfg = replace(cfg, vboost=replace(cfg.vboost, **overrides))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    if output_dir is not None:
        cfg = replace(cfg, output_dir=Path(output_dir).resolve())
    return cfg


def _require_file(path: str) -> str:
    if not Path(path).is_file():
        raise DataFormatError(f"{path}: no such data file")
    return path


def build_target(spec: Dict[str, Any]) -> TargetModel:
    """Construct the target a validated spec names, loading any data it points to"""
    name = spec["name"]
    try:
        if name == "gaussian":
            return gauss_target(spec["mean"], spec["cov"])
        if name == "gmm":
            return gmm_target(
                [(c["weight"], c["mean"], c["cov"]) for c in spec["components"]]
            )
        if name == "factor_gaussian":
            return factor_gaussian_target(
                spec["dim"], spec["n_factors"], spec["factor_scale"], spec["diag"], spec["seed"]
            )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"target ({name}): malformed parameters ({exc})") from exc

    if name == "baseball":
        return hierarchical_binomial(load_binomial_csv(_require_file(spec["data_path"])))
    if "data_path" in spec:
        return multilevel_poisson(load_poisson_csv(_require_file(spec["data_path"])))
    return multilevel_poisson(gen_poisson_data(**spec["synthetic"]))


def resolved_dict(cfg: RunConfig) -> Dict[str, Any]:
    """JSON-ready configuration with every default filled in"""
    return {
        "target": cfg.target,
        "vboost": asdict(cfg.vboost),
        "oracle": asdict(cfg.oracle),
        "output_dir": None if cfg.output_dir is None else str(cfg.output_dir),
    }
