"""Run configuration: a JSON file with explicit schema validation.

Seeds must be spelled out in the file or on the command line; nothing
falls back to the wall clock, so two runs of the same config are
reproducible by construction. Environment variables can override paths
only (``FENRANK_*``), never numeric settings.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

KNOWN_MODELS = ("fen", "sar", "sar_ps", "mlp", "ln")
PIPELINE_STAGES = (
    "prepare-data",
    "pretrain-source",
    "train-target",
    "finetune",
    "backtest",
    "report",
)
DEFAULT_COST_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)

# paths are the one thing deployment environments legitimately relocate
ENV_PATH_OVERRIDES = {
    "FENRANK_TARGET_PRICES_CSV": "target_prices_csv",
    "FENRANK_SOURCE_PRICES_CSV": "source_prices_csv",
    "FENRANK_VIX_CSV": "vix_csv",
    "FENRANK_OUTPUT_DIR": "output_dir",
}

DEFAULT_ENCODER_PARAMS = {
    "d_model": 16,
    "d_ff": 16,
    "n_layers": 1,
    "n_heads": 1,
    "dropout": 0.0,
    "head_hidden": 16,
    "batch_size": 4,
    "learning_rate": 1e-3,
}

DEFAULT_MLP_PARAMS = {
    "hidden": 32,
    "dropout": 0.0,
    "batch_size": 8,
    "learning_rate": 1e-3,
}


class RunConfigError(ValueError):
    """Raised for unreadable, incomplete, or inconsistent run configs."""


@dataclass
class RunConfig:
    target_prices_csv: str
    source_prices_csv: str
    output_dir: str
    master_seed: int
    first_test_year: int
    last_test_year: int
    vix_csv: str | None = None
    universe: list[str] | None = None
    source_universe: list[str] | None = None
    sigma_target: float = 0.15
    top_m: int = 2
    cost_grid_bps: list[float] = field(default_factory=lambda: list(DEFAULT_COST_GRID))
    headline_cost_bps: float = 0.0
    runs: int = 10
    mode: str = "best"
    models: list[str] = field(default_factory=lambda: ["fen"])
    search_iterations: int = 0
    model_params: dict = field(default_factory=dict)
    max_epochs: int = 100
    patience: int = 25
    finetune: bool = True
    finetune_max_epochs: int = 100
    anchor_weekday: int = 7
    workers: int = 1
    source_heatmaps: bool = False
    stages: list[str] = field(default_factory=lambda: list(PIPELINE_STAGES))

    @property
    def take(self) -> int:
        """How many source runs the selection keeps (2 at full scale)."""
        return min(2, self.runs)

    def params_for(self, model: str) -> dict:
        base = dict(DEFAULT_MLP_PARAMS if model in ("mlp", "ln") else DEFAULT_ENCODER_PARAMS)
        base.update(self.model_params.get(model, {}))
        return base

    def validate(self, check_paths: bool = True) -> None:
        if not isinstance(self.master_seed, int) or isinstance(self.master_seed, bool):
            raise RunConfigError(f"master_seed must be an explicit integer, got {self.master_seed!r}")
        if self.last_test_year < self.first_test_year:
            raise RunConfigError(
                f"last_test_year {self.last_test_year} precedes first_test_year {self.first_test_year}"
            )
        if not self.sigma_target > 0:
            raise RunConfigError(f"sigma_target must be positive, got {self.sigma_target}")
        if self.top_m < 1:
            raise RunConfigError(f"top_m must be >= 1, got {self.top_m}")
        if self.runs < 1:
            raise RunConfigError(f"runs must be >= 1, got {self.runs}")
        if self.mode not in ("best", "worst"):
            raise RunConfigError(f"mode must be 'best' or 'worst', got {self.mode!r}")
        if not self.models:
            raise RunConfigError("models list must not be empty")
        unknown_models = [m for m in self.models if m not in KNOWN_MODELS]
        if unknown_models:
            raise RunConfigError(f"unknown models {unknown_models}; known: {list(KNOWN_MODELS)}")
        if len(set(self.models)) != len(self.models):
            raise RunConfigError(f"duplicate models in {self.models}")
        if not self.cost_grid_bps:
            raise RunConfigError("cost_grid_bps must not be empty")
        if any(c < 0 for c in self.cost_grid_bps):
            raise RunConfigError(f"costs must be non-negative: {self.cost_grid_bps}")
        if self.headline_cost_bps < 0:
            raise RunConfigError(f"headline_cost_bps must be non-negative, got {self.headline_cost_bps}")
        if self.search_iterations < 0:
            raise RunConfigError(f"search_iterations must be >= 0, got {self.search_iterations}")
        if self.max_epochs < 0 or self.finetune_max_epochs < 0:
            raise RunConfigError("epoch budgets must be >= 0")
        if self.patience < 0:
            raise RunConfigError(f"patience must be >= 0, got {self.patience}")
        if not 1 <= self.anchor_weekday <= 7:
            raise RunConfigError(f"anchor_weekday must be an ISO weekday 1..7, got {self.anchor_weekday}")
        if self.workers < 1:
            raise RunConfigError(f"workers must be >= 1, got {self.workers}")
        if not isinstance(self.source_heatmaps, bool):
            raise RunConfigError(f"source_heatmaps must be a boolean, got {self.source_heatmaps!r}")
        bad_stages = [s for s in self.stages if s not in PIPELINE_STAGES]
        if bad_stages:
            raise RunConfigError(f"unknown stages {bad_stages}; known: {list(PIPELINE_STAGES)}")
        if not isinstance(self.model_params, dict):
            raise RunConfigError("model_params must map model name -> parameter dict")
        for name in self.model_params:
            # "source" tunes the pre-training stage, not a target model
            if name not in KNOWN_MODELS and name != "source":
                raise RunConfigError(f"model_params for unknown model {name!r}")
        if check_paths:
            required = [("target_prices_csv", self.target_prices_csv),
                        ("source_prices_csv", self.source_prices_csv)]
            if self.vix_csv is not None:
                required.append(("vix_csv", self.vix_csv))
            for key, path in required:
                if not os.path.isfile(path):
                    raise RunConfigError(f"{key} does not exist: {path}")


def load_config(path: str, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Read and validate a JSON run config.

    ``overrides`` (from CLI flags) win over the file; environment
    variables override path fields only.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise RunConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise RunConfigError(f"config {path} must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise RunConfigError(f"unknown config keys {unknown}; known: {sorted(known)}")
    env = os.environ if env is None else env
    for var, key in ENV_PATH_OVERRIDES.items():
        if env.get(var):
            raw[key] = env[var]
    if overrides:
        bad = sorted(set(overrides) - known)
        if bad:
            raise RunConfigError(f"unknown override keys {bad}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
    missing = [k for k in ("target_prices_csv", "source_prices_csv", "output_dir",
                           "master_seed", "first_test_year", "last_test_year")
               if k not in raw]
    if missing:
        raise RunConfigError(f"config missing required keys {missing}")
    config = RunConfig(**raw)
    config.validate()
    return config
