"""Shared fixtures: one tiny synthetic market and one fully-run pipeline
per session, so the pipeline, report, and CLI tests stay fast."""

import json
import os

import pytest

from fenrank import pipeline as pl
from fenrank.config import RunConfig
from synthetic_data import make_market


def tiny_config(paths, out_dir, **overrides) -> RunConfig:
    base = dict(
        target_prices_csv=paths["target"],
        source_prices_csv=paths["source"],
        vix_csv=paths.get("vix"),
        output_dir=out_dir,
        master_seed=11,
        first_test_year=2018,
        last_test_year=2018,
        runs=2,
        models=["fen"],
        max_epochs=3,
        patience=3,
        finetune_max_epochs=2,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def market(tmp_path_factory):
    directory = tmp_path_factory.mktemp("market")
    # volatility spikes land inside the 2018 test year so the risk-off
    # regime group is non-empty in reports
    return make_market(str(directory), n_weeks=160, seed=3, spike_weeks=(120, 121))


@pytest.fixture(scope="session")
def pipeline_run(market, tmp_path_factory):
    """A completed run-all over the tiny market; returns (config, config_path)."""
    out_dir = str(tmp_path_factory.mktemp("out"))
    config = tiny_config(market, out_dir)
    config.validate()
    pl.run_all(config)
    config_path = os.path.join(out_dir, "config.json")
    payload = {
        "target_prices_csv": config.target_prices_csv,
        "source_prices_csv": config.source_prices_csv,
        "vix_csv": config.vix_csv,
        "output_dir": config.output_dir,
        "master_seed": config.master_seed,
        "first_test_year": config.first_test_year,
        "last_test_year": config.last_test_year,
        "runs": config.runs,
        "models": config.models,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "finetune_max_epochs": config.finetune_max_epochs,
    }
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return config, config_path
