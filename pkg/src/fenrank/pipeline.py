"""Staged pipeline chained through on-disk manifests.

Each stage reads its predecessor's manifest, writes its own artifacts
under the configured output directory, and is deterministic given
(config, master seed): rerunning any stage overwrites files with
identical bytes. Seeds for every trained model come from one seed tree,
``SeedSequence([master, stage, family, year, run])``, so parallel
workers cannot perturb results.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import os
from dataclasses import asdict

import numpy as np

from .backtest import run_backtest, series_metrics
from .config import RunConfig
from .data import (
    SOURCE_HORIZONS,
    TARGET_HORIZONS,
    Dataset,
    dataset_from_prices,
    label_regimes,
    load_index_series,
    load_prices,
    load_samples_csv,
    save_samples_csv,
)
from .models import (
    EncoderRanker,
    FusedEncoderRanker,
    MlpRanker,
    ModelConfig,
    TransferEncoderRanker,
    one_week_return_signal,
)
from .ranking import ndcg_at_k
from .training import (
    ENCODER_SEARCH_SPACE,
    LISTNET_MLP_SEARCH_SPACE,
    MLP_SEARCH_SPACE,
    SourceCandidate,
    TrainConfig,
    TrainingError,
    finetune as finetune_model,
    hyper_search,
    plan_windows,
    select_source,
    train_model,
)

STAGE_SEARCH = 0
STAGE_TRAIN = 1
STAGE_FINETUNE = 2
STAGE_SCORE = 3

FAMILY = {"source": 0, "fen": 1, "sar": 2, "sar_ps": 3, "mlp": 4, "ln": 5, "random": 6}

# two-stage strategies carry a frozen source before fine-tuning
TWO_STAGE = ("fen", "sar_ps")


class PipelineError(RuntimeError):
    """Raised when a stage cannot run; the message names the fix."""


def seed_rng(master: int, stage: int, family: int, year: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, stage, family, year, run]))


# ---------------------------------------------------------------------------
# artifact plumbing


def _join(config: RunConfig, *parts) -> str:
    return os.path.join(config.output_dir, *parts)


def write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str, prerequisite: str):
    if not os.path.isfile(path):
        raise PipelineError(f"missing artifact {path}; run `fenrank {prerequisite}` first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_csv(path: str, header: list[str], rows) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            # repr(float) round-trips float64 exactly through text
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def _map_jobs(fn, jobs, workers: int):
    """Run independent jobs, optionally across processes. Results come
    back in job order either way, so aggregation is order-stable."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _config_dict(config: RunConfig) -> dict:
    return asdict(config)


def _model_config(params: dict) -> ModelConfig:
    return ModelConfig(
        d_model=int(params["d_model"]),
        d_ff=int(params["d_ff"]),
        n_layers=int(params["n_layers"]),
        n_heads=int(params["n_heads"]),
        dropout=float(params["dropout"]),
        head_hidden=int(params["head_hidden"]),
    )


def _train_config(config_d: dict, params: dict, loss: str) -> TrainConfig:
    return TrainConfig(
        max_epochs=int(config_d["max_epochs"]),
        patience=int(config_d["patience"]),
        batch_size=int(params["batch_size"]),
        learning_rate=float(params["learning_rate"]),
        loss=loss,
    )


def _pick(dataset: Dataset, dates) -> list:
    by_date = {str(s.date): s for s in dataset}
    try:
        return [by_date[str(np.datetime64(d, "D"))] for d in dates]
    except KeyError as exc:
        raise PipelineError(f"no sample for week {exc}") from exc


def _years(dates: np.ndarray) -> np.ndarray:
    return dates.astype("datetime64[Y]").astype(int) + 1970


def _load_source_model(out_dir: str, run_manifest: dict) -> EncoderRanker:
    cfg = _model_config(run_manifest["params"])
    model = EncoderRanker.init(np.random.default_rng(0), run_manifest["input_width"], cfg)
    model.load(os.path.join(out_dir, run_manifest["checkpoint"]))
    return model


# ---------------------------------------------------------------------------
# stage: prepare-data


def prepare_data(config: RunConfig) -> dict:
    target_panel = load_prices(config.target_prices_csv, config.universe)
    source_panel = load_prices(config.source_prices_csv, config.source_universe)
    target = dataset_from_prices(target_panel, TARGET_HORIZONS, config.anchor_weekday)
    source = dataset_from_prices(source_panel, SOURCE_HORIZONS, config.anchor_weekday)
    if len(target) == 0 or len(source) == 0:
        raise PipelineError("price history too short to build any ranking samples")
    target_csv = _join(config, "data", "target_samples.csv")
    source_csv = _join(config, "data", "source_samples.csv")
    os.makedirs(_join(config, "data"), exist_ok=True)
    save_samples_csv(target, target_csv)
    save_samples_csv(source, source_csv)
    regimes_csv = None
    if config.vix_csv is not None:
        dates, values = load_index_series(config.vix_csv)
        labels = label_regimes(dates, values, anchor_weekday=config.anchor_weekday)
        regimes_csv = _join(config, "data", "regimes.csv")
        _write_csv(
            regimes_csv,
            ["week_end", "regime"],
            [(str(w), s) for w, s in zip(labels.week_ends, labels.states)],
        )
    manifest = {
        "target_samples": "data/target_samples.csv",
        "source_samples": "data/source_samples.csv",
        "regimes": "data/regimes.csv" if regimes_csv else None,
        "target_universe": list(target_panel.symbols),
        "source_universe": list(source_panel.symbols),
        "target_weeks": len(target),
        "source_weeks": len(source),
        "target_features": list(target.feature_names),
        "source_features": list(source.feature_names),
        "first_week": str(target.dates.min()),
        "last_week": str(target.dates.max()),
    }
    write_json(_join(config, "data", "manifest.json"), manifest)
    return manifest


def _load_datasets(config: RunConfig) -> tuple[dict, Dataset, Dataset]:
    manifest = read_json(_join(config, "data", "manifest.json"), "prepare-data")
    target = load_samples_csv(_join(config, manifest["target_samples"]))
    source = load_samples_csv(_join(config, manifest["source_samples"]))
    return manifest, target, source


# ---------------------------------------------------------------------------
# stage: pretrain-source


def _source_split(source: Dataset, test_year: int) -> tuple[list, list, list]:
    """Source pool strictly before the target test year; the selection
    backtest covers calendar year test_year - 1."""
    dates = source.dates
    years = _years(dates)
    pool = dates[years < test_year]
    select = dates[years == test_year - 1]
    if pool.size < 2:
        raise PipelineError(f"source data has too few weeks before {test_year}")
    if select.size == 0:
        raise PipelineError(f"source data has no weeks in selection year {test_year - 1}")
    n_val = max(1, int(np.floor(0.10 * pool.size)))
    train = _pick(source, pool[:-n_val])
    val = _pick(source, pool[-n_val:])
    return train, val, _pick(source, select)


def _selection_sharpe(model, select_samples, config_d: dict) -> float | None:
    ds = Dataset(list(select_samples), select_samples[0].feature_names)
    scores = {str(s.date): model.scores(s.features) for s in select_samples}
    series = run_backtest(
        ds,
        scores,
        top_m=int(config_d["top_m"]),
        sigma_tgt=float(config_d["sigma_target"]),
        cost_bps=0.0,
    )
    return series_metrics(series, net=False).sharpe


def _train_source_job(job: dict) -> dict:
    config_d = job["config"]
    source = load_samples_csv(os.path.join(config_d["output_dir"], "data/source_samples.csv"))
    by_date = {str(s.date): s for s in source}
    train = [by_date[d] for d in job["train_dates"]]
    val = [by_date[d] for d in job["val_dates"]]
    select = [by_date[d] for d in job["select_dates"]]
    params = job["params"]
    rng = seed_rng(config_d["master_seed"], STAGE_TRAIN, FAMILY["source"], job["year"], job["run"])
    k = train[0].features.shape[1]
    model = EncoderRanker.init(rng, k, _model_config(params))
    history = train_model(model, train, val, _train_config(config_d, params, "listnet"), rng)
    sharpe = _selection_sharpe(model, select, config_d)
    checkpoint = os.path.join("source", f"y{job['year']}", f"run_{job['run']}", "checkpoint.txt")
    model.save(os.path.join(config_d["output_dir"], checkpoint))
    manifest = {
        "run": job["run"],
        "year": job["year"],
        "seed": [config_d["master_seed"], STAGE_TRAIN, FAMILY["source"], job["year"], job["run"]],
        "params": params,
        "input_width": k,
        "epochs": history.n_epochs,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "train_losses": history.train_losses,
        "val_losses": history.val_losses,
        "sharpe": sharpe,
        "checkpoint": checkpoint,
    }
    write_json(
        os.path.join(config_d["output_dir"], "source", f"y{job['year']}", f"run_{job['run']}", "manifest.json"),
        manifest,
    )
    return manifest


def _search_params(config: RunConfig, space: dict, base: dict, family: str, year: int, build_and_train):
    """Optional random search; returns (params, search summary or None).

    ``build_and_train(params, rng) -> best validation loss``; diverging
    trials score +inf so the search simply avoids them.
    """
    if config.search_iterations < 1:
        return dict(base), None
    rng = seed_rng(config.master_seed, STAGE_SEARCH, FAMILY[family], year, 0)
    trial = {"i": 0}

    def evaluate(params):
        trial["i"] += 1
        trial_rng = seed_rng(config.master_seed, STAGE_SEARCH, FAMILY[family], year, trial["i"])
        try:
            return build_and_train(params, trial_rng)
        except TrainingError:
            return float("inf")

    result = hyper_search(space, evaluate, config.search_iterations, rng)
    params = dict(base)
    params.update(result.best_params)
    summary = {"iterations": config.search_iterations, "best_val_loss": result.best_score,
               "best_params": result.best_params}
    return params, summary


def pretrain_source(config: RunConfig) -> dict:
    manifest, target, source = _load_datasets(config)
    folds = plan_windows(target.dates, config.first_test_year, config.last_test_year)
    config_d = _config_dict(config)
    years_summary = {}
    for fold in folds:
        year = fold.test_year
        train, val, select = _source_split(source, year)
        base = config.params_for("fen")
        base.update(config.model_params.get("source", {}))

        def build_and_train(params, rng, _train=train, _val=val):
            k = _train[0].features.shape[1]
            model = EncoderRanker.init(rng, k, _model_config(params))
            history = train_model(model, _train, _val, _train_config(config_d, params, "listnet"), rng)
            return history.best_val_loss

        params, search = _search_params(config, ENCODER_SEARCH_SPACE, base, "source", year, build_and_train)
        jobs = [
            {
                "config": config_d,
                "year": year,
                "run": i,
                "params": params,
                "train_dates": [str(s.date) for s in train],
                "val_dates": [str(s.date) for s in val],
                "select_dates": [str(s.date) for s in select],
            }
            for i in range(config.runs)
        ]
        results = _map_jobs(_train_source_job, jobs, config.workers)
        years_summary[str(year)] = {
            "params": params,
            "search": search,
            "runs": [{"run": r["run"], "sharpe": r["sharpe"], "checkpoint": r["checkpoint"]}
                     for r in results],
        }
    summary = {"runs_per_year": config.runs, "years": years_summary}
    write_json(_join(config, "source", "manifest.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# stage: train-target


def _select_for_year(config: RunConfig, source_summary: dict, year: int):
    runs = source_summary["years"][str(year)]["runs"]
    candidates = [SourceCandidate(run_id=r["run"], sharpe=r["sharpe"]) for r in runs]
    try:
        return select_source(candidates, mode=config.mode, take=config.take)
    except TrainingError as exc:
        raise PipelineError(f"source selection failed for year {year}: {exc}") from exc


def _build_target_model(kind: str, params: dict, k_target: int, rng, source_model=None):
    if kind == "fen":
        return FusedEncoderRanker.from_source(source_model, rng, k_target, _model_config(params))
    if kind == "sar_ps":
        return TransferEncoderRanker.from_source(source_model, rng, k_target, int(params["head_hidden"]))
    if kind == "sar":
        return EncoderRanker.init(rng, k_target, _model_config(params))
    if kind in ("mlp", "ln"):
        return MlpRanker.init(rng, k_target, int(params["hidden"]), float(params["dropout"]))
    raise PipelineError(f"unknown model kind {kind!r}")


def _loss_kind(kind: str) -> str:
    return "mse" if kind == "mlp" else "listnet"


def _train_target_job(job: dict) -> dict:
    config_d = job["config"]
    out = config_d["output_dir"]
    target = load_samples_csv(os.path.join(out, "data/target_samples.csv"))
    by_date = {str(s.date): s for s in target}
    train = [by_date[d] for d in job["train_dates"]]
    val = [by_date[d] for d in job["val_dates"]]
    kind, year, run = job["model"], job["year"], job["run"]
    source_model = None
    if kind in TWO_STAGE:
        source_model = _load_source_model(out, job["source_manifest"])
    rng = seed_rng(config_d["master_seed"], STAGE_TRAIN, FAMILY[kind], year, run)
    k_target = train[0].features.shape[1]
    model = _build_target_model(kind, job["params"], k_target, rng, source_model)
    history = train_model(
        model, train, val, _train_config(config_d, job["params"], _loss_kind(kind)), rng
    )
    run_dir = os.path.join("target", kind, f"y{year}", f"run_{run}")
    name = "stage2.txt" if kind in TWO_STAGE else "final.txt"
    model.save(os.path.join(out, run_dir, name))
    manifest = {
        "run": run,
        "model": kind,
        "year": year,
        "seed": [config_d["master_seed"], STAGE_TRAIN, FAMILY[kind], year, run],
        "params": job["params"],
        "input_width": k_target,
        "source_run": job["source_manifest"]["run"] if source_model is not None else None,
        "source_manifest": job.get("source_manifest"),
        "epochs": history.n_epochs,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "train_losses": history.train_losses,
        "val_losses": history.val_losses,
        "stage2_checkpoint": os.path.join(run_dir, name) if kind in TWO_STAGE else None,
        "final_checkpoint": None if kind in TWO_STAGE else os.path.join(run_dir, name),
        "finetune": None,
    }
    write_json(os.path.join(out, run_dir, "manifest.json"), manifest)
    return manifest


def train_target(config: RunConfig) -> dict:
    manifest, target, source = _load_datasets(config)
    folds = plan_windows(target.dates, config.first_test_year, config.last_test_year)
    config_d = _config_dict(config)
    needs_source = any(m in TWO_STAGE for m in config.models)
    source_summary = None
    selections = {}
    if needs_source:
        source_summary = read_json(_join(config, "source", "manifest.json"), "pretrain-source")
        for fold in folds:
            if str(fold.test_year) not in source_summary["years"]:
                raise PipelineError(
                    f"source runs missing for year {fold.test_year}; run `fenrank pretrain-source` first"
                )
            sel = _select_for_year(config, source_summary, fold.test_year)
            selections[str(fold.test_year)] = {
                "mode": sel.mode,
                "take": config.take,
                "chosen": sel.chosen,
                "ranked": sel.ranked,
            }
        write_json(_join(config, "selection", "manifest.json"),
                   {"mode": config.mode, "years": selections})

    models_summary = {}
    for kind in config.models:
        fold_summaries = {}
        for fold in folds:
            year = fold.test_year
            train_dates = [str(d) for d in fold.train_dates]
            val_dates = [str(d) for d in fold.val_dates]
            train = _pick(target, fold.train_dates)
            val = _pick(target, fold.val_dates)

            source_manifests = {}
            if kind in TWO_STAGE:
                chosen = selections[str(year)]["chosen"]
                for run_id in chosen:
                    source_manifests[run_id] = read_json(
                        _join(config, "source", f"y{year}", f"run_{run_id}", "manifest.json"),
                        "pretrain-source",
                    )
                search_source = source_manifests[chosen[0]]

            space = {"mlp": MLP_SEARCH_SPACE, "ln": LISTNET_MLP_SEARCH_SPACE}.get(
                kind, ENCODER_SEARCH_SPACE
            )

            def build_and_train(params, rng, _train=train, _val=val, _kind=kind):
                k_target = _train[0].features.shape[1]
                src = None
                if _kind in TWO_STAGE:
                    src = _load_source_model(config.output_dir, search_source)
                model = _build_target_model(_kind, params, k_target, rng, src)
                history = train_model(
                    model, _train, _val, _train_config(config_d, params, _loss_kind(_kind)), rng
                )
                return history.best_val_loss

            params, search = _search_params(
                config, space, config.params_for(kind), kind, year, build_and_train
            )
            jobs = []
            for j in range(config.runs):
                job = {
                    "config": config_d,
                    "model": kind,
                    "year": year,
                    "run": j,
                    "params": params,
                    "train_dates": train_dates,
                    "val_dates": val_dates,
                    "source_manifest": None,
                }
                if kind in TWO_STAGE:
                    chosen = selections[str(year)]["chosen"]
                    job["source_manifest"] = source_manifests[chosen[j % len(chosen)]]
                jobs.append(job)
            results = _map_jobs(_train_target_job, jobs, config.workers)
            fold_summaries[str(year)] = {
                "params": params,
                "search": search,
                "runs": [{"run": r["run"], "source_run": r["source_run"],
                          "best_val_loss": r["best_val_loss"]} for r in results],
            }
        models_summary[kind] = {"folds": fold_summaries, "runs": config.runs}
    summary = {"models": models_summary, "mode": config.mode}
    write_json(_join(config, "target", "manifest.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# stage: finetune


def _assemble_two_stage(kind: str, run_manifest: dict, out_dir: str):
    """Rebuild the stage-two model skeleton, then load its checkpoint."""
    source = _load_source_model(out_dir, run_manifest["source_manifest"])
    rng = np.random.default_rng(0)  # shapes only; weights overwritten by load
    model = _build_target_model(kind, run_manifest["params"], run_manifest["input_width"], rng, source)
    model.load(os.path.join(out_dir, run_manifest["stage2_checkpoint"]))
    return model


def _finetune_job(job: dict) -> dict:
    config_d = job["config"]
    out = config_d["output_dir"]
    run_manifest = read_json(os.path.join(out, job["run_manifest"]), "train-target")
    if run_manifest["stage2_checkpoint"] is None:
        raise PipelineError(f"{run_manifest['model']} has no frozen stage to fine-tune")
    kind, year, run = run_manifest["model"], run_manifest["year"], run_manifest["run"]
    model = _assemble_two_stage(kind, run_manifest, out)
    target = load_samples_csv(os.path.join(out, "data/target_samples.csv"))
    by_date = {str(s.date): s for s in target}
    train = [by_date[d] for d in job["train_dates"]]
    val = [by_date[d] for d in job["val_dates"]]
    final_rel = os.path.join("target", kind, f"y{year}", f"run_{run}", "final.txt")
    info = {"enabled": bool(config_d["finetune"]), "epochs": 0, "best_epoch": 0,
            "val_losses": [], "train_losses": []}
    if config_d["finetune"] and config_d["finetune_max_epochs"] > 0:
        rng = seed_rng(config_d["master_seed"], STAGE_FINETUNE, FAMILY[kind], year, run)
        history = finetune_model(
            model, train, val, rng,
            batch_size=int(run_manifest["params"]["batch_size"]),
            max_epochs=int(config_d["finetune_max_epochs"]),
        )
        info.update(
            epochs=history.n_epochs,
            best_epoch=history.best_epoch,
            val_losses=history.val_losses,
            train_losses=history.train_losses,
        )
    model.save(os.path.join(out, final_rel))
    run_manifest["final_checkpoint"] = final_rel
    run_manifest["finetune"] = info
    write_json(os.path.join(out, job["run_manifest"]), run_manifest)
    return run_manifest


def run_finetune(config: RunConfig) -> dict:
    target_summary = read_json(_join(config, "target", "manifest.json"), "train-target")
    manifest, target, source = _load_datasets(config)
    folds = plan_windows(target.dates, config.first_test_year, config.last_test_year)
    config_d = _config_dict(config)
    jobs = []
    for kind in config.models:
        if kind not in TWO_STAGE:
            continue
        for fold in folds:
            for j in range(config.runs):
                jobs.append(
                    {
                        "config": config_d,
                        "run_manifest": os.path.join(
                            "target", kind, f"y{fold.test_year}", f"run_{j}", "manifest.json"
                        ),
                        "train_dates": [str(d) for d in fold.train_dates],
                        "val_dates": [str(d) for d in fold.val_dates],
                    }
                )
    results = _map_jobs(_finetune_job, jobs, config.workers)
    summary = {
        "finetuned": [
            {"model": r["model"], "year": r["year"], "run": r["run"],
             "epochs": r["finetune"]["epochs"]}
            for r in results
        ]
    }
    write_json(_join(config, "finetune", "manifest.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# stage: backtest


def _score_fn_for_run(config: RunConfig, kind: str, run: int, folds):
    """Returns {week -> scores} plus attention matrices for encoder
    models that expose them. Source-stack attention is collected only
    when the config opts in."""
    out = config.output_dir
    scores_by_week: dict[str, np.ndarray] = {}
    heatmaps: dict[str, np.ndarray] = {}
    source_maps: dict[str, np.ndarray] = {}
    target = load_samples_csv(os.path.join(out, "data/target_samples.csv"))
    by_date = {str(s.date): s for s in target}
    for fold in folds:
        path = os.path.join("target", kind, f"y{fold.test_year}", f"run_{run}", "manifest.json")
        run_manifest = read_json(os.path.join(out, path), "train-target")
        if run_manifest["final_checkpoint"] is None:
            raise PipelineError(
                f"{kind} run {run} year {fold.test_year} has no final checkpoint; run `fenrank finetune` first"
            )
        if kind in TWO_STAGE:
            model = _assemble_two_stage(kind, run_manifest, out)
            model.load(os.path.join(out, run_manifest["final_checkpoint"]))
        else:
            rng = np.random.default_rng(0)
            model = _build_target_model(kind, run_manifest["params"], run_manifest["input_width"], rng)
            model.load(os.path.join(out, run_manifest["final_checkpoint"]))
        for d in fold.test_dates:
            sample = by_date[str(d)]
            scores_t, weights = model.forward(sample.features, training=False)
            scores_by_week[str(d)] = scores_t.data.reshape(-1).copy()
            if weights is not None:
                heatmaps[str(d)] = np.asarray(weights, dtype=np.float64)
            if config.source_heatmaps and hasattr(model, "source_attention"):
                source_maps[str(d)] = np.asarray(
                    model.source_attention(sample.features), dtype=np.float64)
    return scores_by_week, heatmaps, source_maps


def _heuristic_scores(config: RunConfig, kind: str, run: int, test_samples) -> dict[str, np.ndarray]:
    scores = {}
    if kind == "one_week":
        for s in test_samples:
            scores[str(s.date)] = one_week_return_signal(s.features, s.feature_names)
    elif kind == "random":
        rng = seed_rng(config.master_seed, STAGE_SCORE, FAMILY["random"], 0, run)
        for s in test_samples:
            scores[str(s.date)] = rng.standard_normal(s.n)
    else:
        raise PipelineError(f"unknown heuristic {kind!r}")
    return scores


def _write_heatmap_csv(config: RunConfig, rel: str, test_ds: Dataset, maps: dict) -> None:
    rows = []
    for s in test_ds:
        key = str(s.date)
        matrix = maps[key]
        for i, row_sym in enumerate(s.instrument_ids):
            for j, col_sym in enumerate(s.instrument_ids):
                rows.append((key, row_sym, col_sym, float(matrix[i, j])))
    _write_csv(_join(config, rel), ["week_end", "row_symbol", "col_symbol", "weight"], rows)


def _export_run(config: RunConfig, kind: str, run: int, test_ds: Dataset,
                scores_by_week: dict, heatmaps: dict, source_maps: dict | None = None) -> dict:
    series = run_backtest(
        test_ds,
        scores_by_week,
        top_m=config.top_m,
        sigma_tgt=config.sigma_target,
        cost_bps=config.headline_cost_bps,
    )
    run_dir = os.path.join("backtest", kind, f"run_{run}")
    rows = []
    for idx, s in enumerate(test_ds):
        key = str(s.date)
        rows.append(
            (
                key,
                float(series.gross[idx]),
                float(series.net[idx]),
                float(series.turnover[idx]),
                float(ndcg_at_k(s.labels, scores_by_week[key], config.top_m, "long")),
                float(ndcg_at_k(s.labels, scores_by_week[key], config.top_m, "short")),
                float(series.ndcg[idx]),
            )
        )
    series_rel = os.path.join(run_dir, "series.csv")
    _write_csv(
        _join(config, series_rel),
        ["week_end", "gross", "net", "turnover", "ndcg_long", "ndcg_short", "ndcg_avg"],
        rows,
    )
    scores_rel = os.path.join(run_dir, "scores.csv")
    score_rows = []
    for s in test_ds:
        for sym, sc in zip(s.instrument_ids, scores_by_week[str(s.date)]):
            score_rows.append((str(s.date), sym, float(sc)))
    _write_csv(_join(config, scores_rel), ["week_end", "symbol", "score"], score_rows)
    heatmaps_rel = None
    if heatmaps:
        heatmaps_rel = os.path.join(run_dir, "heatmaps.csv")
        _write_heatmap_csv(config, heatmaps_rel, test_ds, heatmaps)
    source_rel = None
    if source_maps:
        source_rel = os.path.join(run_dir, "source_heatmaps.csv")
        _write_heatmap_csv(config, source_rel, test_ds, source_maps)
    return {"run": run, "series": series_rel, "scores": scores_rel,
            "heatmaps": heatmaps_rel, "source_heatmaps": source_rel}


def run_backtests(config: RunConfig) -> dict:
    manifest, target, source = _load_datasets(config)
    folds = plan_windows(target.dates, config.first_test_year, config.last_test_year)
    test_ds = target.between(
        f"{config.first_test_year}-01-01", f"{config.last_test_year + 1}-01-01"
    )
    if len(test_ds) == 0:
        raise PipelineError("no test weeks in the configured year range")
    strategies = list(config.models) + ["one_week", "random"]
    out_summary = {}
    for kind in strategies:
        per_run = []
        if kind in config.models:
            read_json(_join(config, "target", "manifest.json"), "train-target")
            for j in range(config.runs):
                scores, heatmaps, source_maps = _score_fn_for_run(config, kind, j, folds)
                per_run.append(_export_run(config, kind, j, test_ds, scores, heatmaps, source_maps))
        elif kind == "one_week":
            scores = _heuristic_scores(config, kind, 0, test_ds)
            per_run.append(_export_run(config, kind, 0, test_ds, scores, {}))
        elif kind == "random":
            for j in range(config.runs):
                scores = _heuristic_scores(config, kind, j, test_ds)
                per_run.append(_export_run(config, kind, j, test_ds, scores, {}))
        out_summary[kind] = {"runs": per_run}
    summary = {
        "strategies": out_summary,
        "test_weeks": [str(d) for d in test_ds.dates],
        "headline_cost_bps": config.headline_cost_bps,
    }
    write_json(_join(config, "backtest", "manifest.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# run-all


def run_all(config: RunConfig) -> None:
    from .reports import write_reports

    stage_fns = {
        "prepare-data": prepare_data,
        "pretrain-source": pretrain_source,
        "train-target": train_target,
        "finetune": run_finetune,
        "backtest": run_backtests,
        "report": write_reports,
    }
    needs_source = any(m in TWO_STAGE for m in config.models)
    for stage in config.stages:
        if stage == "pretrain-source" and not needs_source:
            continue
        if stage == "finetune" and not needs_source:
            continue
        stage_fns[stage](config)
