"""Training orchestration: expanding walk-forward windows, minibatch
Adam with early stopping, uniform random hyperparameter search, and
Sharpe-based source-run selection.

A "batch" is a number of whole cross-sections (lists), never individual
rows: listwise losses need the full cross-section intact. All
randomness flows through explicit numpy generators so that a fixed seed
reproduces training histories bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, tensor_mean
from .data import RankingSample
from .ranking import listnet_loss

FINETUNE_LR = 1e-6
FINETUNE_PATIENCE = 10
FINETUNE_MAX_EPOCHS = 100
DEFAULT_PATIENCE = 25
DEFAULT_SEARCH_ITERATIONS = 50
VALIDATION_FRACTION = 0.10

# search grids for the encoder-based models (source, SAR, SAR+ps, FEN)
ENCODER_SEARCH_SPACE = {
    "d_model": (8, 16, 32, 64, 128),
    "d_ff": (8, 16, 32, 64, 128),
    "dropout": (0.0, 0.2, 0.4, 0.6, 0.8),
    "head_hidden": (16, 32, 64, 128, 256),
    "batch_size": (2, 4, 6, 8, 10),
    "learning_rate": (1e-6, 1e-5, 1e-4, 1e-3),
    "n_layers": (1, 2, 3, 4),
    "n_heads": (1,),
}

MLP_SEARCH_SPACE = {
    "dropout": (0.0, 0.2, 0.4, 0.6, 0.8),
    "hidden": (8, 16, 32, 64, 128),
    "batch_size": (8, 16, 32, 64, 128),
    "learning_rate": (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
}

LISTNET_MLP_SEARCH_SPACE = {
    "dropout": (0.0, 0.2, 0.4, 0.6, 0.8),
    "hidden": (8, 16, 32, 64, 128),
    "batch_size": (1, 2, 4, 8, 16),
    "learning_rate": (1e-6, 1e-5, 1e-4, 1e-3),
}


class TrainingError(RuntimeError):
    """Raised on divergence or unusable window/sample configurations."""


@dataclass
class TrainConfig:
    max_epochs: int = 100
    patience: int = DEFAULT_PATIENCE
    batch_size: int = 4
    learning_rate: float = 1e-4
    loss: str = "listnet"  # or "mse"


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0          # 1-based; 0 means no epoch ran
    best_val_loss: float = float("inf")
    config: TrainConfig | None = None

    @property
    def n_epochs(self) -> int:
        return len(self.val_losses)


@dataclass
class WindowFold:
    test_year: int
    train_dates: np.ndarray
    val_dates: np.ndarray
    test_dates: np.ndarray


@dataclass
class SourceCandidate:
    run_id: int
    sharpe: float | None


@dataclass
class SourceSelection:
    mode: str
    chosen: list[int]                    # run ids, selection order
    ranked: list[tuple[int, float]]      # (run_id, sharpe) in selection order


# ---------------------------------------------------------------------------
# window planning


def plan_windows(
    dates: np.ndarray,
    first_test_year: int,
    last_test_year: int,
    val_fraction: float = VALIDATION_FRACTION,
) -> list[WindowFold]:
    """Expanding one-year-block walk-forward folds.

    For test year t, the pool is every week dated before Jan 1 of t; the
    chronologically last ``val_fraction`` of the pool (floored, at least
    one week) validates, the rest trains. Shuffled splits would leak
    future information into training.
    """
    dates = np.array(sorted(np.asarray(dates, dtype="datetime64[D]")))
    if last_test_year < first_test_year:
        raise TrainingError(f"last test year {last_test_year} before first {first_test_year}")
    years = dates.astype("datetime64[Y]").astype(int) + 1970
    if years.size == 0 or years.min() > first_test_year - 2:
        raise TrainingError(
            f"need data from at least two years before {first_test_year}, earliest is "
            f"{years.min() if years.size else 'none'}"
        )
    folds = []
    for t in range(first_test_year, last_test_year + 1):
        pool = dates[years < t]
        test = dates[years == t]
        if test.size == 0:
            raise TrainingError(f"no test weeks in year {t}")
        if pool.size < 2:
            raise TrainingError(f"not enough training weeks before year {t}")
        n_val = max(1, int(np.floor(val_fraction * pool.size)))
        folds.append(
            WindowFold(
                test_year=t,
                train_dates=pool[:-n_val],
                val_dates=pool[-n_val:],
                test_dates=test,
            )
        )
    return folds


# ---------------------------------------------------------------------------
# losses


def sample_loss(model, sample: RankingSample, loss_kind: str, training: bool, rng) -> Tensor:
    scores, _ = model.forward(sample.features, training=training, rng=rng)
    if loss_kind == "listnet":
        return listnet_loss(sample.labels, scores)
    if loss_kind == "mse":
        target = Tensor(sample.next_norm_returns.reshape(-1, 1))
        diff = scores - target
        return tensor_mean(diff * diff)
    raise TrainingError(f"unknown loss kind {loss_kind!r}")


def dataset_loss(model, samples, loss_kind: str) -> float:
    """Evaluation-mode mean loss over a set of cross-sections."""
    if len(samples) == 0:
        raise TrainingError("cannot evaluate a loss on zero samples")
    total = 0.0
    for s in samples:
        total += sample_loss(model, s, loss_kind, training=False, rng=None).item()
    return total / len(samples)


# ---------------------------------------------------------------------------
# training loop


def train_model(
    model,
    train_samples,
    val_samples,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainHistory:
    """Minibatch Adam with patience-based early stopping.

    Improvement is strict; after ``patience`` consecutive non-improving
    epochs training stops and the best-validation-epoch parameters are
    restored onto the model. Non-finite losses abort immediately.
    """
    if len(train_samples) < 1 or len(val_samples) < 1:
        raise TrainingError(
            f"need >= 1 training and validation sample, got {len(train_samples)}/{len(val_samples)}"
        )
    if config.batch_size < 1:
        raise TrainingError(f"batch size must be >= 1, got {config.batch_size}")
    params = [p for _, p in model.trainable_parameters()]
    state = AdamState(params)
    history = TrainHistory(config=replace(config))
    best_state = None
    bad_epochs = 0
    n = len(train_samples)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            batch = [train_samples[int(i)] for i in order[start : start + config.batch_size]]
            losses = [sample_loss(model, s, config.loss, training=True, rng=rng) for s in batch]
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            batch_loss = total * (1.0 / len(losses))
            grads = backward(batch_loss)
            adam_step(params, grads, state, lr=config.learning_rate)
            batch_losses.append(batch_loss.item())
        train_loss = float(np.mean(batch_losses))
        val_loss = dataset_loss(model, val_samples, config.loss)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(
                f"training diverged at epoch {epoch}: train={train_loss}, val={val_loss}"
            )
        history.train_losses.append(train_loss)
        history.val_losses.append(val_loss)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_state = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def finetune(
    model,
    train_samples,
    val_samples,
    rng: np.random.Generator,
    batch_size: int = 4,
    max_epochs: int = FINETUNE_MAX_EPOCHS,
    patience: int = FINETUNE_PATIENCE,
) -> TrainHistory:
    """Whole-network fine-tuning stage: unfreeze everything and re-train
    at the smallest learning rate of the search range (1e-6)."""
    if hasattr(model, "freeze_source"):
        model.freeze_source = False
    if hasattr(model, "freeze_stack"):
        model.freeze_stack = False
    config = TrainConfig(
        max_epochs=max_epochs,
        patience=patience,
        batch_size=batch_size,
        learning_rate=FINETUNE_LR,
        loss="listnet",
    )
    return train_model(model, train_samples, val_samples, config, rng)


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass
class SearchTrial:
    iteration: int
    params: dict
    score: float


@dataclass
class SearchResult:
    best_params: dict
    best_score: float
    trials: list[SearchTrial]


def sample_search_space(space: dict, rng: np.random.Generator) -> dict:
    """One uniform draw per grid, in the space's key order."""
    if not space:
        raise TrainingError("search space must be non-empty")
    return {k: values[int(rng.integers(len(values)))] for k, values in space.items()}


def hyper_search(
    space: dict,
    evaluate,
    iterations: int = DEFAULT_SEARCH_ITERATIONS,
    rng: np.random.Generator | None = None,
) -> SearchResult:
    """Uniform random search: ``evaluate(params) -> score`` (lower is
    better); ties keep the earliest iteration."""
    if iterations < 1:
        raise TrainingError(f"search needs at least one iteration, got {iterations}")
    if rng is None:
        rng = np.random.default_rng(0)
    trials = []
    best = None
    for it in range(iterations):
        params = sample_search_space(space, rng)
        score = float(evaluate(params))
        trials.append(SearchTrial(iteration=it, params=params, score=score))
        if best is None or score < best.score:
            best = trials[-1]
    return SearchResult(best_params=dict(best.params), best_score=best.score, trials=trials)


# ---------------------------------------------------------------------------
# source selection


def select_source(candidates: list[SourceCandidate], mode: str = "best", take: int = 2) -> SourceSelection:
    """Rank source runs by their prior-year backtest Sharpe and keep the
    top (best mode) or bottom (worst mode) ``take`` runs; Sharpe ties
    break by ascending run id."""
    if mode not in ("best", "worst"):
        raise TrainingError(f"mode must be 'best' or 'worst', got {mode!r}")
    missing = [c.run_id for c in candidates if c.sharpe is None or not np.isfinite(c.sharpe)]
    if missing:
        raise TrainingError(f"candidates missing backtests: {missing}")
    if take < 1 or take > len(candidates):
        raise TrainingError(f"cannot take {take} of {len(candidates)} candidates")
    reverse = mode == "best"
    ranked = sorted(candidates, key=lambda c: ((-c.sharpe) if reverse else c.sharpe, c.run_id))
    return SourceSelection(
        mode=mode,
        chosen=[c.run_id for c in ranked[:take]],
        ranked=[(c.run_id, float(c.sharpe)) for c in ranked],
    )


def run_seed(master_seed: int, stage: int, run_idx: int) -> np.random.Generator:
    """Deterministic per-run generator: one seed tree, disjoint streams."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, stage, run_idx]))
