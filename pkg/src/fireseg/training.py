"""k-fold training with Adam, early stopping on the shybrid score.

Each fold trains on the remaining folds' tiles and validates on its own,
stopping once the monitored score has not strictly improved for `patience`
epochs (ties do not reset the counter) and keeping the checkpoint of the
best epoch (earliest on ties). Fold scores are the checkpoint metrics,
averaged arithmetically across folds.

Fire-buffer augmentation happens here, on materialized tile masks, per the
configured mode; holdout evaluation never samples, never buffers, and
insists on a holdout-provenance tile set.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date

import numpy as np

from . import data as D
from . import unet as U
from .kernels import AdamState, adam_step, weighted_ce_loss
from .metrics import ConfusionCounts, confusion, sensitivity, shybrid, specificity

BUFFER_OFF = "off"
BUFFER_TRAIN = "train"
BUFFER_TRAIN_VAL = "train+val"

ES_METRICS = {"sh1": 1.0, "sh2": 2.0}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    max_epochs: int = 45
    patience: int = 10
    folds: int = 3
    es_metric: str = "sh2"
    tile_ratio: float = 4.0
    fire_buffer: str = BUFFER_OFF
    buffer_radius: int = 1
    init_features: int = 8
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.5
    grouping: str = "by-tile"

    def __post_init__(self):
        if self.patience < 1 or self.patience >= self.max_epochs:
            raise ValueError("need 1 <= patience < max_epochs")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.es_metric not in ES_METRICS:
            raise ValueError(f"es_metric must be one of {sorted(ES_METRICS)}")
        if self.fire_buffer not in (BUFFER_OFF, BUFFER_TRAIN, BUFFER_TRAIN_VAL):
            raise ValueError(f"unknown fire_buffer mode {self.fire_buffer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.buffer_radius < 0:
            raise ValueError("invalid lr / batch_size / buffer_radius")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be a probability")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    sens: float
    spec: float
    sh1: float
    sh2: float

    def score(self, es_metric: str) -> float:
        return self.sh1 if es_metric == "sh1" else self.sh2


@dataclass
class Checkpoint:
    epoch: int
    params: U.UNetParams
    sens: float
    spec: float
    sh1: float
    sh2: float


@dataclass
class FoldResult:
    fold_index: int
    best: Checkpoint
    trace: list[EpochMetrics]
    stopped_epoch: int


class EarlyStopping:
    """Strict-improvement early stopping with best-epoch tracking.

    update() returns True once the monitored value has not strictly
    improved for `patience` consecutive epochs. The best epoch is the
    earliest one attaining the running maximum.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def run_stopping_rule(trace: list[float], patience: int, max_epochs: int) -> tuple[int, int]:
    """Drive EarlyStopping over a recorded metric trace.

    Returns (epochs run, selected epoch), both 1-based. This is the exact
    component train_fold consults each epoch.
    """
    stopper = EarlyStopping(patience)
    run = 0
    for epoch, value in enumerate(trace[:max_epochs], start=1):
        run = epoch
        if stopper.update(epoch, value):
            break
    return run, stopper.best_epoch


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def compute_class_weights(masks: np.ndarray) -> tuple[float, float]:
    """Inverse pixel-frequency weights over non-water pixels.

    w_c = N_nonwater / (2 * N_c), so a balanced mask gives (1, 1). Both
    classes must be present.
    """
    n0 = int(np.sum(masks == D.NO_FIRE))
    n1 = int(np.sum(masks == D.FIRE))
    if n0 == 0 or n1 == 0:
        raise ValueError(f"both classes must appear in the train masks (no-fire={n0}, fire={n1})")
    total = n0 + n1
    return total / (2.0 * n0), total / (2.0 * n1)


def _buffer_masks(masks: np.ndarray, radius: int) -> np.ndarray:
    return np.stack([D.apply_fire_buffer(m, radius) for m in masks])


def _evaluate_tiles(
    params: U.UNetParams,
    feats: np.ndarray,
    masks: np.ndarray,
    threshold: float,
    batch_size: int,
) -> ConfusionCounts:
    counts = ConfusionCounts()
    for lo in range(0, feats.shape[0], batch_size):
        logits, _ = U.forward(params, feats[lo : lo + batch_size])
        pred = U.predict_mask(logits, threshold)
        counts = counts + confusion(pred, masks[lo : lo + batch_size])
    return counts


def train_fold(
    train_specs,
    val_specs,
    days: dict[date, D.GridDay],
    config: TrainConfig,
    fold_index: int = 0,
) -> FoldResult:
    """Train on one fold split and return its best checkpoint and trace."""
    tr_feats, tr_masks = D.materialize_batch(list(train_specs), days)
    va_feats, va_masks = D.materialize_batch(list(val_specs), days)
    if config.fire_buffer in (BUFFER_TRAIN, BUFFER_TRAIN_VAL):
        tr_masks = _buffer_masks(tr_masks, config.buffer_radius)
    if config.fire_buffer == BUFFER_TRAIN_VAL:
        va_masks = _buffer_masks(va_masks, config.buffer_radius)
    if not np.any(va_masks == D.FIRE):
        raise ValueError(f"fold {fold_index}: validation sensitivity undefined (no fire pixels)")

    class_weights = compute_class_weights(tr_masks)
    net_config = U.UNetConfig(
        in_channels=tr_feats.shape[1],
        init_features=config.init_features,
        seed=_derived_seed(config.seed, fold_index, 0),
    )
    params = U.init_params(net_config)
    state = AdamState.zeros_like(params.tensors())
    stopper = EarlyStopping(config.patience)
    trace: list[EpochMetrics] = []
    best: Checkpoint | None = None
    n = tr_feats.shape[0]
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, fold_index, epoch]))
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, config.batch_size):
            sel = order[lo : lo + config.batch_size]
            logits, cache = U.forward(params, tr_feats[sel], training=True)
            res = weighted_ce_loss(logits, tr_masks[sel], class_weights)
            grads = U.backward(params, cache, res.grad_logits)
            step += 1
            tensors, state = adam_step(params.tensors(), grads, state, lr=config.lr, t=step)
            params = params.with_tensors(tensors)
            epoch_loss += res.loss
            batches += 1

        counts = _evaluate_tiles(params, va_feats, va_masks, config.threshold, config.batch_size)
        sens = sensitivity(counts)
        spec = specificity(counts)
        if sens is None or spec is None:
            raise ValueError(f"fold {fold_index}: validation metrics undefined at epoch {epoch}")
        em = EpochMetrics(
            epoch=epoch,
            train_loss=epoch_loss / max(batches, 1),
            sens=sens,
            spec=spec,
            sh1=shybrid(1, sens, spec),
            sh2=shybrid(2, sens, spec),
        )
        trace.append(em)
        score = em.score(config.es_metric)
        improved = score > stopper.best
        stop = stopper.update(epoch, score)
        if improved:
            snapshot = params.with_tensors([t.copy() for t in params.tensors()])
            best = Checkpoint(epoch, snapshot, em.sens, em.spec, em.sh1, em.sh2)
        if stop:
            break

    assert best is not None and best.epoch == stopper.best_epoch
    return FoldResult(fold_index, best, trace, stopped_epoch=trace[-1].epoch)


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    mean_sens: float
    mean_spec: float
    mean_sh1: float
    mean_sh2: float


def cross_validate(
    tileset: D.TileSet, days: dict[date, D.GridDay], config: TrainConfig
) -> CrossValResult:
    """Rotate each fold as validation, training on the rest; average scores."""
    folds = D.kfold_split(tileset, config.folds, config.seed, config.grouping)
    results = []
    for i in range(config.folds):
        val = folds[i]
        train = [s for j, f in enumerate(folds) if j != i for s in f]
        results.append(train_fold(train, val, days, config, fold_index=i))
    return CrossValResult(
        folds=results,
        mean_sens=float(np.mean([r.best.sens for r in results])),
        mean_spec=float(np.mean([r.best.spec for r in results])),
        mean_sh1=float(np.mean([r.best.sh1 for r in results])),
        mean_sh2=float(np.mean([r.best.sh2 for r in results])),
    )


@dataclass
class HoldoutResult:
    counts: ConfusionCounts
    sens: float
    spec: float
    sh1: float
    sh2: float
    tiles: int


def evaluate_holdout(
    params: U.UNetParams,
    holdout_days: list[D.GridDay],
    config: TrainConfig,
) -> HoldoutResult:
    """Pixel metrics over every land tile of the holdout days.

    The days must already carry the training-time scaling/encoding. No
    sampling and no fire buffer are applied here, ever.
    """
    tileset = D.holdout_tileset(holdout_days)
    assert tileset.provenance == D.HOLDOUT
    store = {day.day_id: day for day in holdout_days}
    counts = ConfusionCounts()
    specs = list(tileset.specs)
    for lo in range(0, len(specs), config.batch_size):
        feats, masks = D.materialize_batch(specs[lo : lo + config.batch_size], store)
        logits, _ = U.forward(params, feats)
        pred = U.predict_mask(logits, config.threshold)
        counts = counts + confusion(pred, masks)
    sens = sensitivity(counts)
    spec = specificity(counts)
    if sens is None or spec is None:
        raise ValueError("holdout metrics undefined (a class is absent from the holdout days)")
    return HoldoutResult(
        counts, sens, spec, shybrid(1, sens, spec), shybrid(2, sens, spec), len(specs)
    )


def predict_day(params: U.UNetParams, day: D.GridDay, threshold: float = 0.5) -> np.ndarray:
    """Predict a full day raster by tiling, then stitch tiles back together."""
    specs = D.extract_tiles(day)
    store = {day.day_id: day}
    out = np.zeros((day.height, day.width), np.uint8)
    for lo in range(0, len(specs), 32):
        chunk = specs[lo : lo + 32]
        feats, _ = D.materialize_batch(chunk, store)
        logits, _ = U.forward(params, feats)
        pred = U.predict_mask(logits, threshold)
        for n, s in enumerate(chunk):
            rows = min(D.TILE_SIDE, day.height - s.row_off)
            cols = min(D.TILE_SIDE, day.width - s.col_off)
            out[s.row_off : s.row_off + rows, s.col_off : s.col_off + cols] = pred[n, :rows, :cols]
    return out
