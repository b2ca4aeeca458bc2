"""Fold training with early stopping, and the local / global / transfer strategies.

Every strategy trains one sub-model per cross-validation fold and returns an
:class:`EnsembleModel` whose prediction is the mean of the sub-models.
"""

from __future__ import annotations

import logging
import math
import os
import multiprocessing
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import PRECISION_ENV, Tape
from .data import Normalizer, SampleSet, concat_samples
from .models import ModelParams, SunsetConfig, build_model, dropout_streams, forward, param_groups
from .optim import AdamState, NonFiniteError, adam_step
from .partition import Fold, Partition, chronological_fraction, day_block_folds

log = logging.getLogger(__name__)

STRATEGIES = ("WS", "FConv")
# reference learning rates for real clear-sky PV and cloudy irradiance data
REFERENCE_LEARNING_RATES = {"clear_pv": 3e-6, "cloudy_irradiance": 2.5e-5}
MIN_FRACTION_DAYS = 2


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    patience: int = 5
    max_epochs: int = 50
    seed: int = 0
    precision: str = "f64"
    folds: int = 10
    eval_batch_size: int = 128

    def __post_init__(self):
        # the environment overrides whatever the config asked for
        self.precision = os.environ.get(PRECISION_ENV) or self.precision
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (BatchNorm needs batch statistics)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    def to_dict(self) -> dict:
        return asdict(self)


def _seed(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts])


def fold_seed(seed: int, fold: int) -> int:
    return int(_seed(seed, "fold", fold).generate_state(1)[0])


class EarlyStopping:
    """Stop once the validation loss has not improved (strictly) for
    ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def step(self, loss: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, self.epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def early_stopping_trace(val_losses: Sequence[float], patience: int) -> tuple[int, int]:
    """(epochs run, best epoch) for a given validation-loss sequence."""
    stopper = EarlyStopping(patience)
    for loss in val_losses:
        stopper.step(loss)
        if stopper.should_stop:
            break
    return stopper.epoch, stopper.best_epoch


@dataclass
class FoldLedger:
    fold: int
    epochs_run: int
    train_size: int
    best_val_loss: float
    best_epoch: int

    @property
    def te(self) -> int:
        return self.epochs_run * self.train_size


@dataclass
class TrainingLedger:
    folds: list[FoldLedger] = field(default_factory=list)

    def _stat(self, values, fn):
        return float(fn(np.asarray(values, dtype=float))) if values else float("nan")

    @property
    def epochs_mean(self) -> float:
        return self._stat([f.epochs_run for f in self.folds], np.mean)

    @property
    def epochs_std(self) -> float:
        return self._stat([f.epochs_run for f in self.folds], np.std)

    @property
    def te_mean(self) -> float:
        return self._stat([f.te for f in self.folds], np.mean)

    @property
    def te_std(self) -> float:
        return self._stat([f.te for f in self.folds], np.std)

    @property
    def te_total(self) -> int:
        return sum(f.te for f in self.folds)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("fold,epochs,train_size,TE,best_val_loss\n")
            for f in self.folds:
                fh.write(f"{f.fold},{f.epochs_run},{f.train_size},{f.te},{f.best_val_loss!r}\n")

    @classmethod
    def read_csv(cls, path) -> "TrainingLedger":
        import csv

        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([FoldLedger(int(r["fold"]), int(r["epochs"]), int(r["train_size"]), float(r["best_val_loss"]), 0)
                    for r in rows])


@dataclass
class EnsembleModel:
    members: list[ModelParams]
    normalizers: dict[str, Normalizer]
    site_ids: list[str]

    @property
    def config(self) -> SunsetConfig:
        return self.members[0].config


# ---------------------------------------------------------------------------
# single fold


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    full = n // batch_size
    if full == 0:
        return [order]
    # trailing partial batch is dropped in training
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(full)]


def _predict_normalized(params: ModelParams, samples: SampleSet, batch_size: int, site=None) -> np.ndarray:
    out = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        images, lags, onehot, _ = samples.batch(idx, params[params.names()[0]].data.dtype)
        label = onehot[:, :2] if site is None else site
        needs_site = params.config.condition_mode != "none"
        out[idx] = forward(params, images, lags, label if needs_site else None, mode="eval").data[:, 0]
    return out


def validation_loss(params: ModelParams, samples: SampleSet, batch_size: int = 128) -> float:
    pred = _predict_normalized(params, samples, batch_size)
    return float(np.mean((pred - samples.target) ** 2))


def train_fold(
    train: SampleSet,
    val: SampleSet,
    init: ModelParams,
    config: TrainConfig,
    frozen: frozenset[str] = frozenset(),
    fold: int = 0,
    val_loss_fn: Callable[[ModelParams, SampleSet], float] | None = None,
) -> tuple[ModelParams, FoldLedger]:
    """Minimize batch MSE with Adam on ``train``, skipping ``frozen`` names,
    until the validation loss stalls; returns the best-validation weights."""
    if len(train) < 2:
        raise ValueError(f"fold {fold}: need at least 2 training samples, got {len(train)}")
    if len(val) == 0 and val_loss_fn is None:
        raise ValueError(f"fold {fold}: empty validation set")
    overlap = set(np.unique(train.days + 100_000 * train.site)) & set(np.unique(val.days + 100_000 * val.site))
    if overlap and val_loss_fn is None and train.site_ids == val.site_ids:
        raise ValueError(f"fold {fold}: training and validation share days")

    params = init.copy()
    mcfg = params.config
    trainable = [n for n in params.trainable_names() if n not in frozen]
    for name in params:
        params[name].track_grad = False
    state = AdamState(learning_rate=config.learning_rate)
    rngs = dropout_streams(mcfg, fold_seed(config.seed, fold))
    shuffle_rng = np.random.default_rng(_seed(config.seed, "shuffle", fold))
    stopper = EarlyStopping(config.patience)
    best = params.copy()
    dtype = params[trainable[0]].data.dtype
    needs_site = mcfg.condition_mode != "none"
    val_loss_fn = val_loss_fn or (lambda p, s: validation_loss(p, s, config.eval_batch_size))

    for epoch in range(1, config.max_epochs + 1):
        for idx in _batches(len(train), config.batch_size, shuffle_rng):
            images, lags, onehot, target = train.batch(idx, dtype)
            with Tape() as tape:
                tape.watch(*(params[n] for n in trainable))
                pred = forward(params, images, lags, onehot[:, :2] if needs_site else None, "train", rngs, frozen)
                loss = ad.mse_loss(pred, target)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"fold {fold}, epoch {epoch}: non-finite training loss")
            tape.backward(loss)
            adam_step({n: params[n].data for n in trainable}, {n: params[n].grad for n in trainable}, state)
        vloss = val_loss_fn(params, val)
        if not np.isfinite(vloss):
            raise NonFiniteError(f"fold {fold}, epoch {epoch}: non-finite validation loss")
        if stopper.step(vloss):
            best = params.copy()
        log.debug("fold %d epoch %d val %.6g", fold, epoch, vloss)
        if stopper.should_stop:
            break
    for name in params:
        params[name].track_grad = False
    return best, FoldLedger(fold, stopper.epoch, len(train), stopper.best, stopper.best_epoch)


# ---------------------------------------------------------------------------
# strategies

_JOB = {}


def _fold_job(i):
    ctx = _JOB["ctx"]
    train, val = ctx["split"](i)
    return train_fold(train, val, ctx["init"](i), ctx["config"], ctx["frozen"], fold=i)


def _train_folds(split, init, config: TrainConfig, frozen, jobs: int):
    ctx = {"split": split, "init": init, "config": config, "frozen": frozenset(frozen)}
    if jobs <= 1:
        _JOB["ctx"] = ctx
        try:
            results = [_fold_job(i) for i in range(config.folds)]
        finally:
            _JOB.clear()
    else:
        _JOB["ctx"] = ctx
        try:
            with multiprocessing.get_context("fork").Pool(jobs) as pool:
                results = pool.map(_fold_job, range(config.folds))
        finally:
            _JOB.clear()
    members = [r[0] for r in results]
    return members, TrainingLedger([r[1] for r in results])


def development_folds(partition: Partition, config: TrainConfig, fraction_pct: float = 100) -> list[Fold]:
    """Folds over the development days, or over their earliest ``fraction_pct``
    percent (at least two days; cyclic single-day validation when fewer days
    than folds remain)."""
    if fraction_pct == 100 and partition.folds:
        if len(partition.folds) != config.folds:
            raise ValueError(f"partition has {len(partition.folds)} folds, config asks for {config.folds}")
        return partition.folds
    days = partition.dev_days if fraction_pct == 100 else chronological_fraction(partition.dev_days, fraction_pct)
    if len(days) < MIN_FRACTION_DAYS:
        days = sorted(partition.dev_days)[:MIN_FRACTION_DAYS]
    return day_block_folds(days, config.folds, config.seed, cyclic=True)


def _fresh(model_config: SunsetConfig, config: TrainConfig) -> Callable[[int], ModelParams]:
    dtype = np.float32 if config.precision == "f32" else np.float64
    return lambda i: build_model(model_config, fold_seed(config.seed, i), dtype)


def train_local(
    samples: SampleSet,
    partition: Partition,
    model_config: SunsetConfig,
    config: TrainConfig,
    fraction_pct: float = 100,
    jobs: int = 1,
) -> tuple[EnsembleModel, TrainingLedger]:
    """One sub-model per fold, each from a fresh seeded initialization, on a
    single site's normalized samples."""
    if len(samples.datasets) != 1:
        raise ValueError("train_local expects samples from a single site")
    folds = development_folds(partition, config, fraction_pct)

    def split(i):
        return samples.on_days(folds[i].train_days), samples.on_days(folds[i].val_days)

    members, ledger = _train_folds(split, _fresh(model_config, config), config, (), jobs)
    site = samples.site_ids[0]
    return EnsembleModel(members, {site: samples.normalizers[0]}, [site]), ledger


def train_global(
    sites: Sequence[tuple[SampleSet, Partition]],
    model_config: SunsetConfig,
    config: TrainConfig,
    jobs: int = 1,
) -> tuple[EnsembleModel, TrainingLedger]:
    """Train on the union of normalized sites; fold ``i`` joins every site's
    fold-``i`` day blocks."""
    if len(sites) < 2:
        raise ValueError("a global model needs at least two sites")
    if model_config.condition_mode != "none" and len(sites) != 2:
        raise ValueError(f"condition_mode {model_config.condition_mode!r} supports exactly two sites")
    fused = concat_samples([s for s, _ in sites])
    site_folds = [development_folds(p, config) for _, p in sites]

    def split(i):
        train = np.concatenate([np.flatnonzero(np.isin(fused.days, f[i].train_days) & (fused.site == k))
                                for k, f in enumerate(site_folds)])
        val = np.concatenate([np.flatnonzero(np.isin(fused.days, f[i].val_days) & (fused.site == k))
                              for k, f in enumerate(site_folds)])
        return fused.subset(train), fused.subset(val)

    members, ledger = _train_folds(split, _fresh(model_config, config), config, (), jobs)
    return EnsembleModel(members, dict(zip(fused.site_ids, fused.normalizers)), fused.site_ids), ledger


@dataclass
class TransferPlan:
    sources: list[ModelParams]
    strategy: str
    fraction_pct: float = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"transfer strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def check_compatible(source: SunsetConfig, target: SunsetConfig) -> None:
    for key, value in target.to_dict().items():
        if source.to_dict()[key] != value:
            raise ValueError(f"source model config differs from target in {key}: {source.to_dict()[key]} vs {value}")


def transfer_init(source: ModelParams, strategy: str) -> tuple[ModelParams, frozenset[str]]:
    """Copy of the source weights and the names to freeze (none for WS, the
    conv group including BatchNorm statistics for FConv)."""
    if strategy not in STRATEGIES:
        raise ValueError(f"transfer strategy must be one of {STRATEGIES}, got {strategy!r}")
    frozen = frozenset(param_groups(source, "conv")) if strategy == "FConv" else frozenset()
    return source.copy(), frozen


def train_transfer(
    plan: TransferPlan,
    samples: SampleSet,
    partition: Partition,
    model_config: SunsetConfig,
    config: TrainConfig,
    jobs: int = 1,
) -> tuple[EnsembleModel, TrainingLedger]:
    """Fold ``i`` of the target starts from source sub-model ``i``."""
    if len(plan.sources) != config.folds:
        raise ValueError(f"need {config.folds} source checkpoints, got {len(plan.sources)}")
    for src in plan.sources:
        check_compatible(src.config, model_config)
    folds = development_folds(partition, config, plan.fraction_pct)
    inits = [transfer_init(src, plan.strategy) for src in plan.sources]

    def split(i):
        return samples.on_days(folds[i].train_days), samples.on_days(folds[i].val_days)

    frozen = inits[0][1]
    members, ledger = _train_folds(split, lambda i: inits[i][0], config, frozen, jobs)
    site = samples.site_ids[0]
    return EnsembleModel(members, {site: samples.normalizers[0]}, [site]), ledger


def ensemble_predict(ensemble: EnsembleModel, samples: SampleSet, site=None, batch_size: int = 128,
                     normalized: bool = False) -> np.ndarray:
    """Mean of the sub-models' normalized outputs, mapped back to each sample's
    original units with that sample's site normalizer."""
    if not ensemble.members:
        raise ValueError("ensemble has no sub-models")
    if any(m is None for m in ensemble.members):
        missing = [i for i, m in enumerate(ensemble.members) if m is None]
        raise ValueError(f"ensemble is missing sub-models for folds {missing}")
    mean = np.mean([_predict_normalized(m, samples, batch_size, site) for m in ensemble.members], axis=0)
    if normalized:
        return mean
    out = np.empty_like(mean)
    for k, norm in enumerate(samples.normalizers):
        sel = samples.site == k
        out[sel] = norm.denormalize(mean[sel])
    return out
