"""Synthetic-scale experiment grids: local/offsite/global comparisons, the
transfer-vs-fraction sweep, and the shared site preparation they use."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

from .data import SampleSet, SiteDataset, Normalizer, build_sample_index, fit_normalizer, make_samples
from .metrics import evaluate_predictions, scale_diagnostic
from .models import SunsetConfig
from .partition import FRACTIONS, Partition, carve_test_days, day_block_folds
from .report import ResultRow
from .synthetic import default_regimes, generate_site
from .training import (
    EnsembleModel, TrainConfig, TrainingLedger, TransferPlan, ensemble_predict, train_global, train_local,
    train_transfer,
)

log = logging.getLogger(__name__)

SUITES = ("table4", "table6", "fig10")


@dataclass(frozen=True)
class Profile:
    """Desk-scale knobs shared by every run of a suite."""

    name: str
    day_count: int = 60
    image_size: int = 32
    n_sunny: int = 6
    n_cloudy: int = 6
    stride_minutes: int = 30
    folds: int = 3
    max_epochs: int = 12
    patience: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout_rate: float = 0.1
    normalization: str = "std"
    fractions: tuple[int, ...] = FRACTIONS

    def model_config(self, condition_mode: str = "none") -> SunsetConfig:
        return SunsetConfig.test_profile(image_size=self.image_size, dropout_rate=self.dropout_rate,
                                         condition_mode=condition_mode)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, patience=self.patience,
                           max_epochs=self.max_epochs, seed=seed, folds=self.folds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d


PROFILES = {
    "desk": Profile("desk"),
    "smoke": Profile("smoke", day_count=16, n_sunny=2, n_cloudy=2, stride_minutes=60, folds=2, max_epochs=2,
                     patience=1, batch_size=16),
}


@dataclass
class SiteBundle:
    """One site ready for experiments: partition, own normalizer, samples."""

    dataset: SiteDataset
    partition: Partition
    normalizer: Normalizer
    samples: SampleSet
    index: object = field(repr=False, default=None)

    @property
    def site_id(self) -> str:
        return self.dataset.site_id

    @property
    def test(self) -> SampleSet:
        return self.samples.on_days(self.partition.test_days)

    def samples_with(self, normalizer: Normalizer) -> SampleSet:
        """Test samples of this site normalized with another normalizer."""
        return make_samples(self.dataset, normalizer, self.samples.stride, index=self.index).on_days(
            self.partition.test_days)


def prepare_site(ds: SiteDataset, profile: Profile, seed: int = 0) -> SiteBundle:
    index = build_sample_index(ds, profile.stride_minutes)
    part = carve_test_days(ds, n_sunny=profile.n_sunny, n_cloudy=profile.n_cloudy, index=index)
    part.folds = day_block_folds(part.dev_days, profile.folds, seed)
    norm = fit_normalizer(ds.measurements_on(part.dev_days), profile.normalization)
    return SiteBundle(ds, part, norm, make_samples(ds, norm, profile.stride_minutes, index=index), index)


def synthetic_sites(profile: Profile, seed: int = 0) -> dict[str, SiteBundle]:
    regimes = default_regimes(seed, day_count=profile.day_count, image_size=profile.image_size)
    return {sid: prepare_site(generate_site(r)[0], profile, seed) for sid, r in regimes.items()}


def score(ensemble: EnsembleModel, samples: SampleSet, partition: Partition, strategy: str, source: str,
          target: str, fraction: float, ledger: TrainingLedger | None, with_scale: bool = False,
          pred=None) -> ResultRow:
    pred = ensemble_predict(ensemble, samples) if pred is None else pred
    result = evaluate_predictions(pred, samples.raw_target, samples.days, partition.day_labels())
    scale = scale_diagnostic(pred, samples.raw_target) if with_scale else None
    te_mean = ledger.te_mean if ledger else float("nan")
    te_std = ledger.te_std if ledger else float("nan")
    return ResultRow(strategy, source, target, fraction, result, te_mean, te_std, scale)


# ---------------------------------------------------------------------------
# grids


def local_models(sites: Mapping[str, SiteBundle], profile: Profile, seed: int, jobs: int = 1):
    out = {}
    for sid, b in sites.items():
        log.info("local model %s", sid)
        out[sid] = train_local(b.samples, b.partition, profile.model_config(), profile.train_config(seed), jobs=jobs)
    return out


def global_model(sites: Sequence[SiteBundle], profile: Profile, seed: int, condition_mode: str = "none",
                 jobs: int = 1):
    log.info("global model %s", "+".join(b.site_id for b in sites))
    return train_global([(b.samples, b.partition) for b in sites], profile.model_config(condition_mode),
                        profile.train_config(seed), jobs=jobs)


def local_offsite_global(sites: Mapping[str, SiteBundle], profile: Profile, seed: int = 0,
                         global_sites: Sequence[str] = ("site-S", "site-P"), offsite_normalizer: str = "target",
                         jobs: int = 1, locals_=None, global_=None):
    """Rows for every local model on its own site, every ordered offsite pair
    (with the scale diagnostic) and a two-site global model on each of its sites."""
    locals_ = locals_ or local_models(sites, profile, seed, jobs)
    rows = []
    for sid, (ens, ledger) in locals_.items():
        b = sites[sid]
        rows.append(score(ens, b.test, b.partition, "local", sid, sid, 100, ledger))
    for src, (ens, ledger) in locals_.items():
        for tgt, b in sites.items():
            if tgt == src:
                continue
            norm = b.normalizer if offsite_normalizer == "target" else sites[src].normalizer
            rows.append(score(ens, b.samples_with(norm), b.partition, "offsite", src, tgt, 100, ledger, True))
    gens, gledger = global_ or global_model([sites[s] for s in global_sites], profile, seed, jobs=jobs)
    for sid in global_sites:
        b = sites[sid]
        rows.append(score(gens, b.test, b.partition, "global", "+".join(global_sites), sid, 100, gledger))
    return rows, locals_, (gens, gledger)


def transfer_sweep(sites: Mapping[str, SiteBundle], sources: Mapping[str, EnsembleModel], target: str,
                   profile: Profile, seed: int = 0, fractions: Sequence[int] | None = None,
                   strategies: Sequence[str] = ("WS", "FConv"), jobs: int = 1) -> list[ResultRow]:
    """For each fraction: a local baseline trained on the fraction alone, plus
    every strategy from every source ensemble."""
    b = sites[target]
    tcfg = profile.train_config(seed)
    mcfg = profile.model_config()
    rows = []
    for pct in fractions or profile.fractions:
        log.info("fraction %s%% on %s", pct, target)
        ens, ledger = train_local(b.samples, b.partition, mcfg, tcfg, fraction_pct=pct, jobs=jobs)
        rows.append(score(ens, b.test, b.partition, "local", target, target, pct, ledger))
        for src_name, src in sources.items():
            for strategy in strategies:
                plan = TransferPlan(src.members, strategy, pct)
                ens, ledger = train_transfer(plan, b.samples, b.partition, mcfg, tcfg, jobs=jobs)
                rows.append(score(ens, b.test, b.partition, strategy, src_name, target, pct, ledger))
    return rows


def run_suite(suite: str, sites: Mapping[str, SiteBundle], profile: Profile, seed: int = 0, jobs: int = 1):
    """Rows for one named suite.

    * ``table4``: local ×3, offsite ×6, two-site global on each of its sites.
    * ``table6``: the table4 rows plus WS/FConv transfers at 100% into the
      third site from the single-site and the two-site source.
    * ``fig10``: the fraction sweep into the third site from both sources.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    ids = list(sites)
    if len(ids) < 3:
        raise ValueError("the reproduction suites need three sites")
    first, second, target = ids[0], ids[1], ids[2]
    if suite == "table4":
        return local_offsite_global(sites, profile, seed, (first, second), jobs=jobs)[0]
    locals_ = local_models({s: sites[s] for s in (first, second)} if suite == "fig10" else sites,
                           profile, seed, jobs)
    gens, gledger = global_model([sites[first], sites[second]], profile, seed, jobs=jobs)
    sources = {first: locals_[first][0], f"{first}+{second}": gens}
    if suite == "fig10":
        return transfer_sweep(sites, sources, target, profile, seed, jobs=jobs)
    rows = local_offsite_global(sites, profile, seed, (first, second), jobs=jobs, locals_=locals_,
                                global_=(gens, gledger))[0]
    return rows + [r for r in transfer_sweep(sites, sources, target, profile, seed, [100], jobs=jobs)
                   if r.strategy != "local"]


def with_profile(profile: Profile, **changes) -> Profile:
    return replace(profile, **changes)
