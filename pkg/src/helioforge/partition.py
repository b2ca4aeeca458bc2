"""Test-day carving, day-block cross-validation folds and chronological subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import MINUTES_PER_DAY, SampleIndex, SiteDataset, build_sample_index, day_from_iso, day_to_iso

FRACTIONS = (1, 5, 10, 20, 50, 75, 100)


@dataclass
class Fold:
    train_days: list[int]
    val_days: list[int]


@dataclass
class Partition:
    sunny_days: list[int]
    cloudy_days: list[int]
    dev_days: list[int]
    folds: list[Fold] = field(default_factory=list)

    @property
    def test_days(self) -> list[int]:
        return sorted(self.sunny_days + self.cloudy_days)

    def day_labels(self) -> dict[int, str]:
        return {**{d: "sunny" for d in self.sunny_days}, **{d: "cloudy" for d in self.cloudy_days}}

    def to_dict(self) -> dict:
        iso = lambda days: [day_to_iso(d) for d in days]  # noqa: E731
        return {
            "sunny_days": iso(self.sunny_days),
            "cloudy_days": iso(self.cloudy_days),
            "dev_days": iso(self.dev_days),
            "folds": [{"train_days": iso(f.train_days), "val_days": iso(f.val_days)} for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d) -> "Partition":
        days = lambda xs: [day_from_iso(x) for x in xs]  # noqa: E731
        return cls(
            days(d["sunny_days"]), days(d["cloudy_days"]), days(d["dev_days"]),
            [Fold(days(f["train_days"]), days(f["val_days"])) for f in d.get("folds", [])],
        )


def complete_days(index: SampleIndex) -> list[int]:
    """Days with at least one valid sample."""
    return sorted(int(d) for d in np.unique(index.days))


def empirical_clear_sky(ds: SiteDataset, quantile: float = 95) -> Callable[[np.ndarray], np.ndarray]:
    """Per minute-of-day upper quantile of the measurements across all days."""
    mod = ds.times % MINUTES_PER_DAY
    curve = np.zeros(MINUTES_PER_DAY)
    ok = ds.has_value
    for m in np.unique(mod[ok]):
        curve[m] = np.percentile(ds.values[ok & (mod == m)], quantile)
    return lambda times: curve[np.asarray(times) % MINUTES_PER_DAY]


def day_volatility(ds: SiteDataset, days: Sequence[int], clear_sky=None) -> dict[int, float]:
    """Standard deviation of the first difference of the clear-sky-normalized
    measurement series, per day. Low means steady (sunny), high means cloudy."""
    clear_sky = clear_sky or empirical_clear_sky(ds)
    day_of = ds.times // MINUTES_PER_DAY
    scores = {}
    for d in days:
        sel = (day_of == d) & ds.has_value
        t, v = ds.times[sel], ds.values[sel]
        cs = clear_sky(t)
        keep = cs > 0.1 * np.max(cs, initial=0)
        if keep.sum() < 3:
            scores[int(d)] = float("nan")
            continue
        k = v[keep] / cs[keep]
        scores[int(d)] = float(np.std(np.diff(k)))
    return scores


def carve_test_days(
    ds: SiteDataset,
    sunny_days: Sequence | None = None,
    cloudy_days: Sequence | None = None,
    n_sunny: int = 10,
    n_cloudy: int = 10,
    stride_minutes: int = 2,
    clear_sky=None,
    index: SampleIndex | None = None,
) -> Partition:
    """Split complete days into test (sunny + cloudy) and development days.

    With explicit ``sunny_days``/``cloudy_days`` (day numbers or ISO dates) the
    lists are used as given; otherwise days are ranked by
    :func:`day_volatility` and the steadiest/most volatile are taken.
    """
    index = index if index is not None else build_sample_index(ds, stride_minutes)
    days = complete_days(index)
    if sunny_days is not None or cloudy_days is not None:
        if sunny_days is None or cloudy_days is None:
            raise ValueError("explicit mode needs both sunny_days and cloudy_days")
        sunny = [day_from_iso(d) for d in sunny_days]
        cloudy = [day_from_iso(d) for d in cloudy_days]
        overlap = set(sunny) & set(cloudy)
        if overlap or len(set(sunny)) != len(sunny) or len(set(cloudy)) != len(cloudy):
            raise ValueError(f"test day lists overlap or repeat: {sorted(map(day_to_iso, overlap))}")
        missing = [d for d in sunny + cloudy if d not in days]
        if missing:
            raise ValueError(f"test days without valid samples: {[day_to_iso(d) for d in missing]}")
    else:
        scores = day_volatility(ds, days, clear_sky)
        ranked = sorted((s, d) for d, s in scores.items() if not math.isnan(s))
        if len(ranked) < n_sunny + n_cloudy:
            raise ValueError(f"only {len(ranked)} scorable days, need {n_sunny + n_cloudy}")
        sunny = [d for _, d in ranked[:n_sunny]]
        cloudy = [d for _, d in ranked[len(ranked) - n_cloudy:]]
    test = set(sunny) | set(cloudy)
    dev = [d for d in days if d not in test]
    return Partition(sorted(sunny), sorted(cloudy), dev)


def day_block_folds(dev_days: Sequence[int], k: int = 10, seed: int = 0, cyclic: bool = False) -> list[Fold]:
    """Shuffle the days with ``seed`` and cut them into ``k`` contiguous blocks;
    fold ``i`` validates on block ``i``. Block sizes differ by at most one,
    larger blocks first.

    With ``cyclic=True`` fewer than ``k`` days are allowed: each fold then
    validates on the single day ``i mod len(days)`` of the shuffled order.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    days = sorted(int(d) for d in dev_days)
    if len(set(days)) != len(days):
        raise ValueError("dev_days contains duplicates")
    order = [days[i] for i in np.random.default_rng(seed).permutation(len(days))]
    if len(days) < k:
        if not cyclic:
            raise ValueError(f"{len(days)} development days cannot fill {k} folds")
        if len(days) < 2:
            raise ValueError("need at least 2 development days")
        blocks = [[order[i % len(order)]] for i in range(k)]
    else:
        blocks = [list(b) for b in np.array_split(np.array(order, dtype=np.int64), k)]
    folds = []
    for block in blocks:
        val = sorted(int(d) for d in block)
        held = set(val)
        folds.append(Fold([d for d in days if d not in held], val))
    return folds


def chronological_fraction(dev_days: Sequence[int], pct: float) -> list[int]:
    """Earliest ``ceil(pct * n / 100)`` development days."""
    if pct not in FRACTIONS:
        raise ValueError(f"fraction must be one of {FRACTIONS}, got {pct}")
    days = sorted(int(d) for d in dev_days)
    return days[: math.ceil(pct * len(days) / 100)]
