"""Site datasets, valid-sample indexing, measurement normalization and fusion.

Timestamps are integer minutes since 1970-01-01T00:00 UTC. A sample at ``t0``
uses the 8 frames and 8 measurements at ``t0-14, t0-12, ..., t0`` and predicts
the measurement at ``t0+15``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import get_dtype

FRAME_STEP = 2
N_FRAMES = 8
HORIZON = 15
FRAME_OFFSETS = np.arange(-FRAME_STEP * (N_FRAMES - 1), 1, FRAME_STEP)
MINUTES_PER_DAY = 1440
TARGET_KINDS = ("pv_power", "irradiance")
UNITS = {"pv_power": "kW", "irradiance": "W/m2"}

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def to_iso(minute: int) -> str:
    return (_EPOCH + timedelta(minutes=int(minute))).strftime("%Y-%m-%dT%H:%M")


def from_iso(text: str) -> int:
    dt = datetime.strptime(text.strip(), "%Y-%m-%dT%H:%M").replace(tzinfo=timezone.utc)
    return int((dt - _EPOCH).total_seconds() // 60)


def day_to_iso(day: int) -> str:
    return (_EPOCH + timedelta(days=int(day))).strftime("%Y-%m-%d")


def day_from_iso(text) -> int:
    if isinstance(text, (int, np.integer)):
        return int(text)
    dt = datetime.strptime(str(text).strip(), "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return (dt - _EPOCH).days


def _image_name(minute: int) -> str:
    return (_EPOCH + timedelta(minutes=int(minute))).strftime("%Y%m%dT%H%M") + ".png"


@dataclass
class SiteDataset:
    """Time-ordered records of one site.

    ``values[i]`` is NaN when record ``i`` has no measurement; ``image_index[i]``
    is -1 when it has no image, otherwise a row of ``frames`` (uint8, [M, S, S, 3]).
    """

    site_id: str
    target_kind: str
    times: np.ndarray
    values: np.ndarray
    image_index: np.ndarray
    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.image_index = np.asarray(self.image_index, dtype=np.int64)
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"target_kind must be one of {TARGET_KINDS}, got {self.target_kind!r}")
        if not (len(self.times) == len(self.values) == len(self.image_index)):
            raise ValueError("times, values and image_index must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError(f"{self.site_id}: timestamps must be strictly increasing")
        if np.any(self.values[~np.isnan(self.values)] < 0):
            raise ValueError(f"{self.site_id}: measurements must be non-negative")
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.dtype != np.uint8:
            raise ValueError("frames must be a uint8 array of shape [M, S, S, 3]")

    def __len__(self):
        return len(self.times)

    @property
    def image_size(self) -> int:
        return int(self.frames.shape[1])

    @property
    def has_image(self) -> np.ndarray:
        return self.image_index >= 0

    @property
    def has_value(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def days(self) -> np.ndarray:
        return np.unique(self.times // MINUTES_PER_DAY)

    def measurements_on(self, days) -> np.ndarray:
        mask = np.isin(self.times // MINUTES_PER_DAY, np.asarray(list(days), dtype=np.int64)) & self.has_value
        return self.values[mask]

    def image_at(self, record: int) -> np.ndarray | None:
        k = self.image_index[record]
        return None if k < 0 else self.frames[k]


# ---------------------------------------------------------------------------
# on-disk layout


def write_dataset(ds: SiteDataset, path) -> None:
    from PIL import Image

    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    meta = {
        "site_id": ds.site_id,
        "target_kind": ds.target_kind,
        "units": UNITS[ds.target_kind],
        "image_size": ds.image_size,
        **{k: v for k, v in ds.meta.items() if k not in ("site_id", "target_kind", "units", "image_size")},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(root / "measurements.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,value\n")
        for t, v in zip(ds.times, ds.values):
            if not np.isnan(v):
                fh.write(f"{to_iso(t)},{float(v)!r}\n")
    for t, k in zip(ds.times, ds.image_index):
        if k >= 0:
            Image.fromarray(ds.frames[k], mode="RGB").save(root / "images" / _image_name(t), optimize=False)


def read_dataset(path) -> SiteDataset:
    from PIL import Image

    root = Path(path)
    if not (root / "meta.json").is_file():
        raise FileNotFoundError(f"{root}: missing meta.json")
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    values: dict[int, float] = {}
    with open(root / "measurements.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["timestamp", "value"]:
            raise ValueError(f"{root}/measurements.csv: header must be 'timestamp,value', got {header}")
        for row in reader:
            values[from_iso(row[0])] = float(row[1])
    images: dict[int, Path] = {}
    for p in sorted((root / "images").glob("*.png")):
        dt = datetime.strptime(p.stem, "%Y%m%dT%H%M").replace(tzinfo=timezone.utc)
        images[int((dt - _EPOCH).total_seconds() // 60)] = p
    times = np.array(sorted(set(values) | set(images)), dtype=np.int64)
    size = int(meta["image_size"])
    frames = np.zeros((len(images), size, size, 3), dtype=np.uint8)
    image_index = np.full(len(times), -1, dtype=np.int64)
    vals = np.full(len(times), np.nan)
    k = 0
    for i, t in enumerate(times):
        if t in values:
            vals[i] = values[t]
        if t in images:
            with Image.open(images[t]) as im:
                arr = np.asarray(im.convert("RGB"))
            if arr.shape != (size, size, 3):
                raise ValueError(f"{images[t]}: expected {size}x{size} RGB, got {arr.shape}")
            frames[k] = arr
            image_index[i] = k
            k += 1
    extra = {k: v for k, v in meta.items() if k not in ("site_id", "target_kind", "image_size")}
    return SiteDataset(meta["site_id"], meta["target_kind"], times, vals, image_index, frames, extra)


# ---------------------------------------------------------------------------
# sample index


@dataclass
class SampleIndex:
    t0: np.ndarray
    image_rows: np.ndarray  # [n, 8] rows into SiteDataset.frames
    lag_values: np.ndarray  # [n, 8] raw measurements
    target: np.ndarray  # [n] raw measurement at t0 + 15
    stride: int

    def __len__(self):
        return len(self.t0)

    @property
    def frame_times(self) -> np.ndarray:
        return self.t0[:, None] + FRAME_OFFSETS[None, :]

    @property
    def days(self) -> np.ndarray:
        return self.t0 // MINUTES_PER_DAY

    def select(self, mask) -> "SampleIndex":
        return SampleIndex(self.t0[mask], self.image_rows[mask], self.lag_values[mask], self.target[mask], self.stride)

    def on_days(self, days) -> "SampleIndex":
        return self.select(np.isin(self.days, np.asarray(list(days), dtype=np.int64)))


def _lookup(times: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Record position of each query timestamp, -1 if absent."""
    pos = np.searchsorted(times, queries)
    pos_c = np.minimum(pos, len(times) - 1)
    return np.where(times[pos_c] == queries, pos_c, -1)


def build_sample_index(ds: SiteDataset, stride_minutes: int = 2) -> SampleIndex:
    """Every ``t0`` on the stride grid (``t0 % stride == 0``) whose 8 frames,
    8 lag measurements and target measurement all exist, in time order."""
    if stride_minutes < 1:
        raise ValueError("stride must be at least 1 minute")
    empty = SampleIndex(np.zeros(0, np.int64), np.zeros((0, N_FRAMES), np.int64), np.zeros((0, N_FRAMES)), np.zeros(0), stride_minutes)
    if len(ds) == 0:
        return empty
    first = -(-int(ds.times[0]) // stride_minutes) * stride_minutes
    t0 = np.arange(first, int(ds.times[-1]) + 1, stride_minutes, dtype=np.int64)
    frame_pos = _lookup(ds.times, t0[:, None] + FRAME_OFFSETS[None, :])
    target_pos = _lookup(ds.times, t0 + HORIZON)
    frame_ok = frame_pos >= 0
    safe = np.where(frame_ok, frame_pos, 0)
    valid = (
        np.all(frame_ok, axis=1)
        & np.all(ds.image_index[safe] >= 0, axis=1)
        & np.all(ds.has_value[safe], axis=1)
        & (target_pos >= 0)
    )
    valid &= ds.has_value[np.where(target_pos >= 0, target_pos, 0)]
    if not valid.any():
        return empty
    fp = frame_pos[valid]
    return SampleIndex(
        t0[valid],
        ds.image_index[fp],
        ds.values[fp],
        ds.values[target_pos[valid]],
        stride_minutes,
    )


def write_index(index: SampleIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t0,target," + ",".join(f"frame_{k}" for k in range(N_FRAMES)) + "\n")
        for t0, target, frames in zip(index.t0, index.target, index.frame_times):
            fh.write(f"{to_iso(t0)},{float(target)!r}," + ",".join(to_iso(f) for f in frames) + "\n")


def read_index_times(path) -> tuple[np.ndarray, np.ndarray]:
    """(t0, target) columns of a cached ``index.csv``."""
    t0, target = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            t0.append(from_iso(row["t0"]))
            target.append(float(row["target"]))
    return np.array(t0, dtype=np.int64), np.array(target)


# ---------------------------------------------------------------------------
# normalization

METHODS = ("max", "p95", "std", "mean_std", "max/100", "p95/100", "std/100", "mean_std/100")


@dataclass(frozen=True)
class Normalizer:
    """Affine map ``(x - a) / b``."""

    method: str
    a: float
    b: float

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown normalization method {self.method!r}; expected one of {METHODS}")
        if not self.b > 0:
            raise ValueError("normalization factor b must be positive")

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.a) / self.b

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * self.b + self.a

    def to_dict(self) -> dict:
        return {"method": self.method, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(d["method"], float(d["a"]), float(d["b"]))


def fit_normalizer(values, method: str) -> Normalizer:
    """Fit ``a``/``b`` on development-set input measurements.

    ``b`` is the max, 95th percentile or population standard deviation,
    divided by 100 for the ``/100`` variants; ``a`` is the mean for the
    mean-centred methods and 0 otherwise.
    """
    if method not in METHODS:
        raise ValueError(f"unknown normalization method {method!r}; expected one of {METHODS}")
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 2:
        raise ValueError("need at least 2 measurements to fit a normalizer")
    if np.ptp(x) == 0:
        raise ValueError("cannot fit a normalizer to constant measurements")
    base, _, per100 = method.partition("/")
    if base == "max":
        b = float(np.max(x))
    elif base == "p95":
        b = float(np.percentile(x, 95))
    else:
        b = float(np.std(x))
    if per100:
        b /= 100
    a = float(np.mean(x)) if base == "mean_std" else 0.0
    return Normalizer(method, a, b)


def pixel_normalize(image, dtype=None) -> np.ndarray:
    return np.asarray(image, dtype=dtype or get_dtype()) / 255


# ---------------------------------------------------------------------------
# training-ready samples


@dataclass
class SampleSet:
    """Normalized samples from one or more sites, ready for batching.

    ``site[i]`` indexes ``datasets``/``normalizers``; the one-hot label of a
    sample is its site position (width ``max(2, n_sites)``), unless
    ``site_label`` pins a single-site set to another label position.
    """

    datasets: list[SiteDataset]
    normalizers: list[Normalizer]
    site: np.ndarray
    t0: np.ndarray
    image_rows: np.ndarray
    lags: np.ndarray
    target: np.ndarray
    raw_target: np.ndarray
    stride: int
    site_label: int | None = None

    def __len__(self):
        return len(self.t0)

    @property
    def days(self) -> np.ndarray:
        return self.t0 // MINUTES_PER_DAY

    @property
    def site_ids(self) -> list[str]:
        return [d.site_id for d in self.datasets]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(
            self.datasets, self.normalizers, self.site[idx], self.t0[idx], self.image_rows[idx],
            self.lags[idx], self.target[idx], self.raw_target[idx], self.stride, self.site_label,
        )

    def on_days(self, days, site: int | None = None) -> "SampleSet":
        mask = np.isin(self.days, np.asarray(list(days), dtype=np.int64))
        if site is not None:
            mask &= self.site == site
        return self.subset(np.flatnonzero(mask))

    def onehot(self, idx=None) -> np.ndarray:
        site = self.site if idx is None else self.site[idx]
        if self.site_label is not None:
            site = np.full_like(site, self.site_label)
        width = max(2, len(self.datasets))
        return np.eye(width)[site]

    def batch(self, idx, dtype=None):
        """(images [B, 24, S, S] in [0, 1], lags [B, 8], one-hot [B, n], target [B, 1])."""
        dtype = dtype or get_dtype()
        idx = np.asarray(idx)
        size = self.datasets[0].image_size
        images = np.empty((len(idx), 3 * N_FRAMES, size, size), dtype=dtype)
        sites = self.site[idx]
        for k in np.unique(sites):
            sel = np.flatnonzero(sites == k)
            raw = self.datasets[k].frames[self.image_rows[idx[sel]]]  # [b, 8, S, S, 3]
            raw = raw.transpose(0, 1, 4, 2, 3).reshape(len(sel), 3 * N_FRAMES, size, size)
            images[sel] = pixel_normalize(raw, dtype)
        return (
            images,
            self.lags[idx].astype(dtype),
            self.onehot(idx),
            self.target[idx].astype(dtype)[:, None],
        )


def make_samples(ds: SiteDataset, normalizer: Normalizer, stride_minutes: int = 2, index: SampleIndex | None = None,
                 site_label: int | None = None) -> SampleSet:
    index = index if index is not None else build_sample_index(ds, stride_minutes)
    return SampleSet(
        [ds], [normalizer], np.zeros(len(index), dtype=np.int64), index.t0, index.image_rows,
        normalizer.normalize(index.lag_values), normalizer.normalize(index.target), index.target.copy(),
        index.stride, site_label,
    )


def concat_samples(sets: Sequence[SampleSet]) -> SampleSet:
    """Stack single- or multi-site sets; sites are renumbered in argument order."""
    if not sets:
        raise ValueError("nothing to concatenate")
    strides = {s.stride for s in sets}
    if len(strides) != 1:
        raise ValueError(f"cannot combine samples with different strides {sorted(strides)}")
    datasets, normalizers, offsets = [], [], []
    for s in sets:
        offsets.append(len(datasets))
        datasets += s.datasets
        normalizers += s.normalizers
    ids = [d.site_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate site_id among {ids}")
    sizes = {d.image_size for d in datasets}
    if len(sizes) != 1:
        raise ValueError(f"cannot combine sites with image sizes {sorted(sizes)}")
    cat = np.concatenate
    return SampleSet(
        datasets, normalizers,
        cat([s.site + off for s, off in zip(sets, offsets)]),
        cat([s.t0 for s in sets]), cat([s.image_rows for s in sets]), cat([s.lags for s in sets]),
        cat([s.target for s in sets]), cat([s.raw_target for s in sets]), strides.pop(),
    )


def fuse(pairs: Sequence[tuple[SiteDataset, Normalizer]], stride_minutes: int = 2, seed: int = 0,
         days: Sequence[Sequence[int]] | None = None) -> SampleSet:
    """Normalize each site with its own normalizer, then mix all samples in a
    seeded random order. ``days`` optionally restricts each site to a day list."""
    if len(pairs) < 2:
        raise ValueError("fusion needs at least two datasets")
    ids = [ds.site_id for ds, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate site_id among {ids}")
    sets = []
    for k, (ds, norm) in enumerate(pairs):
        s = make_samples(ds, norm, stride_minutes)
        if days is not None:
            s = s.on_days(days[k])
        sets.append(s)
    fused = concat_samples(sets)
    order = np.random.default_rng(seed).permutation(len(fused))
    return fused.subset(order)
