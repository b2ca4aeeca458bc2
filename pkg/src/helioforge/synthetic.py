"""Deterministic synthetic sky-camera sites.

Each day is either sunny (no clouds) or cloudy (Gaussian cloud blobs drifting
with a seeded random walk). Measurements follow a sine diurnal envelope
scaled by ``peak_scale`` and by how much of the sun disk the clouds cover.
Every number here is a generator choice.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import MINUTES_PER_DAY, SiteDataset, day_from_iso, day_to_iso, write_dataset

START_DAY = day_from_iso("2021-06-01")
OCCLUSION_DEPTH = 0.8
_SKY = np.array([0.35, 0.55, 0.95])
_CLOUD = np.array([0.88, 0.88, 0.9])
# sun-disk sample points (unit radius) for coverage estimation
_DISK = np.array([(0.0, 0.0)] + [(0.7 * np.cos(a), 0.7 * np.sin(a)) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)])


@dataclass(frozen=True)
class SiteRegime:
    site_id: str
    target_kind: str
    peak_scale: float
    cloudy_day_prob: float
    cloud_count_range: tuple[int, int] = (2, 5)
    cloud_speed: float = 0.3
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)
    day_count: int = 60
    day_length_minutes: int = 480
    image_size: int = 32
    seed: int = 0
    noise_sigma: float = 0.01
    image_interval: int = 2
    camera_rotation_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cloud_count_range", tuple(int(c) for c in self.cloud_count_range))
        object.__setattr__(self, "tint", tuple(float(c) for c in self.tint))
        if self.peak_scale <= 0:
            raise ValueError("peak_scale must be positive")
        if not all(0 < c <= 1 for c in self.tint):
            raise ValueError("tint components must lie in (0, 1]")
        if not 0 <= self.cloudy_day_prob <= 1:
            raise ValueError("cloudy_day_prob must lie in [0, 1]")
        lo, hi = self.cloud_count_range
        if not 1 <= lo <= hi:
            raise ValueError("cloud_count_range must satisfy 1 <= lo <= hi")
        if self.day_length_minutes % 2 or self.day_length_minutes < 60:
            raise ValueError("day_length_minutes must be even and at least 60")
        if self.image_size % 4:
            raise ValueError("image_size must be a multiple of 4")

    def replace(self, **changes) -> "SiteRegime":
        return SiteRegime(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cloud_count_range"] = list(self.cloud_count_range)
        d["tint"] = list(self.tint)
        return d


@dataclass(frozen=True)
class DayLabel:
    day: int
    label: str


def default_regimes(seed: int = 0, **overrides) -> dict[str, SiteRegime]:
    """Three presets: clear-dominant PV (site-S), cloudy-dominant irradiance
    (site-P) and clear, dusty irradiance with a yellow cast (site-D). Day
    length and camera mounting differ per site, as they would across
    latitudes."""
    presets = [
        SiteRegime("site-S", "pv_power", 30.0, 0.3, (3, 6), 0.5, (1.0, 1.0, 1.0), seed=seed),
        SiteRegime("site-P", "irradiance", 1000.0, 0.75, (5, 9), 0.6, (0.92, 0.95, 1.0), seed=seed + 1,
                   day_length_minutes=600, camera_rotation_deg=40.0),
        SiteRegime("site-D", "irradiance", 1000.0, 0.15, (2, 5), 0.5, (1.0, 0.85, 0.55), seed=seed + 2,
                   day_length_minutes=420, camera_rotation_deg=-35.0),
    ]
    return {r.site_id: r.replace(**overrides) for r in presets}


def clear_sky_envelope(minute_of_day, day_length: int):
    """``sin(pi * m / day_length)``, exactly 0 at and outside sunrise/sunset."""
    m = np.asarray(minute_of_day, dtype=float)
    inside = (m > 0) & (m < day_length)
    return np.where(inside, np.sin(np.pi * np.clip(m, 0, day_length) / day_length), 0.0)


def sun_position(minute_of_day, day_length: int, image_size: int, rotation_deg: float = 0.0):
    """(row, col) of the sun centre along the daily arc, east (left) to west,
    with the camera rotated ``rotation_deg`` about the image centre."""
    frac = np.asarray(minute_of_day, dtype=float) / day_length
    c = (image_size - 1) / 2
    dx = -0.4 * image_size * np.cos(np.pi * frac)
    dy = 0.05 * image_size - 0.35 * image_size * np.sin(np.pi * frac)
    a = np.deg2rad(rotation_deg)
    return c + np.sin(a) * dx + np.cos(a) * dy, c + np.cos(a) * dx - np.sin(a) * dy


def sun_radius(image_size: int) -> float:
    return max(1.5, image_size / 20)


def _cloud_field(rng, regime: SiteRegime, minutes: np.ndarray):
    """Cloud centres [T, K, 2], sizes [K], opacities [K] over the day."""
    s = regime.image_size
    lo, hi = regime.cloud_count_range
    k = int(rng.integers(lo, hi + 1))
    start = rng.uniform(-0.5 * s, 1.5 * s, size=(k, 2))
    sigma = rng.uniform(s / 8, s / 4, size=k)
    alpha = rng.uniform(0.6, 1.0, size=k)
    theta = rng.uniform(0, 2 * np.pi)
    speed = regime.cloud_speed * rng.uniform(0.7, 1.3)
    drift = speed * np.array([np.sin(theta), np.cos(theta)])
    walk = np.cumsum(rng.normal(0, 0.15 * regime.cloud_speed, size=(len(minutes), k, 2)), axis=0)
    pos = start[None] + minutes[:, None, None] * drift[None, None] + walk
    # wrap on a 2S torus so clouds keep re-entering the frame
    pos = np.mod(pos + 0.5 * s, 2 * s) - 0.5 * s
    return pos, sigma, alpha


def _opacity(points, pos, sigma, alpha):
    """Cloud opacity at ``points`` [T, P, 2] given blob centres [T, K, 2]."""
    d2 = ((points[:, :, None, :] - pos[:, None, :, :]) ** 2).sum(-1)
    blobs = alpha[None, None] * np.exp(-d2 / (2 * sigma[None, None] ** 2))
    return 1.0 - np.prod(1.0 - blobs, axis=-1)


def _render(regime, minutes, env, sun_rc, clouds):
    s = regime.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(float)
    grid = np.stack([yy.ravel(), xx.ravel()], axis=-1)
    t = len(minutes)
    brightness = (0.25 + 0.75 * env)[:, None, None]
    sky = _SKY[None, None] * brightness * (0.8 + 0.2 * yy.ravel() / s)[None, :, None]
    r = sun_radius(s)
    d2 = (grid[None, :, 0] - sun_rc[0][:, None]) ** 2 + (grid[None, :, 1] - sun_rc[1][:, None]) ** 2
    sun = np.exp(-d2 / r ** 2)[:, :, None]
    img = sky + sun * (1 - sky)
    if clouds is not None:
        pos, sigma, alpha = clouds
        op = _opacity(np.broadcast_to(grid, (t,) + grid.shape), pos, sigma, alpha)[:, :, None]
        img = img * (1 - op) + _CLOUD[None, None] * (0.3 + 0.7 * env)[:, None, None] * op
    img = img * np.asarray(regime.tint)[None, None]
    img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return img.reshape(t, s, s, 3)


def generate_site(regime: SiteRegime) -> tuple[SiteDataset, list[DayLabel]]:
    """Render one site. Measurements exist every minute from sunrise to sunset
    inclusive, images every ``image_interval`` minutes."""
    length = regime.day_length_minutes
    minutes = np.arange(length + 1)
    env = clear_sky_envelope(minutes, length)
    sun_rc = sun_position(minutes, length, regime.image_size, regime.camera_rotation_deg)
    img_mask = minutes % regime.image_interval == 0
    r = sun_radius(regime.image_size)
    children = np.random.SeedSequence([regime.seed, zlib.crc32(regime.site_id.encode())]).spawn(regime.day_count)

    times, values, image_index, frames, labels = [], [], [], [], []
    n_frames = 0
    for d, child in enumerate(children):
        rng = np.random.default_rng(child)
        day = START_DAY + d
        cloudy = bool(rng.random() < regime.cloudy_day_prob)
        occ = np.ones(len(minutes))
        clouds = None
        if cloudy:
            clouds = _cloud_field(rng, regime, minutes)
            disk = np.stack([sun_rc[0], sun_rc[1]], axis=-1)[:, None, :] + r * _DISK[None]
            coverage = _opacity(disk, *clouds).mean(axis=1)
            occ = 1.0 - OCCLUSION_DEPTH * coverage
        noise = np.clip(rng.normal(size=len(minutes)), -3, 3)
        vals = regime.peak_scale * env * occ * (1 + regime.noise_sigma * noise)
        img_clouds = None if clouds is None else (clouds[0][img_mask], clouds[1], clouds[2])
        imgs = _render(regime, minutes[img_mask], env[img_mask], (sun_rc[0][img_mask], sun_rc[1][img_mask]), img_clouds)

        start = day * MINUTES_PER_DAY + MINUTES_PER_DAY // 2 - length // 2
        idx = np.full(len(minutes), -1, dtype=np.int64)
        idx[img_mask] = n_frames + np.arange(img_mask.sum())
        n_frames += int(img_mask.sum())
        times.append(start + minutes)
        values.append(vals)
        image_index.append(idx)
        frames.append(imgs)
        labels.append(DayLabel(day, "cloudy" if cloudy else "sunny"))

    meta = {"location": regime.site_id, "generator": regime.to_dict()}
    if regime.target_kind == "pv_power":
        meta["capacity_kw"] = regime.peak_scale
    ds = SiteDataset(
        regime.site_id,
        regime.target_kind,
        np.concatenate(times),
        np.concatenate(values),
        np.concatenate(image_index),
        np.concatenate(frames),
        meta,
    )
    return ds, labels


def write_site(ds: SiteDataset, labels: list[DayLabel], path) -> None:
    write_dataset(ds, path)
    with open(Path(path) / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("day,label\n")
        for lab in labels:
            fh.write(f"{day_to_iso(lab.day)},{lab.label}\n")


def read_labels(path) -> list[DayLabel]:
    out = []
    with open(Path(path) / "labels.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            day, label = line.strip().split(",")
            out.append(DayLabel(day_from_iso(day), label))
    return out
