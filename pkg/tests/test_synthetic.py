import filecmp

import numpy as np
import pytest

from helioforge.data import MINUTES_PER_DAY, fit_normalizer
from helioforge.synthetic import (
    SiteRegime, clear_sky_envelope, default_regimes, generate_site, read_labels, sun_position, write_site,
)


def small(**kw):
    base = dict(site_id="x", target_kind="pv_power", peak_scale=30.0, cloudy_day_prob=0.5, day_count=4,
                day_length_minutes=120, image_size=16, seed=1)
    base.update(kw)
    return SiteRegime(**base)


def minute_of_day(ds, length):
    return ds.times % MINUTES_PER_DAY - (MINUTES_PER_DAY // 2 - length // 2)


class TestEnvelope:
    def test_values(self):
        assert clear_sky_envelope(0, 480) == 0
        assert clear_sky_envelope(240, 480) == 1
        m = np.arange(481)
        np.testing.assert_allclose(clear_sky_envelope(m, 480), clear_sky_envelope(480 - m, 480), atol=1e-15)
        assert np.all(clear_sky_envelope(m, 480) >= 0)


class TestRegime:
    def test_invalid(self):
        with pytest.raises(ValueError):
            small(peak_scale=0)
        with pytest.raises(ValueError):
            small(tint=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            small(cloudy_day_prob=1.5)

    def test_presets(self):
        r = default_regimes()
        assert r["site-P"].cloudy_day_prob > r["site-S"].cloudy_day_prob >= r["site-D"].cloudy_day_prob
        assert r["site-D"].tint[2] < r["site-D"].tint[0]
        assert r["site-S"].target_kind == "pv_power" and r["site-S"].peak_scale == 30
        assert r["site-P"].peak_scale == 1000 and r["site-D"].peak_scale == 1000


class TestGenerate:
    def test_layout(self):
        regime = small()
        ds, labels = generate_site(regime)
        assert len(labels) == regime.day_count
        assert len(ds) == regime.day_count * (regime.day_length_minutes + 1)
        assert ds.has_value.all()
        assert ds.has_image.sum() == regime.day_count * (regime.day_length_minutes // 2 + 1)
        assert ds.frames.shape[1:] == (16, 16, 3)

    def test_bounds_and_boundaries(self):
        regime = small(cloudy_day_prob=0.5)
        ds, _ = generate_site(regime)
        m = minute_of_day(ds, regime.day_length_minutes)
        assert np.all(ds.values[(m == 0) | (m == regime.day_length_minutes)] == 0)
        assert ds.values.max() <= regime.peak_scale * (1 + 3 * regime.noise_sigma)

    def test_clear_days_follow_envelope(self):
        regime = small(cloudy_day_prob=0.0)
        ds, labels = generate_site(regime)
        assert all(lab.label == "sunny" for lab in labels)
        env = clear_sky_envelope(minute_of_day(ds, regime.day_length_minutes), regime.day_length_minutes)
        inside = env > 0
        ratio = ds.values[inside] / (regime.peak_scale * env[inside])
        # occlusion is exactly 1: only the clipped multiplicative noise remains
        assert np.all(np.abs(ratio - 1) <= 3 * regime.noise_sigma + 1e-12)

    def test_sunny_days_in_mixed_site_unoccluded(self):
        regime = small(cloudy_day_prob=0.5, day_count=8)
        ds, labels = generate_site(regime)
        env = clear_sky_envelope(minute_of_day(ds, regime.day_length_minutes), regime.day_length_minutes)
        day = ds.times // MINUTES_PER_DAY
        sunny = np.isin(day, [lab.day for lab in labels if lab.label == "sunny"]) & (env > 0)
        cloudy = np.isin(day, [lab.day for lab in labels if lab.label == "cloudy"]) & (env > 0)
        assert sunny.any() and cloudy.any()
        ratio = ds.values / np.where(env > 0, regime.peak_scale * env, 1)
        assert np.all(np.abs(ratio[sunny] - 1) <= 3 * regime.noise_sigma + 1e-12)
        assert ratio[cloudy].min() < 1 - 3 * regime.noise_sigma

    def test_sun_on_arc(self):
        regime = small(cloudy_day_prob=0.0, image_size=32, day_count=1)
        ds, _ = generate_site(regime)
        m = minute_of_day(ds, regime.day_length_minutes)
        for i in np.flatnonzero(ds.has_image)[5:-5:7]:
            img = ds.image_at(i).astype(float).sum(axis=-1)
            r, c = np.unravel_index(np.argmax(img), img.shape)
            er, ec = sun_position(m[i], regime.day_length_minutes, regime.image_size)
            assert np.hypot(r - er, c - ec) <= 2

    def test_deterministic_bytes(self, tmp_path):
        regime = small(day_count=2)
        for name in ("a", "b"):
            write_site(*generate_site(regime), tmp_path / name)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        images = sorted(p.name for p in (tmp_path / "a" / "images").iterdir())
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "images", tmp_path / "b" / "images", images,
                                               shallow=False)
        assert not mismatch and not errors
        assert (tmp_path / "a" / "measurements.csv").read_bytes() == (tmp_path / "b" / "measurements.csv").read_bytes()

    def test_seed_matters(self):
        a, _ = generate_site(small(seed=1))
        b, _ = generate_site(small(seed=2))
        assert not np.array_equal(a.values, b.values)

    def test_labels_file(self, tmp_path):
        ds, labels = generate_site(small(day_count=3))
        write_site(ds, labels, tmp_path / "s")
        assert read_labels(tmp_path / "s") == labels
        assert (tmp_path / "s" / "labels.csv").read_text().splitlines()[0] == "day,label"


class TestPresetStatistics:
    @pytest.fixture(scope="class")
    @classmethod
    def sites(cls):
        regimes = default_regimes(0, day_count=30, image_size=8)
        return {k: generate_site(r)[0] for k, r in regimes.items()}

    def test_max_factors_show_scale_gap(self, sites):
        s = fit_normalizer(sites["site-S"].values, "max").b
        p = fit_normalizer(sites["site-P"].values, "max").b
        assert abs(s - 30) <= 30 * 0.03
        assert abs(p - 1000) <= 1000 * 0.03
        assert p / s > 30

    def test_cloudy_site_skews_low(self, sites):
        def normalized_median(ds):
            v = ds.values[ds.values > 0]
            return np.median(fit_normalizer(v, "max").normalize(v))

        assert normalized_median(sites["site-P"]) < normalized_median(sites["site-S"])

    def test_dusty_tint(self, sites):
        def blue_to_red(ds):
            frames = ds.frames.astype(float)
            return frames[..., 2].mean() / frames[..., 0].mean()

        assert blue_to_red(sites["site-D"]) < 0.7 * blue_to_red(sites["site-S"])
