"""End-to-end acceptance checks, one test per criterion. Each test records a
PASS/FAIL line that is printed in the pytest terminal summary."""

import time
import xml.etree.ElementTree as ET
from collections import defaultdict

import numpy as np
import pytest

from helioforge import autodiff as ad
from helioforge.autodiff import Tape, Tensor
from helioforge.cli import main
from helioforge.data import METHODS, fit_normalizer, make_samples, build_sample_index
from helioforge.experiments import PROFILES, Profile, local_offsite_global, prepare_site, synthetic_sites, \
    transfer_sweep
from helioforge.gradcheck import gradcheck
from helioforge.metrics import delta_rmse_pct, training_effort
from helioforge.models import SunsetConfig, build_model, dropout_streams, forward, param_groups
from helioforge.optim import AdamState, adam_step
from helioforge.partition import day_block_folds
from helioforge.synthetic import SiteRegime, default_regimes, generate_site
from helioforge.training import (
    EnsembleModel, TrainConfig, ensemble_predict, train_fold, train_local, transfer_init,
)

from oracles import batch_stats_two_pass, conv2d_direct, corrupt, matmul_naive, maxpool_scan, mse_direct, \
    sample_index_oracle

RESULTS = []


def record(n, name, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} - {detail} ({elapsed:.1f}s of {budget:.0f}s)"
    RESULTS.append(line)
    print(line)
    return ok


def t(a, track=False):
    return Tensor(np.asarray(a, dtype=np.float64), track_grad=track)


def test_criterion_1_gradcheck():
    start = time.time()
    rng = np.random.default_rng(0)
    reports = {}
    x = t(rng.uniform(-1, 1, size=(2, 3, 6, 6)), True)
    w = t(rng.uniform(-1, 1, size=(2, 3, 3, 3)), True)
    b = t(rng.uniform(-1, 1, size=2), True)
    proj = t(rng.uniform(-1, 1, size=(2, 2, 6, 6)))
    reports["conv2d"] = gradcheck(lambda x, w, b: ad.sum(ad.mul(ad.conv2d(x, w, b), proj)), [x, w, b])
    g, be = t(rng.uniform(0.5, 1.5, size=3), True), t(rng.uniform(-1, 1, size=3), True)
    h = t(rng.uniform(-1, 1, size=(3, 3, 4, 4)), True)
    proj = t(rng.uniform(-1, 1, size=(3, 3, 4, 4)))
    reports["batchnorm2d"] = gradcheck(lambda h, g, be: ad.sum(ad.mul(ad.batchnorm2d(
        h, g, be, np.zeros(3), np.ones(3), "train", update_stats=False), proj)), [h, g, be])
    p = t(rng.uniform(-1, 1, size=(2, 2, 4, 4)), True)
    proj = t(rng.uniform(-1, 1, size=(2, 2, 2, 2)))
    reports["maxpool2"] = gradcheck(lambda p: ad.sum(ad.mul(ad.maxpool2(p), proj)), [p])
    xd, wd, bd = t(rng.normal(size=(4, 5)), True), t(rng.normal(size=(5, 3)), True), t(rng.normal(size=3), True)
    proj = t(rng.normal(size=(4, 3)))
    reports["dense"] = gradcheck(lambda x, w, b: ad.sum(ad.mul(ad.dense(x, w, b), proj)), [xd, wd, bd])
    r = t(rng.uniform(-1, 1, size=(5, 4)) + 0.05, True)
    proj = t(rng.normal(size=(5, 4)))
    reports["relu"] = gradcheck(lambda r: ad.sum(ad.mul(ad.relu(r), proj)), [r])
    m, y = t(rng.normal(size=(6, 1)), True), rng.normal(size=(6, 1))
    reports["mse_loss"] = gradcheck(lambda m: ad.mse_loss(m, y), [m])

    cfg = SunsetConfig(image_size=8, conv_filters=(3, 4), fc_width=6, dropout_rate=0.4)
    params = build_model(cfg, 0)
    images, lags = rng.uniform(0, 1, size=(2, 24, 8, 8)), rng.uniform(0, 1, size=(2, 8))
    target = rng.normal(size=(2, 1))
    names = params.trainable_names()
    for n in names:  # off the ReLU kink that zero biases can create
        if n.endswith(".bias"):
            params[n].data += rng.uniform(-0.1, 0.1, size=params[n].shape)
    reports["sunset"] = gradcheck(lambda *_: ad.mse_loss(
        forward(params, images, lags, mode="train", rngs=dropout_streams(cfg, 7)), target), [params[n] for n in names])
    worst = {k: max(rep.max_rel_error) for k, rep in reports.items()}
    ok = all(rep.passed for rep in reports.values())
    assert record(1, "gradcheck", ok, "max rel error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()),
                  time.time() - start, 60)


def test_criterion_2_oracles():
    start = time.time()
    rng = np.random.default_rng(1)
    worst = defaultdict(float)

    def dim():
        return int(rng.integers(1, 9))

    for _ in range(200):
        n, c, f, hh, ww = dim(), dim(), dim(), dim(), dim()
        x, w, b = rng.normal(size=(n, c, hh, ww)), rng.normal(size=(f, c, 3, 3)), rng.normal(size=f)
        worst["conv2d"] = max(worst["conv2d"], np.max(np.abs(ad.conv2d(t(x), t(w), t(b)).data - conv2d_direct(x, w, b))))
        a, m = rng.normal(size=(n, c)), rng.normal(size=(c, f))
        out = ad.dense(t(a), t(m), t(np.zeros(f))).data
        worst["dense"] = max(worst["dense"], np.max(np.abs(out - matmul_naive(a, m))))
        xp = rng.normal(size=(n, c, 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))))
        worst["maxpool2"] = max(worst["maxpool2"], np.max(np.abs(ad.maxpool2(t(xp)).data - maxpool_scan(xp))))
        p, q = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        worst["mse"] = max(worst["mse"], abs(float(ad.mse_loss(t(p), q).data) - mse_direct(p, q)))
        xb = rng.normal(size=(max(n, 2), c, hh, ww))
        mean, var = batch_stats_two_pass(xb)
        bn = ad.batchnorm2d(t(xb), t(np.ones(c)), t(np.zeros(c)), np.zeros(c), np.ones(c), "train",
                            update_stats=False).data
        expected = (xb - mean[None, :, None, None]) / np.sqrt(np.maximum(var, 1e-5))[None, :, None, None]
        worst["batchnorm2d"] = max(worst["batchnorm2d"], np.max(np.abs(bn - expected)))
    ok = all(v <= 1e-10 for v in worst.values())
    assert record(2, "oracle equivalence", ok, "200 instances, max abs diff "
                  + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), time.time() - start, 30)


def test_criterion_3_pipeline():
    start = time.time()
    problems = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        days = sorted(rng.choice(np.arange(18_000, 18_500), size=int(rng.integers(10, 80)), replace=False).tolist())
        k = int(rng.integers(2, 11))
        folds = day_block_folds(days, k, seed)
        vals = [d for f in folds for d in f.val_days]
        sizes = [len(f.val_days) for f in folds]
        if sorted(vals) != days or max(sizes) - min(sizes) > 1 or sizes != sorted(sizes, reverse=True):
            problems.append(f"folds seed {seed}")
        if any(set(f.train_days) & set(f.val_days) or sorted(f.train_days + f.val_days) != days for f in folds):
            problems.append(f"fold overlap seed {seed}")
        if [f.val_days for f in day_block_folds(days[::-1], k, seed)] != [f.val_days for f in folds]:
            problems.append(f"fold determinism seed {seed}")
    for seed in range(50):
        rng = np.random.default_rng(seed)
        regime = SiteRegime(f"c{seed}", "irradiance", 1000.0, 0.5, day_count=5, day_length_minutes=120, image_size=4,
                            seed=seed)
        ds = corrupt(generate_site(regime)[0], rng)
        stride = int(rng.integers(1, 4))
        if build_sample_index(ds, stride).t0.tolist() != sample_index_oracle(ds, stride):
            problems.append(f"sample index seed {seed}")
    x = np.random.default_rng(0).uniform(0, 1000, size=10_000)
    for method in METHODS:
        n = fit_normalizer(x, method)
        if np.max(np.abs(n.denormalize(n.normalize(x)) - x)) > 1e-9 * np.max(x):
            problems.append(f"round trip {method}")
    mx = fit_normalizer(np.array([0.0, 12.0, 30.0, 29.5]), "max")
    z = np.random.default_rng(3).normal(size=4000)
    ms = fit_normalizer(301 + 270 * (z - z.mean()) / z.std(), "mean_std")
    if mx.b != 30 or abs(ms.a - 301) > 1e-9 or abs(ms.b - 270) > 1e-9:
        problems.append("normalizer factors")
    assert record(3, "pipeline invariants", not problems, "; ".join(problems) or
                  "100 fold sweeps, 50 corrupted indices, 8 round trips, factors max=30 a=301 b=270",
                  time.time() - start, 60)


def _site_split(image_size=32, days=8, seed=0):
    profile = Profile("t", day_count=days, image_size=image_size, n_sunny=1, n_cloudy=1, stride_minutes=20, folds=2)
    regime = default_regimes(seed, day_count=days, image_size=image_size)["site-S"]
    bundle = prepare_site(generate_site(regime)[0], profile, seed)
    fold = bundle.partition.folds[0]
    return bundle, bundle.samples.on_days(fold.train_days), bundle.samples.on_days(fold.val_days)


def test_criterion_4_transfer_contracts():
    start = time.time()
    cfg = SunsetConfig.test_profile()
    _, train, val = _site_split()
    source = build_model(cfg, 11)
    ws, frozen_ws = transfer_init(source, "WS")
    ws_ok = not frozen_ws and all(ws[n].data.tobytes() == source[n].data.tobytes() for n in source)
    init, frozen = transfer_init(source, "FConv")
    tcfg = TrainConfig(learning_rate=1e-3, batch_size=16, patience=10, max_epochs=5)
    out, ledger = train_fold(train, val, init, tcfg, frozen=frozen)
    conv = param_groups(source, "conv")
    conv_ok = set(frozen) == set(conv) and all(out[n].data.tobytes() == source[n].data.tobytes() for n in conv)
    changed = [n for n in param_groups(source, "fc") if not np.array_equal(out[n].data, source[n].data)]
    ok = ws_ok and conv_ok and changed and ledger.epochs_run >= 5
    assert record(4, "transfer contracts", ok, f"WS bitwise {ws_ok}; FConv {ledger.epochs_run} epochs, "
                  f"{len(conv)} conv tensors (incl. BN stats) unchanged {conv_ok}, {len(changed)} fc tensors changed",
                  time.time() - start, 300)


def test_criterion_5_training_effort():
    start = time.time()
    bundle, _, _ = _site_split(image_size=8, days=10)
    _, ledger = train_local(bundle.samples, bundle.partition, SunsetConfig.test_profile(image_size=8),
                            TrainConfig(batch_size=16, max_epochs=3, patience=1, folds=2))
    exact = all(f.te == f.epochs_run * f.train_size and isinstance(f.te, int) for f in ledger.folds)
    a, b = training_effort(11.8, 85_278), training_effort(9.6, 438_172)
    table = f"{a / 1e6:.2f}" == "1.01" and f"{b / 1e6:.2f}" == "4.21"
    assert record(5, "training effort", exact and table,
                  f"ledger TE {[f.te for f in ledger.folds]}; 11.8x85278={a:.1f}, 9.6x438172={b:.1f}",
                  time.time() - start, 60)


def test_criterion_6_overfit():
    start = time.time()
    regime = default_regimes(0, day_count=4)["site-P"]
    ds = generate_site(regime)[0]
    samples = make_samples(ds, fit_normalizer(ds.values[ds.has_value], "std"), 2)
    idx = np.sort(np.random.default_rng(0).choice(len(samples), 64, replace=False))
    images, lags, _, target = samples.batch(idx)
    cfg = SunsetConfig.test_profile(dropout_rate=0.0)
    params = build_model(cfg, 0)
    names = params.trainable_names()
    state = AdamState(learning_rate=3e-3)
    mse, epoch = float("inf"), 0
    # full-batch steps: BatchNorm batch statistics equal the population ones,
    # so the eval-mode MSE tracks the training loss
    for epoch in range(1, 501):
        with Tape() as tape:
            tape.watch(*(params[n] for n in names))
            loss = ad.mse_loss(forward(params, images, lags, mode="train"), target)
        tape.backward(loss)
        adam_step({n: params[n].data for n in names}, {n: params[n].grad for n in names}, state)
        mse = float(np.mean((forward(params, images, lags).data - target) ** 2))
        if mse < 1e-3:
            break
    assert record(6, "overfit 64 samples", mse < 1e-3, f"MSE {mse:.2e} after {epoch} epochs",
                  time.time() - start, 300)


@pytest.mark.slow
def test_criterion_7_directional_replication():
    start = time.time()
    profile = PROFILES["desk"]
    runs = defaultdict(list)
    for seed in range(3):
        sites = synthetic_sites(profile, seed)
        rows, _, (fused, _) = local_offsite_global(sites, profile, seed)
        rows += transfer_sweep(sites, {"site-S+site-P": fused}, "site-D", profile, seed, [10])
        for r in rows:
            runs[(r.strategy, r.source, r.target, r.fraction_pct)].append(r)
    mean = {k: float(np.mean([r.evaluation.rmse_overall for r in v])) for k, v in runs.items()}
    ids = ("site-S", "site-P", "site-D")
    own = {s: mean[("local", s, s, 100)] for s in ids}
    a = {(s, d): mean[("offsite", s, d, 100)] > own[d] for s in ids for d in ids if s != d}
    scale = {}
    for s, d in (("site-S", "site-D"), ("site-D", "site-S")):
        rs = runs[("offsite", s, d, 100)]
        scale[(s, d)] = float(np.mean([r.scale.rmse_after for r in rs]) / np.mean([r.scale.rmse_before for r in rs]))
    base = mean[("local", "site-D", "site-D", 10)]
    c = {st: delta_rmse_pct(mean[(st, "site-S+site-P", "site-D", 10)], base) for st in ("WS", "FConv")}
    d = {s: mean[("global", "site-S+site-P", s, 100)] / own[s] - 1 for s in ("site-S", "site-P")}
    ok_a, ok_b = all(a.values()), all(v <= 0.7 for v in scale.values())
    ok_c, ok_d = all(v < 0 for v in c.values()), all(abs(v) <= 0.15 for v in d.values())
    detail = (f"(a) own<offsite {sum(a.values())}/6 {'ok' if ok_a else 'FAIL'}; "
              f"(b) after/before {', '.join(f'{s[-1]}->{t[-1]} {v:.2f}' for (s, t), v in scale.items())} "
              f"{'ok' if ok_b else 'FAIL'}; (c) dRMSE% WS {c['WS']:.1f} FConv {c['FConv']:.1f} "
              f"{'ok' if ok_c else 'FAIL'}; (d) global vs local S {100 * d['site-S']:+.1f}% "
              f"P {100 * d['site-P']:+.1f}% {'ok' if ok_d else 'FAIL'}")
    assert record(7, "directional replication", ok_a and ok_b and ok_c and ok_d, detail, time.time() - start, 2700)


def test_criterion_8_affine_commutation():
    start = time.time()
    bundle, _, _ = _site_split(image_size=8, days=6)
    test = bundle.samples.on_days(bundle.partition.test_days)
    members = [build_model(SunsetConfig.test_profile(image_size=8), s) for s in range(4)]
    worst = {}
    for method in METHODS:
        norm = fit_normalizer(bundle.dataset.measurements_on(bundle.partition.dev_days), method)
        samples = make_samples(bundle.dataset, norm, 20).on_days(bundle.partition.test_days)
        ens = ensemble_predict(EnsembleModel(members, {"site-S": norm}, ["site-S"]), samples)
        each = [ensemble_predict(EnsembleModel([m], {"site-S": norm}, ["site-S"]), samples) for m in members]
        worst[method] = float(np.max(np.abs(ens - np.mean(each, axis=0))) / max(1.0, np.max(np.abs(ens))))
    ok = len(test) > 0 and all(v <= 1e-12 for v in worst.values())
    assert record(8, "ensemble affine commutation", ok,
                  "max rel diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), time.time() - start, 60)


def test_criterion_9_reproduce_determinism(tmp_path):
    start = time.time()
    outputs = []
    for run in ("a", "b"):
        assert main(["reproduce", "--suite", "fig10", "--profile", "smoke", "--out", str(tmp_path / run)]) == 0
        outputs.append((tmp_path / run / "results.csv").read_bytes())
    n_rows = outputs[0].count(b"\n") - 1
    svg = ET.parse(tmp_path / "a" / "delta_rmse_vs_fraction.svg").getroot()
    curves = [len(c.get("points").split()) for c in svg.iter("{http://www.w3.org/2000/svg}polyline")]
    shape_ok = curves == [7] * 4
    assert record(9, "reproduce determinism", outputs[0] == outputs[1] and shape_ok,
                  f"fig10 results.csv {len(outputs[0])} bytes, {n_rows} rows, identical {outputs[0] == outputs[1]}; "
                  f"{len(curves)} delta curves with {curves[0] if curves else 0} fractions each",
                  time.time() - start, 1800)
