"""``helioforge <generate|train|evaluate|reproduce>``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config, model_config, train_config
from .data import build_sample_index, fit_normalizer, make_samples, read_dataset
from .experiments import PROFILES, SUITES, prepare_site, run_suite, score, synthetic_sites, with_profile
from .partition import Partition, carve_test_days, day_block_folds
from .report import ResultRow, emit_report, read_results_csv
from .runs import RunDirError, load_ensemble, write_run
from .synthetic import SiteRegime, default_regimes, generate_site, write_site
from .training import TrainingLedger, TransferPlan, ensemble_predict, train_global, train_local, train_transfer

log = logging.getLogger("helioforge")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    if args.regime:
        try:
            regime = SiteRegime(**json.loads(Path(args.regime).read_text(encoding="utf-8")))
        except (OSError, TypeError, ValueError) as exc:
            raise UsageError(f"bad regime file {args.regime}: {exc}") from exc
    else:
        presets = default_regimes(args.seed)
        if args.preset not in presets:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(presets)}")
        regime = presets[args.preset]
    changes = {k: v for k, v in (("day_count", args.days), ("image_size", args.image_size)) if v is not None}
    if changes:
        try:
            regime = regime.replace(**changes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    out = Path(args.out)
    _prepare_out(out, args.force)
    ds, labels = generate_site(regime)
    write_site(ds, labels, out)
    print(f"wrote {ds.site_id}: {len(labels)} days, {len(ds.frames)} images -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_site(spec: str, cfg: dict):
    path = Path(spec)
    if path.is_dir():
        return read_dataset(path)
    presets = default_regimes(cfg["seed"], day_count=cfg["data"]["day_count"], image_size=cfg["data"]["image_size"])
    if spec in presets:
        return generate_site(presets[spec])[0]
    raise UsageError(f"site {spec!r} is neither a dataset directory nor a preset ({sorted(presets)})")


def _partition(ds, cfg: dict, index) -> Partition:
    data = cfg["data"]
    part = carve_test_days(ds, data.get("sunny_days"), data.get("cloudy_days"), data["n_sunny"], data["n_cloudy"],
                           index=index)
    part.folds = day_block_folds(part.dev_days, cfg["train"]["folds"], cfg["seed"], cyclic=True)
    return part


def _site_bundle(ds, cfg: dict):
    index = build_sample_index(ds, cfg["data"]["stride_minutes"])
    part = _partition(ds, cfg, index)
    norm = fit_normalizer(ds.measurements_on(part.dev_days), cfg["normalization_method"])
    return make_samples(ds, norm, cfg["data"]["stride_minutes"], index=index), part


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["output"])
    source = None
    if cfg["strategy"] == "transfer":
        src_dir = Path(cfg["source_checkpoints"])
        try:
            source = load_ensemble(src_dir)
        except RunDirError as exc:
            raise UsageError(f"config.source_checkpoints: {exc}") from exc
        if len(source.members) != cfg["train"]["folds"]:
            raise UsageError(f"config.source_checkpoints: {len(source.members)} folds, config asks for "
                             f"{cfg['train']['folds']}")
    specs = cfg["sites"] if cfg["strategy"] == "global" else [cfg.get("target_site", cfg["sites"][0])]
    datasets = [_load_site(s, cfg) for s in specs]

    start = time.time()
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    bundles = [_site_bundle(ds, cfg) for ds in datasets]
    if cfg["strategy"] == "local":
        samples, part = bundles[0]
        ensemble, ledger = train_local(samples, part, mcfg, tcfg, cfg["fraction_pct"], jobs=args.jobs)
    elif cfg["strategy"] == "global":
        ensemble, ledger = train_global(bundles, mcfg, tcfg, jobs=args.jobs)
    else:
        samples, part = bundles[0]
        plan = TransferPlan(source.members, cfg["transfer_strategy"], cfg["fraction_pct"])
        ensemble, ledger = train_transfer(plan, samples, part, mcfg, tcfg, jobs=args.jobs)
    write_run(out, ensemble, ledger, cfg, time.time() - start)
    (out / "partitions").mkdir(exist_ok=True)
    for ds, (_, part) in zip(datasets, bundles):
        _dump(part.to_dict(), out / "partitions" / f"{ds.site_id}.json")
    print(f"trained {len(ensemble.members)} folds; TE mean {ledger.te_mean:.6g}; run directory {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _row_from_csv(d: dict) -> ResultRow:
    from .metrics import EvaluationResult, ScaleDiagnostic

    f = float
    ev = EvaluationResult(f(d["rmse"]), f(d["rmse_sunny"]), f(d["rmse_cloudy"]), 0, 0, 0)
    scale = None
    if d.get("scale_factor"):
        scale = ScaleDiagnostic(f(d["scale_factor"]), f(d["rmse"]), f(d["rmse_scaled"]), f(d["pearson_r"]))
    return ResultRow(d["strategy"], d["source"], d["target"], f(d["fraction_pct"]), ev, f(d["te_mean"]),
                     f(d["te_std"]), scale)


def cmd_evaluate(args) -> int:
    run = Path(args.run_dir)
    try:
        ensemble = load_ensemble(run)
        cfg = json.loads((run / "config.json").read_text(encoding="utf-8"))
        ledger = TrainingLedger.read_csv(run / "ledger.csv")
    except (RunDirError, OSError, ValueError, KeyError) as exc:
        raise UsageError(f"incomplete run directory {run}: {exc}") from exc
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"test dataset {data} does not exist")
    ds = read_dataset(data)

    stride = cfg["data"]["stride_minutes"]
    index = build_sample_index(ds, stride)
    saved = run / "partitions" / f"{ds.site_id}.json"
    if saved.is_file():
        part = Partition.from_dict(json.loads(saved.read_text(encoding="utf-8")))
    else:
        part = carve_test_days(ds, n_sunny=cfg["data"]["n_sunny"], n_cloudy=cfg["data"]["n_cloudy"], index=index)
    offsite = ds.site_id not in ensemble.site_ids
    if offsite and args.offsite_normalizer == "own":
        if len(ensemble.normalizers) != 1:
            raise UsageError("--offsite-normalizer own needs a single-site ensemble")
        norm = next(iter(ensemble.normalizers.values()))
    elif offsite:
        norm = fit_normalizer(ds.measurements_on(part.dev_days), cfg["normalization_method"])
    else:
        norm = ensemble.normalizers[ds.site_id]
    samples = make_samples(ds, norm, stride, index=index).on_days(part.test_days)
    site = None
    if ensemble.config.condition_mode != "none":
        label = ensemble.site_ids.index(ds.site_id) if not offsite else 0
        site = [1.0 - label, float(label)]
    strategy = "offsite" if offsite else (cfg["transfer_strategy"] if cfg["strategy"] == "transfer"
                                          else cfg["strategy"])
    pred = ensemble_predict(ensemble, samples, site=site)
    row = score(ensemble, samples, part, strategy, "+".join(ensemble.site_ids), ds.site_id, cfg["fraction_pct"],
                ledger, with_scale=offsite, pred=pred)

    out = Path(args.out) if args.out else run / "evaluation"
    previous = [_row_from_csv(d) for d in read_results_csv(out / "results.csv")] if (out / "results.csv").is_file() else []
    plots = []
    for label, days in (("sunny", part.sunny_days), ("cloudy", part.cloudy_days)):
        if days:
            sel = samples.days == days[0]
            plots.append((f"{ds.site_id}_{label}_{days[0]}", (samples.t0[sel] + 15) % 1440, pred[sel],
                          samples.raw_target[sel]))
    emit_report(previous + [row], out, plots, units=ds.target_kind)
    e = row.evaluation
    print(f"{strategy} {row.source} -> {ds.site_id}: RMSE {e.rmse_overall:.6g} "
          f"(sunny {e.rmse_sunny:.6g}, cloudy {e.rmse_cloudy:.6g})")
    if row.scale:
        print(f"scale diagnostic: c*={row.scale.best_factor:.4g}, RMSE {row.scale.rmse_before:.6g} -> "
              f"{row.scale.rmse_after:.6g}, r={row.scale.pearson_r:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce


def cmd_reproduce(args) -> int:
    profile = PROFILES[args.profile]
    order = args.sites.split(",")
    if len(order) != 3:
        raise UsageError("--sites needs three comma-separated site ids")
    if args.data:
        root = Path(args.data)
        sites = {}
        for sid in order:
            if not (root / sid).is_dir():
                raise UsageError(f"{root / sid} not found; generate the three sites first")
            ds = read_dataset(root / sid)
            profile = with_profile(profile, image_size=ds.image_size)
            sites[sid] = prepare_site(ds, profile, args.seed)
    else:
        if set(order) != set(default_regimes()):
            raise UsageError("without --data the sites must be the three presets")
        generated = synthetic_sites(profile, args.seed)
        sites = {sid: generated[sid] for sid in order}
    rows = run_suite(args.suite, sites, profile, args.seed, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(rows, out, units="")
    _dump({"suite": args.suite, "seed": args.seed, "sites": order, "profile": profile.to_dict()},
          out / "reproduce.json")
    print(f"{args.suite}: {len(rows)} rows -> {out / 'results.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="helioforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic site dataset")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="site-S, site-P or site-D")
    src.add_argument("--regime", help="JSON file with generator regime fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--days", type=int, help="override the day count")
    g.add_argument("--image-size", type=int, help="override the image size")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an ensemble from a JSON experiment config")
    t.add_argument("config")
    t.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a run directory on a dataset's test days")
    e.add_argument("run_dir")
    e.add_argument("--data", required=True, help="test dataset directory")
    e.add_argument("--offsite-normalizer", choices=("own", "target"), default="target")
    e.add_argument("--out", help="report directory (default RUN_DIR/evaluation)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reproduce", help="run a synthetic-scale experiment grid")
    r.add_argument("--suite", choices=SUITES, required=True)
    r.add_argument("--data", help="directory holding one dataset per site id")
    r.add_argument("--sites", default="site-S,site-P,site-D",
                   help="first two are fused as the two-site source; the third is the transfer target")
    r.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="report")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
