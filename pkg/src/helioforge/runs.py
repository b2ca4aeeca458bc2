"""Run directories: resolved config, ledger, one checkpoint per fold, ensemble
metadata and a manifest."""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Normalizer
from .models import SunsetConfig
from .training import EnsembleModel, TrainingLedger


class RunDirError(ValueError):
    pass


def fold_path(run_dir, fold: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"fold_{fold:02d}.ckpt"


def _dump(obj, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_run(run_dir, ensemble: EnsembleModel, ledger: TrainingLedger, config: dict, wall_time: float) -> Path:
    out = Path(run_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    _dump(config, out / "config.json")
    ledger.write_csv(out / "ledger.csv")
    for k, member in enumerate(ensemble.members):
        save_checkpoint(member, fold_path(out, k))
    _dump({
        "folds": len(ensemble.members),
        "site_ids": ensemble.site_ids,
        "normalizers": {s: n.to_dict() for s, n in ensemble.normalizers.items()},
        "model": ensemble.config.to_dict(),
    }, out / "ensemble.json")
    _dump({
        "helioforge_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "wall_time_s": round(wall_time, 3),
        "te_mean": ledger.te_mean,
        "te_std": ledger.te_std,
    }, out / "manifest.json")
    return out


def load_ensemble(run_dir) -> EnsembleModel:
    """Read the ensemble back; every fold checkpoint must be present and valid."""
    out = Path(run_dir)
    meta_path = out / "ensemble.json"
    if not meta_path.is_file():
        raise RunDirError(f"{out} is not a complete run directory (no ensemble.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = SunsetConfig.from_dict(meta["model"])
    members = []
    for k in range(meta["folds"]):
        path = fold_path(out, k)
        if not path.is_file():
            raise RunDirError(f"missing checkpoint for fold {k}: {path}")
        try:
            members.append(load_checkpoint(path, config))
        except CheckpointError as exc:
            raise RunDirError(f"fold {k}: {exc}") from exc
    normalizers = {s: Normalizer.from_dict(d) for s, d in meta["normalizers"].items()}
    return EnsembleModel(members, normalizers, list(meta["site_ids"]))
