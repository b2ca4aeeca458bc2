"""Train a local ensemble per preset site (smoke profile), apply each one
offsite, and show how much of the offsite error a single scale factor removes.

The smoke profile trains for two epochs so the script finishes in about a
minute; its numbers are not meaningful. Swap in ``PROFILES["desk"]`` for the
comparison the acceptance suite makes (several minutes per site)."""

from helioforge.experiments import PROFILES, local_offsite_global, synthetic_sites

profile = PROFILES["smoke"]
sites = synthetic_sites(profile, seed=0)
rows, _, _ = local_offsite_global(sites, profile, seed=0)
for r in rows:
    line = f"{r.strategy:8s} {r.source:14s} -> {r.target:7s} RMSE {r.evaluation.rmse_overall:9.4g}"
    if r.scale:
        line += f"   x{r.scale.best_factor:.3f} -> {r.scale.rmse_after:9.4g} (r={r.scale.pearson_r:.3f})"
    print(line)
