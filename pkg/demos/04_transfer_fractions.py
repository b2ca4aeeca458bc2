"""Transfer a site-S ensemble to site-D with weight sharing (WS) and frozen
convolutions (FConv) over a few data fractions, against local baselines.

The smoke profile trains for two epochs so the script finishes in about a
minute; its numbers are not meaningful. Swap in ``PROFILES["desk"]`` for the
comparison the acceptance suite makes (several minutes per site)."""

from helioforge.experiments import PROFILES, local_models, synthetic_sites, transfer_sweep
from helioforge.report import delta_table

profile = PROFILES["smoke"]
sites = synthetic_sites(profile, seed=0)
source, _ = local_models({"site-S": sites["site-S"]}, profile, seed=0)["site-S"]
rows = transfer_sweep(sites, {"site-S": source}, "site-D", profile, seed=0, fractions=[10, 50, 100])
for strategy, src, target, fraction, delta in delta_table(rows):
    print(f"{strategy:5s} {src} -> {target} at {fraction:5.0f}%: dRMSE {delta:+7.2f}%")
