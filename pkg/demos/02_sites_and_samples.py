"""Generate the three preset sites, then look at what the pipeline sees:
normalization factors, valid-sample counts and the auto-carved test days."""

from helioforge.data import METHODS, build_sample_index, day_to_iso, fit_normalizer
from helioforge.partition import carve_test_days
from helioforge.synthetic import default_regimes, generate_site

for site_id, regime in default_regimes(seed=0, day_count=30, image_size=16).items():
    ds, labels = generate_site(regime)
    index = build_sample_index(ds, stride_minutes=10)
    part = carve_test_days(ds, n_sunny=3, n_cloudy=3, index=index)
    cloudy = sum(lab.label == "cloudy" for lab in labels)
    print(f"{site_id}: {ds.target_kind}, {len(labels)} days ({cloudy} cloudy), {len(index)} samples")
    print("  test sunny ", [day_to_iso(d) for d in part.sunny_days])
    print("  test cloudy", [day_to_iso(d) for d in part.cloudy_days])
    values = ds.measurements_on(part.dev_days)
    for method in METHODS:
        n = fit_normalizer(values, method)
        print(f"  {method:12s} a={n.a:9.4g} b={n.b:9.4g}")
