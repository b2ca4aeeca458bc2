"""Tape autodiff on a tiny SUNSET model: compare tape gradients with central
differences and print the worst relative error per parameter tensor."""

import numpy as np

from helioforge import autodiff as ad
from helioforge.gradcheck import gradcheck
from helioforge.models import SunsetConfig, build_model, dropout_streams, forward

rng = np.random.default_rng(0)
cfg = SunsetConfig(image_size=8, conv_filters=(3, 4), fc_width=6)
params = build_model(cfg, seed=0)
images = rng.uniform(0, 1, size=(2, 3 * cfg.frames, 8, 8))
lags = rng.uniform(0, 1, size=(2, cfg.lag_len))
target = rng.normal(size=(2, 1))

names = params.trainable_names()
# zero-initialized biases can put a ReLU input exactly on its kink, where
# central differences average the two one-sided slopes; move them off zero
for n in names:
    if n.endswith(".bias"):
        params[n].data += rng.uniform(-0.1, 0.1, size=params[n].shape)
report = gradcheck(
    lambda *_: ad.mse_loss(forward(params, images, lags, mode="train", rngs=dropout_streams(cfg, 1)), target),
    [params[n] for n in names],
)
for name, err in zip(names, report.max_rel_error):
    print(f"{name:24s} {err:.2e}")
print(report)
