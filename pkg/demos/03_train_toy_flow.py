"""Train a small flow network on synthetic pairs and look at what it learned.

Takes a few minutes on one CPU core. Pass a step count to shorten it:
    python3 demos/03_train_toy_flow.py 200
"""

import logging
import sys

import numpy as np

from flowlite.engine import Tensor
from flowlite.evaluation import aee, fl_rate, pearson
from flowlite.flowio import flow_to_color, write_color_png
from flowlite.network import ModelConfig, count_params, forward, predict
from flowlite.training import TrainConfig, confidence_target, downscale_flow, holdout_set, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

cfg = ModelConfig(variant="CMFD")
tc = TrainConfig(steps=steps, eval_every=max(steps // 5, 1), seed=0)
print("CMFD network with", count_params(cfg), "parameters, decoding levels", cfg.decoded_levels)

ckpt = train(cfg, tc)
params = ckpt.tensors(requires_grad=False)
samples = holdout_set(tc)

print("\nheld-out error before training: %.3f px" % ckpt.extra["init_holdout_aee"])
errors = [aee(predict(s.i1[None], s.i2[None], cfg, params), s.u_gt[None]) for s in samples]
print("held-out error after training:  %.3f px" % np.mean(errors))
print("Fl-all after training: %.2f%%" % (100 * np.mean(
    [fl_rate(predict(s.i1[None], s.i2[None], cfg, params), s.u_gt[None]) for s in samples])))

print("\nDoes the confidence map know where the flow is wrong?")
s = samples[0]
out = forward(Tensor(s.i1[None]), Tensor(s.i2[None]), cfg, params)
level = out["levels"][-1]
target = confidence_target(out["flows"][-1].data, downscale_flow(s.u_gt[None], level))
print("Pearson(confidence, exp(-EPE^2)) at level %d: %.3f" % (level, pearson(out["confidences"][-1].data, target)))

u = predict(s.i1[None], s.i2[None], cfg, params)
write_color_png("toy_flow_pred.png", flow_to_color(u, max_mag=8.0))
write_color_png("toy_flow_true.png", flow_to_color(s.u_gt[None], max_mag=8.0))
print("wrote toy_flow_pred.png and toy_flow_true.png")
