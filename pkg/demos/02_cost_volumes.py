"""Cost volumes and the two learned amendments: modulation and flow deformation."""

import numpy as np

from flowlite import engine as E
from flowlite.cost_volume import auto_correlation, channel_index, correlation, num_channels
from flowlite.deformation import deform_flow
from flowlite.engine import Tensor
from flowlite.modulation import ModulationTensors, modulate

rule = "-" * 60
rng = np.random.default_rng(1)

print("A search radius of 2 gives a 5x5 window, one channel per displacement.")
print("radius 2 ->", num_channels(2), "channels; displacement (dx=1, dy=-2) is channel", channel_index(1, -2, 2))

f1 = rng.standard_normal((1, 64, 12, 12)).astype(np.float32)
f2 = np.roll(f1, shift=2, axis=3)  # content moves two columns right
cost = correlation(Tensor(f1), Tensor(f2), radius=2).data
best = cost[0, :, 4:-4, 4:-4].argmax(axis=0)
print("where f2 is f1 shifted right by 2, the best displacement channel is", np.unique(best),
      "=", channel_index(2, 0, 2))
print(rule)

print("Auto-correlation measures self-similarity; its centre channel is the feature energy.")
ca = auto_correlation(Tensor(f1), radius=1).data
print("centre channel vs mean squared feature:", ca[0, 4, 0, 0], (f1[0, :, 0, 0] ** 2).mean())
print(rule)

print("Modulation rewrites every cost with alpha * c + beta. With alpha = 1, beta = 0 nothing changes:")
c = Tensor(cost)
same = modulate(c, ModulationTensors(E.full(c.shape, 1.0), E.zeros(c.shape)))
print("max change:", np.abs(same.data - cost).max())
print(rule)

print("Flow deformation replaces a bad vector with one borrowed from a nearby pixel.")
flow = np.zeros((1, 2, 6, 6), dtype=np.float32)
flow[:, 0] = 2.0
flow[:, :, :, 3] = 9.0  # a wrong column
d = np.zeros_like(flow)
d[:, 0, :, 3] = -1.0  # look one column to the left
fixed = deform_flow(Tensor(flow), Tensor(d)).data
print("row before:", flow[0, 0, 2])
print("row after: ", fixed[0, 0, 2])
