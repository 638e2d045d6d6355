"""A tour of the tensor engine: gradients, convolution and bilinear warping."""

import numpy as np

from flowlite import engine as E
from flowlite.engine import ConvParams, Tensor
from flowlite.gradcheck import run_suite

rule = "-" * 60
rng = np.random.default_rng(0)

print("Tensors are rank-4 NCHW float32 arrays that remember how they were made.")
x = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
k = Tensor(rng.standard_normal((2, 3, 3, 3)) * 0.3, requires_grad=True)
y = E.leaky_relu(E.conv2d(x, ConvParams(k, E.zeros((1, 2, 1, 1)), stride=1, padding=1)))
print("conv2d + leaky_relu:", x.shape, "->", y.shape)

E.backward(E.sum_all(E.square(y)))
print("after backward, x.grad has shape", x.grad.shape, "and kernel grad norm %.3f" % np.linalg.norm(k.grad))
print(rule)

print("upsample2x uses half-pixel centres, so a ramp [0, 1, 2, 3] becomes")
ramp = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 1, 4))
print(E.upsample2x(ramp).data[0, 0, 0])
print(rule)

print("grid_sample reads each pixel at x + offset. A shift of +1 column:")
img = Tensor(np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4))
shift = np.zeros((1, 2, 3, 4), dtype=np.float32)
shift[:, 0] = 1.0
print(img.data[0, 0])
print("zeros padding\n", E.grid_sample(img, Tensor(shift), padding="zeros").data[0, 0])
print("border padding\n", E.grid_sample(img, Tensor(shift), padding="border").data[0, 0])
print(rule)

print("Every differentiable op is checked against central finite differences:")
for r in run_suite(seed=0):
    print("  %-22s %s  max rel error %.2e" % (r.name, "PASS" if r.passed else "FAIL", r.max_rel_error))
