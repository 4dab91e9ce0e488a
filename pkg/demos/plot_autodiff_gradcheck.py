"""
Checking gradients of the numpy autodiff engine
================================================

Every layer of the segmentation network is built from a handful of
differentiable primitives. Here we take a small expression, backpropagate
through it, and compare against central differences.
"""

import numpy as np

from dust import autodiff as ad
from dust.autodiff import Tensor
from dust.gradcheck import grad_check, max_relative_error

# a convolution followed by a softmax over channels and a log
rng = np.random.default_rng(0)
x = rng.standard_normal((1, 2, 6, 6))
w = rng.standard_normal((3, 2, 3, 3))
b = rng.standard_normal(3)


def f(x, w, b):
    return ad.log(ad.softmax(ad.conv2d(x, w, b, padding=1), axis=1))


print("output shape:", f(Tensor(x), Tensor(w), Tensor(b)).shape)
print("max relative error:", max_relative_error(f, [x, w, b]))

# each named primitive can be checked on its own random input
for name in ["conv_transpose2d", "bilinear_upsample", "max_pool2d", "instance_norm"]:
    print(f"{name:>18}: {grad_check(name):.2e}")
