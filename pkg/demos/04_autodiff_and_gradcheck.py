"""The numpy autodiff core and a finite-difference check of the full model.

Tensors record their parents and a backward closure; ``backward`` walks
the graph in reverse topological order.  ``grad_check`` compares every
parameter gradient against central differences.
"""

import numpy as np

from specfuse import autodiff as ad
from specfuse.train import gradcheck_model, toy_config

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(2, 3, 6, 6)))
w = ad.Param(rng.normal(size=(4, 3, 3, 3)), "w")
b = ad.Param(np.zeros(4), "b")


def objective():
    y = ad.relu(ad.conv3x3(x, w, b))
    return ad.mean_all(ad.mul(y, y))


print("conv3x3 + relu max relative error:", f"{ad.grad_check(objective, [w, b], step=1e-5):.2e}")

q, k, v = (ad.Tensor(rng.normal(size=s), requires_grad=True) for s in [(5, 4), (3, 4), (3, 2)])
print("attention max relative error:",
      f"{ad.grad_check(lambda: ad.sum_all(ad.attention(q, k, v)), [q, k, v], step=1e-5):.2e}")

# backbone + unity head + semantic head + pyramid loss, float64
print("full model (2 levels) max relative error:", f"{gradcheck_model(toy_config(2)):.2e}")
