"""
Reverse-mode gradients and finite differences
=============================================

Build a small expression, backpropagate through it and compare the
result with central differences. Then run the full-model check.
"""

import numpy as np

from vqla import tensor as T
from vqla.tensor import Tensor
from vqla.train import grad_check, tiny_config

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)


def f(x):
    h = T.layer_norm(x @ w, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    return T.cross_entropy(T.gelu(h), [0, 3, 1])


loss = f(x)
loss.backward()
numeric = T.finite_difference_gradient(f, Tensor(x.data.copy()))
print("loss", loss.item())
print("relative error vs finite differences", T.relative_error(x.grad, numeric.data))

# %%
# The same comparison for every parameter of a tiny model, in 64 and 32 bit.
for dtype in ("float64", "float32"):
    report = grad_check(tiny_config(dtype=dtype))
    print(f"{dtype}: {len(report.errors)} groups, max error {report.max_error:.2e}, passed={report.passed}")
