# # Reverse-mode autodiff on numpy arrays
#
# Every op in `prefixmm.autodiff` records how to push gradients back to its
# inputs. Here we check one against finite differences, then fit a tiny
# linear model with AdamW.

import numpy as np

from prefixmm import autodiff as ad
from prefixmm.nn import Linear, Parameter
from prefixmm.optim import OptimizerState, adamw_step

rng = np.random.default_rng(0)

# ## Gradient check
# A scalar function of x: sum(softmax(x @ W) * R). The check compares the
# analytic gradient with central differences in float64.

W = ad.Tensor(rng.normal(size=(5, 3)))
R = ad.Tensor(rng.normal(size=(4, 3)))
f = lambda x: ad.tsum(ad.mul(ad.softmax(ad.matmul(x, W)), R))  # noqa: E731
x = ad.Tensor(rng.normal(size=(4, 5)))
print("max relative error:", ad.finite_difference_check(f, x))

# ## Fitting y = 3x - 1

xs = rng.uniform(-1, 1, size=(64, 1))
ys = 3 * xs - 1
layer = Linear(rng, 1, 1, dtype=np.float64)
layer.assign_names()  # optimizer moments are keyed by parameter name
opt = OptimizerState(weight_decay=0.0)
for step in range(300):
    pred = layer(ad.Tensor(xs))
    diff = ad.sub(pred, ad.Tensor(ys))
    loss = ad.tmean(ad.mul(diff, diff))
    loss.backward()
    adamw_step(layer.parameters(), opt, lr=0.05)
    layer.zero_grad()
print("weight %.3f  bias %.3f  loss %.2e" % (layer.weight.data[0, 0], layer.bias.data[0], loss.item()))

# ## Frozen parameters never receive a gradient

p = Parameter(np.ones(3), frozen=True)
out = ad.tsum(ad.mul(p, ad.Tensor(np.arange(3.0))))
out.backward()
print("frozen grad:", p.grad)
