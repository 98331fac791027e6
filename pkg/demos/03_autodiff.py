"""Tape mechanics on small tensors, and a gradient check of a conv layer
against central finite differences."""

import numpy as np

from featref import Tape, Tensor
from featref import autodiff as ad

# gradients accumulate additively into every participating tensor
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
with Tape() as tape:
    loss = ad.sum_all(ad.mul(x, x))   # sum of squares
    tape.backward(loss)
print(f"d(sum x^2)/dx = {x.grad}   (expect 2x = {2 * x.data})")

# without an active tape the same calls are plain forward compute
y = ad.relu(Tensor(np.array([-1.0, 0.5])))
print(f"eval-mode relu: {y.data}, grad slot: {y.grad}")

# a second backward on the same tape accumulates on top
x.zero_grad()
with Tape() as tape:
    loss = ad.sum_all(x)
    tape.backward(loss)
    tape.backward(loss)
print(f"two backward passes double the gradient: {x.grad}")

# finite-difference check of conv2d, double precision
rng = np.random.default_rng(0)
x0 = rng.standard_normal((1, 1, 5, 5))
w0 = rng.standard_normal((1, 1, 3, 3))
b0 = rng.standard_normal(1)


def forward(w_arr):
    return float(ad.conv2d(Tensor(x0), Tensor(w_arr), Tensor(b0), "same").data.sum())


wt = Tensor(w0, requires_grad=True)
with Tape() as tape:
    tape.backward(ad.sum_all(ad.conv2d(Tensor(x0), wt, Tensor(b0), "same")))

h = 1e-5
worst = 0.0
flat = w0.reshape(-1)
for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + h
    fp = forward(w0)
    flat[i] = orig - h
    fm = forward(w0)
    flat[i] = orig
    numeric = (fp - fm) / (2 * h)
    analytic = wt.grad.reshape(-1)[i]
    worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-6))
print(f"conv2d kernel gradient vs central differences: worst rel err {worst:.2e}")
