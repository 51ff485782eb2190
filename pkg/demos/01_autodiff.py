#!/usr/bin/env python3
"""Tour of the tensor engine: building blocks, backward pass, gradient checks.

Run:  python3 demos/01_autodiff.py
"""

import numpy as np

from nvl import tensor as T
from nvl.tensor import Tensor

print("== forward values ==")
a = Tensor([[1.0, 2.0]])
b = Tensor([[3.0], [4.0]])
print("matmul [[1,2]]x[[3],[4]]      ->", T.matmul(a, b).item())        # 11
print("sigmoid(0)                    ->", T.sigmoid(Tensor(0.0)).item())  # 0.5
print("l2norm([3,4])                 ->", T.l2norm(Tensor([3.0, 4.0])).item())  # 5

print("\n== reverse mode ==")
w = Tensor([1.0, 2.0], requires_grad=True)
loss = T.sum_(T.square(w))          # d/dw sum(w^2) = 2w
loss.backward()
print("grad of sum(w^2) at [1,2]     ->", w.grad)

# Gradient accumulation: a second backward pass adds on top.
w.zero_grad()
loss = T.sum_(w)
loss.backward(retain_graph=True)
loss.backward()
print("two backward passes on sum(w) ->", w.grad, "(doubled ones)")

print("\n== finite-difference check on a composite expression ==")
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
m = Tensor(rng.standard_normal((3, 2)), requires_grad=True)


def forward():
    h = T.tanh(T.matmul(x, m))
    return T.l2norm(T.sigmoid(h) * h)


value = forward()
value.backward()
analytic = x.grad.copy()

step = 1e-5
numeric = np.zeros_like(x.data)
for i in range(x.shape[0]):
    for j in range(x.shape[1]):
        keep = x.data[i, j]
        x.data[i, j] = keep + step
        with T.no_grad():
            up = forward().item()
        x.data[i, j] = keep - step
        with T.no_grad():
            down = forward().item()
        x.data[i, j] = keep
        numeric[i, j] = (up - down) / (2 * step)

rel = np.max(np.abs(numeric - analytic)) / np.max(np.abs(numeric))
print(f"max relative error vs central differences: {rel:.2e}  (expect < 1e-6)")
