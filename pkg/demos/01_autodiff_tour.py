"""A short tour of the numpy autodiff core.

Builds a tiny expression, backpropagates through it and compares the
analytic gradient with central differences.
"""

import numpy as np

from lavender import tensor as T
from lavender.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# a two-layer perceptron on four points
x = Tensor(rng.normal(size=(4, 3)))
w1 = T.parameter(rng.normal(size=(3, 5)), name="w1")
w2 = T.parameter(rng.normal(size=(5, 2)), name="w2")

logits = T.matmul(T.gelu(T.matmul(x, w1)), w2)
loss = T.nll_loss(logits, np.array([0, 1, 1, 0]))
loss.backward()
print("loss", loss.item())
print("dL/dw2 row 0", w2.grad[0])

# every op ships its own backward; grad_check is the referee
def f(w):
    return T.nll_loss(T.matmul(T.gelu(T.matmul(x, w)), Tensor(w2.data)), np.array([0, 1, 1, 0]))

print("relative error on w1:", grad_check(f, w1.data, eps=1e-6))

# masked softmax: the additive mask sends future positions to exactly zero weight
mask = np.triu(np.full((4, 4), T.MASK_VALUE), 1)
attn = T.softmax(Tensor(rng.normal(size=(4, 4))), mask)
print(np.round(attn.data, 3))
