"""
Gradients on a tape
===================

Every model in this package is written against a small reverse-mode
autodiff layer. This walk-through records a few operations, pulls
gradients back through them and checks them against finite differences.
"""

import numpy as np

from tjstg.tensor import Tape, Tensor, backward, grad_check, js_divergence, ops, softmax

###############################################################################
# Leaves carry a name; that name keys the gradient dictionary.
x = Tensor(np.array([1.0, 2.0, 3.0]), name="x")
w = Tensor(np.array([[0.5], [-1.0], [0.25]]), name="w")

with Tape() as tape:
    y = ops.sum(ops.mul(ops.tanh(ops.matmul(ops.reshape(x, (1, 3)), w)), 2.0))

grads = backward(tape, y)
print("y =", y.item())
print("dy/dx =", grads["x"])
print("dy/dw =", grads["w"].ravel())

###############################################################################
# ``grad_check`` perturbs each coordinate by +-eps and reports the largest
# relative disagreement with the analytic gradient.
err = grad_check(lambda: ops.sum(ops.mul(ops.tanh(ops.matmul(ops.reshape(x, (1, 3)), w)), 2.0)),
                 {"x": x, "w": w})
print(f"finite-difference relative error: {err:.2e}")

###############################################################################
# Softmax outputs are probability vectors, and the Jensen-Shannon divergence
# between two of them is symmetric and bounded by ln 2.
p = softmax(np.array([2.0, 0.0, -1.0]))
q = softmax(np.array([-1.0, 0.0, 2.0]))
print("p =", np.round(p.data, 4), "sum", p.data.sum())
print("JS(p, q) =", js_divergence(p, q).item(), " JS(q, p) =", js_divergence(q, p).item())
print("ln 2     =", np.log(2))
