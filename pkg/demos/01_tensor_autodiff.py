"""A tour of the tensor engine: forward ops, the tape, and gradient checking.

Builds a few small tensors, runs arithmetic through the differentiable ops,
replays the tape backward, and finishes by comparing an analytic gradient
against central finite differences.
"""

import numpy as np

from dualstage import tensor as T
from dualstage.gradcheck import grad_check
from dualstage.tensor import Tape, Tensor, backward

# --- forward arithmetic -----------------------------------------------------
a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), dtype=np.float64)
b = Tensor(np.array([[0.5, -1.0], [2.0, 0.0]]), dtype=np.float64)

print("a @ b            =", T.matmul(a, b).data.tolist())
print("softmax(rows(a)) =", np.round(T.softmax_lastdim(a).data, 4).tolist())
print("gelu(a)          =", np.round(T.gelu(a).data, 4).tolist())

# masks use exact -inf, so masked softmax entries are exactly zero
masked = T.softmax_lastdim(Tensor(np.array([2.0, -np.inf, 0.5])))
print("masked softmax   =", masked.data.tolist(), "(middle entry exactly 0)")

# --- reverse mode ------------------------------------------------------------
# loss = mean((x * x) + 3x); expected gradient (2x + 3) / n
x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True, dtype=np.float64)
with Tape() as tape:
    loss = T.mean_all(T.add(T.mul(x, x), T.scale(x, 3.0)))
backward(loss, tape)
print("\nloss             =", float(loss.data))
print("autodiff grad    =", x.grad.tolist())
print("expected grad    =", ((2 * x.data + 3) / x.data.size).tolist())

# --- finite-difference verification ------------------------------------------
q = Tensor(np.array([[2.0, 0.3], [0.3, 1.0]]), dtype=np.float64)
w = Tensor(np.array([[0.7], [-0.2]]), requires_grad=True, dtype=np.float64)


def quadratic_form():
    return T.mean_all(T.matmul(T.matmul(T.transpose(w), q), w))


report = grad_check(quadratic_form, [("w", w)], step=1e-5)
print(f"\ngrad check on w^T Q w: max relative error {report.max_rel_error:.2e}")
