"""Tour of the tensor core: values, tapes, gradients, and the FD oracle.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from margindecomp.tensor import (
    GradTape,
    Tensor,
    backward,
    elementwise,
    finite_diff_grad,
    matmul,
    mul,
    relu,
    sum_reduce,
)

# Tensors are immutable float64 arrays; construction copies and freezes.
x = Tensor([[1.0, -2.0], [3.0, 0.5]])
print("tensor:", x.shape, x.tolist())

# Primitive operations are plain functions; without a tape they just compute.
print("relu:", relu(x).tolist())
print("dispatcher:", elementwise("sum-reduce", x, axis=1).tolist())

# With a tape they record themselves for one reverse pass.
tape = GradTape()
v = tape.watch(Tensor([3.0]))
loss = mul(v, v, tape=tape)  # f(v) = v^2
grads = backward(tape, loss)
print("d(v^2)/dv at 3:", grads[v.uid].tolist(), "(expect 6)")

# The classic sanity cross-check: reverse mode vs central differences.
w = Tensor(np.asarray([[0.4, -0.7, 1.1], [0.2, 0.9, -0.3]]))


def f(inp: Tensor, tape=None) -> Tensor:
    h = relu(matmul(inp, w, tape=tape), tape=tape)
    return sum_reduce(mul(h, h, tape=tape), tape=tape)


point = Tensor([[0.8, -0.6]])
tape = GradTape()
p = tape.watch(point)
auto = backward(tape, f(p, tape))[p.uid].data
fd = finite_diff_grad(f, point).data
print("autodiff:", np.round(auto, 6).tolist())
print("fin diff:", np.round(fd, 6).tolist())
print("max abs difference:", float(np.abs(auto - fd).max()))

# Tapes are single-use; a second backward pass is an error.
try:
    backward(tape, f(p, tape))
except Exception as err:
    print("second backward ->", type(err).__name__, str(err))
