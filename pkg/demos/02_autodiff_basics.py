"""The tensor engine in five minutes.

Builds a tiny convolutional regression from raw ops, checks one gradient
against finite differences, and fits it with Adam.
"""

import numpy as np

from vce import tensor as T
from vce.tensor import Adam, Tensor

rng = np.random.default_rng(0)

# gradients flow through closures recorded on the tape
a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
loss = T.tsum(a * a)
loss.backward()
print("d(sum a^2)/da =\n", a.grad)          # 2a

# finite-difference spot check on conv2d
x = Tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32))
w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
T.tsum(T.conv2d(x, w)).backward()
h = 1e-3
w.data[0, 0, 1, 1] += h
up = float(T.tsum(T.conv2d(x, w)).data)
w.data[0, 0, 1, 1] -= 2 * h
dn = float(T.tsum(T.conv2d(x, w)).data)
w.data[0, 0, 1, 1] += h
print(f"conv grad  analytic {w.grad[0, 0, 1, 1]:+.4f}  fd {(up - dn) / (2 * h):+.4f}")

# fit a fixed 3x3 blur kernel by gradient descent
true_w = np.full((1, 1, 3, 3), 1 / 9, np.float32)
xs = rng.normal(size=(16, 1, 8, 8)).astype(np.float32)
ys, _ = T._corr2d(xs, true_w)
west = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
opt = Adam([west], lr=0.05)
for step in range(200):
    pred = T.conv2d(Tensor(xs), west)
    loss = T.mean((pred - Tensor(ys)) * (pred - Tensor(ys)))
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  mse {float(loss.data):.6f}")
print("recovered kernel (should be ~1/9 everywhere):\n", west.data[0, 0].round(3))
