"""A tour of the reverse-mode autodiff engine.

The whole training stack rests on one class: ``Tensor`` wraps a numpy array,
records the operations applied to it, and replays them backwards to fill in
``.grad``.  This script builds a few graphs by hand and checks the engine
against central finite differences — the same cross-check the test suite
runs over every operator.

Run:  python3 demos/01_autodiff.py
"""

import numpy as np

from microseg import tensor as T
from microseg.tensor import Tensor, backward, no_grad

rng = np.random.default_rng(0)

# -- 1. scalars first: d(x*y + y^2)/dx = y, /dy = x + 2y ------------------------------

x = Tensor(np.float64(3.0), requires_grad=True)
y = Tensor(np.float64(2.0), requires_grad=True)
z = x * y + y ** 2.0
z.backward()
print("dz/dx =", x.grad, "(expect 2.0)")
print("dz/dy =", y.grad, "(expect 7.0)")

# -- 2. a small MLP layer, gradients against finite differences -----------------------

w = Tensor(rng.standard_normal((4, 8)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
inputs = Tensor(rng.standard_normal((16, 8)))


def layer_loss(w_, b_):
    hidden = T.gelu(T.linear(inputs, w_, b_))
    return (hidden ** 2.0).mean()


err = T.check_gradients(layer_loss, (w, b))
print(f"\nlinear+gelu layer: max relative error vs finite differences "
      f"= {err:.2e}")

# -- 3. the same machinery drives convolution, pooling, attention primitives ----------

image = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
kernel = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.2, requires_grad=True)
feat = T.avg_pool2d(T.conv2d(image, kernel, stride=1, padding=1), 2)
loss = (T.softmax(feat.reshape(1, -1), axis=1) ** 2.0).sum()
loss.backward()
print("\nconv -> pool -> softmax graph:")
print("  image.grad shape  ", image.grad.shape)
print("  kernel.grad shape ", kernel.grad.shape)
print("  kernel.grad norm   %.4f" % np.linalg.norm(kernel.grad))

# -- 4. backward() as a module function returns a name -> grad map --------------------

params = {"w": w, "b": b}
w.zero_grad()
b.zero_grad()
grads = backward(layer_loss(w, b), params)
print("\nbackward(loss, params) keys:", sorted(grads))
print("  |dL/dw| =", np.abs(grads["w"]).sum().round(4))

# -- 5. no_grad(): forward passes without graph building ------------------------------

with no_grad():
    silent = T.gelu(T.linear(inputs, w, b)).mean()
print("\nunder no_grad(): result %.4f, requires_grad=%s"
      % (float(silent.data), silent.requires_grad))
