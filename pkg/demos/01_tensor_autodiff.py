"""A tour of the tensor engine: forward math, reverse-mode gradients,
and differentiating through a gradient.

Run:  python demos/01_tensor_autodiff.py
"""

import numpy as np

from fedmdcg import autograd as ag
from fedmdcg.autograd import Tensor

print("== building blocks ==")
x = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
w = Tensor(np.array([[0.3, -0.1, 0.8], [0.2, 0.9, -0.4]]), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)

logits = ag.linear(ag.relu(x), w, b)
print("relu(x) @ w.T + b ->", logits.data)

probs = ag.softmax(logits)
print("softmax           ->", probs.data, "(row sum:", probs.data.sum(), ")")

loss = -ag.gather_rows(ag.log_softmax(logits), np.array([1])).mean()
print("cross-entropy against class 1:", loss.item())

print("\n== backward pass ==")
loss.backward()
print("d loss / d w:\n", w.grad.data)
print("d loss / d x:", x.grad.data)

print("\n== checking against finite differences ==")
h = 1e-6
i = (0, 0)
orig = w.data[i]
w.data[i] = orig + h
up = (-ag.gather_rows(ag.log_softmax(ag.linear(ag.relu(x), w, b)),
                      np.array([1])).mean()).item()
w.data[i] = orig - h
dn = (-ag.gather_rows(ag.log_softmax(ag.linear(ag.relu(x), w, b)),
                      np.array([1])).mean()).item()
w.data[i] = orig
print(f"analytic {w.grad.data[i]:+.8f}  numeric {(up - dn) / (2 * h):+.8f}")

print("\n== gradient of a gradient ==")
# norm of the weight gradient, differentiated w.r.t. the input: the
# mechanism behind the gradient-inversion auditor
x.zero_grad()
inner = -ag.gather_rows(ag.log_softmax(ag.matmul(x, ag.permute(w, None))),
                        np.array([1])).mean()
gw = inner.grad_of([w], create_graph=True)[0]
outer = (gw * gw).sum()
outer.backward()
print("d ||dL/dw||^2 / d x:", x.grad.data)

print("\n== convolution and pooling ==")
img = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
kernel = Tensor(np.ones((1, 1, 2, 2)))
conv = ag.conv2d(img, kernel, Tensor(np.zeros(1)))
print("4x4 ramp . all-ones 2x2 kernel ->\n", conv.data[0, 0])
print("2x2 max pooling of the ramp   ->\n", ag.maxpool2(img).data[0, 0])
