"""
Reverse-mode differentiation on numpy arrays
============================================

Tensors record the operations applied to them; ``backward`` walks that
record in reverse and accumulates gradients into the leaves.
"""

# %%
import numpy as np

from cxrnet import functional as F
from cxrnet.gradcheck import grad_check, kink_margin
from cxrnet.tensor import Tensor, no_grad

# %% [markdown]
# A two-layer computation. Every op returns a new Tensor that remembers its inputs.

# %%
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
w = Tensor(rng.standard_normal((3, 2)).astype(np.float32), requires_grad=True)
b = Tensor(np.zeros(2, np.float32), requires_grad=True)

h = F.relu(F.dense(x, w, b))
loss = F.mean(F.mul(h, h))
loss.backward()
print("loss", float(loss.data))
print("dL/dw\n", w.grad)
first = w.grad.copy()

# %% [markdown]
# Gradients accumulate until cleared, the way a training loop expects.

# %%
h = F.relu(F.dense(x, w, b))
F.mean(F.mul(h, h)).backward()
print("second pass doubled the gradient:", np.allclose(w.grad, 2 * first))
w.grad = b.grad = None

# %% [markdown]
# Inside ``no_grad`` nothing is recorded, so the output has no history.

# %%
with no_grad():
    y = F.dense(x, w, b)
print("recorded under no_grad:", y.node is not None)

# %% [markdown]
# Central differences confirm the analytic gradient. ReLU and max-pool have
# kinks, so the checker also reports how far the point sits from the nearest one.

# %%
xs = Tensor((0.5 * rng.standard_normal((1, 2, 6, 6))).astype(np.float32), requires_grad=True)
ws = Tensor((0.3 * rng.standard_normal((3, 2, 3, 3))).astype(np.float32), requires_grad=True)
f = lambda x, w: F.maxpool2d(F.relu(F.conv2d(x, w, stride=1)), 3, 2)
print("distance to nearest kink:", kink_margin(f(xs, ws)))
report = grad_check(f, [xs, ws], tol=1e-3)
print(f"max relative error {report.max_rel_error:.2e} passed={report.passed}")
