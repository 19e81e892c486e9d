"""
Reverse-mode gradients and finite-difference checks
===================================================

Build a small expression, differentiate it, and compare against central
differences.
"""

import numpy as np

from rlm import autodiff as ad
from rlm.autodiff import Tensor
from rlm.gradcheck import run_suite

rng = np.random.default_rng(0)

# leaves that want gradients
W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))

# a one-layer tanh network scored by the norm of its output
loss = ad.l2_norm(ad.tanh(ad.add_row(ad.matmul(x, W), b)))
ad.backward(loss)
print("loss", loss.item())
print("dloss/db", b.grad)

# grad_check re-evaluates the closure with each entry nudged by +-eps
err = ad.grad_check(lambda: ad.l2_norm(ad.tanh(ad.add_row(ad.matmul(x, W), b))), [W, b])
print(f"worst relative error {err:.2e}")

###############################################################################
# The same machinery checks every cell and the full objective
for r in run_suite(cells=("lstm", "gru")):
    print(f"{r.component:<14} {r.error:.2e}")
