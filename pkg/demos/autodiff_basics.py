"""Tour of the autodiff engine: tapes, gradients, a tiny Adam loop.

Run: python3 demos/autodiff_basics.py
"""

import numpy as np

from tempex import autodiff as ad
from tempex.autodiff import Tensor

# gradients through a small expression
x = Tensor(np.array([[0.3, -1.2], [2.0, 0.1]]), requires_grad=True)
with ad.Tape():
    y = ad.tsum(ad.sigmoid(ad.mul(x, x)))
    y.backward()
print("dy/dx:\n", x.grad)

# check against central finite differences
h = 1e-5
fd = np.zeros_like(x.data)
for idx in np.ndindex(*x.shape):
    for sign in (1, -1):
        p = x.data.copy()
        p[idx] += sign * h
        fd[idx] += sign * float(np.sum(1 / (1 + np.exp(-(p * p)))))
fd /= 2 * h
print("max |analytic - fd|:", np.abs(x.grad - fd).max())

# minimize a quadratic bowl with Adam
w = Tensor(np.array([3.0]), requires_grad=True)
opt = ad.Adam([w], lr=0.05)
for step in range(500):
    with ad.Tape():
        loss = ad.tsum(ad.mul(w, w))
        loss.backward()
    opt.step()
    opt.zero_grad()
print("after 500 Adam steps on w^2, |w| =", float(np.abs(w.data[0])))

# a tape is single-use; rebuilding per step keeps recurrent graphs honest
try:
    with ad.Tape() as tape:
        z = ad.tsum(ad.mul(w, w))
        z.backward()
        z.backward()
except ad.TapeError as e:
    print("expected:", e)
