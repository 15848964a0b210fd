"""
Reverse-mode gradients with the tape
====================================

Every learnable piece of the estimator is built from a small set of
differentiable array operations. This script records a computation on a
:class:`~sliceprof.tensorcore.Tape`, pulls gradients back, and compares them
with central differences.
"""
import numpy as np

from sliceprof import tensorcore as tc
from sliceprof.tensorcore import Tensor

rng = np.random.default_rng(0)

##############################################################################
# A 1D valid convolution followed by a softmax and a weighted sum.

x = Tensor(rng.standard_normal((1, 2, 12)), requires_grad=True)
w = Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
proj = rng.standard_normal(10)

with tc.Tape() as tape:
    y = tc.softmax(tc.reshape(tc.conv1d_valid(x, w), (10,)))
    loss = tc.sum(tc.mul(y, proj))
gx, gw = tc.backward(tape, loss, [x, w])
print("loss", loss.item())

##############################################################################
# Central differences on the kernel agree to many digits.


def f(kernel):
    out = tc.softmax(tc.reshape(tc.conv1d_valid(x, Tensor(kernel)), (10,)))
    return float(np.sum(out.data * proj))


h = 1e-5
fd = np.zeros(w.shape)
for idx in np.ndindex(w.shape):
    up, down = w.data.copy(), w.data.copy()
    up[idx] += h
    down[idx] -= h
    fd[idx] = (f(up) - f(down)) / (2 * h)
print("max |analytic - numeric|:", np.abs(gw - fd).max())

##############################################################################
# Adam with L2 decay and norm clipping are plain functions on arrays.

state = tc.AdamState.zeros_like(w)
(clipped,) = tc.clip_grad_norm([gw], 1.0)
w2, state = tc.adam_step(w, clipped, state, lr=2e-4, weight_decay=0.05)
print("step count", state.t, "update norm", np.linalg.norm(w2.data - w.data))

##############################################################################
# Spectral normalization divides a weight by its largest singular value,
# estimated by power iteration.

m = rng.standard_normal((8, 8))
_, _, sigma = tc.spectral_normalize(Tensor(m), rng.standard_normal(8), 200)
print("power iteration sigma", sigma, "svd", np.linalg.svd(m, compute_uv=False)[0])
