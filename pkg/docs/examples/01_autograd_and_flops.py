# # A tape, a loss, and a FLOP bill
#
# The tensor module records every op on a tape while it runs, so gradients
# come from one backward sweep. A FLOP counter rides along and charges each
# op to whatever stage is open.

import numpy as np

from flasheval import tensor as T

rng = np.random.default_rng(0)

# Two leaves: a weight matrix and a bias. The input is a constant.

W = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
b = T.Tensor(np.zeros(3), requires_grad=True)
x = T.Tensor(rng.normal(size=(5, 4)))

with T.counting() as counter, T.Tape() as tape:
    with T.stage("scoring"):
        h = T.gelu(T.broadcast_add(T.matmul(x, W), b))
        loss = T.reduce_mean(T.mul(h, h))
tape.backward(loss)

print("loss", loss.item())
print("dL/db", b.grad)

# The matmul alone costs 2*m*k*n = 2*5*4*3 = 120; the rest is elementwise.

print("flops by stage", counter.stage_totals())
print("total", counter.total)

# A quick finite-difference look at one weight entry.

h_step = 1e-6
def value():
    z = x.data @ W.data + b.data
    from scipy.special import erf
    g = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    return float((g * g).mean())

W.data[1, 2] += h_step
up = value()
W.data[1, 2] -= 2 * h_step
down = value()
W.data[1, 2] += h_step
print("taped", W.grad[1, 2], "numeric", (up - down) / (2 * h_step))
