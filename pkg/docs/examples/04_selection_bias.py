# # Shifts that a softmax cannot see
#
# Observed rewards are r_k = u_k + mu + nu_k + eps_k. A shift mu common to
# every list moves a pointwise regression target but leaves a softmax over
# the lists untouched. The oracles put numbers on that.

import numpy as np

from flasheval.rng import generator
from flasheval.synthgen import BiasSpec, apply_ssb, softmax_np
from flasheval.theory import SsbInstance, ssb_bias_ind, ssb_bias_joint_exact_kl, ssb_bias_joint_quadratic

inst = SsbInstance(delta_mu=0.5, delta_nu=np.array([0.2, -0.2]), p=np.array([0.5, 0.5]))
print("pointwise excess risk", ssb_bias_ind(inst))
print("listwise excess risk ", ssb_bias_joint_quadratic(inst.delta_nu, inst.p))

# A single biased draw. The distortion nu always sums to zero.

u = np.array([0.4, -0.1, 1.3, 0.0])
draw = apply_ssb(u, BiasSpec(mu_mean=1.0, nu_std=0.3), generator(0, "demo"))
print("mu", draw.mu, "sum of nu", draw.nu.sum())
print("softmax of u     ", softmax_np(u).round(4))
print("softmax of u + mu", softmax_np(u + draw.mu).round(4))

# For a small distortion the exact KL and the quadratic form agree.

nu_train = 1e-3 * np.array([1.0, -2.0, 0.5, 0.5])
print("exact", ssb_bias_joint_exact_kl(u, nu_train, np.zeros(4)),
      "quadratic", ssb_bias_joint_quadratic(nu_train, softmax_np(u)))
