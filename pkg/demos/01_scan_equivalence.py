"""
A linear state-space layer, three ways
======================================

The same discretized SSM can be run as a recurrence, as a causal
convolution with the kernel K_j = C A_d^j B_d, or as an associative scan over
affine maps. All three agree to roundoff.
"""

import numpy as np

from tempomamba import checks, ssm
from tempomamba.numerics import Tensor, make_rng

rng = make_rng(0)

# a random stable 4-state system, discretized by zero-order hold
params = ssm.discretize_zoh(checks.stable_ssm(rng, 4))
x = rng.normal(size=64)

y_rec = ssm.scan_sequential(params, x)
y_conv = ssm.conv_kernel_apply(params, x)
print("recurrence vs convolution, max |diff|:", np.max(np.abs(y_rec - y_conv)))

# the first few kernel taps decay like the eigenvalues of A_d
print("kernel:", np.round(ssm.conv_kernel(params, 6), 4))

###############################################################################
# The diagonal case is what the selective scan uses. Each state coordinate is
# a scalar recurrence h_t = a_t h_{t-1} + b_t, and pairs (a, b) compose
# associatively, so a work-efficient prefix scan gives the same answer.

a = rng.uniform(0.5, 1.0, size=(4096, 8))
b = rng.normal(size=(4096, 8))
seq = ssm.scan_affine_sequential(a, b)
par = ssm.scan_parallel(a, b)
print("sequential vs Blelloch scan, max rel diff:", np.max(np.abs(seq - par)) / np.max(np.abs(seq)))

###############################################################################
# The selective scan makes B, C and the step size functions of the input.
# Per token it still runs an exact ZOH step, now with a per-token step size.

sel = ssm.init_selective(channels=4, state_size=8, rng=rng)
tokens = rng.normal(size=(32, 4))
out = ssm.selective_scan(sel, Tensor(tokens))
print("selective scan output:", out.shape)
