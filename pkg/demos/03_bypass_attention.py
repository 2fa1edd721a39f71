"""
Low-rank bypass attention
=========================

The frozen attention score map is X W_Q W_K^T X^T. The bypass replaces the
d x d middle matrix by a rank-k product, starting from its truncated SVD, and
mixes the two score maps with a weight phi. Only the two d x k factors train.
"""

import numpy as np

from tempomamba import bypass_attention as ba
from tempomamba.numerics import make_rng

rng = make_rng(0)
d = 32
base = ba.AttnParams.random(d, rng)

print(" k   relative error of the rank-k factorization")
for k in (1, 4, 8, 12, 16, 24, 31):
    print(f"{k:2d}   {ba.factor_error(base, ba.svd_init(base, k), relative=True):.3f}")

###############################################################################
# At phi = 1 the output is the base attention bit for bit; at phi = 0 only the
# low-rank map is used.

x = rng.normal(size=(10, d))
for phi in (0.0, 0.5, 1.0):
    bp = ba.svd_init(base, 8, phi=phi)
    gap = np.max(np.abs(ba.mixed_attention(x, x, x, base, bp).data - ba.attention(x, x, x, base).data))
    print(f"phi={phi}: max |mixed - base| = {gap:.3e}")

###############################################################################
# Parameter budget per attention layer: 2dk trainable numbers against 2d^2
# for tuning W_Q and W_K directly.

audit = ba.param_audit(320, 12)
print(f"d=320, k=12: {audit.trainable} trainable vs {audit.full_tune} ({100 * audit.ratio:.2f}%)")

low, full = ba.map_costs(256, 256, 12, rng)
print(f"score-map multiplies at L=256: {low:,} low-rank vs {full:,} full ({100 * low / full:.1f}%)")

###############################################################################
# Random projections roughly preserve inner products, which is why a rank-k
# bilinear form can stand in for the full one.

res = ba.jl_verify(512, 256, 0.9, 500, rng)
print(f"projection check, 500 trials: failure rate {res.failure_rate:.3f} (bound {res.bound:.3f})")
