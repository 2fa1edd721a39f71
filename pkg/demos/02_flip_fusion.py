"""
Four scan orders over a video
=============================

A video (T, C, H, W) becomes a token sequence by reading frames in order and
pixels in raster order inside each frame. Reversing time, reversing space, or
both gives the other three orders. Running one shared block on all four
flipped copies, flipping back and summing, makes the block see every token
from both temporal and both spatial directions.
"""

import numpy as np

from tempomamba import temporal_mamba as tm
from tempomamba import video_scan as vs
from tempomamba.numerics import make_rng

T, H, W = 2, 2, 3
ids = np.arange(T * H * W).reshape(T, 1, H, W).astype(float)

for order in vs.ScanOrder:
    tokens, _ = vs.flatten(vs.flip(ids, int(order)))
    print(f"{order.name:28s}", tokens.data[:, 0].astype(int))

# the flips form a group: applying i then j is flip i XOR j
table = [[vs.compose_flips(i, j) for j in range(4)] for i in range(4)]
print("composition table:\n", np.array(table))

###############################################################################
# A freshly built block is the identity, since its output projection starts
# at zero. Give it random weights to see it do something.

rng = make_rng(1)
block = tm.MambaBlock(tm.BlockConfig(channels=3, state_size=4), rng)
video = rng.normal(size=(4, 3, 6, 6))
print("identity at init:", np.array_equal(block(video).data, video))

block = tm.MambaBlock(tm.BlockConfig(channels=3, state_size=4), rng, zero_init_out=False)
block.theta_frame.data[:] = 0.1   # a uniform border keeps the block flip-equivariant
for j in range(1, 4):
    gap = np.max(np.abs(block(vs.flip(video, j)).data - vs.flip(block(video).data, j)))
    print(f"flip {j}: f(flip(x)) vs flip(f(x)) max |diff| = {gap:.1e}")

###############################################################################
# The learnable border is a one-pixel ring around each frame. It marks where
# one frame ends and the next begins in the flattened sequence.

padded = vs.pad_frames(video, block.theta_frame)
print("padded frame shape:", padded.shape[2:], "ring pixels:", int(vs.ring_mask(8, 8).sum()))
