"""
Linear scan versus quadratic attention
======================================

Times the selective scan and full softmax attention over growing sequence
lengths and fits the log-log slope. The command-line ``bench`` does the same
with more lengths and writes a plot.
"""

import numpy as np

from tempomamba.cli import _median_time, bench_workloads, fit_slope
from tempomamba.numerics import make_rng

rng = make_rng(0)
lengths = [256, 512, 1024, 2048, 4096]
scan_t, attn_t = [], []
for L in lengths:
    scan, attn = bench_workloads(L, rng)
    scan_t.append(_median_time(scan, 3))
    attn_t.append(_median_time(attn, 3))
    print(f"L={L:5d}  scan {scan_t[-1] * 1e3:8.2f} ms   attention {attn_t[-1] * 1e3:8.2f} ms")

print(f"scan slope      {fit_slope(lengths, scan_t):.2f}   (linear is 1)")
print(f"attention slope {fit_slope(lengths, attn_t):.2f}   (quadratic is 2)")
