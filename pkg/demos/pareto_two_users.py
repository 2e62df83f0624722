"""Trace the two-user rate front by sweeping the weights.

Uses the experiment harness directly with a 0.05 weight step (19 points)
and prints each weight pair with the rates it produced; the flagged rows
are the most balanced point and the one with the largest total.
"""

import warnings

from mcuapa import bench

warnings.filterwarnings("ignore", message="initial point misses")

cfg = bench.parse_config("""
[scenario]
n = 2
m = 2
seed = 3
[experiment]
kind = pareto
weight_step = 0.05
""")
header, rows = bench.cmd_pareto(cfg)
col = {name: k for k, name in enumerate(header)}
print(" w0    rate0 Mbit/s  rate1 Mbit/s")
for r in rows:
    flag = " balanced" if r[col["balanced"]] else ""
    flag += " max-total" if r[col["max_total"]] else ""
    if r[col["status"]] != "ok":
        print(f"{float(r[col['w0']]):.2f}  {r[col['status']]}")
        continue
    print(f"{float(r[col['w0']]):.2f}  {float(r[col['rate0_bps']]) / 1e6:12.1f}"
          f"  {float(r[col['rate1_bps']]) / 1e6:12.1f}{flag}")
