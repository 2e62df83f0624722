"""Solve one 10-user, 5-mBS instance and compare with proximity association.

Run with ``python demos/single_solve.py``. Prints the association found by
the joint solver, the per-user rates and the proximity baseline for the
same association cap.
"""

import warnings

import numpy as np

from mcuapa.baselines import pop_ua_pa
from mcuapa.model import InstanceConfig
from mcuapa.pipeline import mcua_pa
from mcuapa.scenario import (ChannelParams, FadingModel, build_scenario, generate_placement,
                             user_rates)

warnings.filterwarnings("ignore", message="initial point misses")

placement = generate_placement(m=5, n=10, area_side_m=100.0, seed=42)
scn = build_scenario(ChannelParams(), placement, FadingModel("exponential_unit_mean", 42))
cfg = InstanceConfig.equal(scn.n, max_assoc=2)

rep = mcua_pa(scn, cfg)
print(f"status {rep.status}, CCP stopped after {rep.trace.outer_iterations} "
      f"iterations ({rep.trace.stop_reason}), recovery {rep.recovery}")
print("association (users x mBSs):")
print(rep.solution.x.astype(int))
print("rates, Mbit/s:", np.round(rep.rates / 1e6, 1))
print(f"QoS met: {rep.qos_met}")

# same cap, every user on its nearest mBSs, powers optimized
pop = pop_ua_pa(scn, cfg, L=2)
pop_total = float(user_rates(scn, pop.x, pop.p).sum())
print(f"total rate: joint {rep.total_rate / 1e9:.3f} Gbit/s, "
      f"proximity {pop_total / 1e9:.3f} Gbit/s")
