"""Watch the convex-concave procedure climb.

Runs the relaxation alone on a 10 x 5 instance and prints the surrogate
objective per outer iteration for both forms of the rate constraint.
The exact form keeps the association inside the rate constraint; the
dropped form lets the rate constraint ignore it, which makes the
relaxation loose (see the README).
"""

import warnings

from mcuapa.ccp import CcpSettings, run_ccp
from mcuapa.model import InstanceConfig
from mcuapa.scenario import ChannelParams, FadingModel, build_scenario, generate_placement

warnings.filterwarnings("ignore", message="initial point misses")

placement = generate_placement(m=5, n=10, seed=7)
scn = build_scenario(ChannelParams(), placement, FadingModel("exponential_unit_mean", 7))
cfg = InstanceConfig.equal(scn.n, enforce_qos=False)
W = scn.params.bandwidth_hz

for form in ("exact", "dropped"):
    point, trace = run_ccp(scn, cfg, CcpSettings(rate_form=form))
    print(f"{form} form: {trace.stop_reason} after {trace.outer_iterations} iterations")
    for it in trace.iterations:
        print(f"  k={it.k:3d}  W*sum(u) = {W * it.sum_u_norm / 1e6:9.2f} Mbit/s  "
              f"newton steps {it.newton_iters}")
