# %% [markdown]
# # Bounds on a small ReLU network
#
# Four numbers for the same question, min f(x) over an l-inf ball, from loosest
# to exact: the plain backward bound, the optimized dual bound, the LP
# relaxation and the exact minimum from region enumeration.

# %%
import numpy as np

from biccos.model import InputSpec, PropertySpec, canonicalize, random_network
from biccos.oracle.encoding import lp_relaxation_bound
from biccos.oracle.exact import exact_min
from biccos.propagation import (DualState, OptimizerConfig, SplitSet, compute_preact_bounds,
                                crown_lower_bound, optimize_duals)

rng = np.random.default_rng(7)
net = random_network([2, 16, 16, 2], rng)
x0 = rng.normal(size=2)
spec = InputSpec(x0, 0.25)
can = canonicalize(net, PropertySpec(np.array([1.0, -1.0]), 0.0))
bounds = compute_preact_bounds(can, spec)
print("unstable neurons:", bounds.num_unstable, "of", can.num_hidden)

# %%
crown = crown_lower_bound(can, spec, bounds)
_, dual = optimize_duals(can, spec, bounds, SplitSet(), None, DualState.initial(bounds),
                         OptimizerConfig(iterations=300, decay=0.995))
lp = lp_relaxation_bound(can, spec, bounds)
exact, x_star = exact_min(can, spec, bounds)
print(f"backward bound, zero slopes {crown: .6f}")
print(f"optimized dual bound        {dual: .6f}")
print(f"LP relaxation               {lp: .6f}")
print(f"exact minimum               {exact: .6f} at {x_star}")

# %% [markdown]
# Without splits or cuts the optimized dual bound closes the gap to the LP.
# Splitting one neuron tightens both, and the two still agree.

# %%
nid = int(bounds.unstable_ids[0])
for active in (False, True):
    split = SplitSet(frozenset({nid}) if active else frozenset(), frozenset() if active else frozenset({nid}))
    _, g = optimize_duals(can, spec, bounds, split, None, DualState.initial(bounds),
                          OptimizerConfig(iterations=1000, decay=0.997))
    print(f"neuron {nid} {'active  ' if active else 'inactive'}: dual {g: .6f}  "
          f"LP {lp_relaxation_bound(can, spec, bounds, split): .6f}  exact {exact_min(can, spec, bounds, split)[0]: .6f}")
