# %% [markdown]
# # From a verified domain to a cut
#
# Eight hidden neurons on [-1, 1]^2. The branch-and-bound path
# {x1 <= 0, x5 <= 0, x7 >= 0} proves the property, but x1 plays no role.
# Strengthening drops it and re-bounds the shorter split set.

# %%
import numpy as np

from biccos.bab import Domain
from biccos.cuts import CutPool, InfluenceRecord, StrengthenLog, strengthen, validate_cut
from biccos.model import InputSpec, ReluNetwork
from biccos.oracle.exact import exact_min
from biccos.propagation import DualState, OptimizerConfig, SplitSet, compute_preact_bounds, optimize_duals

W1 = np.array([[1.0, 0.5], [0.5, 1.0], [1.0, -1.0], [-1.0, 0.3],
               [0.2, 1.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
b1 = np.array([0.1, -0.1, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0])
W2 = np.array([[0.0, 0.01, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0]])
net = ReluNetwork((W1, W2), (b1, np.array([0.6])))
spec = InputSpec(np.zeros(2), 1.0)
bounds = compute_preact_bounds(net, spec)
print("exact minimum over the whole box:", exact_min(net, spec, bounds)[0])

# %% [markdown]
# Walk the path, recording how much each split raised the bound. Split
# multipliers start at zero, so each step gets 40 optimizer iterations.

# %%
cfg = OptimizerConfig(iterations=40)
split, duals = SplitSet(), DualState.initial(bounds)
duals, bound = optimize_duals(net, spec, bounds, split, None, duals, cfg)
history = []
for nid, active in [(1, False), (5, False), (7, True)]:
    split = split.add(nid, active)
    duals, child = optimize_duals(net, spec, bounds, split, None, duals, cfg)
    history.append(InfluenceRecord(nid, active, child - bound))
    print(f"split x{nid} {'>=' if active else '<='} 0: bound {bound: .4f} -> {child: .4f}")
    bound = child

# %%
assert bound >= 0, "the path should be verified before it is turned into a cut"
dom = Domain(split, bound, duals, {}, history, (1, 5, 7), 3)
pool, log = CutPool(), StrengthenLog()
strengthen(net, spec, bounds, dom, pool, log=log)
for cut in pool:
    print(cut.provenance, "cut: pos", sorted(cut.pos), "neg", sorted(cut.neg), "rhs", cut.rhs,
          "valid:", validate_cut(net, spec, bounds, cut))
