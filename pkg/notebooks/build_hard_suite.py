"""Build the frozen hard-instance suite used by the ablation acceptance check.

Instances are generated with calibrated radius and a small positive margin,
then kept only if plain branch-and-bound needs more than 100 domains. Run from
the repository root:

    python3 notebooks/build_hard_suite.py tests/data/hard_suite
"""
import sys

from biccos.bab import BabConfig, bab_verify
from biccos.generate import make_instance, parse_shape, write_suite
from biccos.model import canonicalize

out_dir = sys.argv[1] if len(sys.argv) > 1 else "hard_suite"
wanted = int(sys.argv[2]) if len(sys.argv) > 2 else 12

kept = []
index = 0
shapes = ["4-16-16-16-1", "3-32-32-1"]
while len(kept) < wanted and index < 400:
    sizes = parse_shape(shapes[index % 2])
    inst = make_instance(23, index, sizes, "UNSAT", margin_range=(1e-3, 3e-3), max_unstable=30)
    index += 1
    res = bab_verify(canonicalize(inst.network, inst.prop), inst.spec, BabConfig(mode="plain"))
    print(inst.name, inst.num_unstable, res.stats.domains_visited, flush=True)
    if res.stats.domains_visited > 100:
        kept.append(inst)

write_suite(kept, out_dir, modes=("plain", "biccos-base"))
print(f"kept {len(kept)} of {index} candidates")
