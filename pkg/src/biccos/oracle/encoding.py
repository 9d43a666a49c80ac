"""Mixed-integer encoding of a ReLU network and its LP / Planet relaxations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import InputSpec, ReluNetwork
from ..propagation import ACTIVE, INACTIVE, UNSTABLE, CutMatrixView, PreActBounds, SplitSet
from .simplex import EQ, GE, LE, LinearProgram, simplex_solve

MODES = ("integer", "lp", "planet")


class OracleScaleError(ValueError):
    """Raised when an instance is too large for a reference computation."""


@dataclass
class MilpEncoding:
    """Variable layout and constraint rows of one encoded instance.

    ``pre[k]``/``post[k]`` are variable indices of hidden layer ``k``; ``z`` maps
    a flat neuron id to its indicator variable. ``row_kinds`` labels every
    constraint row so blocks can be counted.
    """

    lp: LinearProgram
    mode: str
    inputs: np.ndarray
    pre: list
    post: list
    output: int
    z: dict
    row_kinds: list = field(default_factory=list)
    integer_vars: list = field(default_factory=list)


class _Builder:
    def __init__(self):
        self.lb, self.ub = [], []
        self.rows, self.rhs, self.senses, self.kinds = [], [], [], []

    def var(self, lo=-np.inf, hi=np.inf, count=None):
        if count is None:
            self.lb.append(lo)
            self.ub.append(hi)
            return len(self.lb) - 1
        start = len(self.lb)
        self.lb.extend(np.broadcast_to(lo, (count,)).tolist())
        self.ub.extend(np.broadcast_to(hi, (count,)).tolist())
        return np.arange(start, start + count)

    def row(self, coefs: dict, sense, rhs, kind):
        self.rows.append(coefs)
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.kinds.append(kind)

    def build(self, objective: dict) -> LinearProgram:
        n = len(self.lb)
        A = np.zeros((len(self.rows), n))
        for i, coefs in enumerate(self.rows):
            for j, v in coefs.items():
                A[i, j] += v
        c = np.zeros(n)
        for j, v in objective.items():
            c[j] = v
        return LinearProgram(c, A, np.array(self.rhs), self.senses, np.array(self.lb), np.array(self.ub))


def encode_milp(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, mode: str = "lp",
                split: SplitSet | None = None, cuts: CutMatrixView | None = None) -> MilpEncoding:
    """Encode ``min f(x)`` over the input box with the chosen ReLU treatment.

    In ``lp``/``integer`` mode split neurons get their indicator fixed; in
    ``planet`` mode a split sets the neuron's upper (inactive) or lower (active)
    bound to zero inside the envelope row. Cut rows need indicators and are
    rejected in ``planet`` mode unless they have no ``Q`` part.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    split = split or SplitSet()
    bld = _Builder()
    inputs = bld.var(spec.lower, spec.upper, count=network.input_dim)
    prev = inputs
    pre, post, zmap = [], [], {}
    off = network.offsets
    for k in range(network.num_layers - 1):
        w, b = network.weights[k], network.biases[k]
        d = w.shape[0]
        xk = bld.var(count=d)
        hk = bld.var(count=d)
        for j in range(d):
            coefs = {int(xk[j]): 1.0}
            for t, pv in enumerate(prev):
                if w[j, t] != 0.0:
                    coefs[int(pv)] = coefs.get(int(pv), 0.0) - w[j, t]
            bld.row(coefs, EQ, b[j], "affine")
        lo, up = bounds.lower[k], bounds.upper[k]
        for j in range(d):
            nid = int(off[k] + j)
            x, h = int(xk[j]), int(hk[j])
            st = bounds.status[nid]
            if st == ACTIVE:
                bld.row({h: 1.0, x: -1.0}, EQ, 0.0, "stable_active")
                continue
            if st == INACTIVE:
                bld.row({h: 1.0}, EQ, 0.0, "stable_inactive")
                continue
            l, u = lo[j], up[j]
            bld.row({h: 1.0}, GE, 0.0, "relu_nonneg")
            bld.row({h: 1.0, x: -1.0}, GE, 0.0, "relu_ge_pre")
            if mode == "planet":
                if nid in split.inactive:
                    u = 0.0
                elif nid in split.active:
                    l = 0.0
                slope = u / (u - l)
                bld.row({h: 1.0, x: -slope}, LE, -slope * l, "planet_upper")
            else:
                if nid in split.active:
                    z = bld.var(1.0, 1.0)
                elif nid in split.inactive:
                    z = bld.var(0.0, 0.0)
                else:
                    z = bld.var(0.0, 1.0)
                zmap[nid] = z
                bld.row({h: 1.0, z: -u}, LE, 0.0, "relu_upper_z")
                bld.row({h: 1.0, x: -1.0, z: -l}, LE, -l, "relu_lower_z")
        pre.append(xk)
        post.append(hk)
        prev = hk
    w, b = network.weights[-1], network.biases[-1]
    out = bld.var()
    coefs = {out: 1.0}
    for t, pv in enumerate(prev):
        if w[0, t] != 0.0:
            coefs[int(pv)] = coefs.get(int(pv), 0.0) - w[0, t]
    bld.row(coefs, EQ, b[0], "affine")
    if cuts is not None and cuts.num_cuts:
        for r in range(cuts.num_cuts):
            coefs = {}
            for k in range(network.num_layers - 1):
                for block, varidx in ((cuts.H[k], pre[k]), (cuts.G[k], post[k])):
                    if block is None:
                        continue
                    for j in np.flatnonzero(block[r]):
                        coefs[int(varidx[j])] = coefs.get(int(varidx[j]), 0.0) + block[r, j]
                if cuts.Q[k] is not None:
                    for j in np.flatnonzero(cuts.Q[k][r]):
                        nid = int(off[k] + j)
                        if nid not in zmap:
                            raise ValueError("cut rows with indicator terms need lp or integer mode")
                        coefs[zmap[nid]] = coefs.get(zmap[nid], 0.0) + cuts.Q[k][r, j]
            bld.row(coefs, LE, cuts.d[r], "cut")
    lp = bld.build({out: 1.0})
    integer = sorted(zmap.values()) if mode == "integer" else []
    return MilpEncoding(lp, mode, inputs, pre, post, out, zmap, bld.kinds, integer)


def lp_relaxation_bound(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds,
                        split: SplitSet | None = None, cuts: CutMatrixView | None = None,
                        max_vars: int = 2000) -> float:
    """Optimum of the LP relaxation with split indicators fixed and cut rows added.

    An infeasible relaxation returns ``+inf`` (the domain holds vacuously).
    """
    enc = encode_milp(network, spec, bounds, "lp", split, cuts)
    if enc.lp.num_vars > max_vars:
        raise OracleScaleError(f"LP has {enc.lp.num_vars} variables (limit {max_vars})")
    res = simplex_solve(enc.lp)
    if res.status == "infeasible":
        return np.inf
    if res.status != "optimal":
        raise RuntimeError(f"LP relaxation ended with status {res.status}")
    return res.value


def planet_bound(network, spec, bounds, split=None) -> float:
    res = simplex_solve(encode_milp(network, spec, bounds, "planet", split).lp)
    if res.status == "infeasible":
        return np.inf
    return res.value


def check_split_equivalence(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, neuron: int,
                            tol: float = 1e-7) -> bool:
    """Fixing an indicator in the LP matches zeroing the matching bound in the Planet relaxation."""
    if bounds.status[neuron] != UNSTABLE:
        raise ValueError(f"neuron {neuron} is not unstable")
    for active in (False, True):
        split = SplitSet(frozenset([neuron]) if active else frozenset(),
                         frozenset() if active else frozenset([neuron]))
        lp_val = lp_relaxation_bound(network, spec, bounds, split)
        planet_val = planet_bound(network, spec, bounds, split)
        if np.isinf(lp_val) or np.isinf(planet_val):
            if lp_val != planet_val:
                return False
            continue
        if abs(lp_val - planet_val) > tol:
            return False
    return True
