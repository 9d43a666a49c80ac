"""Exact minimisation of a canonical network by activation-pattern enumeration.

Unstable neurons are fixed one at a time in flat (layer-major) order, so that
when a neuron is decided every neuron feeding it already has a fixed state and
its pre-activation is an affine function of the input. A branch is kept only if
its closed region (a polytope inside the input box) is non-empty; each leaf
solves one LP for the minimum of the now-affine output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import InputSpec, ReluNetwork, forward
from ..propagation import ACTIVE, UNSTABLE, PreActBounds, SplitSet
from .encoding import OracleScaleError
from .simplex import LE, LinearProgram, simplex_solve

FEAS_TOL = 1e-9
MAX_UNSTABLE = 16


@dataclass
class Region:
    """One non-empty activation region: the full unstable pattern and the minimum of f on it."""

    pattern: dict
    value: float
    argmin: np.ndarray


@dataclass
class ExactResult:
    value: float
    argmin: np.ndarray | None
    pattern: dict | None
    regions: list = field(default_factory=list)
    lp_solves: int = 0


def _layer_maps(network: ReluNetwork, status: np.ndarray, signs: np.ndarray, upto: int):
    """Affine maps ``pre_k = A x + c`` for hidden layers ``0..upto`` under a (partial) pattern."""
    A, c = network.weights[0].copy(), network.biases[0].copy()
    maps = [(A, c)]
    off = network.offsets
    for k in range(upto):
        st = status[off[k]:off[k + 1]]
        sg = signs[off[k]:off[k + 1]]
        on = ((st == ACTIVE) | ((st == UNSTABLE) & (sg > 0))).astype(float)
        A = network.weights[k + 1] @ (on[:, None] * A)
        c = network.weights[k + 1] @ (on * c) + network.biases[k + 1]
        maps.append((A, c))
    return maps


def _box_lp(spec: InputSpec, obj, rows, rhs) -> LinearProgram:
    A = np.array(rows) if rows else np.zeros((0, spec.x0.size))
    return LinearProgram(obj, A, np.array(rhs, dtype=float), [LE] * len(rhs), spec.lower, spec.upper)


class _Search:
    def __init__(self, network, spec, bounds, split, cuts, keep_regions):
        self.network, self.spec, self.bounds = network, spec, bounds
        self.status = bounds.status
        self.order = [int(i) for i in bounds.unstable_ids]
        self.off = network.offsets
        self.split = split or SplitSet()
        self.cuts = [(frozenset(cut.pos), frozenset(cut.neg)) for cut in (cuts or [])]
        self.keep = keep_regions
        self.regions = []
        self.best = (np.inf, None, None)
        self.lp_solves = 0
        self.signs = np.zeros(network.num_hidden, dtype=np.int8)

    def _solve(self, obj, rows, rhs):
        self.lp_solves += 1
        return simplex_solve(_box_lp(self.spec, obj, rows, rhs))

    def _violates_cut(self, decided: int) -> bool:
        sg = self.signs
        for pos, neg in self.cuts:
            if decided not in pos and decided not in neg:
                continue
            if all(sg[i] > 0 for i in pos) and all(sg[i] < 0 for i in neg):
                return True
        return False

    def run(self, x_feas):
        self._dfs(0, [], [], x_feas)

    def _dfs(self, depth, rows, rhs, x_feas):
        if depth == len(self.order):
            self._leaf(rows, rhs)
            return
        nid = self.order[depth]
        layer, j = self.network.neuron_of(nid)
        A, c = _layer_maps(self.network, self.status, self.signs, layer)[layer]
        a, cj = A[j], c[j]
        here = a @ x_feas + cj
        forced = 1 if nid in self.split.active else -1 if nid in self.split.inactive else 0
        for side in (1, -1):
            if forced and side != forced:
                continue
            # active: pre >= 0  <=>  -a.x <= c ; inactive: a.x <= -c
            row, r = (-a, cj) if side > 0 else (a, -cj)
            if side * here >= -FEAS_TOL:
                point = x_feas
            else:
                res = self._solve(row, rows, rhs)
                if res.status != "optimal" or res.value > r + FEAS_TOL:
                    continue
                point = res.x
            self.signs[nid] = side
            if not (self.cuts and self._violates_cut(nid)):
                self._dfs(depth + 1, rows + [row], rhs + [r], point)
            self.signs[nid] = 0

    def _leaf(self, rows, rhs):
        L = self.network.num_layers
        A, c = _layer_maps(self.network, self.status, self.signs, L - 1)[L - 1]
        res = self._solve(A[0], rows, rhs)
        if res.status != "optimal":
            return
        value = float(res.value + c[0])
        pattern = {nid: bool(self.signs[nid] > 0) for nid in self.order}
        if self.keep:
            self.regions.append(Region(pattern, value, res.x))
        if value < self.best[0]:
            self.best = (value, res.x, pattern)


def enumerate_regions(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds,
                      split: SplitSet | None = None, cuts=None, max_unstable: int = MAX_UNSTABLE,
                      keep_regions: bool = True) -> ExactResult:
    """Walk every non-empty activation region consistent with ``split`` and not excluded by ``cuts``.

    ``cuts`` is any iterable of objects with ``pos``/``neg`` neuron sets; a
    pattern is excluded when it sets every ``pos`` neuron active and every
    ``neg`` neuron inactive.
    """
    if network.output_dim != 1:
        raise ValueError("exact minimisation needs a canonical single-output network")
    if bounds.num_unstable > max_unstable:
        raise OracleScaleError(f"{bounds.num_unstable} unstable neurons exceed the enumeration cap {max_unstable}")
    search = _Search(network, spec, bounds, split, cuts, keep_regions)
    search.run(spec.x0.copy())
    value, x, pattern = search.best
    return ExactResult(value, x, pattern, search.regions, search.lp_solves)


def exact_min(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, split: SplitSet | None = None,
              cuts=None, max_unstable: int = MAX_UNSTABLE) -> tuple[float, np.ndarray | None]:
    """Global minimum of the network over the input box and a minimiser.

    With ``split`` the search is restricted to patterns agreeing with it; with
    ``cuts`` excluded patterns are skipped. No admissible region gives
    ``(inf, None)``.
    """
    res = enumerate_regions(network, spec, bounds, split, cuts, max_unstable, keep_regions=False)
    return res.value, res.argmin


def region_min(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, split: SplitSet):
    """Minimum of f over the region of a split that fixes every unstable neuron.

    Returns ``(value, x)``; an empty region gives ``(inf, None)``.
    """
    unstable = set(bounds.unstable_ids.tolist())
    if set(split.neurons) != unstable:
        raise ValueError("region_min needs every unstable neuron to be split")
    signs = split.signs(network.num_hidden)
    L = network.num_layers
    maps = _layer_maps(network, bounds.status, signs, L - 1)
    rows, rhs = [], []
    for nid in sorted(unstable):
        layer, j = network.neuron_of(nid)
        a, cj = maps[layer][0][j], maps[layer][1][j]
        if signs[nid] > 0:
            rows.append(-a)
            rhs.append(cj)
        else:
            rows.append(a)
            rhs.append(-cj)
    A, c = maps[L - 1]
    res = simplex_solve(_box_lp(spec, A[0], rows, rhs))
    if res.status != "optimal":
        return np.inf, None
    return float(res.value + c[0]), res.x


def sample_min(network: ReluNetwork, spec: InputSpec, rng: np.random.Generator, n: int = 100_000) -> tuple[float, np.ndarray]:
    """Smallest output over ``n`` uniform samples of the input box (an upper bound on the minimum)."""
    xs = spec.sample(rng, n)
    vals = forward(network, xs)[:, 0]
    i = int(np.argmin(vals))
    return float(vals[i]), xs[i]
