"""Cuts inferred from verified branch-and-bound domains.

A verified domain with neurons ``P`` split active and ``M`` split inactive
shows that no violating input has that sign pattern, so every other domain may
add ``sum_{P} z - sum_{M} z <= |P| - 1``. Cuts are stored by their two index
sets; the matrix form needed by the bound engine is built on demand.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .model import InputSpec, ReluNetwork
from .oracle.exact import enumerate_regions
from .propagation import (UNSTABLE, CutMatrixView, DualState, OptimizerConfig, PreActBounds, SplitSet,
                          optimize_duals)

logger = logging.getLogger(__name__)

DUAL_NONZERO = 1e-6
PROVENANCES = ("inferred", "strengthened", "merged")


class NoCut(ValueError):
    """Raised when a split set is empty, so there is nothing to exclude."""


@dataclass(frozen=True)
class Cut:
    """``sum_{pos} z - sum_{neg} z <= |pos| - 1`` over flat neuron ids."""

    pos: frozenset
    neg: frozenset
    provenance: str = field(default="inferred", compare=False)
    iteration: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pos", frozenset(int(i) for i in self.pos))
        object.__setattr__(self, "neg", frozenset(int(i) for i in self.neg))
        if self.pos & self.neg:
            raise ValueError(f"neurons on both sides of a cut: {sorted(self.pos & self.neg)}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def rhs(self) -> int:
        return len(self.pos) - 1

    @property
    def key(self) -> tuple:
        return (self.pos, self.neg)

    @property
    def neurons(self) -> frozenset:
        return self.pos | self.neg

    def __len__(self):
        return len(self.pos) + len(self.neg)

    def is_contradiction(self) -> bool:
        """The empty cut reads ``0 <= -1``: every sign pattern is excluded."""
        return not self.pos and not self.neg

    def excludes(self, pattern: dict) -> bool:
        """True when a full or partial pattern (neuron -> active) matches every literal."""
        return (all(pattern.get(i) is True for i in self.pos)
                and all(pattern.get(i) is False for i in self.neg))

    def satisfied_by(self, z: dict) -> bool:
        return sum(z[i] for i in self.pos) - sum(z[i] for i in self.neg) <= self.rhs

    def subsumes(self, split: SplitSet) -> bool:
        """True when the split fixes every literal of the cut, so its relaxation is empty."""
        return self.pos <= split.active and self.neg <= split.inactive

    def to_dict(self) -> dict:
        return {"pos": sorted(self.pos), "neg": sorted(self.neg), "rhs": self.rhs,
                "provenance": self.provenance}


def infer_cut(split: SplitSet, provenance: str = "inferred", iteration: int = 0) -> Cut:
    if len(split) == 0:
        raise NoCut("an empty split set needs no cut; the whole problem is verified")
    return Cut(split.active, split.inactive, provenance, iteration)


def to_general_form(cut: Cut, network: ReluNetwork, bounds: PreActBounds):
    """Indicator row of one cut: a ``Q`` block per hidden layer and the right-hand side."""
    blocks = [np.zeros(n) for n in network.hidden_sizes]
    for sign, ids in ((1.0, cut.pos), (-1.0, cut.neg)):
        for nid in ids:
            if nid < 0 or nid >= bounds.status.size or bounds.status[nid] != UNSTABLE:
                raise ValueError(f"cut references neuron {nid}, which is not unstable")
            layer, j = network.neuron_of(nid)
            blocks[layer][j] = sign
    return blocks, float(cut.rhs)


def from_general_form(blocks, d: float, network: ReluNetwork, provenance: str = "inferred") -> Cut:
    pos, neg = set(), set()
    for layer, row in enumerate(blocks):
        for j in np.flatnonzero(row):
            if row[j] not in (1.0, -1.0):
                raise ValueError("not an inferred cut: coefficients must be +1 or -1")
            (pos if row[j] > 0 else neg).add(network.neuron_id(layer, int(j)))
    cut = Cut(frozenset(pos), frozenset(neg), provenance)
    if d != cut.rhs:
        raise ValueError(f"right-hand side {d} does not match |pos| - 1 = {cut.rhs}")
    return cut


def cuts_to_matrix(cuts: Iterable[Cut], network: ReluNetwork, bounds: PreActBounds) -> CutMatrixView:
    cuts = list(cuts)
    n_layers = network.num_layers - 1
    if not cuts:
        return CutMatrixView.empty(network)
    Q = [np.zeros((len(cuts), n)) for n in network.hidden_sizes]
    d = np.zeros(len(cuts))
    for r, cut in enumerate(cuts):
        blocks, d[r] = to_general_form(cut, network, bounds)
        for k in range(n_layers):
            Q[k][r] = blocks[k]
    Q = tuple(q if np.any(q) else None for q in Q)
    return CutMatrixView((None,) * n_layers, (None,) * n_layers, Q, d)


def dominates(a: Cut, b: Cut) -> bool:
    """``a`` is strictly stronger than ``b``: its literals are a proper subset of ``b``'s."""
    return (a.pos <= b.pos and a.neg <= b.neg) and (a.pos != b.pos or a.neg != b.neg)


class CutPool:
    """Ordered, duplicate-free collection of cuts with a size cap.

    ``activity`` counts how often a cut's multiplier was nonzero at an
    optimum. ``contradiction`` is set once merging derives the empty cut, and
    ``added`` keeps every cut ever inserted (evicted or merged ones included).
    """

    def __init__(self, cap: int = 1000):
        if cap < 1:
            raise ValueError("pool cap must be positive")
        self.cap = cap
        self._cuts: dict = {}
        self.activity: dict = {}
        self._order: dict = {}
        self._counter = 0
        self.evictions = 0
        self.contradiction = False
        self.added: list = []

    def __len__(self):
        return len(self._cuts)

    def __iter__(self):
        return iter(list(self._cuts.values()))

    def __contains__(self, cut: Cut):
        return cut.key in self._cuts

    @property
    def cuts(self) -> list:
        return list(self._cuts.values())

    def keys(self) -> list:
        return list(self._cuts.keys())

    def add(self, cut: Cut) -> bool:
        """Insert unless already present; returns whether the pool changed."""
        if cut.key in self._cuts:
            return False
        if cut.is_contradiction():
            self.contradiction = True
        if len(self._cuts) >= self.cap:
            self._evict()
        self._cuts[cut.key] = cut
        self.activity[cut.key] = 0
        self._order[cut.key] = self._counter
        self._counter += 1
        self.added.append(cut)
        return True

    def remove(self, cut: Cut):
        key = cut.key
        del self._cuts[key]
        del self.activity[key]
        del self._order[key]

    def _evict(self):
        cuts = self.cuts
        dominated = [c for c in cuts if any(dominates(o, c) for o in cuts if len(o) < len(c))]
        pool = dominated or cuts
        victim = min(pool, key=lambda c: (self.activity[c.key], self._order[c.key]))
        self.remove(victim)
        self.evictions += 1

    def record_activity(self, keys: list, beta: np.ndarray):
        """Count cuts whose multiplier exceeds the nonzero threshold in any row of ``beta``."""
        beta = np.atleast_2d(beta)
        if beta.size == 0:
            return
        active = np.any(beta > DUAL_NONZERO, axis=0)
        for key, on in zip(keys, active):
            if on and key in self.activity:
                self.activity[key] += 1

    def matrix(self, network: ReluNetwork, bounds: PreActBounds) -> CutMatrixView:
        return cuts_to_matrix(self.cuts, network, bounds)

    def covering(self, split: SplitSet) -> Cut | None:
        """A cut whose literals are all fixed by ``split`` (the domain is then empty)."""
        for cut in self._cuts.values():
            if cut.subsumes(split):
                return cut
        return None

    def to_json(self) -> str:
        return json.dumps([c.to_dict() for c in self.cuts])

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str, cap: int = 1000) -> "CutPool":
        pool = cls(cap)
        for item in json.loads(text):
            cut = Cut(frozenset(item["pos"]), frozenset(item["neg"]), item.get("provenance", "inferred"))
            if "rhs" in item and item["rhs"] != cut.rhs:
                raise ValueError(f"cut {item}: rhs must equal |pos| - 1")
            pool.add(cut)
        return pool


def merge_cuts(pool: CutPool, iteration: int = 0) -> CutPool:
    """Resolve pairs that differ only in the sign of one neuron, to a fixpoint.

    The pair ``(P + {i}, M)`` and ``(P, M + {i})`` excludes exactly the
    patterns matching ``(P, M)`` with either value of ``z_i``, so the pair is
    replaced by ``(P, M)``.
    """
    changed = True
    while changed:
        changed = False
        keys = set(pool.keys())
        for cut in pool.cuts:
            if cut.key not in keys:
                continue
            for i in sorted(cut.pos):
                other = (cut.pos - {i}, cut.neg | {i})
                if other in keys:
                    merged = Cut(cut.pos - {i}, cut.neg, "merged", iteration)
                    break
            else:
                merged = None
            if merged is None:
                continue
            partner = pool._cuts[(cut.pos - {i}, cut.neg | {i})]
            pool.remove(cut)
            pool.remove(partner)
            keys -= {cut.key, partner.key}
            if pool.add(merged):
                keys.add(merged.key)
            changed = True
    return pool


@dataclass
class InfluenceRecord:
    """Bound change observed when ``neuron`` was split along a domain's path."""

    neuron: int
    active: bool
    improvement: float | None


def neuron_influence_scores(history: list, split: SplitSet | None = None) -> tuple[dict, int]:
    """Score per split neuron (child bound minus parent bound).

    Neurons of ``split`` without a usable record score 0. Returns the scores
    and the number of such missing records.
    """
    scores, missing = {}, 0
    for rec in history:
        if rec.improvement is None or not np.isfinite(rec.improvement):
            scores[rec.neuron] = 0.0
            missing += 1
        else:
            scores[rec.neuron] = float(rec.improvement)
    if split is not None:
        for nid in sorted(split.neurons):
            if nid not in scores:
                scores[nid] = 0.0
                missing += 1
        scores = {n: s for n, s in scores.items() if n in split.neurons}
    if missing:
        logger.debug("%d split neurons without influence history scored 0", missing)
    return scores, missing


def select_retained(split: SplitSet, scores: dict, duals: DualState, order: list,
                    drop_percentage: float) -> SplitSet:
    """Neurons kept by the elimination heuristic.

    A neuron stays if its split multiplier is nonzero or its score is at or
    above the ``drop_percentage`` percentile. The percentile is taken over
    ranks, with equal scores ordered by position along the path (earlier splits
    rank lower), so ties cannot block every drop.
    """
    neurons = [n for n in order if n in split.neurons]
    if not neurons:
        return split
    pos_in_path = {n: i for i, n in enumerate(neurons)}
    ranked = sorted(neurons, key=lambda n: (scores.get(n, 0.0), pos_in_path[n]))
    rank = {n: r for r, n in enumerate(ranked)}
    threshold = np.percentile(np.arange(len(ranked), dtype=float), drop_percentage * 100.0)
    keep = set()
    for n in neurons:
        dual = duals.mu[n] if n in split.active else duals.tau[n]
        if dual > DUAL_NONZERO or rank[n] >= threshold:
            keep.add(n)
    return SplitSet(split.active & keep, split.inactive & keep)


@dataclass
class StrengthenConfig:
    drop_percentage: float = 0.5
    recursive: bool = False
    opt_iterations: int = 10


@dataclass
class StrengthenLog:
    attempts: int = 0
    successes: int = 0
    cuts_added: int = 0
    missing_history: int = 0
    pairs: list = field(default_factory=list)


def _reverify(network, spec, bounds, split, pool, duals, beta_map, opt_config):
    init = duals.copy()
    init.beta = np.array([beta_map.get(k, 0.0) for k in pool.keys()])
    return optimize_duals(network, spec, bounds, split, pool.matrix(network, bounds), init, opt_config)[1]


def strengthen(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, domain, pool: CutPool,
               drop_percentage: float = 0.5, config: StrengthenConfig | None = None,
               opt_config: OptimizerConfig | None = None, iteration: int = 0,
               log: StrengthenLog | None = None) -> CutPool:
    """Turn a verified domain into cuts, trying to shrink its split set first.

    The domain's own cut is always added. Neurons picked by the elimination
    heuristic are then dropped and the reduced split set is re-bounded against
    the pool; if it still verifies, its smaller cut is added too (and with
    ``config.recursive`` the reduction repeats). ``domain`` needs ``split``,
    ``history`` (InfluenceRecord list), ``duals``, and optionally ``order``
    (neurons in split order) and ``beta_map`` (cut key -> multiplier).
    """
    if not 0.0 <= drop_percentage < 1.0:
        raise ValueError("drop_percentage must lie in [0, 1)")
    config = config or StrengthenConfig(drop_percentage=drop_percentage)
    log = log if log is not None else StrengthenLog()
    opt = OptimizerConfig(**{**(opt_config or OptimizerConfig()).__dict__, "iterations": config.opt_iterations})
    split = domain.split
    if len(split) == 0:
        return pool
    scores, missing = neuron_influence_scores(domain.history, split)
    log.missing_history += missing
    order = list(getattr(domain, "order", None) or sorted(split.neurons))
    beta_map = getattr(domain, "beta_map", None) or {}
    parent = infer_cut(split, "inferred", iteration)
    if pool.add(parent):
        log.cuts_added += 1
    current, current_cut = split, parent
    while True:
        reduced = select_retained(current, scores, domain.duals, order, drop_percentage)
        if len(reduced) == len(current):
            break
        log.attempts += 1
        if len(reduced) == 0:
            break
        bound = _reverify(network, spec, bounds, reduced, pool, domain.duals, beta_map, opt)
        if not bound >= 0.0:
            break
        log.successes += 1
        cut = infer_cut(reduced, "strengthened", iteration)
        log.pairs.append((current_cut, cut))
        if pool.add(cut):
            log.cuts_added += 1
        if not config.recursive:
            break
        current, current_cut = reduced, cut
    merge_cuts(pool, iteration)
    return pool


def validate_cut(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, cut: Cut,
                 tol: float = 1e-9, regions=None) -> bool:
    """True iff no activation region containing a violating input is excluded by ``cut``.

    A region counts as violating when the minimum of f over it is below
    ``-tol``. Pass ``regions`` (from ``enumerate_regions``) to reuse an
    enumeration across many cuts.
    """
    if regions is None:
        regions = enumerate_regions(network, spec, bounds).regions
    for reg in regions:
        if reg.value < -tol and cut.excludes(reg.pattern):
            return False
    return True
