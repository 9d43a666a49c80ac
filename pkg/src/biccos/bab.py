"""Batched branch-and-bound over ReLU splits, with inferred cuts and multi-tree presolve.

Domains are expanded breadth first (shallowest, then lowest bound). Every
child is bounded against a snapshot of the cut pool; verified children are
turned into cuts, the rest go back on the queue. A domain that fixes all
unstable neurons is settled exactly by one LP over its activation region.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cuts import CutPool, InfluenceRecord, StrengthenConfig, StrengthenLog, infer_cut, merge_cuts, strengthen
from .model import ReluNetwork, InputSpec, evaluate
from .oracle.exact import region_min
from .propagation import (UNSTABLE, BoundProblem, DualState, OptimizerConfig, PreActBounds, SplitSet,
                          compute_preact_bounds, optimize_batch)

logger = logging.getLogger(__name__)

MODES = ("plain", "biccos-base", "biccos-mts", "auto")
UNSAT, UNKNOWN, FALSIFIED = "UNSAT", "unknown", "falsified-candidate"


class BranchingExhausted(RuntimeError):
    """Raised when a domain has no unsplit unstable neuron left."""


@dataclass
class BabConfig:
    mode: str = "biccos-base"
    timeout: float = 200.0
    batch_size: int = 64
    drop_percentage: float = 0.5
    strengthen_iterations: int = 40
    strengthen_recursive: bool = False
    strengthen_opt_iterations: int = 10
    presolve_iters: int = 5
    presolve_pick: int = 50
    presolve_gen: int = 400
    presolve_trees: int = 4
    presolve_split_depth: int = 3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pool_cap: int = 1000
    seed: int = 0
    workers: int = 1
    chunk_size: int = 16
    max_queue: int = 200_000
    auto_threshold: int = 64
    order: str = "bfs"
    stats_callback: object = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.order not in ("bfs", "dfs"):
            raise ValueError("order must be 'bfs' or 'dfs'")
        if self.timeout <= 0 or self.batch_size < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ValueError("timeout, batch size, chunk size and workers must be positive")
        if not 0.0 <= self.drop_percentage < 1.0:
            raise ValueError("drop_percentage must lie in [0, 1)")
        if self.pool_cap < 1 or self.presolve_iters < 0 or self.presolve_pick < 1 or self.presolve_gen < 1:
            raise ValueError("pool cap and presolve sizes must be positive")

    def resolve_mode(self, num_unstable: int) -> str:
        if self.mode != "auto":
            return self.mode
        return "biccos-mts" if num_unstable > self.auto_threshold else "biccos-base"


@dataclass
class Domain:
    """One branch-and-bound subproblem."""

    split: SplitSet
    lower_bound: float
    duals: DualState
    beta_map: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    order: tuple = ()
    depth: int = 0
    tree_id: int = 0
    scores: np.ndarray | None = None
    candidate: np.ndarray | None = None


class DomainQueue:
    """Priority queue keyed by (depth ascending, bound ascending), or depth descending for DFS."""

    def __init__(self, order: str = "bfs"):
        self._heap = []
        self._count = itertools.count()
        self._sign = 1 if order == "bfs" else -1

    def push(self, dom: Domain):
        heapq.heappush(self._heap, (self._sign * dom.depth, dom.lower_bound, next(self._count), dom))

    def pop(self) -> Domain:
        return heapq.heappop(self._heap)[-1]

    def pop_batch(self, n: int) -> list:
        return [self.pop() for _ in range(min(n, len(self._heap)))]

    def __len__(self):
        return len(self._heap)

    def domains(self) -> list:
        return [item[-1] for item in self._heap]

    def min_bound(self) -> float:
        return min((item[1] for item in self._heap), default=np.inf)


@dataclass
class SearchStats:
    domains_visited: int = 0
    cuts_generated: int = 0
    strengthen_attempts: int = 0
    strengthen_successes: int = 0
    wall_time: float = 0.0
    final_status: str = UNKNOWN
    batches: int = 0
    subsumed_domains: int = 0
    unsat_domains: int = 0
    region_lps: int = 0
    unresolved_domains: int = 0
    nonfinite_grads: int = 0
    missing_history: int = 0
    memory_cap_hit: bool = False
    timed_out: bool = False
    presolve_tree: int | None = None
    presolve_domains: int = 0
    presolve_tree_domains: dict = field(default_factory=dict)
    mode: str = ""
    num_unstable: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class VerdictReport:
    status: str
    bound: float
    witness: np.ndarray | None = None
    witness_value: float | None = None


@dataclass
class BabResult:
    report: VerdictReport
    stats: SearchStats
    pool: CutPool | None
    strengthen_log: StrengthenLog | None = None
    leaf_bounds: list = field(default_factory=list)


def filter_domains(domains: list) -> tuple[list, list]:
    """Split bounded domains into verified (bound >= 0) and unknown ones."""
    unsat = [d for d in domains if d.lower_bound >= 0.0]
    unknown = [d for d in domains if not d.lower_bound >= 0.0]
    return unsat, unknown


def branching_scores(info: dict, bounds: PreActBounds, row: int) -> np.ndarray:
    """Estimated bound gain of splitting each neuron (-inf where not splittable)."""
    lo, up = bounds.flat_lower, bounds.flat_upper
    nu_hat = np.concatenate([v[row] for v in info["nu_hat"]])
    pi = np.concatenate([v[row] for v in info["pi"]])
    score = pi * (-lo) + 1e-2 * np.abs(nu_hat) * np.minimum(up, -lo)
    return np.where(np.isfinite(score), score, -np.inf)


def select_branching_neuron(domain: Domain, bounds: PreActBounds, network: ReluNetwork | None = None) -> int:
    """Highest-scoring unsplit unstable neuron; ties go to the lowest id."""
    cands = _ranked_candidates(domain, bounds)
    if not cands:
        raise BranchingExhausted("every unstable neuron of this domain is split")
    return cands[0]


def _ranked_candidates(domain: Domain, bounds: PreActBounds) -> list:
    free = [int(n) for n in bounds.unstable_ids if int(n) not in domain.split.neurons]
    if not free:
        return []
    scores = domain.scores
    if scores is None:
        return free
    return sorted(free, key=lambda n: (-scores[n], n))


def split_domain(domain: Domain, neuron: int) -> tuple[Domain, Domain]:
    """Inactive and active children; new split multipliers start at 0."""
    if neuron in domain.split.neurons:
        raise ValueError(f"neuron {neuron} is already split")
    kids = []
    for active in (False, True):
        duals = domain.duals.copy()
        duals.mu[neuron] = 0.0
        duals.tau[neuron] = 0.0
        kids.append(Domain(domain.split.add(neuron, active), domain.lower_bound, duals, dict(domain.beta_map),
                           list(domain.history), domain.order + (neuron,), domain.depth + 1, domain.tree_id))
    return kids[0], kids[1]


class _Engine:
    """Shared state of one verification run."""

    def __init__(self, network, spec, bounds, config: BabConfig, mode: str, stats: SearchStats):
        self.network, self.spec, self.bounds = network, spec, bounds
        self.config, self.mode, self.stats = config, mode, stats
        self.use_cuts = mode != "plain"
        self.pool = CutPool(config.pool_cap) if self.use_cuts else None
        self.slog = StrengthenLog()
        self.n = network.num_hidden
        self.unstable = set(int(i) for i in bounds.unstable_ids)
        self.start = time.perf_counter()
        self.witness = None
        self.closed_min = np.inf
        self.leaf_bounds = []
        self._executor = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def timed_out(self) -> bool:
        return self.elapsed() > self.config.timeout

    # -- bounding -----------------------------------------------------------
    def _snapshot(self):
        if not self.use_cuts or len(self.pool) == 0:
            return [], None
        return self.pool.keys(), self.pool.matrix(self.network, self.bounds)

    def _bound_chunk(self, prob, keys, chunk):
        B = len(chunk)
        signs = np.stack([d.split.signs(self.n) for d in chunk])
        alpha = np.stack([d.duals.alpha for d in chunk])
        mu = np.stack([d.duals.mu for d in chunk])
        tau = np.stack([d.duals.tau for d in chunk])
        beta = np.array([[d.beta_map.get(k, 0.0) for k in keys] for d in chunk]).reshape(B, len(keys))
        res = optimize_batch(prob, signs, alpha, beta, mu, tau, self.config.optimizer)
        _, _, info = prob.evaluate(signs, res.alpha, res.beta, res.mu, res.tau, aux=True)
        return res, info

    def bound(self, domains: list):
        """Optimise every domain in place (fixed-size chunks, optionally in parallel)."""
        if not domains:
            return
        keys, cuts = self._snapshot()
        prob = BoundProblem(self.network, self.spec, self.bounds, cuts)
        size = self.config.chunk_size
        chunks = [domains[i:i + size] for i in range(0, len(domains), size)]
        if self._executor is not None:
            results = list(self._executor.map(lambda c: self._bound_chunk(prob, keys, c), chunks))
        else:
            results = [self._bound_chunk(prob, keys, c) for c in chunks]
        for chunk, (res, info) in zip(chunks, results):
            self.stats.nonfinite_grads += res.stats.nonfinite_grads
            if self.use_cuts and keys:
                self.pool.record_activity(keys, res.beta)
            lo, up = self.spec.lower, self.spec.upper
            for r, dom in enumerate(chunk):
                dom.lower_bound = float(res.bound[r])
                dom.duals = DualState(res.alpha[r].copy(), np.zeros(0), res.mu[r].copy(), res.tau[r].copy())
                dom.beta_map = dict(zip(keys, res.beta[r].tolist()))
                dom.scores = branching_scores(info, self.bounds, r)
                dom.candidate = np.clip(self.spec.x0 + self.spec.eps * np.sign(info["input_coef"][r]), lo, up)
        self.stats.domains_visited += len(domains)

    # -- witness handling -----------------------------------------------------
    def try_witness(self, x) -> bool:
        if x is None or self.witness is not None:
            return self.witness is not None
        x = np.clip(np.asarray(x, dtype=float), self.spec.lower, self.spec.upper)
        val = evaluate(self.network, x)
        if val < 0.0:
            self.witness = (x, float(val))
            return True
        return False

    def settle_leaf(self, dom: Domain) -> tuple[str, float]:
        """Exact treatment of a domain that fixes every unstable neuron.

        Returns ``('closed' | 'witness' | 'open', region minimum)``.
        """
        self.stats.region_lps += 1
        value, x = region_min(self.network, self.spec, self.bounds, dom.split)
        if x is None or value >= 0.0:
            return "closed", value
        if self.try_witness(x):
            return "witness", value
        return "open", value

    def covered(self, dom: Domain) -> bool:
        return self.use_cuts and self.pool.covering(dom.split) is not None

    def record_closed(self, dom: Domain):
        self.closed_min = min(self.closed_min, dom.lower_bound)
        self.leaf_bounds.append(dom.lower_bound)

    def add_history(self, parent_bound: float, kids: list, neuron: int | None):
        for kid in kids:
            if neuron is None:
                continue
            gain = kid.lower_bound - parent_bound
            kid.history.append(InfluenceRecord(neuron, neuron in kid.split.active,
                                               gain if np.isfinite(gain) else None))

    def strengthen_all(self, unsat: list, iteration: int, allowed: bool):
        if not self.use_cuts:
            return
        for dom in unsat:
            if len(dom.split) == 0 or not np.isfinite(dom.lower_bound):
                continue
            if allowed:
                cfg = StrengthenConfig(self.config.drop_percentage, self.config.strengthen_recursive,
                                       self.config.strengthen_opt_iterations)
                strengthen(self.network, self.spec, self.bounds, dom, self.pool, self.config.drop_percentage,
                           cfg, self.config.optimizer, iteration, self.slog)
            else:
                if self.pool.add(infer_cut(dom.split, "inferred", iteration)):
                    self.slog.cuts_added += 1
                merge_cuts(self.pool, iteration)
        self.stats.cuts_generated = self.slog.cuts_added
        self.stats.strengthen_attempts = self.slog.attempts
        self.stats.strengthen_successes = self.slog.successes
        self.stats.missing_history = self.slog.missing_history

    def expand(self, dom: Domain, width: int = 1) -> list:
        """Children of ``dom`` splitting its ``width`` best candidates at once."""
        cands = _ranked_candidates(dom, self.bounds)[:width]
        kids = [dom]
        for nid in cands:
            kids = [k for kid in kids for k in split_domain(kid, nid)]
        return kids, cands

    def process_children(self, kids: list, parents: dict, iteration: int, strengthen_ok: bool):
        """Bound fresh children, settle them, strengthen verified ones; return the open ones."""
        live = []
        for kid in kids:
            if self.covered(kid):
                kid.lower_bound = np.inf
                self.stats.subsumed_domains += 1
                self.stats.domains_visited += 1
                self.record_closed(kid)
            else:
                live.append(kid)
        self.bound(live)
        for kid in live:
            parent_bound, neuron = parents[id(kid)]
            self.add_history(parent_bound, [kid], neuron)
        for kid in live:
            self.try_witness(kid.candidate)
        unsat, unknown = filter_domains(live)
        self.stats.unsat_domains += len(unsat)
        for dom in unsat:
            self.record_closed(dom)
        self.strengthen_all(unsat, iteration, strengthen_ok)
        still_open = []
        for dom in unknown:
            if self.unstable <= dom.split.neurons:
                state, value = self.settle_leaf(dom)
                if state == "closed":
                    self.record_closed(replace(dom, lower_bound=max(dom.lower_bound, value)))
                    continue
                if state == "open":
                    self.stats.unresolved_domains += 1
                    self.record_closed(dom)
                    continue
            still_open.append(dom)
        return still_open


def _root_domain(engine: _Engine) -> Domain:
    duals = DualState.initial(engine.bounds)
    root = Domain(SplitSet(), -np.inf, duals)
    engine.bound([root])
    engine.try_witness(engine.spec.x0)
    engine.try_witness(root.candidate)
    return root


def _count_tree_domains(stats: SearchStats, kids: list):
    for k in kids:
        stats.presolve_tree_domains[k.tree_id] = stats.presolve_tree_domains.get(k.tree_id, 0) + 1


def multi_tree_presolve(engine: _Engine, root: Domain) -> tuple[list, bool]:
    """Grow several shallow trees that share one cut pool, then keep the most expanded one.

    Returns the surviving tree's open domains and whether some tree closed
    completely (which verifies the instance).
    """
    cfg = engine.config
    cands = _ranked_candidates(root, engine.bounds)[:cfg.presolve_trees]
    frontier = {}
    expansions = {}
    parents = {}
    kids_all = []
    for t, nid in enumerate(cands):
        kids = list(split_domain(root, nid))
        for k in kids:
            k.tree_id = t
            parents[id(k)] = (root.lower_bound, nid)
        kids_all.extend(kids)
        expansions[t] = 1
    _count_tree_domains(engine.stats, kids_all)
    opened = engine.process_children(kids_all, parents, 0, True)
    for t in range(len(cands)):
        frontier[t] = [d for d in opened if d.tree_id == t]
    engine.stats.presolve_domains += len(kids_all)
    for it in range(cfg.presolve_iters):
        if engine.witness is not None or engine.timed_out():
            break
        if any(not frontier[t] for t in frontier):
            break
        if engine.use_cuts and engine.pool.contradiction:
            break
        pool_doms = sorted((d for t in frontier for d in frontier[t]),
                           key=lambda d: (-d.lower_bound, d.tree_id, d.depth, d.order))
        picked = pool_doms[:cfg.presolve_pick]
        picked_ids = {id(d) for d in picked}
        for t in frontier:
            frontier[t] = [d for d in frontier[t] if id(d) not in picked_ids]
        kids_all, parents, budget = [], {}, cfg.presolve_gen
        for dom in picked:
            if budget <= 0:
                frontier[dom.tree_id].append(dom)
                continue
            width = max(1, min(cfg.presolve_split_depth, int(np.floor(np.log2(max(budget, 2))))))
            if not _ranked_candidates(dom, engine.bounds):
                frontier[dom.tree_id].append(dom)
                continue
            kids, _ = engine.expand(dom, width)
            expansions[dom.tree_id] += 1
            for k in kids:
                parents[id(k)] = (dom.lower_bound, None)
            kids_all.extend(kids)
            budget -= len(kids)
        _count_tree_domains(engine.stats, kids_all)
        opened = engine.process_children(kids_all, parents, it + 1, True)
        engine.stats.presolve_domains += len(kids_all)
        for d in opened:
            frontier[d.tree_id].append(d)
    if not frontier:
        return [root], False
    empties = [t for t in frontier if not frontier[t]]
    if empties:
        engine.stats.presolve_tree = empties[0]
        return [], True
    best = max(frontier, key=lambda t: (expansions[t], min(d.lower_bound for d in frontier[t]), -t))
    engine.stats.presolve_tree = best
    return frontier[best], False


def _finish(engine: _Engine, status: str, open_bound: float) -> BabResult:
    stats = engine.stats
    stats.final_status = status
    stats.wall_time = engine.elapsed()
    bound = min(engine.closed_min, open_bound)
    if engine.use_cuts:
        bound = min(bound, 0.0)
    witness = witness_value = None
    if status == FALSIFIED:
        witness, witness_value = engine.witness
        bound = min(bound, witness_value)
    engine.close()
    return BabResult(VerdictReport(status, float(bound), witness, witness_value), stats, engine.pool,
                     engine.slog if engine.use_cuts else None, engine.leaf_bounds)


def bab_verify(network: ReluNetwork, spec: InputSpec, config: BabConfig | None = None,
               bounds: PreActBounds | None = None) -> BabResult:
    """Decide ``min f >= 0`` over the input box for a canonical network."""
    config = config or BabConfig()
    if network.output_dim != 1:
        raise ValueError("bab_verify needs a canonical single-output network")
    bounds = bounds if bounds is not None else compute_preact_bounds(network, spec)
    mode = config.resolve_mode(bounds.num_unstable)
    stats = SearchStats(mode=mode, num_unstable=bounds.num_unstable)
    engine = _Engine(network, spec, bounds, config, mode, stats)
    root = _root_domain(engine)
    if engine.witness is not None:
        return _finish(engine, FALSIFIED, root.lower_bound)
    if root.lower_bound >= 0.0:
        engine.record_closed(root)
        return _finish(engine, UNSAT, np.inf)
    if not engine.unstable:
        state, value = engine.settle_leaf(root)
        if state == "witness":
            return _finish(engine, FALSIFIED, root.lower_bound)
        engine.record_closed(replace(root, lower_bound=max(root.lower_bound, value)) if state == "closed" else root)
        return _finish(engine, UNSAT if state == "closed" else UNKNOWN, np.inf)

    queue = DomainQueue(config.order)
    if mode == "biccos-mts":
        frontier, verified = multi_tree_presolve(engine, root)
        if engine.witness is not None:
            return _finish(engine, FALSIFIED, min((d.lower_bound for d in frontier), default=np.inf))
        if verified or (engine.pool.contradiction):
            return _finish(engine, UNSAT, np.inf)
        for dom in frontier:
            queue.push(dom)
    else:
        queue.push(root)

    iteration = 0
    while len(queue):
        if engine.use_cuts and engine.pool.contradiction:
            return _finish(engine, UNSAT, np.inf)
        if engine.timed_out():
            stats.timed_out = True
            return _finish(engine, UNKNOWN, queue.min_bound())
        if len(queue) > config.max_queue:
            stats.memory_cap_hit = True
            return _finish(engine, UNKNOWN, queue.min_bound())
        batch = queue.pop_batch(config.batch_size)
        kids, parents = [], {}
        for dom in batch:
            if engine.covered(dom):
                stats.subsumed_domains += 1
                engine.record_closed(replace(dom, lower_bound=np.inf))
                continue
            nid = select_branching_neuron(dom, bounds, network)
            for kid in split_domain(dom, nid):
                parents[id(kid)] = (dom.lower_bound, nid)
                kids.append(kid)
        opened = engine.process_children(kids, parents, iteration, iteration < config.strengthen_iterations)
        stats.batches += 1
        iteration += 1
        if engine.witness is not None:
            return _finish(engine, FALSIFIED, min(queue.min_bound(), min((d.lower_bound for d in opened),
                                                                           default=np.inf)))
        for dom in opened:
            queue.push(dom)
        if config.stats_callback is not None:
            config.stats_callback({
                "batch": stats.batches, "domains_visited": stats.domains_visited, "queue": len(queue),
                "cuts": len(engine.pool) if engine.use_cuts else 0,
                "open_bound": _finite_or_none(queue.min_bound()), "time_s": engine.elapsed()})
    status = UNKNOWN if stats.unresolved_domains else UNSAT
    return _finish(engine, status, np.inf)


def _finite_or_none(v: float):
    return float(v) if np.isfinite(v) else None
