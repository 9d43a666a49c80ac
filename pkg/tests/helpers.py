"""Shared fixtures builders and small independent oracles for the test suite."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from biccos.generate import calibrate_eps
from biccos.model import InputSpec, PropertySpec, ReluNetwork, canonicalize, random_network
from biccos.propagation import SplitSet, compute_preact_bounds

DATA = Path(__file__).parent / "data"
HARD_SUITE = DATA / "hard_suite" / "manifest.json"


def t1(c0: float = 0.0, eps: float = 1.0):
    net = ReluNetwork((np.array([[1.0]]), np.array([[1.0]])), (np.array([0.0]), np.array([0.0])))
    return net, InputSpec(np.array([0.0]), eps), PropertySpec(np.array([1.0]), c0)


def seed7():
    """2-16-16-2 net from seed 7 with the margin property out1 - out2, radius 0.25."""
    rng = np.random.default_rng(7)
    net = random_network([2, 16, 16, 2], rng)
    x0 = rng.normal(size=2)
    prop = PropertySpec(np.array([1.0, -1.0]), 0.0)
    return net, InputSpec(x0, 0.25), prop


def canonical(net, spec, prop):
    can = canonicalize(net, prop)
    return can, spec, compute_preact_bounds(can, spec)


def naive_forward(weights, biases, x):
    """Pure-Python forward pass used as an independent oracle."""
    h = [float(v) for v in x]
    for k, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for i in range(len(b)):
            s = float(b[i])
            for j in range(len(h)):
                s += float(w[i][j]) * h[j]
            out.append(s)
        h = out if k == len(weights) - 1 else [max(0.0, v) for v in out]
    return h


def small_instance(rng, sizes=(2, 8, 1), max_unstable=10, c0=None):
    """Canonical random net with a calibrated radius; returns (net, spec, bounds)."""
    while True:
        net = random_network(list(sizes), rng)
        x0 = rng.normal(size=sizes[0])
        try:
            eps, _ = calibrate_eps(net, x0, (0.2, 0.7), max_unstable)
        except ValueError:
            continue
        prop = PropertySpec(np.ones(sizes[-1]) if sizes[-1] == 1 else np.eye(sizes[-1])[0],
                            float(rng.normal(0, 0.1)) if c0 is None else c0)
        spec = InputSpec(x0, eps)
        can = canonicalize(net, prop)
        bounds = compute_preact_bounds(can, spec)
        if 0 < bounds.num_unstable <= max_unstable:
            return can, spec, bounds


def random_split(rng, bounds, max_size=None):
    ids = list(bounds.unstable_ids)
    k = int(rng.integers(0, (len(ids) if max_size is None else min(max_size, len(ids))) + 1))
    chosen = rng.choice(ids, size=k, replace=False) if k else []
    act = {int(i) for i in chosen if rng.random() < 0.5}
    return SplitSet(frozenset(act), frozenset(int(i) for i in chosen) - act)


def random_duals(rng, bounds, num_cuts=0):
    from biccos.propagation import DualState
    n = bounds.status.size
    return DualState(rng.uniform(0, 1, n), rng.exponential(0.5, num_cuts), rng.exponential(0.5, n),
                     rng.exponential(0.5, n))


def all_assignments(neurons):
    neurons = sorted(neurons)
    for bits in itertools.product((0, 1), repeat=len(neurons)):
        yield dict(zip(neurons, bits))


def dropped_split_net():
    """Eight hidden neurons on [-1, 1]^2 where x5 <= 0 together with x7 >= 0 proves f >= 0.

    Neuron 5 reads x1 and neuron 6 reads -x2, both with output weight -1;
    neuron 1 is a near-irrelevant unstable neuron. Neither split alone verifies.
    """
    from biccos.model import ReluNetwork
    W1 = np.array([[1.0, 0.5], [0.5, 1.0], [1.0, -1.0], [-1.0, 0.3],
                   [0.2, 1.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    b1 = np.array([0.1, -0.1, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0])
    W2 = np.array([[0.0, 0.01, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0]])
    net = ReluNetwork((W1, W2), (b1, np.array([0.6])))
    spec = InputSpec(np.zeros(2), 1.0)
    return net, spec, compute_preact_bounds(net, spec)


def path_domain(net, spec, bounds, path, iterations=40):
    """Bound every prefix of ``path`` (list of (neuron, active)) and return the final domain.

    History holds child-minus-parent bound changes, as branch and bound records them.
    """
    from biccos.bab import Domain
    from biccos.cuts import InfluenceRecord
    from biccos.propagation import DualState, OptimizerConfig, optimize_duals
    cfg = OptimizerConfig(iterations=iterations)
    split = SplitSet()
    duals, bound = optimize_duals(net, spec, bounds, split, None, DualState.initial(bounds), cfg)
    history = []
    for nid, active in path:
        split = split.add(nid, active)
        duals, child = optimize_duals(net, spec, bounds, split, None, duals, cfg)
        history.append(InfluenceRecord(nid, active, child - bound))
        bound = child
    return Domain(split, bound, duals, {}, history, tuple(n for n, _ in path), len(path))


def one_literal_instance(seed):
    """Net where splitting neuron A inactive alone proves f >= 0, reached after nuisance splits.

    Neuron A (id 0) reads x1 and carries a large negative output weight. Each
    nuisance neuron reads its own input coordinate with a small negative
    weight, so their total effect stays below the output bias. Returns the net,
    spec, bounds, the verified path domain and A's id.
    """
    from biccos.model import ReluNetwork
    rng = np.random.default_rng([8, seed])
    k = int(rng.integers(2, 6))
    v = rng.uniform(0.5, 1.5, k) * rng.choice([-1.0, 1.0], k)
    t = rng.uniform(-0.4, 0.4, k) * np.abs(v)
    W1 = np.zeros((k + 1, k + 1))
    W1[0, 0] = 1.0
    W1[np.arange(1, k + 1), np.arange(1, k + 1)] = v
    b1 = np.concatenate([[rng.uniform(-0.3, 0.3)], t])
    W2 = np.concatenate([[-rng.uniform(1.5, 2.0)], -rng.uniform(0.01, 0.05, k)])[None, :]
    net = ReluNetwork((W1, W2), (b1, np.array([rng.uniform(0.4, 0.6)])))
    spec = InputSpec(np.zeros(k + 1), 1.0)
    bounds = compute_preact_bounds(net, spec)
    nuisance = [(i, bool(rng.random() < 0.5)) for i in rng.permutation(np.arange(1, k + 1)).tolist()]
    dom = path_domain(net, spec, bounds, nuisance + [(0, False)])
    return net, spec, bounds, dom, 0
