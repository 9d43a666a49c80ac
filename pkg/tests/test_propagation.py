import numpy as np
import pytest
from hypothesis import given, strategies as st

from biccos.cuts import Cut, cuts_to_matrix
from biccos.model import InputSpec, evaluate
from biccos.oracle.encoding import lp_relaxation_bound
from biccos.oracle.exact import exact_min
from biccos.propagation import (ACTIVE, INACTIVE, UNSTABLE, BoundProblem, DualState, OptimizerConfig,
                                PreActBounds, SplitSet, classify_neurons, compute_preact_bounds,
                                crown_lower_bound, gcp_details, gcp_lower_bound, optimize_duals)

from helpers import canonical, random_duals, random_split, seed7, small_instance, t1


def _t1_bounds(eps=1.0):
    net, spec, prop = t1(eps=eps)
    return net, spec, compute_preact_bounds(net, spec)


def test_t1_preact_bounds():
    _, _, b = _t1_bounds()
    assert b.lower[0].tolist() == [-1.0] and b.upper[0].tolist() == [1.0]
    assert b.status.tolist() == [UNSTABLE]


def test_t1_degenerate_ball_is_active():
    _, _, b = _t1_bounds(eps=0.0)
    assert b.lower[0].tolist() == [0.0] and b.upper[0].tolist() == [0.0]
    assert b.status.tolist() == [ACTIVE]


def test_seed7_bounds_contain_samples():
    can, spec, bounds = canonical(*seed7())
    from biccos.model import forward
    xs = spec.sample(np.random.default_rng(3), 500)
    _, pre = forward(can, xs, return_preacts=True)
    flat = np.concatenate(pre, axis=1)
    assert np.all(flat >= bounds.flat_lower - 1e-12) and np.all(flat <= bounds.flat_upper + 1e-12)


@pytest.mark.parametrize("lo, up, want", [([-1.0], [1.0], ({}, {}, {0})), ([0.0], [2.0], ({0}, set(), set()))])
def test_classify_examples(lo, up, want):
    got = classify_neurons(PreActBounds((np.array(lo),), (np.array(up),)))[0]
    assert got == (set(want[0]), set(want[1]), set(want[2]))


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 5)), min_size=10, max_size=10))
def test_classification_is_partition(pairs):
    lo = np.array([a for a, _ in pairs])
    up = lo + np.array([w for _, w in pairs])
    act, inact, unst = classify_neurons(PreActBounds((lo,), (up,)))[0]
    assert act | inact | unst == set(range(10))
    assert not (act & inact) and not (act & unst) and not (inact & unst)


def test_t1_gcp_hand_values():
    net, spec, b = _t1_bounds()
    zero = DualState(np.zeros(1), np.zeros(0), np.zeros(1), np.zeros(1))
    assert gcp_lower_bound(net, spec, b, SplitSet(), None, zero) == 0.0
    one = DualState(np.ones(1), np.zeros(0), np.zeros(1), np.zeros(1))
    assert gcp_lower_bound(net, spec, b, SplitSet(), None, one) == -1.0
    inactive = SplitSet(frozenset(), frozenset({0}))
    assert gcp_lower_bound(net, spec, b, inactive, None, zero) == 0.0
    assert lp_relaxation_bound(net, spec, b, inactive) == pytest.approx(0.0, abs=1e-12)


def test_t1_details_record_intermediates():
    net, spec, b = _t1_bounds()
    d = gcp_details(net, spec, b, SplitSet(), None, DualState(np.zeros(1), np.zeros(0), np.zeros(1), np.zeros(1)))
    assert d["g"] == 0.0
    assert d["nu_hat"][0].tolist() == [-1.0]


def test_zero_duals_equal_plain_crown():
    rng = np.random.default_rng(11)
    for _ in range(10):
        net, spec, b = small_instance(rng, (3, 8, 8, 1))
        n = b.status.size
        zero = DualState(np.zeros(n), np.zeros(0), np.zeros(n), np.zeros(n))
        assert gcp_lower_bound(net, spec, b, SplitSet(), None, zero) == pytest.approx(
            crown_lower_bound(net, spec, b), abs=1e-12)


def test_optimizer_t1_reaches_zero():
    net, spec, b = _t1_bounds()
    _, g = optimize_duals(net, spec, b, SplitSet(), None, DualState.initial(b))
    assert -1e-6 <= g <= 1e-6


def test_zero_iterations_is_noop():
    can, spec, b = canonical(*seed7())
    init = DualState.initial(b)
    duals, g = optimize_duals(can, spec, b, SplitSet(), None, init, OptimizerConfig(iterations=0))
    assert np.array_equal(duals.alpha, init.alpha)
    assert g == gcp_lower_bound(can, spec, b, SplitSet(), None, init)


def test_seed7_optimized_between_crown_and_exact():
    can, spec, b = canonical(*seed7())
    n = b.status.size
    zero = DualState(np.zeros(n), np.zeros(0), np.zeros(n), np.zeros(n))
    g0 = gcp_lower_bound(can, spec, b, SplitSet(), None, zero)
    _, g = optimize_duals(can, spec, b, SplitSet(), None, zero, OptimizerConfig(iterations=50))
    exact, _ = exact_min(can, spec, b)
    assert g0 <= g <= exact + 1e-9


def test_stable_split_rejected():
    net, spec, b = _t1_bounds(eps=0.0)
    with pytest.raises(ValueError, match="not an unstable"):
        gcp_lower_bound(net, spec, b, SplitSet(frozenset({0}), frozenset()), None, DualState.initial(b))


def test_bad_duals_rejected():
    net, spec, b = _t1_bounds()
    with pytest.raises(ValueError, match="alpha"):
        gcp_lower_bound(net, spec, b, SplitSet(), None, DualState(np.array([1.5]), np.zeros(0),
                                                                 np.zeros(1), np.zeros(1)))


def test_contradictory_split_rejected():
    with pytest.raises(ValueError):
        SplitSet(frozenset({1}), frozenset({1}))


def _instance_with_cuts(seed):
    rng = np.random.default_rng(seed)
    net, spec, b = small_instance(rng, (2, 6, 6, 1), max_unstable=8)
    split = random_split(rng, b, max_size=2)
    free = [int(i) for i in b.unstable_ids]
    cuts = []
    for _ in range(int(rng.integers(0, 3))):
        ids = rng.choice(free, size=min(len(free), int(rng.integers(1, 3))), replace=False)
        pos = {int(i) for i in ids if rng.random() < 0.5}
        cuts.append(Cut(frozenset(pos), frozenset(int(i) for i in ids) - pos))
    return rng, net, spec, b, split, cuts


@given(st.integers(0, 10_000))
def test_weak_duality_any_duals(seed):
    """Any feasible dual point bounds the split- and cut-restricted LP and the true minimum."""
    rng, net, spec, b, split, cuts = _instance_with_cuts(seed)
    matrix = cuts_to_matrix(cuts, net, b)
    duals = random_duals(rng, b, len(cuts))
    g = gcp_lower_bound(net, spec, b, split, matrix, duals)
    lp = lp_relaxation_bound(net, spec, b, split, matrix)
    assert g <= lp + 1e-7
    exact, _ = exact_min(net, spec, b, split, cuts)
    assert lp <= exact + 1e-7


@given(st.integers(0, 10_000))
def test_adjoint_matches_finite_differences(seed):
    rng, net, spec, b, split, cuts = _instance_with_cuts(seed)
    prob = BoundProblem(net, spec, b, cuts_to_matrix(cuts, net, b))
    d = random_duals(rng, b, len(cuts))
    params = [d.alpha[None].clip(0.05, 0.95), d.beta[None] + 0.05, d.mu[None] + 0.05, d.tau[None] + 0.05]
    signs = split.signs(prob.n)[None]
    _, grads, _ = prob.evaluate(signs, *params, grad=True)
    h = 1e-6
    for which in range(4):
        for j in range(params[which].shape[1]):
            up = [p.copy() for p in params]
            dn = [p.copy() for p in params]
            up[which][0, j] += h
            dn[which][0, j] -= h
            fd = (prob.evaluate(signs, *up)[0][0] - prob.evaluate(signs, *dn)[0][0]) / (2 * h)
            assert abs(fd - grads[which][0, j]) <= 1e-5 * max(1.0, abs(fd))


@given(st.integers(0, 10_000))
def test_batch_rows_are_independent(seed):
    rng, net, spec, b, split, cuts = _instance_with_cuts(seed)
    prob = BoundProblem(net, spec, b, cuts_to_matrix(cuts, net, b))
    rows = [random_duals(rng, b, len(cuts)) for _ in range(3)]
    splits = [random_split(rng, b, 2) for _ in range(3)]
    signs = np.stack([s.signs(prob.n) for s in splits])
    g, _, _ = prob.evaluate(signs, *(np.stack([getattr(r, k) for r in rows]) for k in ("alpha", "beta", "mu", "tau")))
    for i in range(3):
        single = gcp_lower_bound(net, spec, b, splits[i], prob.cuts, rows[i])
        assert g[i] == pytest.approx(single, abs=1e-12)


def test_optimizer_never_lowers_bound():
    rng = np.random.default_rng(5)
    for _ in range(10):
        net, spec, b = small_instance(rng, (3, 8, 8, 1))
        split = random_split(rng, b, 3)
        init = DualState.initial(b)
        g0 = gcp_lower_bound(net, spec, b, split, None, init)
        _, g = optimize_duals(net, spec, b, split, None, init)
        assert g >= g0
