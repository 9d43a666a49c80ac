"""Lower bounds on the canonical objective by backward dual propagation.

The bound handles general cutting planes over pre-activations, post-activations
and ReLU indicators, plus branch-and-bound splits expressed directly on the
indicators (``z = 1`` for neurons fixed active, ``z = 0`` for neurons fixed
inactive). Sign convention: the objective is ``min x_L`` and the propagated
coefficient vectors ``nu`` start from ``nu_L = -1``; the linear coefficient of
``x_i`` in the running lower bound is ``-nu_i``.

Everything in here is vectorised over a leading batch axis so that a batch of
branch-and-bound domains can share one pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import InputSpec, ReluNetwork, check_dimensions

logger = logging.getLogger(__name__)

ACTIVE, INACTIVE, UNSTABLE = 1, -1, 0
DEGENERATE_WIDTH = 1e-12


def neuron_status(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Per-neuron status: +1 stable active, -1 stable inactive, 0 unstable."""
    status = np.zeros(lower.shape, dtype=np.int8)
    status[lower >= 0.0] = ACTIVE
    status[(upper <= 0.0) & (lower < 0.0)] = INACTIVE
    thin = (status == UNSTABLE) & (upper - lower < DEGENERATE_WIDTH)
    status[thin & (upper >= -lower)] = ACTIVE
    status[thin & (upper < -lower)] = INACTIVE
    return status


@dataclass(frozen=True, eq=False)
class PreActBounds:
    """Interval bounds on the pre-activation of every hidden neuron."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(np.array(v, dtype=float).reshape(-1) for v in self.lower)
        up = tuple(np.array(v, dtype=float).reshape(-1) for v in self.upper)
        for k, (a, b) in enumerate(zip(lo, up)):
            if a.shape != b.shape:
                raise ValueError(f"hidden layer {k}: lower/upper shapes differ")
            if np.any(a > b):
                raise ValueError(f"hidden layer {k}: lower bound above upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        flat_l = np.concatenate(lo) if lo else np.zeros(0)
        flat_u = np.concatenate(up) if up else np.zeros(0)
        object.__setattr__(self, "flat_lower", flat_l)
        object.__setattr__(self, "flat_upper", flat_u)
        object.__setattr__(self, "status", neuron_status(flat_l, flat_u))

    @property
    def unstable_ids(self) -> np.ndarray:
        return np.flatnonzero(self.status == UNSTABLE)

    @property
    def num_unstable(self) -> int:
        return int(np.sum(self.status == UNSTABLE))

    def with_neuron(self, nid: int, lower: float | None = None, upper: float | None = None) -> "PreActBounds":
        """Copy with one neuron's bounds replaced (flat id)."""
        lo = [v.copy() for v in self.lower]
        up = [v.copy() for v in self.upper]
        sizes = np.cumsum([0] + [v.size for v in lo])
        layer = int(np.searchsorted(sizes, nid, side="right") - 1)
        j = nid - sizes[layer]
        if lower is not None:
            lo[layer][j] = lower
        if upper is not None:
            up[layer][j] = upper
        return PreActBounds(tuple(lo), tuple(up))


def classify_neurons(bounds: PreActBounds) -> list[tuple[set, set, set]]:
    """Per hidden layer ``(active, inactive, unstable)`` index sets."""
    out = []
    for lo, up in zip(bounds.lower, bounds.upper):
        st = neuron_status(lo, up)
        out.append((set(np.flatnonzero(st == ACTIVE).tolist()),
                    set(np.flatnonzero(st == INACTIVE).tolist()),
                    set(np.flatnonzero(st == UNSTABLE).tolist())))
    return out


def _crown_lower(network: ReluNetwork, spec: InputSpec, lowers, uppers, layer: int, rows: np.ndarray) -> np.ndarray:
    """Lower bounds of ``rows @ x_layer`` using fixed-slope linear relaxations of earlier ReLUs."""
    A = rows @ network.weights[layer]
    const = rows @ network.biases[layer]
    for j in range(layer - 1, -1, -1):
        lo, up = lowers[j], uppers[j]
        st = neuron_status(lo, up)
        unst = st == UNSTABLE
        width = np.where(unst, up - lo, 1.0)
        slope_up = np.where(unst, up / width, 0.0)
        slope_lo = (up >= -lo).astype(float)
        a_pos, a_neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
        relaxed = a_pos * slope_lo + a_neg * slope_up
        const = const + a_neg @ np.where(unst, -slope_up * lo, 0.0)
        A = np.where(st == ACTIVE, A, np.where(st == INACTIVE, 0.0, relaxed))
        const = const + A @ network.biases[j]
        A = A @ network.weights[j]
    return const + A @ spec.x0 - spec.eps * np.abs(A).sum(axis=1)


def compute_preact_bounds(network: ReluNetwork, spec: InputSpec) -> PreActBounds:
    """Layer-by-layer bounds: backward linear relaxation intersected with interval arithmetic."""
    check_dimensions(network, spec)
    lowers, uppers = [], []
    h_lo, h_hi = spec.lower, spec.upper
    for k in range(network.num_layers - 1):
        w, b = network.weights[k], network.biases[k]
        w_pos, w_neg = np.maximum(w, 0.0), np.minimum(w, 0.0)
        ibp_lo = w_pos @ h_lo + w_neg @ h_hi + b
        ibp_hi = w_pos @ h_hi + w_neg @ h_lo + b
        eye = np.eye(w.shape[0])
        lo = np.maximum(_crown_lower(network, spec, lowers, uppers, k, eye), ibp_lo)
        hi = np.minimum(-_crown_lower(network, spec, lowers, uppers, k, -eye), ibp_hi)
        lo = np.minimum(lo, hi)
        lowers.append(lo)
        uppers.append(hi)
        h_lo, h_hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return PreActBounds(tuple(lowers), tuple(uppers))


def crown_lower_bound(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds) -> float:
    """Plain backward bound of the (single) output with lower slopes fixed to 0."""
    A = np.ones((1, 1)) @ network.weights[-1]
    const = network.biases[-1].copy()
    for j in range(network.num_layers - 2, -1, -1):
        lo, up = bounds.lower[j], bounds.upper[j]
        st = neuron_status(lo, up)
        unst = st == UNSTABLE
        width = np.where(unst, up - lo, 1.0)
        slope_up = np.where(unst, up / width, 0.0)
        a_neg = np.minimum(A, 0.0)
        const = const + a_neg @ np.where(unst, -slope_up * lo, 0.0)
        A = np.where(st == ACTIVE, A, np.where(st == INACTIVE, 0.0, a_neg * slope_up))
        const = const + A @ network.biases[j]
        A = A @ network.weights[j]
    return float((const + A @ spec.x0 - spec.eps * np.abs(A).sum(axis=1))[0])


@dataclass(frozen=True)
class SplitSet:
    """Neurons fixed active (``z = 1``) and inactive (``z = 0``), by flat id."""

    active: frozenset = frozenset()
    inactive: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "active", frozenset(int(i) for i in self.active))
        object.__setattr__(self, "inactive", frozenset(int(i) for i in self.inactive))
        if self.active & self.inactive:
            raise ValueError(f"neurons split both ways: {sorted(self.active & self.inactive)}")

    def __len__(self):
        return len(self.active) + len(self.inactive)

    @property
    def neurons(self) -> frozenset:
        return self.active | self.inactive

    def signs(self, n: int) -> np.ndarray:
        s = np.zeros(n, dtype=np.int8)
        s[list(self.active)] = 1
        s[list(self.inactive)] = -1
        return s

    @classmethod
    def from_signs(cls, signs) -> "SplitSet":
        signs = np.asarray(signs)
        return cls(frozenset(np.flatnonzero(signs > 0).tolist()), frozenset(np.flatnonzero(signs < 0).tolist()))

    def add(self, nid: int, active: bool) -> "SplitSet":
        if nid in self.neurons:
            raise ValueError(f"neuron {nid} is already split")
        if active:
            return SplitSet(self.active | {nid}, self.inactive)
        return SplitSet(self.active, self.inactive | {nid})

    def without(self, nids) -> "SplitSet":
        nids = frozenset(nids)
        return SplitSet(self.active - nids, self.inactive - nids)


@dataclass(frozen=True, eq=False)
class CutMatrixView:
    """``sum_i H_i x_i + G_i xhat_i + Q_i z_i <= d`` with one row per cut.

    ``H``, ``G`` and ``Q`` hold one ``(N, d_i)`` matrix per hidden layer, or
    ``None`` for an all-zero block.
    """

    H: tuple
    G: tuple
    Q: tuple
    d: np.ndarray

    @property
    def num_cuts(self) -> int:
        return int(self.d.size)

    @classmethod
    def empty(cls, network: ReluNetwork) -> "CutMatrixView":
        n = network.num_layers - 1
        return cls((None,) * n, (None,) * n, (None,) * n, np.zeros(0))

    def validate(self, bounds: PreActBounds):
        for k, q in enumerate(self.Q):
            if q is None:
                continue
            st = neuron_status(bounds.lower[k], bounds.upper[k])
            touched = np.any(q != 0.0, axis=0)
            if np.any(touched & (st != UNSTABLE)):
                raise ValueError(f"cut indicator column on a stable neuron in hidden layer {k}")
        for block in (self.H, self.G, self.Q):
            for m in block:
                if m is not None and (m.shape[0] != self.num_cuts or not np.all(np.isfinite(m))):
                    raise ValueError("cut matrix rows must be finite and match d")


@dataclass
class DualState:
    """Optimisable multipliers, stored over the flat neuron numbering.

    ``alpha`` is the lower ReLU slope of unsplit unstable neurons, ``beta`` the
    cut multipliers, ``mu``/``tau`` the multipliers of neurons split active /
    inactive. Entries outside their index set are ignored.
    """

    alpha: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    tau: np.ndarray

    @classmethod
    def initial(cls, bounds: PreActBounds, num_cuts: int = 0) -> "DualState":
        n = bounds.status.size
        alpha = np.where(bounds.status == UNSTABLE,
                         (bounds.flat_upper >= -bounds.flat_lower).astype(float), 0.0)
        return cls(alpha, np.zeros(num_cuts), np.zeros(n), np.zeros(n))

    def copy(self) -> "DualState":
        return DualState(self.alpha.copy(), self.beta.copy(), self.mu.copy(), self.tau.copy())

    def check(self):
        if np.any(self.alpha < 0) or np.any(self.alpha > 1) or not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("beta", "mu", "tau"):
            v = getattr(self, name)
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite and nonnegative")


class BoundProblem:
    """Precomputed pieces of the bound for one network, input set, bounds and cut set."""

    def __init__(self, network: ReluNetwork, spec: InputSpec, bounds: PreActBounds,
                 cuts: CutMatrixView | None = None):
        if network.output_dim != 1:
            raise ValueError("bounding needs a canonical single-output network")
        check_dimensions(network, spec)
        self.network = network
        self.spec = spec
        self.bounds = bounds
        self.cuts = cuts if cuts is not None else CutMatrixView.empty(network)
        self.cuts.validate(bounds)
        self.n = network.num_hidden
        self.num_cuts = self.cuts.num_cuts
        off = network.offsets
        self.slices = [slice(int(off[k]), int(off[k + 1])) for k in range(network.num_layers - 1)]
        self.status = bounds.status
        self.lower = bounds.flat_lower
        self.upper = bounds.flat_upper
        unst = self.status == UNSTABLE
        self.width = np.where(unst, self.upper - self.lower, 1.0)

    def _block(self, mats, k, beta):
        m = mats[k]
        if m is None:
            return None
        return beta @ m

    def evaluate(self, signs, alpha, beta, mu, tau, grad: bool = False, aux: bool = False):
        """Batched bound value, optionally with gradients w.r.t. (alpha, beta, mu, tau).

        All inputs carry a leading batch axis. Returns ``(g, grads, info)`` where
        ``grads``/``info`` are ``None`` unless requested.
        """
        net = self.network
        W, b = net.weights, net.biases
        B = signs.shape[0]
        nu = -np.ones((B, 1))
        total = -(nu @ b[-1])
        hsum = np.zeros(B)
        cache = [None] * (net.num_layers - 1)
        info = {"nu": [None] * (net.num_layers - 1), "nu_hat": [None] * (net.num_layers - 1),
                "pi": [None] * (net.num_layers - 1), "h": [None] * (net.num_layers - 1),
                "q": [None] * (net.num_layers - 1)} if aux else None
        for k in range(net.num_layers - 2, -1, -1):
            s = self.slices[k]
            a = nu @ W[k + 1]
            st = self.status[s]
            sg = signs[:, s]
            lk, uk, wk = self.lower[s], self.upper[s], self.width[s]
            bH = self._block(self.cuts.H, k, beta)
            bG = self._block(self.cuts.G, k, beta)
            q = self._block(self.cuts.Q, k, beta)
            if q is None:
                q = np.zeros_like(a)
            act = st == ACTIVE
            ina = st == INACTIVE
            unst = st == UNSTABLE
            zp = unst & (sg > 0)
            zm = unst & (sg < 0)
            free = unst & (sg == 0)
            nu_hat = a if bG is None else a - bG
            p = np.maximum(nu_hat, 0.0)
            n = np.minimum(nu_hat, 0.0)
            up_p = uk * p
            reg_a = q >= up_p
            reg_c = ~reg_a & (q <= lk * p)
            reg_b = ~reg_a & ~reg_c
            r = (up_p - q) / wk
            pi = np.where(reg_a, 0.0, np.where(reg_c, p, r))
            h_free = np.where(reg_b, lk * pi, np.where(reg_c, q, 0.0))
            through = a if bG is None else a - bG
            if bH is not None:
                through = through - bH
            neg_h = 0.0 if bH is None else -bH
            nu_new = np.where(act | zp, through, 0.0)
            nu_new = nu_new + np.where(zp, mu[:, s], 0.0)
            nu_new = nu_new + np.where(ina | zm, neg_h, 0.0) - np.where(zm, tau[:, s], 0.0)
            nu_new = nu_new + np.where(free, pi + alpha[:, s] * n + neg_h, 0.0)
            h = np.where(zp, q, np.where(free, h_free, 0.0))
            hsum = hsum + h.sum(axis=1)
            total = total - nu_new @ b[k]
            if grad:
                cache[k] = (a, nu_hat, n, reg_b, reg_c, act, ina, zp, zm, free)
            if aux:
                info["nu"][k] = nu_new
                info["nu_hat"][k] = np.where(free, nu_hat, np.nan)
                info["pi"][k] = np.where(free, pi, np.nan)
                info["h"][k] = np.where(unst, h, np.nan)
                info["q"][k] = q
            nu = nu_new
        c = nu @ W[0]
        g = total - self.spec.eps * np.abs(c).sum(axis=1) - c @ self.spec.x0 + hsum
        if self.num_cuts:
            g = g - beta @ self.cuts.d
        if aux:
            info["input_coef"] = c
        if not grad:
            return g, None, info

        g_alpha = np.zeros_like(alpha)
        g_mu = np.zeros_like(mu)
        g_tau = np.zeros_like(tau)
        g_beta = np.broadcast_to(-self.cuts.d, beta.shape).copy()
        nu_bar = (-self.spec.eps * np.sign(c) - self.spec.x0) @ W[0].T - b[0]
        for k in range(net.num_layers - 1):
            a, nu_hat, n, reg_b, reg_c, act, ina, zp, zm, free = cache[k]
            s = self.slices[k]
            lk, uk, wk = self.lower[s], self.upper[s], self.width[s]
            pass_bar = np.where(act | zp, nu_bar, 0.0)
            g_mu[:, s] = np.where(zp, nu_bar, 0.0)
            g_tau[:, s] = np.where(zm, -nu_bar, 0.0)
            g_alpha[:, s] = np.where(free, nu_bar * n, 0.0)
            bH_bar = -pass_bar - np.where(ina | zm | free, nu_bar, 0.0)
            n_bar = np.where(free, nu_bar * alpha[:, s], 0.0)
            pi_bar = np.where(free, nu_bar, 0.0) + np.where(free & reg_b, lk, 0.0)
            q_bar = np.where(zp, 1.0, 0.0) + np.where(free & reg_c, 1.0, 0.0)
            p_bar = np.where(free & reg_b, pi_bar * uk / wk, 0.0) + np.where(free & reg_c, pi_bar, 0.0)
            q_bar = q_bar - np.where(free & reg_b, pi_bar / wk, 0.0)
            nu_hat_bar = np.where(nu_hat >= 0.0, p_bar, n_bar)
            a_bar = pass_bar + nu_hat_bar
            bG_bar = -pass_bar - nu_hat_bar
            if self.cuts.H[k] is not None:
                g_beta += bH_bar @ self.cuts.H[k].T
            if self.cuts.G[k] is not None:
                g_beta += bG_bar @ self.cuts.G[k].T
            if self.cuts.Q[k] is not None:
                g_beta += q_bar @ self.cuts.Q[k].T
            nu_bar = a_bar @ W[k + 1].T
            if k + 1 < net.num_layers - 1:
                nu_bar = nu_bar - b[k + 1]
        return g, (g_alpha, g_beta, g_mu, g_tau), info


def _batch(duals: DualState, signs: np.ndarray):
    return (signs[None, :], duals.alpha[None, :], duals.beta[None, :],
            duals.mu[None, :], duals.tau[None, :])


def _check_split(bounds: PreActBounds, split: SplitSet):
    for nid in split.neurons:
        if nid < 0 or nid >= bounds.status.size or bounds.status[nid] != UNSTABLE:
            raise ValueError(f"split neuron {nid} is not an unstable neuron")


def gcp_lower_bound(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, split: SplitSet,
                    cuts: CutMatrixView | None, duals: DualState) -> float:
    """Sound lower bound of ``min f`` over the split-restricted relaxation with cuts."""
    duals.check()
    _check_split(bounds, split)
    prob = BoundProblem(network, spec, bounds, cuts)
    if duals.beta.size != prob.num_cuts:
        raise ValueError(f"beta has {duals.beta.size} entries for {prob.num_cuts} cuts")
    g, _, _ = prob.evaluate(*_batch(duals, split.signs(prob.n)))
    return float(g[0])


def gcp_details(network, spec, bounds, split, cuts, duals) -> dict:
    """Bound value together with the propagated ``nu``, ``nu_hat``, ``pi*`` and ``h`` per layer."""
    duals.check()
    _check_split(bounds, split)
    prob = BoundProblem(network, spec, bounds, cuts)
    g, _, info = prob.evaluate(*_batch(duals, split.signs(prob.n)), aux=True)
    out = {key: [None if v is None else v[0] for v in vals] for key, vals in info.items() if key != "input_coef"}
    out["input_coef"] = info["input_coef"][0]
    out["g"] = float(g[0])
    return out


@dataclass
class OptimizerConfig:
    """Projected Adam ascent on the dual parameters."""

    iterations: int = 20
    lr_alpha: float = 0.1
    lr_beta: float = 0.02
    decay: float = 0.98
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class OptimizerStats:
    nonfinite_grads: int = 0
    steps: int = 0


@dataclass
class BatchResult:
    bound: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    stats: OptimizerStats = field(default_factory=OptimizerStats)


def optimize_batch(prob: BoundProblem, signs, alpha, beta, mu, tau, config: OptimizerConfig) -> BatchResult:
    """Run projected Adam on a batch; each row keeps its best iterate."""
    alpha = np.clip(np.array(alpha, dtype=float), 0.0, 1.0)
    beta = np.maximum(np.array(beta, dtype=float).reshape(signs.shape[0], prob.num_cuts), 0.0)
    mu = np.maximum(np.array(mu, dtype=float), 0.0)
    tau = np.maximum(np.array(tau, dtype=float), 0.0)
    params = [alpha, beta, mu, tau]
    lrs = [config.lr_alpha, config.lr_beta, config.lr_beta, config.lr_beta]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    stats = OptimizerStats()
    best_g = np.full(signs.shape[0], -np.inf)
    best = [p.copy() for p in params]
    scale = 1.0
    for t in range(config.iterations + 1):
        last = t == config.iterations
        g, grads, _ = prob.evaluate(signs, *params, grad=not last)
        better = g > best_g
        if np.any(better):
            best_g = np.where(better, g, best_g)
            for bp, p in zip(best, params):
                bp[better] = p[better]
        if last:
            break
        stats.steps += 1
        c1 = 1.0 - config.adam_beta1 ** (t + 1)
        c2 = 1.0 - config.adam_beta2 ** (t + 1)
        for i, (p, gr) in enumerate(zip(params, grads)):
            if p.size == 0:
                continue
            bad = ~np.isfinite(gr)
            if np.any(bad):
                stats.nonfinite_grads += int(bad.sum())
                gr = np.where(bad, 0.0, gr)
            m1[i] = config.adam_beta1 * m1[i] + (1 - config.adam_beta1) * gr
            m2[i] = config.adam_beta2 * m2[i] + (1 - config.adam_beta2) * gr * gr
            step = lrs[i] * scale * (m1[i] / c1) / (np.sqrt(m2[i] / c2) + config.adam_eps)
            p += step
        np.clip(params[0], 0.0, 1.0, out=params[0])
        for p in params[1:]:
            np.maximum(p, 0.0, out=p)
        scale *= config.decay
    if stats.nonfinite_grads:
        logger.debug("zeroed %d non-finite gradient entries", stats.nonfinite_grads)
    return BatchResult(best_g, *best, stats=stats)


def optimize_duals(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, split: SplitSet,
                   cuts: CutMatrixView | None, init: DualState,
                   config: OptimizerConfig | None = None) -> tuple[DualState, float]:
    """Improve the duals of one domain; returns the best duals seen and their bound."""
    config = config or OptimizerConfig()
    init.check()
    _check_split(bounds, split)
    prob = BoundProblem(network, spec, bounds, cuts)
    res = optimize_batch(prob, *_batch(init, split.signs(prob.n)), config)
    duals = DualState(res.alpha[0], res.beta[0], res.mu[0], res.tau[0])
    return duals, float(res.bound[0])
