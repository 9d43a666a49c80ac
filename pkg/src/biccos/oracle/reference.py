"""Reference split-constrained backward bound, written neuron by neuron.

This is the classical form in which splits are constraints on pre-activations
(``x >= 0`` on the active side, ``x <= 0`` on the inactive side) with their own
Lagrange multipliers, and the bound is carried as the coefficient row of the
lower bounding linear function. It shares no code with the batched propagation
engine and exists to cross-check it when there are no cuts.
"""
from __future__ import annotations

import numpy as np

from ..model import InputSpec, ReluNetwork
from ..propagation import PreActBounds, SplitSet


def beta_crown_bound(network: ReluNetwork, spec: InputSpec, bounds: PreActBounds, split: SplitSet,
                     alpha, mu, tau) -> float:
    """Lower bound of the single output for given slopes and split multipliers.

    ``alpha``, ``mu`` and ``tau`` are indexed by flat neuron id; ``mu`` is the
    multiplier of ``x >= 0`` on neurons split active, ``tau`` of ``x <= 0`` on
    neurons split inactive.
    """
    coef = [float(v) for v in network.weights[-1][0]]
    const = float(network.biases[-1][0])
    for k in range(network.num_layers - 2, -1, -1):
        lo, up = bounds.lower[k], bounds.upper[k]
        pre_coef = []
        for j, a in enumerate(coef):
            nid = network.neuron_id(k, j)
            l, u = float(lo[j]), float(up[j])
            stable_on = l >= 0.0 or (u - l < 1e-12 and u >= -l)
            stable_off = not stable_on and (u <= 0.0 or u - l < 1e-12)
            if stable_on:
                pre_coef.append(a)
            elif stable_off:
                pre_coef.append(0.0)
            elif nid in split.active:
                pre_coef.append(a - float(mu[nid]))
            elif nid in split.inactive:
                pre_coef.append(float(tau[nid]))
            elif a >= 0.0:
                pre_coef.append(a * float(alpha[nid]))
            else:
                s = u / (u - l)
                pre_coef.append(a * s)
                const -= a * s * l
        w, b = network.weights[k], network.biases[k]
        const += sum(pc * float(b[j]) for j, pc in enumerate(pre_coef))
        coef = [sum(pre_coef[j] * float(w[j, t]) for j in range(len(pre_coef))) for t in range(w.shape[1])]
    x0, eps = spec.x0, spec.eps
    return const + sum(c * float(x0[t]) for t, c in enumerate(coef)) - eps * sum(abs(c) for c in coef)
