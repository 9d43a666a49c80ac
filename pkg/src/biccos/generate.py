"""Random verification instances with calibrated radius and margin."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import InputSpec, PropertySpec, ReluNetwork, canonicalize, random_network, save_instance
from .oracle.encoding import OracleScaleError
from .oracle.exact import exact_min
from .propagation import compute_preact_bounds


@dataclass
class Instance:
    name: str
    network: ReluNetwork
    spec: InputSpec
    prop: PropertySpec
    label: str
    exact_min: float
    num_unstable: int


def parse_shape(shape) -> list[int]:
    if isinstance(shape, str):
        try:
            sizes = [int(s) for s in shape.split("-")]
        except ValueError:
            raise ValueError(f"shape {shape!r} must look like 3-16-16-1") from None
    else:
        sizes = [int(s) for s in shape]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"shape {shape!r} needs at least an input and an output width, all positive")
    return sizes


def _default_property(out_dim: int) -> PropertySpec:
    if out_dim == 1:
        return PropertySpec(np.array([1.0]), 0.0)
    c = np.zeros(out_dim)
    c[0], c[1] = 1.0, -1.0
    return PropertySpec(c, 0.0)


def calibrate_eps(network: ReluNetwork, x0: np.ndarray, frac=(0.3, 0.6), max_unstable=None,
                  steps: int = 40) -> tuple[float, int]:
    """Radius giving an unstable fraction inside ``frac`` (and at most ``max_unstable``), by bisection."""
    total = network.num_hidden
    target = 0.5 * (frac[0] + frac[1])
    cap = total if max_unstable is None else max_unstable

    def count(eps):
        return compute_preact_bounds(network, InputSpec(x0, eps)).num_unstable

    lo, hi = 0.0, 1.0
    while count(hi) < target * total and hi < 1e3:
        hi *= 2.0
    best = None
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        n = count(mid)
        if frac[0] * total <= n <= frac[1] * total and n <= cap:
            best = (mid, n)
            if abs(n - target * total) <= 1:
                break
        if n < target * total and n <= cap:
            lo = mid
        else:
            hi = mid
    if best is None:
        raise ValueError("no radius puts the unstable fraction in range")
    return best


def make_instance(seed: int, index: int, sizes: list[int], label: str | None = None,
                  margin_range=(1e-3, 0.05), frac=(0.3, 0.6), max_unstable: int = 12,
                  bias_scale: float = 0.1, tries: int = 50) -> Instance:
    """One instance whose exact minimum is ``+margin`` (UNSAT) or ``-margin`` (falsifiable)."""
    for attempt in range(tries):
        rng = np.random.default_rng([seed, index, attempt])
        net = random_network(sizes, rng, bias_scale=bias_scale)
        x0 = rng.normal(0.0, 1.0, size=sizes[0])
        try:
            eps, n_unst = calibrate_eps(net, x0, frac, max_unstable)
        except ValueError:
            continue
        prop = _default_property(sizes[-1])
        canon = canonicalize(net, prop)
        spec = InputSpec(x0, eps)
        bounds = compute_preact_bounds(canon, spec)
        try:
            m, _ = exact_min(canon, spec, bounds, max_unstable=max(max_unstable, bounds.num_unstable))
        except OracleScaleError:
            continue
        lab = label or ("UNSAT" if rng.random() < 0.5 else "falsifiable")
        margin = float(np.exp(rng.uniform(np.log(margin_range[0]), np.log(margin_range[1]))))
        c0 = -m + margin if lab == "UNSAT" else -m - margin
        prop = PropertySpec(prop.c, c0)
        final = canonicalize(net, prop)
        m2, _ = exact_min(final, spec, compute_preact_bounds(final, spec),
                          max_unstable=max(max_unstable, bounds.num_unstable))
        if abs(m2) < margin_range[0] or (m2 >= 0) != (lab == "UNSAT"):
            continue
        return Instance(f"inst_{seed}_{index:04d}", net, spec, prop, lab, float(m2), n_unst)
    raise RuntimeError(f"could not generate instance {index} for seed {seed}")


def gen_instances(seed: int, count: int, shape, out_dir=None, max_unstable: int = 12,
                  margin_range=(1e-3, 0.05), frac=(0.3, 0.6), bias_scale: float = 0.1) -> list[Instance]:
    """Generate ``count`` calibrated instances, alternating the intended verdict.

    With ``out_dir`` each instance is written as ``<name>.net.json`` /
    ``<name>.spec.json`` plus a ``manifest.json`` listing them with their
    oracle minimum.
    """
    sizes = parse_shape(shape)
    if max_unstable > 24:
        raise ValueError(f"max_unstable {max_unstable} is beyond what calibration can enumerate")
    out = []
    for i in range(count):
        label = "UNSAT" if i % 2 == 0 else "falsifiable"
        out.append(make_instance(seed, i, sizes, label, margin_range, frac, max_unstable, bias_scale))
    if out_dir is not None:
        write_suite(out, out_dir)
    return out


def write_suite(instances: list[Instance], out_dir, modes=("plain", "biccos-base")) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for inst in instances:
        net_file, spec_file = f"{inst.name}.net.json", f"{inst.name}.spec.json"
        save_instance(inst.network, inst.spec, inst.prop, out_dir / net_file, out_dir / spec_file)
        rows.append({"name": inst.name, "network": net_file, "spec": spec_file, "label": inst.label,
                     "exact_min": inst.exact_min, "num_unstable": inst.num_unstable})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"instances": rows, "modes": list(modes)}, indent=1))
    return manifest
