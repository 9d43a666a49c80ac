"""ReLU networks, input sets and output properties.

A network is a stack of dense affine layers with ReLU between them and no
activation after the last layer. Hidden neurons are addressed either as
``(layer, index)`` pairs (0-based hidden layer) or by a flat integer id that
counts neurons layer by layer; cuts and split sets use the flat ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .propagation import PreActBounds


class InstanceError(ValueError):
    """Raised when an instance file cannot be parsed."""


class DimensionMismatchError(ValueError):
    """Raised when array shapes of a network, input set or property disagree."""


def _as_matrix(value, what: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InstanceError(f"{what}: not a numeric matrix ({exc})") from None
    if arr.ndim != 2:
        raise InstanceError(f"{what}: expected a 2-d array, got {arr.ndim}-d")
    if not np.all(np.isfinite(arr)):
        raise InstanceError(f"{what}: contains NaN or Inf")
    return arr


def _as_vector(value, what: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InstanceError(f"{what}: not a numeric vector ({exc})") from None
    if arr.ndim != 1:
        raise InstanceError(f"{what}: expected a 1-d array, got {arr.ndim}-d")
    if not np.all(np.isfinite(arr)):
        raise InstanceError(f"{what}: contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class ReluNetwork:
    """Dense ReLU network ``x -> W[L-1] relu(... relu(W[0] x + b[0]) ...) + b[L-1]``."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise DimensionMismatchError("need the same positive number of weight matrices and biases")
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=float)
            b = np.array(b, dtype=float).reshape(-1)
            if w.ndim != 2:
                raise DimensionMismatchError(f"layer {k + 1}: weights must be 2-d")
            if w.shape[0] != b.shape[0]:
                raise DimensionMismatchError(
                    f"layer {k + 1}: {w.shape[0]} weight rows but bias of length {b.shape[0]}")
            if k > 0 and w.shape[1] != ws[-1].shape[0]:
                raise DimensionMismatchError(
                    f"layer {k + 1}: expects input width {w.shape[1]} but layer {k} has width {ws[-1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InstanceError(f"layer {k + 1}: non-finite weights or bias")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        sizes = [w.shape[0] for w in ws[:-1]]
        object.__setattr__(self, "_offsets", np.concatenate([[0], np.cumsum(sizes, dtype=int)]).astype(int))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def num_hidden(self) -> int:
        return int(self._offsets[-1])

    @property
    def offsets(self) -> np.ndarray:
        """Start of each hidden layer in the flat neuron numbering (plus the total)."""
        return self._offsets

    def neuron_id(self, layer: int, index: int) -> int:
        return int(self._offsets[layer] + index)

    def neuron_of(self, nid: int) -> tuple[int, int]:
        layer = int(np.searchsorted(self._offsets, nid, side="right") - 1)
        return layer, int(nid - self._offsets[layer])

    def to_dict(self) -> dict:
        return {"layers": [{"weights": w.tolist(), "bias": b.tolist()}
                           for w, b in zip(self.weights, self.biases)]}


@dataclass(frozen=True, eq=False)
class InputSpec:
    """l-infinity ball of radius ``eps`` around ``x0``."""

    x0: np.ndarray
    eps: float

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x0)):
            raise InstanceError("x0 contains NaN or Inf")
        eps = float(self.eps)
        if not np.isfinite(eps) or eps < 0:
            raise InstanceError(f"eps must be finite and nonnegative, got {self.eps}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "eps", eps)

    @property
    def lower(self) -> np.ndarray:
        return self.x0 - self.eps

    @property
    def upper(self) -> np.ndarray:
        return self.x0 + self.eps

    def contains(self, x, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(np.asarray(x, dtype=float) - self.x0), initial=0.0) <= self.eps + tol)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.x0.size))


@dataclass(frozen=True, eq=False)
class PropertySpec:
    """The property ``c . f(x) + c0 >= 0`` for every x in the input set."""

    c: np.ndarray
    c0: float = 0.0

    def __post_init__(self):
        c = np.array(self.c, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)) or not np.isfinite(self.c0):
            raise InstanceError("property contains NaN or Inf")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "c0", float(self.c0))


def forward(network: ReluNetwork, x: np.ndarray, return_preacts: bool = False):
    """Forward pass for a single input or a batch of row inputs."""
    x = np.asarray(x, dtype=float)
    h = np.atleast_2d(x)
    if h.shape[1] != network.input_dim:
        raise DimensionMismatchError(f"input has width {h.shape[1]}, network expects {network.input_dim}")
    preacts = []
    for k, (w, b) in enumerate(zip(network.weights, network.biases)):
        pre = h @ w.T + b
        if k < network.num_layers - 1:
            preacts.append(pre)
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    if x.ndim == 1:
        h = h[0]
        preacts = [p[0] for p in preacts]
    return (h, preacts) if return_preacts else h


def evaluate(network: ReluNetwork, x) -> float | np.ndarray:
    """Exact network output; a float for single-output networks."""
    out = forward(network, x)
    if network.output_dim == 1:
        return float(out[0]) if out.ndim == 1 else out[:, 0]
    return out


def canonicalize(network: ReluNetwork, prop: PropertySpec) -> ReluNetwork:
    """Fold the property row into the last layer so the network has one output."""
    w_last, b_last = network.weights[-1], network.biases[-1]
    if prop.c.size != w_last.shape[0]:
        raise DimensionMismatchError(
            f"property has {prop.c.size} coefficients but the output layer has width {w_last.shape[0]}")
    w_new = (prop.c @ w_last)[None, :]
    b_new = np.array([prop.c @ b_last + prop.c0])
    return ReluNetwork(network.weights[:-1] + (w_new,), network.biases[:-1] + (b_new,))


def activation_pattern(network: ReluNetwork, bounds: PreActBounds, x) -> dict[int, bool]:
    """Active/inactive state of every unstable neuron at ``x`` (ties count as active)."""
    _, preacts = forward(network, np.asarray(x, dtype=float), return_preacts=True)
    flat = np.concatenate(preacts) if preacts else np.zeros(0)
    return {int(n): bool(flat[n] >= 0.0) for n in bounds.unstable_ids}


def check_dimensions(network: ReluNetwork, spec: InputSpec, prop: PropertySpec | None = None):
    if spec.x0.size != network.input_dim:
        raise DimensionMismatchError(
            f"x0 has length {spec.x0.size} but layer 1 expects input width {network.input_dim}")
    if prop is not None and prop.c.size != network.output_dim:
        raise DimensionMismatchError(
            f"property c has length {prop.c.size} but layer {network.num_layers} has width {network.output_dim}")


def _read_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InstanceError(f"{what} {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def network_from_dict(doc: dict) -> ReluNetwork:
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list) or not doc["layers"]:
        raise InstanceError("network: expected an object with a non-empty 'layers' list")
    ws, bs = [], []
    for k, layer in enumerate(doc["layers"]):
        if not isinstance(layer, dict) or "weights" not in layer or "bias" not in layer:
            raise InstanceError(f"network: layer {k + 1} needs 'weights' and 'bias'")
        ws.append(_as_matrix(layer["weights"], f"network: layer {k + 1} weights"))
        bs.append(_as_vector(layer["bias"], f"network: layer {k + 1} bias"))
    return ReluNetwork(tuple(ws), tuple(bs))


def spec_from_dict(doc: dict) -> tuple[InputSpec, PropertySpec]:
    if not isinstance(doc, dict):
        raise InstanceError("spec: expected a JSON object")
    for key in ("x0", "eps", "c"):
        if key not in doc:
            raise InstanceError(f"spec: missing field '{key}'")
    x0 = _as_vector(doc["x0"], "spec: field 'x0'")
    c = _as_vector(doc["c"], "spec: field 'c'")
    try:
        eps = float(doc["eps"])
        c0 = float(doc.get("c0", 0.0))
    except (TypeError, ValueError):
        raise InstanceError("spec: fields 'eps' and 'c0' must be numbers") from None
    if not (np.isfinite(eps) and np.isfinite(c0)):
        raise InstanceError("spec: 'eps' and 'c0' must be finite")
    return InputSpec(x0, eps), PropertySpec(c, c0)


def load_instance(network_file, spec_file) -> tuple[ReluNetwork, InputSpec, PropertySpec]:
    network = network_from_dict(_read_json(network_file, "network file"))
    spec, prop = spec_from_dict(_read_json(spec_file, "spec file"))
    check_dimensions(network, spec, prop)
    return network, spec, prop


def save_instance(network: ReluNetwork, spec: InputSpec, prop: PropertySpec, network_file, spec_file):
    Path(network_file).write_text(json.dumps(network.to_dict()))
    Path(spec_file).write_text(json.dumps(
        {"x0": spec.x0.tolist(), "eps": spec.eps, "c": prop.c.tolist(), "c0": prop.c0}))


def random_network(sizes: Sequence[int], rng: np.random.Generator, gain: float = 1.0,
                   bias_scale: float = 0.1) -> ReluNetwork:
    """Gaussian weights scaled by ``gain / sqrt(fan_in)``."""
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_out, fan_in)))
        bs.append(rng.normal(0.0, bias_scale, size=fan_out))
    return ReluNetwork(tuple(ws), tuple(bs))
