"""Dense feedforward networks with per-modality encoders and a shared trunk.

Every modality routes its input through its own encoder layers to the
``join`` representation, then through the trunk layers ``shared1``,
``shared2`` and ``logits``.  Routing is explicit: a :class:`NetworkSpec`
maps each modality to an ordered list of parameter-layer names, so the same
machinery covers a shared trunk, private per-modality trunks, and a single
encoder shared by several modalities.

Forward and backward work on a single vector or on an ``(N, dim)`` batch;
batched losses and gradients are means over the batch.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .statmodel import ActivationModel, nll, nll_grad

TRUNK_ROLES = ("shared1", "shared2", "logits")
REG_ROLES = ("join", "shared1", "shared2")
ACTIVATIONS = ("relu", "identity")
CHECKPOINT_MAGIC = b"XMP1"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise NetworkError(f"layer {self.name!r} has a non-positive dimension")


@dataclass(frozen=True)
class NetworkSpec:
    """Parameter layers plus, per modality, the (layer name, role) route.

    Roles are the activation names that appear in a trace: ``enc<i>`` for
    hidden encoder layers, then ``join``, ``shared1``, ``shared2``, ``logits``.
    """

    layers: Mapping[str, LayerSpec]
    routes: Mapping[str, tuple[tuple[str, str], ...]]
    join_dim: int
    num_classes: int

    def __post_init__(self):
        for modality, route in self.routes.items():
            roles = [r for _, r in route]
            if roles[-4:] != ["join", *TRUNK_ROLES] or len(set(roles)) != len(roles):
                raise NetworkError(f"route for {modality!r} must end in join/shared1/shared2/logits")
            prev = None
            for name, role in route:
                if name not in self.layers:
                    raise NetworkError(f"route for {modality!r} names unknown layer {name!r}")
                ls = self.layers[name]
                if prev is not None and ls.in_dim != prev:
                    raise NetworkError(f"dimension mismatch entering layer {name!r}")
                if role == "join" and ls.out_dim != self.join_dim:
                    raise NetworkError("encoder output must equal join_dim")
                if role == "logits" and ls.out_dim != self.num_classes:
                    raise NetworkError("logits width must equal num_classes")
                prev = ls.out_dim

    @property
    def modalities(self) -> list[str]:
        return list(self.routes)

    def input_dim(self, modality: str) -> int:
        return self.layers[self.route(modality)[0][0]].in_dim

    def route(self, modality: str) -> tuple[tuple[str, str], ...]:
        try:
            return self.routes[modality]
        except KeyError:
            raise NetworkError(f"unknown modality {modality!r}") from None

    def layer_for(self, modality: str, role: str) -> str:
        for name, r in self.route(modality):
            if r == role:
                return name
        raise NetworkError(f"modality {modality!r} has no layer with role {role!r}")

    def role_width(self, role: str) -> int:
        for route in self.routes.values():
            for name, r in route:
                if r == role:
                    return self.layers[name].out_dim
        raise NetworkError(f"unknown layer {role!r}")

    def trunk_layer_names(self) -> list[str]:
        names: list[str] = []
        for route in self.routes.values():
            for name, role in route:
                if role in TRUNK_ROLES and name not in names:
                    names.append(name)
        return names

    def to_dict(self) -> dict:
        return {
            "layers": [[l.name, l.in_dim, l.out_dim, l.activation] for l in self.layers.values()],
            "routes": {m: [list(p) for p in r] for m, r in self.routes.items()},
            "join_dim": self.join_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = {row[0]: LayerSpec(*row) for row in d["layers"]}
        routes = {m: tuple((n, r) for n, r in route) for m, route in d["routes"].items()}
        return cls(layers, routes, int(d["join_dim"]), int(d["num_classes"]))

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json()).digest()


def build_spec(
    input_dims: Mapping[str, int],
    num_classes: int,
    *,
    enc_hidden: Sequence[int] = (64,),
    join_dim: int = 64,
    shared_dims: tuple[int, int] = (64, 64),
    private_trunks: bool = False,
    shared_encoder: Iterable[str] = (),
) -> NetworkSpec:
    """Build the standard topology.

    ``private_trunks`` gives every modality its own copy of the trunk layers
    (named ``<modality>.shared1`` etc.).  Modalities listed in
    ``shared_encoder`` all route through one encoder named ``shared.*``;
    they must have equal input dimensions.
    """
    shared_encoder = list(shared_encoder)
    if shared_encoder and len({input_dims[m] for m in shared_encoder}) != 1:
        raise NetworkError("shared encoder modalities must have equal input dims")
    layers: dict[str, LayerSpec] = {}
    routes: dict[str, tuple[tuple[str, str], ...]] = {}

    def add(name, i, o, act):
        if name not in layers:
            layers[name] = LayerSpec(name, i, o, act)
        return name

    if not private_trunks:
        trunk = [
            add("shared1", join_dim, shared_dims[0], "relu"),
            add("shared2", shared_dims[0], shared_dims[1], "relu"),
            add("logits", shared_dims[1], num_classes, "identity"),
        ]
    for m, in_dim in input_dims.items():
        prefix = "shared" if m in shared_encoder else m
        route: list[tuple[str, str]] = []
        prev = in_dim
        for i, width in enumerate(enc_hidden, start=1):
            route.append((add(f"{prefix}.enc{i}", prev, width, "relu"), f"enc{i}"))
            prev = width
        route.append((add(f"{prefix}.join", prev, join_dim, "relu"), "join"))
        if private_trunks:
            names = [
                add(f"{m}.shared1", join_dim, shared_dims[0], "relu"),
                add(f"{m}.shared2", shared_dims[0], shared_dims[1], "relu"),
                add(f"{m}.logits", shared_dims[1], num_classes, "identity"),
            ]
        else:
            names = trunk
        route.extend(zip(names, TRUNK_ROLES))
        routes[m] = tuple(route)
    return NetworkSpec(layers, routes, join_dim, num_classes)


@dataclass
class Params:
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    frozen: dict[str, bool]

    def copy(self) -> "Params":
        return Params(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.biases.items()},
            dict(self.frozen),
        )

    def equals(self, other: "Params", names: Iterable[str] | None = None) -> bool:
        """Bit-level equality of values (freeze flags ignored)."""
        names = list(self.weights) if names is None else list(names)
        return all(
            self.weights[n].tobytes() == other.weights[n].tobytes()
            and self.biases[n].tobytes() == other.biases[n].tobytes()
            for n in names
        )


@dataclass
class Grads:
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ActivationTrace:
    modality: str
    input: np.ndarray
    activations: dict[str, np.ndarray]

    def __getitem__(self, role: str) -> np.ndarray:
        return self.activations[role]


@dataclass(frozen=True)
class RegAttachment:
    layer_name: str
    lam: float
    model: ActivationModel

    def __post_init__(self):
        if self.layer_name not in REG_ROLES:
            raise NetworkError(f"regularizers attach to {REG_ROLES}, not {self.layer_name!r}")
        if not self.lam >= 0:
            raise NetworkError("lambda must be >= 0")


def init_params(spec: NetworkSpec, seed: int, init_std: float = 0.1) -> Params:
    if not init_std > 0:
        raise NetworkError("init_std must be positive")
    rng = np.random.default_rng(seed)
    weights, biases, frozen = {}, {}, {}
    for name, ls in spec.layers.items():
        weights[name] = rng.normal(0.0, init_std, size=(ls.out_dim, ls.in_dim))
        biases[name] = np.zeros(ls.out_dim)
        frozen[name] = False
    return Params(weights, biases, frozen)


def forward(params: Params, spec: NetworkSpec, x, modality: str) -> ActivationTrace:
    route = spec.route(modality)
    x = np.asarray(x, dtype=np.float64)
    h = x[None, :] if x.ndim == 1 else x
    if h.ndim != 2 or h.shape[1] != spec.input_dim(modality):
        raise NetworkError(
            f"dimension mismatch: modality {modality!r} expects {spec.input_dim(modality)} inputs"
        )
    acts: dict[str, np.ndarray] = {}
    for name, role in route:
        z = h @ params.weights[name].T + params.biases[name]
        h = np.maximum(z, 0.0) if spec.layers[name].activation == "relu" else z
        acts[role] = h
    if x.ndim == 1:
        acts = {k: v[0] for k, v in acts.items()}
    return ActivationTrace(modality, x, acts)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_ce(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise NetworkError(f"label {label} out of range")
    return float(-_log_softmax(logits)[label])


def softmax_ce_batch(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise NetworkError("label out of range")
    return -_log_softmax(logits)[np.arange(labels.size), labels]


def _batched(trace: ActivationTrace, labels) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if trace.input.ndim == 1:
        return {k: v[None, :] for k, v in trace.activations.items()}, trace.input[None, :], labels
    return trace.activations, trace.input, labels


def _check_regs(regs: Sequence[RegAttachment], acts: Mapping[str, np.ndarray]) -> None:
    for r in regs:
        if r.layer_name not in acts:
            raise NetworkError(f"regularizer attached to missing layer {r.layer_name!r}")
        if r.model.dim != acts[r.layer_name].shape[1]:
            raise NetworkError(f"dimension mismatch at regularized layer {r.layer_name!r}")


def objective_terms(trace: ActivationTrace, labels, regs: Sequence[RegAttachment]) -> tuple[float, dict[str, float]]:
    """Batch-mean cross-entropy and batch-mean unweighted regularizer values."""
    acts, _, labels = _batched(trace, labels)
    _check_regs(regs, acts)
    ce = float(softmax_ce_batch(acts["logits"], labels).mean())
    reg_terms = {r.layer_name: float(np.mean(nll(r.model, acts[r.layer_name]))) for r in regs}
    return ce, reg_terms


def backward(
    trace: ActivationTrace,
    labels,
    regs: Sequence[RegAttachment],
    params: Params,
    spec: NetworkSpec,
) -> Grads:
    """Gradients of mean(CE) + sum_i lam_i * mean(R_i(h_i)) over the batch.

    Regularizer gradients are added to the backpropagated signal at the
    post-activation of their layer.  Only layers on the trace's route get
    entries.
    """
    acts, x, labels = _batched(trace, labels)
    _check_regs(regs, acts)
    route = spec.route(trace.modality)
    n = x.shape[0]
    if labels.size != n:
        raise NetworkError("dimension mismatch between labels and batch")
    by_role = {r.layer_name: [] for r in regs}
    for r in regs:
        by_role[r.layer_name].append(r)

    logits = acts["logits"]
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise NetworkError("label out of range")
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(n), labels] -= 1.0
    delta = probs / n  # d loss / d post-activation of the current layer

    grads = Grads()
    for idx in range(len(route) - 1, -1, -1):
        name, role = route[idx]
        h = acts[role]
        for r in by_role.get(role, ()):
            if r.lam != 0.0:
                delta = delta + (r.lam / n) * nll_grad(r.model, h)
        if spec.layers[name].activation == "relu":
            delta = delta * (h > 0)
        below = acts[route[idx - 1][1]] if idx > 0 else x
        gw = delta.T @ below
        gb = delta.sum(axis=0)
        if name in grads.weights:
            grads.weights[name] += gw
            grads.biases[name] += gb
        else:
            grads.weights[name] = gw
            grads.biases[name] = gb
        if idx > 0:
            delta = delta @ params.weights[name]
    return grads


def sgd_step(params: Params, grads: Grads, lr: float, weight_decay: float = 0.0) -> Params:
    """p <- p - lr * (g + weight_decay * p) on unfrozen layers present in ``grads``.

    Biases take no weight decay.  Returns a new :class:`Params`.
    """
    if not lr > 0 or weight_decay < 0:
        raise NetworkError("lr must be > 0 and weight_decay >= 0")
    out = Params(dict(params.weights), dict(params.biases), dict(params.frozen))
    for name, gw in grads.weights.items():
        if name not in params.weights:
            raise NetworkError(f"gradient for unknown layer {name!r}")
        w, b, gb = params.weights[name], params.biases[name], grads.biases[name]
        if gw.shape != w.shape or gb.shape != b.shape:
            raise NetworkError(f"shape mismatch for layer {name!r}")
        if params.frozen[name]:
            continue
        out.weights[name] = w - lr * (gw + weight_decay * w)
        out.biases[name] = b - lr * gb
    return out


def set_freeze(params: Params, layer_names: Iterable[str], flag: bool) -> Params:
    names = list(layer_names)
    for n in names:
        if n not in params.frozen:
            raise NetworkError(f"unknown layer {n!r}")
    frozen = dict(params.frozen)
    for n in names:
        frozen[n] = bool(flag)
    return Params(params.weights, params.biases, frozen)


# --- checkpoint file ----------------------------------------------------

def checkpoint_bytes(spec: NetworkSpec, params: Params) -> bytes:
    """XMP1: magic, spec sha256, spec JSON, then per-layer f64 arrays and freeze flags."""
    spec_json = spec.canonical_json()
    out = bytearray(CHECKPOINT_MAGIC)
    out += spec.digest()
    out += struct.pack("<I", len(spec_json)) + spec_json
    out += struct.pack("<I", len(spec.layers))
    for name, ls in spec.layers.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<IIB", ls.out_dim, ls.in_dim, int(params.frozen[name]))
        out += np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes()
        out += np.ascontiguousarray(params.biases[name], dtype="<f8").tobytes()
    return bytes(out)


def write_checkpoint(path, spec: NetworkSpec, params: Params) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, params))


def read_checkpoint(path) -> tuple[NetworkSpec, Params]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise NetworkError("bad magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise NetworkError("truncated file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    digest = take(32)
    (spec_len,) = struct.unpack("<I", take(4))
    spec_json = take(spec_len)
    spec = NetworkSpec.from_dict(json.loads(spec_json))
    if spec.digest() != digest:
        raise NetworkError("spec digest mismatch")
    (count,) = struct.unpack("<I", take(4))
    weights, biases, frozen = {}, {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        out_dim, in_dim, flag = struct.unpack("<IIB", take(9))
        ls = spec.layers.get(name)
        if ls is None or (ls.out_dim, ls.in_dim) != (out_dim, in_dim):
            raise NetworkError(f"layer {name!r} does not match the embedded spec")
        weights[name] = np.frombuffer(take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim).astype(np.float64)
        biases[name] = np.frombuffer(take(8 * out_dim), dtype="<f8").astype(np.float64)
        frozen[name] = bool(flag)
    if pos != len(buf):
        raise NetworkError("trailing data")
    return spec, Params(weights, biases, frozen)
