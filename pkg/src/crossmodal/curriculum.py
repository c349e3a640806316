"""Training procedures: source pretraining, layer statistics, baselines and methods.

Every method starts from the same pretrained single-modality source network:
its trunk initializes the trunk(s) of the multimodal network and its encoder
initializes the source modality's encoder.  Other encoders are fresh.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import network as nw
from .network import NetworkSpec, Params, RegAttachment
from .statmodel import ActivationModel, EmConfig, GaussianModel, GmmModel, fit_gaussian, fit_gmm
from .synthdata import Dataset


class TrainingError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class MethodId(str, enum.Enum):
    BL_IND = "bl-ind"
    BL_SHFINAL = "bl-shfinal"
    BL_SHALL = "bl-shall"
    A_TUNE = "a-tune"
    A_TUNE_FREE = "a-tune-free"
    B_GAUSS = "b-gauss"
    B_GMM = "b-gmm"
    C_COMBINED = "c"

    @property
    def stats_kind(self) -> str | None:
        if self is MethodId.B_GAUSS:
            return "gaussian"
        if self in (MethodId.B_GMM, MethodId.C_COMBINED):
            return "gmm"
        return None

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    MethodId.BL_IND: "BL-Ind",
    MethodId.BL_SHFINAL: "BL-ShFinal",
    MethodId.BL_SHALL: "BL-ShAll",
    MethodId.A_TUNE: "A: Tune",
    MethodId.A_TUNE_FREE: "A: Tune (Free)",
    MethodId.B_GAUSS: "B: StatReg (Gaussian)",
    MethodId.B_GMM: "B: StatReg (GMM)",
    MethodId.C_COMBINED: "C: Tune + StatReg (GMM)",
}

REG_LAYERS = ("join", "shared1", "shared2")

# sub-seed tags
_PRETRAIN_INIT, _PRETRAIN_BATCH, _TRAIN_INIT, _TRAIN_BATCH, _EM = range(1, 6)


def subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass
class TrainConfig:
    method: MethodId = MethodId.C_COMBINED
    lr: float = 1e-2
    weight_decay: float = 5e-4
    batch_size: int = 32
    phase1_steps: int = 2000
    phase2_steps: int = 2000
    lambdas: dict[str, float] = field(default_factory=lambda: {l: 0.1 for l in REG_LAYERS})
    reg_layers: tuple[str, ...] = REG_LAYERS
    gmm_k: int = 10
    seed: int = 0
    source_modality: str = "nat"
    init_std: float = 0.1
    enc_hidden: tuple[int, ...] = (64,)
    join_dim: int = 64
    shared_dims: tuple[int, int] = (64, 64)
    pretrain_steps: int = 75  # deliberately under-trained source, see README
    pretrain_lr: float = 0.05
    em_max_iters: int = 200
    em_tol: float = 1e-7
    variance_floor: float = 0.2  # per-coordinate floor for fitted layer statistics

    def __post_init__(self):
        self.method = MethodId(self.method)
        self.reg_layers = tuple(self.reg_layers)
        self.enc_hidden = tuple(self.enc_hidden)
        self.shared_dims = tuple(self.shared_dims)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0 or not self.pretrain_lr > 0:
            raise TrainingError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise TrainingError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if min(self.phase1_steps, self.phase2_steps, self.pretrain_steps) < 0:
            raise TrainingError("step counts must be >= 0")
        for name, lam in self.lambdas.items():
            if name not in REG_LAYERS:
                raise TrainingError(f"lambda for unknown layer {name!r}")
            if not lam >= 0:
                raise TrainingError(f"lambda for {name!r} must be >= 0")
        for name in self.reg_layers:
            if name not in REG_LAYERS:
                raise TrainingError(f"cannot regularize layer {name!r}")
        if self.gmm_k < 1:
            raise TrainingError("gmm_k must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    def em_config(self) -> EmConfig:
        return EmConfig(self.gmm_k, self.em_max_iters, self.em_tol, self.variance_floor, subseed(self.seed, _EM))


@dataclass
class TrainedModel:
    spec: NetworkSpec
    params: Params
    method: str
    log: list[dict] = field(default_factory=list)

    def checkpoint_bytes(self) -> bytes:
        return nw.checkpoint_bytes(self.spec, self.params)


@dataclass
class Batch:
    modality: str
    x: np.ndarray
    labels: np.ndarray


def objective_value(model: TrainedModel, batch: Batch, regs: Sequence[RegAttachment]) -> tuple[float, dict[str, float]]:
    """Batch-mean CE and unweighted per-layer regularizer values.

    The differentiated objective is ``ce + sum(lam_i * reg_terms[i])``; see
    :func:`total_objective`.
    """
    trace = nw.forward(model.params, model.spec, batch.x, batch.modality)
    return nw.objective_terms(trace, batch.labels, regs)


def total_objective(ce: float, reg_terms: Mapping[str, float], regs: Sequence[RegAttachment]) -> float:
    lam = {r.layer_name: r.lam for r in regs}
    return ce + sum(lam[k] * v for k, v in reg_terms.items())


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what}")


def _sgd_update(spec, params, batch, labels, regs, lr, wd, step, tag):
    trace = nw.forward(params, spec, batch, tag[0])
    ce, reg_terms = nw.objective_terms(trace, labels, regs)
    total = total_objective(ce, reg_terms, regs)
    _check_finite(total, f"loss at step {step} ({'+'.join(tag)})")
    grads = nw.backward(trace, labels, regs, params, spec)
    params = nw.sgd_step(params, grads, lr, wd)
    record = {"step": step, "modality": "+".join(tag), "ce": ce, "reg_terms": reg_terms, "total": total}
    return params, record


def accuracy(model: TrainedModel, x: np.ndarray, labels: np.ndarray, modality: str) -> float:
    logits = nw.forward(model.params, model.spec, x, modality)["logits"]
    return float(np.mean(logits.argmax(axis=1) == labels))


def pretrain_source(data: Dataset, cfg: TrainConfig) -> TrainedModel:
    """Train the single-modality source network (encoder + trunk) on softmax CE."""
    src = cfg.source_modality
    if src not in data.dims:
        raise TrainingError(f"source modality {src!r} not in dataset")
    split = data.train[src]
    if np.unique(split.labels).size < 2:
        raise TrainingError("source data must contain at least 2 classes")
    spec = nw.build_spec({src: data.dims[src]}, data.num_classes, enc_hidden=cfg.enc_hidden,
                         join_dim=cfg.join_dim, shared_dims=cfg.shared_dims)
    params = nw.init_params(spec, subseed(cfg.seed, _PRETRAIN_INIT), cfg.init_std)
    rng = np.random.default_rng(subseed(cfg.seed, _PRETRAIN_BATCH))
    log = []
    for step in range(cfg.pretrain_steps):
        idx = rng.integers(0, len(split), size=cfg.batch_size)
        params, rec = _sgd_update(spec, params, split.x[idx], split.labels[idx], (), cfg.pretrain_lr,
                                  cfg.weight_decay, step, (src,))
        log.append(rec)
    return TrainedModel(spec, params, "source", log)


def layer_activations(model: TrainedModel, x: np.ndarray, modality: str, layer: str) -> np.ndarray:
    return nw.forward(model.params, model.spec, x, modality)[layer]


def fit_layer_stats(source: TrainedModel, data: Dataset, layers: Sequence[str], kind: str,
                    cfg: TrainConfig) -> dict[str, ActivationModel]:
    """Fit one Gaussian or GMM per layer on source-network activations of the source training set."""
    src = source.spec.modalities[0]
    split = data.train[src]
    if len(split) == 0:
        raise TrainingError("no source examples to fit statistics on")
    for layer in layers:
        if layer not in REG_LAYERS:
            raise TrainingError(f"cannot fit statistics for layer {layer!r}")
    trace = nw.forward(source.params, source.spec, split.x, src)
    out: dict[str, ActivationModel] = {}
    for layer in layers:
        h = trace[layer]
        if kind == "gaussian":
            out[layer] = fit_gaussian(h, cfg.variance_floor)
        elif kind == "gmm":
            out[layer] = fit_gmm(h, cfg.em_config())
        else:
            raise TrainingError(f"unknown statistics kind {kind!r}")
    return out


def shareable_group(data: Dataset, source_modality: str) -> list[str]:
    """Modalities that can share the source encoder (same input dimension)."""
    dim = data.dims[source_modality]
    return [m for m in data.modalities if data.dims[m] == dim]


def build_method_spec(method: MethodId, data: Dataset, cfg: TrainConfig) -> NetworkSpec:
    kwargs = dict(enc_hidden=cfg.enc_hidden, join_dim=cfg.join_dim, shared_dims=cfg.shared_dims)
    if method is MethodId.BL_IND:
        return nw.build_spec(data.dims, data.num_classes, private_trunks=True, **kwargs)
    if method is MethodId.BL_SHALL:
        group = shareable_group(data, cfg.source_modality)
        if len(group) < 2:
            raise TrainingError("BL_SHALL needs another modality with the source's input dimension")
        return nw.build_spec(data.dims, data.num_classes, shared_encoder=group, **kwargs)
    return nw.build_spec(data.dims, data.num_classes, **kwargs)


def init_from_source(spec: NetworkSpec, source: TrainedModel, cfg: TrainConfig) -> Params:
    """Copy the source network into every layer it fits.

    Trunk layers must fit.  Encoder layers are copied role by role where the
    shapes agree (every modality with the source's input dimension gets the
    whole source encoder); the rest keep their seeded random init.
    """
    params = nw.init_params(spec, subseed(cfg.seed, _TRAIN_INIT), cfg.init_std)
    src = source.spec.modalities[0]
    src_roles = {role: name for name, role in source.spec.route(src)}
    for modality in spec.modalities:
        for name, role in spec.route(modality):
            from_name = src_roles.get(role)
            fits = from_name is not None and source.params.weights[from_name].shape == params.weights[name].shape
            if role in nw.TRUNK_ROLES and not fits:
                raise TrainingError(f"source layer {from_name!r} does not fit {name!r}")
            if fits:
                params.weights[name] = source.params.weights[from_name].copy()
                params.biases[name] = source.params.biases[from_name].copy()
    return params


def make_regs(cfg: TrainConfig, stats: Mapping[str, ActivationModel]) -> list[RegAttachment]:
    kind = cfg.method.stats_kind
    want = GaussianModel if kind == "gaussian" else GmmModel
    regs = []
    for layer in cfg.reg_layers:
        if layer not in stats:
            raise TrainingError(f"no fitted statistics for layer {layer!r}")
        if not isinstance(stats[layer], want):
            raise TrainingError(f"method {cfg.method.value} needs {kind} statistics for {layer!r}")
        lam = cfg.lambdas.get(layer, 0.1)
        if lam != 0.0:
            regs.append(RegAttachment(layer, lam, stats[layer]))
    return regs


def train(cfg: TrainConfig, data: Dataset, source: TrainedModel,
          stats: Mapping[str, ActivationModel] | None = None) -> TrainedModel:
    """Run one method.  One log record per parameter update."""
    method = cfg.method
    if cfg.source_modality not in data.dims:
        raise TrainingError(f"source modality {cfg.source_modality!r} not in dataset")
    regs: list[RegAttachment] = []
    if method.stats_kind is not None:
        if stats is None:
            raise TrainingError(f"method {method.value} requires fitted layer statistics")
        regs = make_regs(cfg, stats)

    spec = build_method_spec(method, data, cfg)
    params = init_from_source(spec, source, cfg)
    trunk = spec.trunk_layer_names()
    staged = method in (MethodId.A_TUNE, MethodId.A_TUNE_FREE, MethodId.C_COMBINED)
    if staged:
        params = nw.set_freeze(params, trunk, True)
    active_regs = regs if method in (MethodId.B_GAUSS, MethodId.B_GMM) else []

    group = shareable_group(data, cfg.source_modality) if method is MethodId.BL_SHALL else []
    modalities = data.modalities
    rng = np.random.default_rng(subseed(cfg.seed, _TRAIN_BATCH))
    log: list[dict] = []
    for step in range(cfg.total_steps):
        if step == cfg.phase1_steps and method in (MethodId.A_TUNE_FREE, MethodId.C_COMBINED):
            params = nw.set_freeze(params, trunk, False)
            if method is MethodId.C_COMBINED:
                active_regs = regs
        draws = {}
        for m in modalities:
            split = data.train[m]
            draws[m] = rng.integers(0, len(split), size=cfg.batch_size)
        if group:
            x = np.concatenate([data.train[m].x[draws[m]] for m in group])
            y = np.concatenate([data.train[m].labels[draws[m]] for m in group])
            params, rec = _sgd_update(spec, params, x, y, active_regs, cfg.lr, cfg.weight_decay, step, tuple(group))
            log.append(rec)
        for m in modalities:
            if m in group:
                continue
            split = data.train[m]
            params, rec = _sgd_update(spec, params, split.x[draws[m]], split.labels[draws[m]], active_regs,
                                      cfg.lr, cfg.weight_decay, step, (m,))
            log.append(rec)
    return TrainedModel(spec, params, method.value, log)
