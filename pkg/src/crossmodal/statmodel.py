"""Gaussian and diagonal-covariance GMM activation models.

Both models are used as activation regularizers: the negative log likelihood
of a hidden-layer activation vector and its gradient with respect to that
vector.  The single Gaussian drops its normalizing constant; the mixture
keeps it, since mixture weights make per-component constants matter.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_VARIANCE_FLOOR = 1e-6
STATS_MAGIC = b"XMS1"


class StatModelError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    var_diag: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        var = np.array(self.var_diag, dtype=np.float64).reshape(-1)
        if mean.size < 1 or mean.shape != var.shape:
            raise StatModelError("dimension mismatch")
        if not np.all(var > 0):
            raise StatModelError("variances must be positive")
        mean.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_diag", var)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    var_diags: np.ndarray
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        var = np.array(self.var_diags, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[None, :]
        if var.ndim == 1:
            var = var[None, :]
        if w.size < 1 or mu.shape[0] != w.size or mu.shape != var.shape or mu.shape[1] < 1:
            raise StatModelError("dimension mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise StatModelError("mixture weights must be non-negative and sum to 1")
        if not self.variance_floor > 0 or not np.all(var >= self.variance_floor):
            raise StatModelError("variances must be >= variance_floor > 0")
        for a in (w, mu, var):
            a.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "var_diags", var)

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_gaussian(cls, g: GaussianModel) -> "GmmModel":
        floor = min(DEFAULT_VARIANCE_FLOOR, float(g.var_diag.min()))
        return cls(np.ones(1), g.mean[None, :], g.var_diag[None, :], floor)


ActivationModel = Union[GaussianModel, GmmModel]


@dataclass
class EmConfig:
    k: int = 10
    max_iters: int = 200
    loglik_rel_tol: float = 1e-7
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise StatModelError("k must be >= 1")
        if self.max_iters < 1:
            raise StatModelError("max_iters must be >= 1")
        if not self.variance_floor > 0:
            raise StatModelError("variance_floor must be > 0")


def _as_samples(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        x = np.asarray(samples, dtype=np.float64)
    else:
        rows = [np.asarray(s, dtype=np.float64).reshape(-1) for s in samples]
        if rows and len({r.size for r in rows}) > 1:
            raise StatModelError("dimension mismatch")
        x = np.array(rows, dtype=np.float64)
    if x.ndim != 2:
        raise StatModelError("dimension mismatch")
    return x


def _as_batch(h, dim: int) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = h[None, :] if single else h
    if h2.ndim != 2 or h2.shape[1] != dim:
        raise StatModelError("dimension mismatch")
    return h2, single


def fit_gaussian(samples, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> GaussianModel:
    """Per-dimension mean and population variance, floored."""
    x = _as_samples(samples)
    if x.shape[0] < 2:
        raise StatModelError("insufficient samples")
    if not np.all(np.isfinite(x)):
        raise StatModelError("non-finite sample values")
    mean = x.mean(axis=0)
    var = np.maximum(((x - mean) ** 2).mean(axis=0), variance_floor)
    return GaussianModel(mean, var)


def _component_logpdf(x: np.ndarray, means: np.ndarray, var_diags: np.ndarray) -> np.ndarray:
    """log N(x_n; mu_k, diag(var_k)) as an (N, K) array."""
    diff = x[:, None, :] - means[None, :, :]
    maha = np.einsum("nkd,kd->nk", diff * diff, 1.0 / var_diags)
    log_det = np.log(var_diags).sum(axis=1)
    return -0.5 * (maha + log_det[None, :] + means.shape[1] * LOG_2PI)


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _joint_loglik(m: GmmModel, x: np.ndarray) -> np.ndarray:
    return _component_logpdf(x, m.means, m.var_diags) + _log_weights(m.weights)[None, :]


def em_fit(samples, cfg: EmConfig) -> tuple[GmmModel, list[float]]:
    """EM for a diagonal GMM; returns the model and the per-iteration mean log-likelihood.

    ``history[i]`` is the mean log-likelihood of the parameters after ``i``
    M-steps (``history[0]`` is the initialization).
    """
    x = _as_samples(samples)
    if not np.all(np.isfinite(x)):
        raise StatModelError("non-finite sample values")
    n, d = x.shape
    k = cfg.k
    if n < k:
        raise StatModelError(f"need at least k={k} samples, got {n}")
    floor = cfg.variance_floor
    rng = np.random.default_rng(cfg.seed)

    # initial means: k distinct rows, preferring distinct values
    unique_rows = np.unique(x, axis=0)
    if unique_rows.shape[0] >= k:
        means = unique_rows[rng.choice(unique_rows.shape[0], size=k, replace=False)]
    else:
        means = x[rng.choice(n, size=k, replace=False)]
    global_var = np.maximum(((x - x.mean(axis=0)) ** 2).mean(axis=0), floor)
    var_diags = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)

    history: list[float] = []
    for it in range(cfg.max_iters + 1):
        joint = _component_logpdf(x, means, var_diags) + _log_weights(weights)[None, :]
        log_norm = _logsumexp_rows(joint)
        ll = float(log_norm.mean())
        history.append(ll)
        if it > 0:
            prev = history[-2]
            if ll - prev <= cfg.loglik_rel_tol * abs(prev):
                break
        if it == cfg.max_iters:
            break
        resp = np.exp(joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-12
        safe_nk = np.where(empty, 1.0, nk)
        new_means = (resp.T @ x) / safe_nk[:, None]
        diff2 = (x[:, None, :] - new_means[None, :, :]) ** 2
        new_var = np.einsum("nk,nkd->kd", resp, diff2) / safe_nk[:, None]
        new_var = np.maximum(new_var, floor)
        if np.any(empty):
            worst = x[int(np.argmin(log_norm))]
            new_means[empty] = worst
            new_var[empty] = global_var
        weights = nk / nk.sum()
        means, var_diags = new_means, new_var

    model = GmmModel(weights / weights.sum(), means, var_diags, floor)
    return model, history


def fit_gmm(samples, cfg: EmConfig) -> GmmModel:
    return em_fit(samples, cfg)[0]


def gaussian_nll(m: GaussianModel, h):
    """Constant-free quadratic form 0.5 * (h - mu)^T diag(var)^-1 (h - mu).

    Accepts a single vector or an (N, D) batch.
    """
    h2, single = _as_batch(h, m.dim)
    diff = h2 - m.mean
    out = 0.5 * (diff * diff / m.var_diag).sum(axis=1)
    return float(out[0]) if single else out


def gaussian_nll_grad(m: GaussianModel, h) -> np.ndarray:
    h2, single = _as_batch(h, m.dim)
    g = (h2 - m.mean) / m.var_diag
    return g[0] if single else g


def gmm_nll(m: GmmModel, h):
    """-log sum_k w_k N(h; mu_k, var_k), normalizers included."""
    h2, single = _as_batch(h, m.dim)
    out = -_logsumexp_rows(_joint_loglik(m, h2))
    return float(out[0]) if single else out


def gmm_responsibilities(m: GmmModel, h) -> np.ndarray:
    h2, single = _as_batch(h, m.dim)
    joint = _joint_loglik(m, h2)
    resp = np.exp(joint - _logsumexp_rows(joint)[:, None])
    return resp[0] if single else resp


def gmm_nll_grad(m: GmmModel, h) -> np.ndarray:
    h2, single = _as_batch(h, m.dim)
    resp = gmm_responsibilities(m, h2)
    # sum_k gamma_k (h - mu_k) / var_k
    inv_var = 1.0 / m.var_diags
    g = h2 * (resp @ inv_var) - resp @ (m.means * inv_var)
    return g[0] if single else g


def gmm_mean_loglik(m: GmmModel, samples) -> float:
    if len(samples) == 0:
        raise StatModelError("empty sample set")
    x = _as_samples(samples)
    return float(-np.mean(gmm_nll(m, x)))


def nll(m: ActivationModel, h):
    return gaussian_nll(m, h) if isinstance(m, GaussianModel) else gmm_nll(m, h)


def nll_grad(m: ActivationModel, h) -> np.ndarray:
    return gaussian_nll_grad(m, h) if isinstance(m, GaussianModel) else gmm_nll_grad(m, h)


# --- stats file ---------------------------------------------------------

_KIND_CODES = {"gaussian": 0, "gmm": 1}


def write_stats(path, models: Mapping[str, ActivationModel]) -> None:
    """Write per-layer models as an XMS1 file (little-endian f64, u32 counts)."""
    out = bytearray(STATS_MAGIC)
    out += struct.pack("<I", len(models))
    for name, m in models.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        if isinstance(m, GaussianModel):
            kind, weights, means, var = "gaussian", np.ones(1), m.mean[None, :], m.var_diag[None, :]
            floor = DEFAULT_VARIANCE_FLOOR
        else:
            kind, weights, means, var, floor = "gmm", m.weights, m.means, m.var_diags, m.variance_floor
        k, d = means.shape
        out += struct.pack("<BII", _KIND_CODES[kind], d, k)
        out += struct.pack("<d", floor)
        out += np.ascontiguousarray(weights, dtype="<f8").tobytes()
        out += np.ascontiguousarray(means, dtype="<f8").tobytes()
        out += np.ascontiguousarray(var, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_stats(path) -> dict[str, ActivationModel]:
    buf = Path(path).read_bytes()
    if buf[:4] != STATS_MAGIC:
        raise StatModelError("bad magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise StatModelError("truncated file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    models: dict[str, ActivationModel] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, d, k = struct.unpack("<BII", take(9))
        (floor,) = struct.unpack("<d", take(8))
        weights = np.frombuffer(take(8 * k), dtype="<f8").astype(np.float64)
        means = np.frombuffer(take(8 * k * d), dtype="<f8").reshape(k, d).astype(np.float64)
        var = np.frombuffer(take(8 * k * d), dtype="<f8").reshape(k, d).astype(np.float64)
        if code == 0:
            models[name] = GaussianModel(means[0], var[0])
        elif code == 1:
            models[name] = GmmModel(weights, means, var, floor)
        else:
            raise StatModelError(f"unknown model kind {code}")
    if pos != len(buf):
        raise StatModelError("trailing data")
    return models
