"""Loss values and their analytic adjoints.

Each ``*_terms`` function returns per-row loss values together with the
gradients the model needs for backpropagation; the plain functions return
values only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dpdcan import _backend
from dpdcan.errors import DegenerateError, DomainError, EmptyClusterError, ShapeError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    rho: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.3
    beta3: float = 0.2

    def __post_init__(self):
        for name in ("rho", "beta1", "beta2", "beta3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.beta1 + self.beta2 + self.beta3 - 1.0) > 1e-9:
            raise DomainError("beta1 + beta2 + beta3 must equal 1")


# ---------------------------------------------------------------- ZINB

def zinb_nll(x, mean, dispersion, dropout):
    """Elementwise ZINB negative log-likelihood, dropout given as a probability."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    dispersion = np.asarray(dispersion, dtype=np.float64)
    dropout = np.asarray(dropout, dtype=np.float64)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("counts must be finite and nonnegative")
    if not np.all(mean > 0) or not np.all(dispersion > 0):
        raise DomainError("mean and dispersion must be positive")
    if np.any(dropout < 0) or np.any(dropout > 1):
        raise DomainError("dropout probability must lie in [0, 1]")
    x, mean, dispersion, dropout = np.broadcast_arrays(x, mean, dispersion, dropout)
    with np.errstate(divide="ignore"):
        log_pi = np.log(dropout)
        log_1mpi = np.log1p(-dropout)
    nll = _backend.zinb_terms(x, mean, dispersion, log_pi, log_1mpi)[0]
    return nll if nll.ndim else float(nll)


def zinb_loss(x, mean, dispersion, dropout):
    """Matrix form: mean NLL over every cell-gene entry."""
    return float(np.mean(zinb_nll(x, mean, dispersion, dropout)))


def zinb_terms(x, mean, dispersion, dropout_logit):
    """NLL and gradients w.r.t. mean, dispersion and the dropout logit."""
    log_pi = -np.logaddexp(0.0, -dropout_logit)
    log_1mpi = -np.logaddexp(0.0, dropout_logit)
    return _backend.zinb_terms(x, mean, dispersion, log_pi, log_1mpi)


# ---------------------------------------------------------------- instance

def _unit_rows(z, what):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.reshape(-1) <= NORM_EPS)
    if bad.size:
        raise DegenerateError(f"{what} {int(bad[0])} has near-zero norm")
    return z / norms, norms


def instance_loss(z1, z2) -> float:
    """Negative cosine similarity of two embeddings."""
    u1, _ = _unit_rows(np.atleast_2d(np.asarray(z1, dtype=np.float64)), "embedding")
    u2, _ = _unit_rows(np.atleast_2d(np.asarray(z2, dtype=np.float64)), "embedding")
    return float(-np.sum(u1 * u2))


def instance_terms(z1, z2, stop_gradient=False):
    """Row-wise negative cosine similarity and its gradients.

    With ``stop_gradient`` the loss is symmetrised with each side detached in
    turn, which halves both gradients and leaves the value unchanged.
    """
    u1, n1 = _unit_rows(z1, "embedding")
    u2, n2 = _unit_rows(z2, "embedding")
    cos = np.sum(u1 * u2, axis=1, keepdims=True)
    d1 = -(u2 - cos * u1) / n1
    d2 = -(u1 - cos * u2) / n2
    if stop_gradient:
        d1 *= 0.5
        d2 *= 0.5
    return -cos[:, 0], d1, d2


# ---------------------------------------------------------------- clusters

def cluster_loss(centers) -> float:
    """Mean pairwise cosine similarity over all ordered center pairs, diagonal included."""
    return cluster_terms(centers)[0]


def cluster_terms(centers):
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 1:
        raise ShapeError("centers must be a nonempty 2-D array")
    u, norms = _unit_rows(centers, "center")
    s = centers.shape[0]
    total = u.sum(axis=0)
    value = float(total @ total) / s**2
    du = 2.0 * total / s**2
    grad = (du - (u @ du)[:, None] * u) / norms
    return value, grad


def soft_assign(z, centers):
    """Student-t (one degree of freedom) similarity, normalised per row."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    return _kernel_and_q(z, centers)[1]


def _kernel_and_q(z, centers):
    diff = z[:, None, :] - centers[None, :, :]
    kern = 1.0 / (1.0 + np.einsum("nsk,nsk->ns", diff, diff))
    return kern, kern / kern.sum(axis=1, keepdims=True)


def target_distribution(q):
    """Sharpened self-training target: squares weighted by inverse cluster frequency."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    freq = q.sum(axis=0)
    empty = np.flatnonzero(freq < 1e-12)
    if empty.size:
        raise EmptyClusterError(f"cluster {int(empty[0])} has no soft mass")
    w = q**2 / freq
    return w / w.sum(axis=1, keepdims=True)


def kl_clustering(p, q, reduction="mean"):
    """KL(P || Q) per row, reduced by ``mean`` (default), ``sum`` or ``none``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ShapeError(f"P {p.shape} and Q {q.shape} differ in shape")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise DomainError("Q must be positive wherever P is")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * np.log(np.where(support, p, 1.0) / np.where(support, q, 1.0)), 0.0)
    rows = terms.sum(axis=1)
    if reduction == "none":
        return rows
    if reduction == "sum":
        return float(rows.sum())
    return float(rows.mean())


def kl_terms(z, centers, p):
    """Per-row KL(P || Q) with Q from ``soft_assign``; P is held constant.

    Returns values (m,), d/dz (m, k) and per-row d/dcenters (m, s, k).
    """
    kern, q = _kernel_and_q(z, centers)
    values = kl_clustering(p, q, reduction="none")
    diff = z[:, None, :] - centers[None, :, :]
    coef = 2.0 * kern * (p - q)
    dz = np.einsum("ns,nsk->nk", coef, diff)
    dc = -coef[:, :, None] * diff
    return values, dz, dc


# ---------------------------------------------------------------- hybrids

def hybrid_instance(zinb, inst, w: LossWeights):
    return w.rho * zinb + (1.0 - w.rho) * inst


def hybrid_cluster(zinb, cls, cc, w: LossWeights):
    if abs(w.beta1 + w.beta2 + w.beta3 - 1.0) > 1e-9:
        raise DomainError("beta weights must sum to 1")
    return w.beta1 * zinb + w.beta2 * cls + w.beta3 * cc


@dataclass
class InstanceObjective:
    """Stage-one per-sample loss: ZINB on the clean pass plus cosine on two views.

    ``view1``/``view2`` are aligned with the rows of the batch.
    """

    weights: LossWeights
    view1: np.ndarray
    view2: np.ndarray
    stop_gradient: bool = False


@dataclass
class ClusterObjective:
    """Stage-two per-sample loss: ZINB, KL to the (constant) target, center cosine."""

    weights: LossWeights
    target: np.ndarray
