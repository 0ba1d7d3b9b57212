"""Dense ZINB autoencoder with trainable cluster centers.

All parameters live in one flat float64 vector. Encoder tensors come first, so
the protected partition is the prefix ``theta[:n_protected]`` and everything
after it (decoder trunk, the three output heads, cluster centers) is exposed.

Gradients are computed by hand. The backward pass produces
:class:`GradFactors`, a factored form of the per-sample gradients (per layer,
the input activations and output deltas of every forward pass). The factors
are assembled either into per-sample rows or into the batch gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpdcan import losses
from dpdcan.errors import DivergenceError, DomainError, ShapeError

HIDDEN = (256, 64)
LATENT = 32
MEAN_LOGIT_RANGE = (-15.0, 15.0)
DISPERSION_RANGE = (1e-4, 1e4)
DROPOUT_LOGIT_BOUND = 30.0
HEADS = ("mean", "dispersion", "dropout")


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    offset: int
    layer: int | None
    protected: bool

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


def _build_layout(input_dim, n_clusters, hidden, latent):
    specs = []
    offset = 0

    def add(name, shape, layer, protected):
        nonlocal offset
        specs.append(TensorSpec(name, tuple(shape), offset, layer, protected))
        offset += int(np.prod(shape))

    enc_dims = [input_dim, *hidden, latent]
    for k, (a, b) in enumerate(zip(enc_dims, enc_dims[1:])):
        add(f"encoder.{k}.weight", (a, b), k, True)
        add(f"encoder.{k}.bias", (b,), k, True)
    n_enc = len(enc_dims) - 1
    dec_dims = [latent, *reversed(hidden)]
    for k, (a, b) in enumerate(zip(dec_dims, dec_dims[1:])):
        add(f"decoder.{k}.weight", (a, b), n_enc + k, False)
        add(f"decoder.{k}.bias", (b,), n_enc + k, False)
    head_layer = n_enc + len(dec_dims) - 1
    for head in HEADS:
        add(f"{head}.weight", (dec_dims[-1], input_dim), head_layer, False)
        add(f"{head}.bias", (input_dim,), head_layer, False)
    add("cluster_centers", (n_clusters, latent), None, False)
    return specs, offset


class ModelParams:
    """Flat parameter vector plus named views into it."""

    def __init__(self, input_dim, n_clusters, hidden=HIDDEN, latent=LATENT, theta=None):
        if input_dim < 1 or n_clusters < 1:
            raise DomainError("input_dim and n_clusters must be >= 1")
        self.input_dim = int(input_dim)
        self.n_clusters = int(n_clusters)
        self.hidden = tuple(int(h) for h in hidden)
        self.latent = int(latent)
        self.specs, size = _build_layout(self.input_dim, self.n_clusters, self.hidden, self.latent)
        self.by_name = {s.name: s for s in self.specs}
        if theta is None:
            theta = np.zeros(size)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (size,):
            raise ShapeError(f"expected {size} parameters, got {theta.shape}")
        self.theta = theta
        self.n_protected = sum(s.size for s in self.specs if s.protected)

    @property
    def protected_specs(self):
        return [s for s in self.specs if s.protected]

    @property
    def exposed_specs(self):
        return [s for s in self.specs if not s.protected]

    @property
    def n_params(self):
        return self.theta.size

    @property
    def n_encoder_layers(self):
        return len(self.hidden) + 1

    @property
    def n_decoder_layers(self):
        return len(self.hidden)

    @property
    def n_layers(self):
        """Layers addressable by a perturbation scope (encoder, trunk, heads as one)."""
        return self.n_encoder_layers + self.n_decoder_layers + 1

    @property
    def dims(self):
        return [self.input_dim, *self.hidden, self.latent]

    def __getitem__(self, name):
        spec = self.by_name[name]
        return self.theta[spec.slice].reshape(spec.shape)

    def __setitem__(self, name, value):
        spec = self.by_name[name]
        self.theta[spec.slice] = np.asarray(value, dtype=np.float64).reshape(-1)

    def copy(self):
        return ModelParams(self.input_dim, self.n_clusters, self.hidden, self.latent,
                           self.theta.copy())

    def with_theta(self, theta):
        return ModelParams(self.input_dim, self.n_clusters, self.hidden, self.latent, theta)

    def layer_mask(self, layers):
        """Boolean mask over ``theta`` selecting the tensors of the given layers."""
        mask = np.zeros(self.n_params, dtype=bool)
        for spec in self.specs:
            if spec.layer in layers:
                mask[spec.slice] = True
        return mask

    def tensors(self, protected_only=False):
        return {s.name: self[s.name] for s in self.specs if s.protected or not protected_only}


def init_params(input_dim, n_clusters, seed, hidden=HIDDEN, latent=LATENT) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, zero cluster centers."""
    params = ModelParams(input_dim, n_clusters, hidden, latent)
    rng = np.random.default_rng(seed)
    for spec in params.specs:
        if spec.name.endswith(".weight"):
            limit = 1.0 / np.sqrt(spec.shape[0])
            params[spec.name] = rng.uniform(-limit, limit, size=spec.shape)
    return params


@dataclass
class Batch:
    features: np.ndarray
    counts: np.ndarray
    size_factors: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return self.features.shape[0]


# ---------------------------------------------------------------- forward

def _relu(x):
    return np.maximum(x, 0.0)


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected an (n, {params.input_dim}) matrix, got {x.shape}")
    return x


def _encode_cached(params, x):
    cache = []
    a = x
    n = params.n_encoder_layers
    for k in range(n):
        pre = a @ params[f"encoder.{k}.weight"] + params[f"encoder.{k}.bias"]
        cache.append((a, pre))
        a = _relu(pre) if k < n - 1 else pre
    return a, cache


def encode(params: ModelParams, x) -> np.ndarray:
    """Map an (n, d) feature matrix to (n, latent) embeddings."""
    return _encode_cached(params, _check_input(params, x))[0]


def _decode_cached(params, z, size_factors):
    size_factors = np.asarray(size_factors, dtype=np.float64)
    if size_factors.shape != (z.shape[0],):
        raise ShapeError("one size factor per row required")
    if not np.all(size_factors > 0):
        raise DomainError("size factors must be positive")
    cache = []
    a = z
    for k in range(params.n_decoder_layers):
        pre = a @ params[f"decoder.{k}.weight"] + params[f"decoder.{k}.bias"]
        cache.append((a, pre))
        a = _relu(pre)
    h_mean = a @ params["mean.weight"] + params["mean.bias"]
    h_disp = a @ params["dispersion.weight"] + params["dispersion.bias"]
    h_drop = a @ params["dropout.weight"] + params["dropout.bias"]
    lo, hi = MEAN_LOGIT_RANGE
    mean = size_factors[:, None] * np.exp(np.clip(h_mean, lo, hi))
    softplus = np.logaddexp(0.0, h_disp)
    disp = np.clip(softplus, *DISPERSION_RANGE)
    out = {
        "mean": mean,
        "dispersion": disp,
        "dropout_logit": h_drop,
        # bounded so the reported probability stays strictly inside (0, 1)
        "dropout": 1.0 / (1.0 + np.exp(-np.clip(h_drop, -DROPOUT_LOGIT_BOUND, DROPOUT_LOGIT_BOUND))),
        "h_mean": h_mean,
        "h_disp": h_disp,
        "softplus": softplus,
        "hidden": a,
        "cache": cache,
    }
    return out


def decode(params: ModelParams, z, size_factors):
    """Return ``(mean, dispersion, dropout)`` for (n, latent) embeddings."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != params.latent:
        raise ShapeError(f"expected an (n, {params.latent}) matrix, got {z.shape}")
    out = _decode_cached(params, z, size_factors)
    return out["mean"], out["dispersion"], out["dropout"]


# ---------------------------------------------------------------- backward

@dataclass
class GradFactors:
    """Factored per-sample gradients.

    ``dense[name]`` lists ``(inputs, deltas)`` pairs, one per forward pass
    through that layer; the per-sample weight gradient of row i is
    ``sum_p outer(inputs_p[i], deltas_p[i])``. ``rows[name]`` holds tensors
    whose per-sample gradient is stored directly as an (m, ...) array.
    """

    m: int
    dense: dict
    rows: dict
    losses: np.ndarray


def _backprop(params, prefix, cache, d_out, relu_last, factors):
    """Backpropagate ``d_out`` through a cached stack; returns d/d(input)."""
    n = len(cache)
    grad = d_out
    for k in reversed(range(n)):
        a_in, pre = cache[k]
        if k < n - 1 or relu_last:
            grad = grad * (pre > 0)
        factors.setdefault(f"{prefix}.{k}", []).append((a_in, grad))
        grad = grad @ params[f"{prefix}.{k}.weight"].T
    return grad


def _zinb_backward(params, batch, weight, z, factors):
    """ZINB term of one clean pass; returns per-row loss and d/dz."""
    out = _decode_cached(params, z, batch.size_factors)
    nll, g_mu, g_th, g_lo = losses.zinb_terms(
        batch.counts, out["mean"], out["dispersion"], out["dropout_logit"])
    d = params.input_dim
    row_loss = nll.mean(axis=1)
    scale = weight / d
    lo, hi = MEAN_LOGIT_RANGE
    d_mean = scale * g_mu * out["mean"] * ((out["h_mean"] >= lo) & (out["h_mean"] <= hi))
    sp = out["softplus"]
    in_range = (sp >= DISPERSION_RANGE[0]) & (sp <= DISPERSION_RANGE[1])
    d_disp = scale * g_th * (1.0 / (1.0 + np.exp(-out["h_disp"]))) * in_range
    d_drop = scale * g_lo
    hidden = out["hidden"]
    d_hidden = 0.0
    for head, delta in zip(HEADS, (d_mean, d_disp, d_drop)):
        factors.setdefault(head, []).append((hidden, delta))
        d_hidden = d_hidden + delta @ params[f"{head}.weight"].T
    dz = _backprop(params, "decoder", out["cache"], d_hidden, True, factors)
    return row_loss, dz


def grad_factors(params: ModelParams, batch: Batch, objective) -> GradFactors:
    """Per-sample losses and factored gradients for one objective."""
    x = _check_input(params, batch.features)
    m = x.shape[0]
    dense = {}
    rows = {}
    w = objective.weights
    z, enc_cache = _encode_cached(params, x)

    if isinstance(objective, losses.InstanceObjective):
        zinb_rows, dz = _zinb_backward(params, batch, w.rho, z, dense)
        _backprop(params, "encoder", enc_cache, dz, False, dense)
        z1, c1 = _encode_cached(params, _check_input(params, objective.view1))
        z2, c2 = _encode_cached(params, _check_input(params, objective.view2))
        inst, d1, d2 = losses.instance_terms(z1, z2, objective.stop_gradient)
        _backprop(params, "encoder", c1, (1.0 - w.rho) * d1, False, dense)
        _backprop(params, "encoder", c2, (1.0 - w.rho) * d2, False, dense)
        row_losses = losses.hybrid_instance(zinb_rows, inst, w)
        rows["cluster_centers"] = np.zeros((m, params.n_clusters, params.latent))
    elif isinstance(objective, losses.ClusterObjective):
        centers = params["cluster_centers"]
        zinb_rows, dz = _zinb_backward(params, batch, w.beta1, z, dense)
        kl_rows, dz_kl, dc_kl = losses.kl_terms(z, centers, np.asarray(objective.target))
        cc, dc_cc = losses.cluster_terms(centers)
        _backprop(params, "encoder", enc_cache, dz + w.beta2 * dz_kl, False, dense)
        rows["cluster_centers"] = w.beta2 * dc_kl + w.beta3 * dc_cc[None]
        row_losses = losses.hybrid_cluster(zinb_rows, kl_rows, cc, w)
    else:
        raise TypeError(f"unsupported objective {type(objective).__name__}")

    bad = np.flatnonzero(~np.isfinite(row_losses))
    if bad.size:
        raise DivergenceError(f"non-finite loss for sample {int(bad[0])}",
                              sample_index=int(bad[0]))
    return GradFactors(m, dense, rows, np.asarray(row_losses, dtype=np.float64))


def _tensor_rows(spec, factors):
    """Per-sample gradient rows (m, size) of one tensor."""
    base, _, kind = spec.name.rpartition(".")
    if spec.name in factors.rows:
        return factors.rows[spec.name].reshape(factors.m, -1)
    pairs = factors.dense.get(base)
    if not pairs:
        return np.zeros((factors.m, spec.size))
    if kind == "bias":
        return sum(d for _, d in pairs)
    return sum(np.einsum("mi,mo->mio", a, d).reshape(factors.m, -1) for a, d in pairs)


def _tensor_batch(spec, factors):
    base, _, kind = spec.name.rpartition(".")
    if spec.name in factors.rows:
        return factors.rows[spec.name].sum(axis=0).reshape(-1)
    pairs = factors.dense.get(base)
    if not pairs:
        return np.zeros(spec.size)
    if kind == "bias":
        return sum(d.sum(axis=0) for _, d in pairs)
    return sum(a.T @ d for a, d in pairs).reshape(-1)


def gradient_matrix(params: ModelParams, factors: GradFactors, specs=None) -> np.ndarray:
    """Materialise per-sample gradients as an (m, n_params) matrix in ``theta`` order."""
    specs = params.specs if specs is None else specs
    width = sum(s.size for s in specs)
    out = np.empty((factors.m, width))
    col = 0
    for spec in specs:
        out[:, col:col + spec.size] = _tensor_rows(spec, factors)
        col += spec.size
    return out


def factored_sq_norms(factors: GradFactors, specs) -> np.ndarray:
    """Per-sample squared gradient norms over ``specs`` without materialising rows.

    For a dense weight the row-i gradient is sum_p outer(a_p, d_p), whose squared
    Frobenius norm is sum_{p,p'} (a_p . a_p')(d_p . d_p').
    """
    total = np.zeros(factors.m)
    for spec in specs:
        base, _, kind = spec.name.rpartition(".")
        if spec.name in factors.rows:
            r = factors.rows[spec.name].reshape(factors.m, -1)
            total += np.einsum("mi,mi->m", r, r)
            continue
        pairs = factors.dense.get(base)
        if not pairs:
            continue
        if kind == "bias":
            d = sum(d for _, d in pairs)
            total += np.einsum("mi,mi->m", d, d)
            continue
        for i, (a1, d1) in enumerate(pairs):
            total += np.einsum("mi,mi->m", a1, a1) * np.einsum("mi,mi->m", d1, d1)
            for a2, d2 in pairs[i + 1:]:
                total += 2.0 * np.einsum("mi,mi->m", a1, a2) * np.einsum("mi,mi->m", d1, d2)
    return total


def factored_weighted_sum(factors: GradFactors, specs, weights) -> np.ndarray:
    """sum_i weights[i] * g_i over ``specs``, flattened in ``theta`` order."""
    parts = []
    w = np.asarray(weights, dtype=np.float64)
    for spec in specs:
        base, _, kind = spec.name.rpartition(".")
        if spec.name in factors.rows:
            parts.append(w @ factors.rows[spec.name].reshape(factors.m, -1))
            continue
        pairs = factors.dense.get(base)
        if not pairs:
            parts.append(np.zeros(spec.size))
        elif kind == "bias":
            parts.append(sum(w @ d for _, d in pairs))
        else:
            parts.append(sum(a.T @ (w[:, None] * d) for a, d in pairs).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def batch_gradient(params: ModelParams, batch: Batch, objective) -> np.ndarray:
    """Gradient of the summed per-sample loss, assembled with matrix products."""
    factors = grad_factors(params, batch, objective)
    return np.concatenate([_tensor_batch(s, factors) for s in params.specs])


@dataclass
class PerSampleGradient:
    protected_part: np.ndarray
    exposed_part: np.ndarray
    sample_index: int


def per_sample_gradients(params: ModelParams, batch: Batch, objective):
    """Exact per-sample gradients split into protected and exposed parts."""
    factors = grad_factors(params, batch, objective)
    g = gradient_matrix(params, factors)
    bad = np.flatnonzero(~np.all(np.isfinite(g), axis=1))
    if bad.size:
        raise DivergenceError(f"non-finite gradient for sample {int(batch.indices[bad[0]])}",
                              sample_index=int(batch.indices[bad[0]]))
    k = params.n_protected
    return [PerSampleGradient(g[i, :k].copy(), g[i, k:].copy(), int(batch.indices[i]))
            for i in range(factors.m)]


def loss_value(params: ModelParams, batch: Batch, objective) -> np.ndarray:
    """Per-sample loss values (forward only, used by finite-difference checks)."""
    x = _check_input(params, batch.features)
    w = objective.weights
    z = encode(params, x)
    out = _decode_cached(params, z, batch.size_factors)
    zinb_rows = losses.zinb_terms(batch.counts, out["mean"], out["dispersion"],
                                  out["dropout_logit"])[0].mean(axis=1)
    if isinstance(objective, losses.InstanceObjective):
        z1 = encode(params, objective.view1)
        z2 = encode(params, objective.view2)
        inst = -np.sum(z1 / np.linalg.norm(z1, axis=1, keepdims=True)
                       * z2 / np.linalg.norm(z2, axis=1, keepdims=True), axis=1)
        return losses.hybrid_instance(zinb_rows, inst, w)
    centers = params["cluster_centers"]
    q = losses.soft_assign(z, centers)
    kl = losses.kl_clustering(objective.target, q, reduction="none")
    return losses.hybrid_cluster(zinb_rows, kl, losses.cluster_loss(centers), w)


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    first: np.ndarray | None = None
    second: np.ndarray | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.95
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "adadelta"):
            raise DomainError(f"unknown optimizer {self.kind!r}")
        if self.eps is None:
            self.eps = 1e-6 if self.kind == "adadelta" else 1e-8


def make_optimizer(kind, lr=None, n_params=None):
    if kind not in ("sgd", "adam", "adadelta"):
        raise DomainError(f"unknown optimizer {kind!r}")
    if lr is None:
        lr = {"adam": 1e-3, "adadelta": 1.0, "sgd": 0.01}[kind]
    state = OptimizerState(kind, float(lr))
    if n_params is not None and kind != "sgd":
        state.first = np.zeros(n_params)
        state.second = np.zeros(n_params)
    return state


def optimizer_step(state: OptimizerState, params: ModelParams, update):
    """Apply one update; returns new ``(params, state)`` without mutating inputs."""
    g = np.asarray(update, dtype=np.float64)
    if g.shape != params.theta.shape:
        raise ShapeError(f"update has shape {g.shape}, parameters {params.theta.shape}")
    n = g.size
    first = state.first if state.first is not None else np.zeros(n)
    second = state.second if state.second is not None else np.zeros(n)
    t = state.step + 1
    if state.kind == "sgd":
        theta = params.theta - state.lr * g
    elif state.kind == "adam":
        first = state.beta1 * first + (1.0 - state.beta1) * g
        second = state.beta2 * second + (1.0 - state.beta2) * g * g
        m_hat = first / (1.0 - state.beta1**t)
        v_hat = second / (1.0 - state.beta2**t)
        theta = params.theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        # first: running E[g^2], second: running E[dx^2]
        first = state.rho * first + (1.0 - state.rho) * g * g
        delta = np.sqrt(second + state.eps) / np.sqrt(first + state.eps) * g
        second = state.rho * second + (1.0 - state.rho) * delta * delta
        theta = params.theta - state.lr * delta
    new_state = OptimizerState(state.kind, state.lr, t,
                               None if state.kind == "sgd" else first,
                               None if state.kind == "sgd" else second,
                               state.beta1, state.beta2, state.rho, state.eps)
    return params.with_theta(theta), new_state
