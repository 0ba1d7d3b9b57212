"""Partially perturbed DP-SGD step.

Per-sample gradients are clipped separately on the protected (encoder) and
exposed partitions. Gaussian noise goes only into the protected sum, unless
the step runs in entire-network mode, where the exposed sum is noised too and
the step is accounted as two sampled-Gaussian releases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dpdcan import _backend, model
from dpdcan.accountant import SgmParams
from dpdcan.errors import ClipInvariantError, DivergenceError, DomainError

CHUNK = 32
CLIP_SLACK = 1e-9


@dataclass(frozen=True)
class DpConfig:
    """Noise and clipping settings.

    ``noise_scale=0`` disables noise and ``clip_bound=None`` disables clipping
    (the non-private reference mode). Layer indices in ``perturb_scope`` follow
    ``ModelParams.layer_mask``: encoder layers first, then the decoder trunk,
    then the three heads as one layer.
    """

    clip_bound: float | None = 0.1
    noise_scale: float = 1.0
    lot_size: int = 1
    perturb_scope: frozenset | None = None
    entire_network: bool = False
    clip_exposed: bool = True
    exposed_clip_bound: float | None = None

    def __post_init__(self):
        if self.clip_bound is not None and not self.clip_bound > 0:
            raise DomainError("clip_bound must be positive")
        if self.exposed_clip_bound is not None and not self.exposed_clip_bound > 0:
            raise DomainError("exposed_clip_bound must be positive")
        if self.noise_scale < 0:
            raise DomainError("noise_scale must be nonnegative")
        if self.noise_scale > 0 and self.clip_bound is None:
            raise DomainError("noise requires a clipping bound")
        if self.lot_size < 1:
            raise DomainError("lot_size must be >= 1")
        if self.perturb_scope is not None:
            object.__setattr__(self, "perturb_scope", frozenset(int(k) for k in self.perturb_scope))
            if self.noise_scale > 0 and not self.perturb_scope:
                raise DomainError("perturb_scope must be nonempty when noise is added")

    @property
    def private(self):
        return self.noise_scale > 0

    def scope(self, params):
        if self.perturb_scope is None:
            return frozenset(range(params.n_encoder_layers))
        return self.perturb_scope

    def covers_encoder(self, params):
        return set(range(params.n_encoder_layers)) <= set(self.scope(params))

    @property
    def exposed_bound(self):
        if not self.clip_exposed:
            return None
        return self.exposed_clip_bound if self.exposed_clip_bound is not None else self.clip_bound


@dataclass
class NoisyUpdate:
    protected_update: np.ndarray
    exposed_update: np.ndarray
    increment: SgmParams | None
    loss: float
    batch_size: int
    protected_norms: np.ndarray = field(default=None, repr=False)
    exposed_norms: np.ndarray = field(default=None, repr=False)

    @property
    def update(self):
        return np.concatenate([self.protected_update, self.exposed_update])


def clip(gradient, bound):
    """Scale ``gradient`` down to l2 norm ``bound`` if it exceeds it."""
    g = np.asarray(gradient, dtype=np.float64)
    if not bound > 0:
        raise DomainError("clip bound must be positive")
    if not np.all(np.isfinite(g)):
        raise DomainError("cannot clip a non-finite gradient")
    return g / max(1.0, float(np.linalg.norm(g)) / bound)


def sample_lot(n, sample_rate, rng):
    """Poisson subsampling: each index kept independently with ``sample_rate``."""
    if not 0.0 < sample_rate <= 1.0:
        raise DomainError(f"sample_rate must lie in (0, 1], got {sample_rate}")
    if sample_rate == 1.0:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < sample_rate)


def _clipped_norms(g, norms, bound):
    if bound is None:
        return norms
    factors = 1.0 / np.maximum(1.0, norms / bound)
    return np.linalg.norm(g * factors[:, None], axis=1)


def clipped_sums(params, batch, objective, cfg: DpConfig, audit=False):
    """Sum of clipped per-sample gradients for both partitions.

    The default route computes per-sample norms and the clipped sums from the
    factored gradients. With ``audit`` the per-sample gradients are instead
    materialised ``CHUNK`` rows at a time, clipped and summed row by row, and
    the norms of the clipped rows are recomputed and checked against the bound.
    Returns ``(protected_sum, exposed_sum, loss_sum, protected_norms, exposed_norms)``
    where the norms are those of the clipped rows.
    """
    if audit:
        return _clipped_sums_materialized(params, batch, objective, cfg)
    factors = model.grad_factors(params, batch, objective)
    out = []
    for specs, bound in ((params.protected_specs, cfg.clip_bound),
                         (params.exposed_specs, cfg.exposed_bound)):
        norms = np.sqrt(model.factored_sq_norms(factors, specs))
        if bound is None:
            weights = np.ones_like(norms)
        else:
            weights = 1.0 / np.maximum(1.0, norms / bound)
        total = model.factored_weighted_sum(factors, specs, weights)
        if not (np.all(np.isfinite(total)) and np.all(np.isfinite(norms))):
            row = int(np.flatnonzero(~np.isfinite(norms))[0]) if not np.all(np.isfinite(norms)) else 0
            raise DivergenceError(f"non-finite gradient for sample {int(batch.indices[row])}",
                                  sample_index=int(batch.indices[row]))
        out.append((total, norms * weights))
    (prot, pn), (expo, en) = out
    return prot, expo, float(factors.losses.sum()), pn, en


def _clipped_sums_materialized(params, batch, objective, cfg):
    k = params.n_protected
    prot = np.zeros(k)
    expo = np.zeros(params.n_params - k)
    loss = 0.0
    pnorms, enorms = [], []
    for start in range(0, len(batch), CHUNK):
        sl = slice(start, start + CHUNK)
        sub = model.Batch(batch.features[sl], batch.counts[sl], batch.size_factors[sl],
                          batch.indices[sl])
        factors = model.grad_factors(params, sub, _slice_objective(objective, sl))
        loss += float(factors.losses.sum())
        for specs, bound, acc, norms_out in ((params.protected_specs, cfg.clip_bound, prot, pnorms),
                                              (params.exposed_specs, cfg.exposed_bound, expo, enorms)):
            g = model.gradient_matrix(params, factors, specs)
            if not np.all(np.isfinite(g)):
                row = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
                raise DivergenceError(f"non-finite gradient for sample {int(sub.indices[row])}",
                                      sample_index=int(sub.indices[row]))
            s, norms = _backend.clip_sum(g, bound)
            acc += s
            clipped = _clipped_norms(g, norms, bound)
            if bound is not None and np.any(clipped > bound + CLIP_SLACK):
                raise ClipInvariantError(f"clipped norm {clipped.max()!r} exceeds bound {bound}")
            norms_out.append(clipped)
    return prot, expo, loss, np.concatenate(pnorms), np.concatenate(enorms)


def _slice_objective(objective, sl):
    kwargs = {}
    for key, value in vars(objective).items():
        kwargs[key] = value[sl] if isinstance(value, np.ndarray) else value
    return type(objective)(**kwargs)


def noisy_update(params, batch, objective, cfg: DpConfig, rng, sample_rate=None, audit=False):
    """Clip, noise and average; the parameters are not touched.

    The divisor is the configured lot size, not the realised batch size.
    """
    k = params.n_protected
    if len(batch) == 0:
        return NoisyUpdate(np.zeros(k), np.zeros(params.n_params - k), None, 0.0, 0,
                           np.zeros(0), np.zeros(0))
    prot, expo, loss, pn, en = clipped_sums(params, batch, objective, cfg, audit)
    increment = None
    if cfg.private:
        std = cfg.noise_scale * cfg.clip_bound
        scope = cfg.scope(params)
        mask = params.layer_mask(scope)
        pmask = mask[:k]
        prot[pmask] += rng.normal(0.0, std, size=int(pmask.sum()))
        if cfg.entire_network:
            estd = cfg.noise_scale * (cfg.exposed_bound or cfg.clip_bound)
            expo += rng.normal(0.0, estd, size=expo.size)
        else:
            emask = mask[k:]
            if emask.any():
                estd = cfg.noise_scale * (cfg.exposed_bound or cfg.clip_bound)
                expo[emask] += rng.normal(0.0, estd, size=int(emask.sum()))
        if sample_rate is not None:
            increment = SgmParams(sample_rate, cfg.noise_scale, 2 if cfg.entire_network else 1)
    return NoisyUpdate(prot / cfg.lot_size, expo / cfg.lot_size, increment, loss, len(batch), pn, en)


def dpan_step(params, state, batch, objective, cfg: DpConfig, rng, sample_rate, audit=False):
    """One private step; returns ``(params', state', NoisyUpdate)``.

    ``NoisyUpdate.increment`` carries the sampled-Gaussian steps to account
    (``None`` for an empty lot or a noiseless configuration).
    """
    upd = noisy_update(params, batch, objective, cfg, rng, sample_rate, audit)
    if upd.batch_size == 0:
        return params, state, upd
    new_params, new_state = model.optimizer_step(state, params, upd.update)
    return new_params, new_state, upd
