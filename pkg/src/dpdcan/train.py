"""Two-stage training: instance stage, k-means center init, cluster stage."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from dpdcan import accountant, cluster, dp_engine, losses, model
from dpdcan.data import PreprocessedData
from dpdcan.errors import ConfigError, DivergenceError, DomainError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 1
    noise: int = 2
    augment: int = 3


@dataclass(frozen=True)
class TrainPlan:
    n_clusters: int
    t1_epochs: int = 100
    t2_epochs: int = 100
    lot_size: int | None = None
    lot_fraction: float = 0.1
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    dp: dp_engine.DpConfig = field(default_factory=dp_engine.DpConfig)
    delta: float = 1e-5
    seeds: Seeds = field(default_factory=Seeds)
    target_refresh_epochs: int = 1
    augment_mask_prob: float = 0.2
    augment_jitter_std: float = 0.1
    stage1_optimizer: str = "adam"
    stage1_lr: float = 1e-3
    stage2_optimizer: str = "adadelta"
    stage2_lr: float = 1.0
    hidden: tuple = model.HIDDEN
    latent: int = model.LATENT
    stop_gradient: bool = False
    kmeans_restarts: int = 10
    audit: bool = False

    def validate(self):
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.t1_epochs < 0 or self.t2_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.lot_size is not None and self.lot_size < 1:
            raise ConfigError("lot_size must be >= 1")
        if not 0.0 < self.lot_fraction <= 1.0:
            raise ConfigError("lot_fraction must lie in (0, 1]")
        if self.target_refresh_epochs < 1:
            raise ConfigError("target_refresh_epochs must be >= 1")
        if not 0.0 <= self.augment_mask_prob <= 1.0 or self.augment_jitter_std < 0:
            raise ConfigError("augmentation settings out of range")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        return self

    def resolved_lot_size(self, n):
        if self.lot_size is not None:
            if self.lot_size > n:
                raise ConfigError(f"lot_size {self.lot_size} exceeds the {n} cells")
            return self.lot_size
        return max(1, int(round(self.lot_fraction * n)))

    def steps_per_epoch(self, n):
        return max(1, int(round(n / self.resolved_lot_size(n))))

    def sgm_steps(self, n):
        """SGM releases accounted for a full run (twice per step in entire-network mode)."""
        steps = (self.t1_epochs + self.t2_epochs) * self.steps_per_epoch(n)
        return steps * (2 if self.dp.entire_network else 1)


@dataclass
class ClusterResult:
    assignments: np.ndarray
    embeddings: np.ndarray
    centers: np.ndarray
    privacy: accountant.PrivacyReport
    params: model.ModelParams
    history: list = field(default_factory=list)


def augment(x, rng, mask_prob=0.2, jitter_std=0.1):
    """Two independently masked and jittered views of ``x`` (a vector or rows)."""
    x = np.asarray(x, dtype=np.float64)
    views = []
    for _ in range(2):
        keep = rng.random(x.shape) >= mask_prob
        v = np.where(keep, x, 0.0)
        if jitter_std > 0:
            v = v + rng.normal(0.0, jitter_std, size=x.shape)
        views.append(v)
    return views[0], views[1]


def noise_for_budget(epsilon, data_size, plan: TrainPlan):
    """Noise multiplier that spends ``epsilon`` over the plan's full schedule."""
    lot = plan.resolved_lot_size(data_size)
    steps = plan.sgm_steps(data_size)
    if steps == 0:
        raise ConfigError("a zero-step plan needs no noise calibration")
    return accountant.calibrate_sigma(epsilon, plan.delta, lot / data_size, steps)


def _batch(data, idx):
    return model.Batch(data.features[idx], data.raw_selected[idx], data.size_factors[idx], idx)


def train(data: PreprocessedData, plan: TrainPlan, on_step=None) -> ClusterResult:
    """Run both stages and return assignments, embeddings and the privacy report.

    ``on_step(stage, step, update)`` is called after every executed step with
    the :class:`~dpdcan.dp_engine.NoisyUpdate`.
    """
    plan.validate()
    n = data.n_cells
    if n < plan.n_clusters:
        raise ConfigError(f"{n} cells cannot form {plan.n_clusters} clusters")
    lot = plan.resolved_lot_size(n)
    q = lot / n
    cfg = replace(plan.dp, lot_size=lot)
    spe = plan.steps_per_epoch(n)

    params = model.init_params(data.n_genes, plan.n_clusters, plan.seeds.init,
                               plan.hidden, plan.latent)
    check_scope(cfg.scope(params), params)
    data_rng = np.random.default_rng(plan.seeds.data)
    noise_rng = np.random.default_rng(plan.seeds.noise)
    aug_rng = np.random.default_rng(plan.seeds.augment)
    curve = accountant.RdpCurve.zeros()
    sgm_steps = 0
    executed = [0, 0]
    history = []
    global_step = 0

    def run_step(stage, objective_for, state):
        nonlocal params, curve, sgm_steps, global_step
        idx = dp_engine.sample_lot(n, q, data_rng)
        batch = _batch(data, idx)
        objective = objective_for(idx)
        try:
            params, state, upd = dp_engine.dpan_step(params, state, batch, objective, cfg,
                                                     noise_rng, q, audit=plan.audit)
        except DivergenceError as exc:
            raise DivergenceError(f"step {global_step}: {exc}", step=global_step,
                                  sample_index=exc.sample_index) from exc
        if not np.isfinite(upd.loss) or not np.all(np.isfinite(params.theta)):
            raise DivergenceError(f"non-finite loss or parameters at step {global_step}",
                                  step=global_step)
        if upd.batch_size:
            executed[stage - 1] += 1
            if upd.increment is not None:
                curve = accountant.accumulate(curve, upd.increment)
                sgm_steps += upd.increment.steps
            if on_step is not None:
                on_step(stage, global_step, upd)
        global_step += 1
        return state, upd

    # instance stage
    state = model.make_optimizer(plan.stage1_optimizer, plan.stage1_lr, params.n_params)

    def instance_objective(idx):
        v1, v2 = augment(data.features[idx], aug_rng, plan.augment_mask_prob,
                         plan.augment_jitter_std)
        return losses.InstanceObjective(plan.weights, v1, v2, plan.stop_gradient)

    for epoch in range(plan.t1_epochs):
        total, seen = 0.0, 0
        for _ in range(spe):
            state, upd = run_step(1, instance_objective, state)
            total += upd.loss
            seen += upd.batch_size
        history.append(("instance", epoch, total / max(seen, 1)))
        log.info("instance epoch %d loss %.6f", epoch + 1, total / max(seen, 1))

    # center initialisation
    z = model.encode(params, data.features)
    centers, _ = cluster.kmeans(z, plan.n_clusters, seed=[plan.seeds.init, 1],
                                n_init=plan.kmeans_restarts)
    params = params.copy()
    params["cluster_centers"] = centers

    # cluster stage
    state = model.make_optimizer(plan.stage2_optimizer, plan.stage2_lr, params.n_params)
    target = None
    for epoch in range(plan.t2_epochs):
        if epoch % plan.target_refresh_epochs == 0:
            q_all = losses.soft_assign(model.encode(params, data.features), params["cluster_centers"])
            target = losses.target_distribution(q_all)
        total, seen = 0.0, 0
        for _ in range(spe):
            state, upd = run_step(
                2, lambda idx: losses.ClusterObjective(plan.weights, target[idx]), state)
            total += upd.loss
            seen += upd.batch_size
        history.append(("cluster", epoch, total / max(seen, 1)))
        log.info("cluster epoch %d loss %.6f", epoch + 1, total / max(seen, 1))

    z = model.encode(params, data.features)
    centers = params["cluster_centers"].copy()
    assignments = np.argmax(losses.soft_assign(z, centers), axis=1)

    if not cfg.private:
        status = "non-private"
    elif not cfg.covers_encoder(params):
        status = "non-private-scope"
    else:
        status = "private"
    report = accountant.PrivacyReport.from_curve(
        curve, plan.delta, cfg.noise_scale, cfg.clip_bound, q, executed[0], executed[1],
        sgm_steps, status=status, mode="entire" if cfg.entire_network else "partial")
    return ClusterResult(assignments, z, centers, report, params, history)


def check_scope(scope, params):
    bad = [k for k in scope if not 0 <= k < params.n_layers]
    if bad:
        raise DomainError(f"perturb_scope layers {bad} out of range 0..{params.n_layers - 1}")
