from dataclasses import replace

import numpy as np
import pytest

from dpdcan import accountant, cluster, data, dp_engine, losses, model, train
from dpdcan.errors import ConfigError, DivergenceError, DomainError

SMALL = dict(hidden=(16, 8), latent=4, kmeans_restarts=3)


@pytest.fixture(scope="module")
def tiny():
    cm, labels = data.generate_synthetic(60, 30, 3, seed=0)
    return data.preprocess(cm), labels


def _plan(**kw):
    base = dict(n_clusters=3, t1_epochs=2, t2_epochs=2, **SMALL)
    base.update(kw)
    return train.TrainPlan(**base)


def test_augment_identity_and_mask():
    x = np.arange(1.0, 7.0)
    rng = np.random.default_rng(0)
    a, b = train.augment(x, rng, 0.0, 0.0)
    np.testing.assert_array_equal(a, x)
    np.testing.assert_array_equal(b, x)
    a, b = train.augment(x, rng, 1.0, 0.0)
    assert not a.any() and not b.any()
    big = np.ones((100, 100))
    a, _ = train.augment(big, np.random.default_rng(1), 0.2, 0.0)
    assert np.mean(a == 0) == pytest.approx(0.2, abs=0.02)
    a1, b1 = train.augment(x, np.random.default_rng(5))
    a2, b2 = train.augment(x, np.random.default_rng(5))
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b1)


def test_zero_epochs_is_kmeans_on_initial_embeddings(tiny):
    pre, _ = tiny
    plan = _plan(t1_epochs=0, t2_epochs=0)
    res = train.train(pre, plan)
    params = model.init_params(pre.n_genes, 3, plan.seeds.init, SMALL["hidden"], SMALL["latent"])
    z = model.encode(params, pre.features)
    np.testing.assert_array_equal(res.embeddings, z)
    centers, _ = cluster.kmeans(z, 3, seed=[plan.seeds.init, 1], n_init=3)
    np.testing.assert_array_equal(res.centers, centers)
    np.testing.assert_array_equal(res.assignments, np.argmax(losses.soft_assign(z, centers), axis=1))
    overhead = accountant.rdp_to_dp(accountant.RdpCurve.zeros(), plan.delta).epsilon
    assert res.privacy.epsilon == overhead and res.privacy.sgm_steps == 0


def test_bitwise_determinism(tiny):
    pre, _ = tiny
    a = train.train(pre, _plan())
    b = train.train(pre, _plan())
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    np.testing.assert_array_equal(a.params.theta, b.params.theta)
    assert a.privacy.to_dict() == b.privacy.to_dict()


def test_result_contract(tiny):
    pre, _ = tiny
    res = train.train(pre, _plan())
    assert res.assignments.shape == (60,)
    assert res.assignments.min() >= 0 and res.assignments.max() < 3
    assert res.embeddings.shape == (60, 4) and np.all(np.isfinite(res.embeddings))
    assert res.centers.shape == (3, 4)
    assert [h[0] for h in res.history] == ["instance"] * 2 + ["cluster"] * 2


@pytest.mark.parametrize("entire", [False, True])
def test_every_executed_step_is_accounted(tiny, entire):
    pre, _ = tiny
    seen = []
    plan = _plan(dp=dp_engine.DpConfig(clip_bound=0.1, noise_scale=1.5, entire_network=entire))
    res = train.train(pre, plan, on_step=lambda stage, step, upd: seen.append(stage))
    executed = len(seen)
    assert res.privacy.steps_stage1 + res.privacy.steps_stage2 == executed
    assert res.privacy.sgm_steps == executed * (2 if entire else 1)
    q = plan.resolved_lot_size(60) / 60
    oracle = accountant.compute_epsilon(q, 1.5, res.privacy.sgm_steps, plan.delta).epsilon
    assert res.privacy.epsilon == pytest.approx(oracle, rel=1e-12)
    assert res.privacy.mode == ("entire" if entire else "partial")


def test_privacy_status(tiny):
    pre, _ = tiny
    off = train.train(pre, _plan(dp=dp_engine.DpConfig(clip_bound=None, noise_scale=0.0)))
    assert off.privacy.status == "non-private" and off.privacy.epsilon is None
    partial = train.train(pre, _plan(dp=dp_engine.DpConfig(perturb_scope=[0, 1])))
    assert partial.privacy.status == "non-private-scope"
    with pytest.raises(DomainError):
        train.train(pre, _plan(dp=dp_engine.DpConfig(perturb_scope=[0, 9])))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(tiny):
    pre, _ = tiny
    bad = replace(pre, features=pre.features.copy())
    bad.features[:, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train.train(bad, _plan())
    assert info.value.step == 0


def test_plan_validation(tiny):
    pre, _ = tiny
    with pytest.raises(ConfigError):
        _plan(t1_epochs=-1).validate()
    with pytest.raises(ConfigError):
        _plan(lot_fraction=0.0).validate()
    with pytest.raises(ConfigError):
        train.train(pre, _plan(n_clusters=100))
    with pytest.raises(ConfigError):
        _plan(lot_size=500).resolved_lot_size(60)


def test_schedule_helpers():
    plan = _plan(t1_epochs=3, t2_epochs=2)
    assert plan.resolved_lot_size(300) == 30
    assert plan.steps_per_epoch(300) == 10
    assert plan.sgm_steps(300) == 50
    ent = replace(plan, dp=dp_engine.DpConfig(entire_network=True))
    assert ent.sgm_steps(300) == 100
    sigma = train.noise_for_budget(8.0, 300, plan)
    assert accountant.compute_epsilon(0.1, sigma, 50, 1e-5).epsilon <= 8.0
