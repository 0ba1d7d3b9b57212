"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are timed in one process by swapping ``_backend.kernels``; the
results of each pair are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from dpdcan import _backend, _fallback, dp_engine, losses, model


def cases(rng):
    x = rng.poisson(2.0, size=(64, 2000)).astype(float)
    mu = rng.gamma(2.0, 1.0, size=x.shape)
    theta = rng.gamma(2.0, 1.0, size=x.shape)
    logit = rng.normal(size=x.shape)
    log_pi, log_1mpi = -np.logaddexp(0, -logit), -np.logaddexp(0, logit)
    grads = rng.normal(size=(256, 4096))

    params = model.init_params(2000, 3, 0)
    idx = np.arange(30)
    batch = model.Batch(rng.normal(size=(30, 2000)), x[:30], np.ones(30), idx)
    obj = losses.InstanceObjective(losses.LossWeights(), rng.normal(size=(30, 2000)),
                                   rng.normal(size=(30, 2000)))
    cfg = dp_engine.DpConfig(clip_bound=0.1, noise_scale=1.0, lot_size=30)
    state = model.make_optimizer("adam", 1e-3, params.n_params)

    return {
        "zinb_terms 64x2000": lambda: _backend.zinb_terms(x, mu, theta, log_pi, log_1mpi),
        "sgm_log_a_minus_one x67 orders": lambda: [
            _backend.sgm_log_a_minus_one(0.1, 1.1, a) for a in list(range(2, 65)) + [80, 96, 128, 256]],
        "clip_sum 256x4096": lambda: _backend.clip_sum(grads, 1.0),
        "dpan_step lot 30, d=2000": lambda: dp_engine.dpan_step(
            params, state, batch, obj, cfg, np.random.default_rng(0), 0.1),
    }


def _flat(out):
    if isinstance(out, tuple) and isinstance(out[0], model.ModelParams):
        return out[0].theta
    if isinstance(out, (tuple, list)):
        return np.concatenate([np.ravel(np.asarray(o, dtype=float)) for o in out])
    return np.asarray(out, dtype=float)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _backend.NAME != "compiled":
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    compiled = _backend.kernels
    table = cases(np.random.default_rng(0))

    print(f"{'kernel':34s} {'compiled ms':>12s} {'fallback ms':>12s} {'speedup':>8s}")
    for name, fn in table.items():
        timings = {}
        outputs = {}
        for label, impl in (("compiled", compiled), ("fallback", _fallback)):
            _backend.kernels = impl
            outputs[label] = _flat(fn())
            number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            timings[label] = best * 1e3
        _backend.kernels = compiled
        np.testing.assert_allclose(outputs["compiled"], outputs["fallback"], rtol=1e-9, atol=1e-12)
        speedup = timings["fallback"] / timings["compiled"]
        print(f"{name:34s} {timings['compiled']:12.3f} {timings['fallback']:12.3f} {speedup:7.2f}x")


if __name__ == "__main__":
    main()
