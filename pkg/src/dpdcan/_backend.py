"""Kernel backend selection.

The compiled extension is used when it imports; ``DPDCAN_PURE_PYTHON=1`` forces
the numpy fallback.
"""
import os

from dpdcan import _fallback

NAME = "python"
kernels = _fallback

if os.environ.get("DPDCAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dpdcan import _kernels as kernels  # noqa: F811
        NAME = "compiled"
    except ImportError:
        pass


def zinb_terms(x, mu, theta, log_pi, log_1mpi):
    return kernels.zinb_terms(x, mu, theta, log_pi, log_1mpi)


def sgm_log_a_minus_one(q, sigma, alpha):
    return kernels.sgm_log_a_minus_one(q, sigma, alpha)


def clip_sum(grads, bound):
    return kernels.clip_sum(grads, bound)
