"""Pure numpy versions of the hot kernels.

Signatures and semantics mirror ``_kernels.pyx`` exactly; ``_backend`` picks one
of the two at import.
"""
import numpy as np
from scipy.special import gammaln, psi

NLL_CAP = 1e10


def zinb_terms(x, mu, theta, log_pi, log_1mpi):
    """Elementwise ZINB negative log-likelihood and its partial derivatives.

    Returns ``(nll, d/dmu, d/dtheta, d/dlogit)`` where ``logit`` is the
    pre-sigmoid dropout activation, i.e. ``pi = sigmoid(logit)``.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    log_pi = np.asarray(log_pi, dtype=np.float64)
    log_1mpi = np.asarray(log_1mpi, dtype=np.float64)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_tm = np.log(theta + mu)
        log_ratio = np.log(theta) - log_tm  # log(theta / (theta + mu))
        l0 = theta * log_ratio
        zero = x == 0

        # x > 0 branch
        log_nb = (gammaln(x + theta) - gammaln(x + 1.0) - gammaln(theta)
                  + l0 + x * (np.log(mu) - log_tm))
        nll_pos = -log_1mpi - log_nb
        gmu_pos = (x + theta) / (theta + mu) - x / mu
        gth_pos = -(psi(x + theta) - psi(theta) + log_ratio + (mu - x) / (theta + mu))
        glo_pos = np.exp(log_pi)

        # x == 0 branch
        log_z = np.logaddexp(log_pi, log_1mpi + l0)
        w = np.exp(log_1mpi + l0 - log_z)
        a = np.exp(log_pi - log_z)
        nll_zero = -log_z
        gmu_zero = w * theta / (theta + mu)
        gth_zero = -w * (log_ratio + mu / (theta + mu))
        glo_zero = np.exp(log_1mpi) * np.expm1(l0) * a

        nll = np.where(zero, nll_zero, nll_pos)
        g_mu = np.where(zero, gmu_zero, gmu_pos)
        g_th = np.where(zero, gth_zero, gth_pos)
        g_lo = np.where(zero, glo_zero, glo_pos)

    capped = ~(nll < NLL_CAP)
    if np.any(capped):
        nll = np.where(capped, NLL_CAP, nll)
        g_mu = np.where(capped, 0.0, g_mu)
        g_th = np.where(capped, 0.0, g_th)
        g_lo = np.where(capped, 0.0, g_lo)
    return nll, g_mu, g_th, g_lo


def _log_expm1(x):
    x = np.asarray(x, dtype=np.float64)
    big = x > 50.0
    with np.errstate(over="ignore"):
        small = np.log(np.expm1(np.where(big, 1.0, x)))
    return np.where(big, x + np.log1p(-np.exp(-np.where(big, x, 50.0))), small)


def sgm_log_a_minus_one(q, sigma, alpha):
    """log(A_alpha(q, sigma) - 1) for integer alpha >= 2 (``-inf`` when A == 1).

    ``A - 1`` is summed directly from the k >= 2 terms, all of which are
    positive, so no cancellation happens for small q.
    """
    alpha = int(alpha)
    k = np.arange(2, alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1.0) - gammaln(k + 1.0) - gammaln(alpha - k + 1.0)
    rest = alpha - k
    with np.errstate(divide="ignore", invalid="ignore"):
        log_1mq = np.log1p(-q)
        tail = np.where(rest == 0, 0.0, rest * log_1mq)
        terms = log_binom + tail + k * np.log(q) + _log_expm1((k * k - k) / (2.0 * sigma * sigma))
    top = np.max(terms)
    if not np.isfinite(top):
        return -np.inf
    return float(top + np.log(np.sum(np.exp(terms - top))))


def clip_sum(grads, bound):
    """Clip each row of ``grads`` to l2 norm ``bound`` and sum the rows in order.

    ``bound=None`` disables clipping. Returns ``(row_sum, row_norms)`` with the
    norms taken before clipping.
    """
    grads = np.asarray(grads, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    if bound is None:
        factors = np.ones_like(norms)
    else:
        factors = 1.0 / np.maximum(1.0, norms / bound)
    out = np.zeros(grads.shape[1])
    for i in range(grads.shape[0]):
        out += factors[i] * grads[i]
    return out, norms
