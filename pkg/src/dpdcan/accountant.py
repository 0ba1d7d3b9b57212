"""Renyi-DP accounting for the sampled Gaussian mechanism.

The per-step bound for an integer order ``alpha`` is

    R(alpha) = log(A) / (alpha - 1),
    A = sum_k C(alpha, k) (1 - q)^(alpha - k) q^k exp((k^2 - k) / (2 sigma^2)),

composed linearly over steps and converted to (epsilon, delta)-DP by
minimising over the order grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dpdcan import _backend
from dpdcan.errors import CalibrationError, DomainError, ShapeError

DEFAULT_ORDERS = tuple(range(2, 65)) + (80, 96, 128, 256)
SIGMA_RANGE = (0.3, 1000.0)


@dataclass(frozen=True)
class SgmParams:
    """One run of the sampled Gaussian mechanism: rate, noise multiplier, steps."""

    sample_rate: float
    noise_scale: float
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.sample_rate <= 1.0:
            raise DomainError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")
        if not self.noise_scale > 0.0:
            raise DomainError(f"noise_scale must be positive, got {self.noise_scale}")
        if self.steps < 0:
            raise DomainError(f"steps must be nonnegative, got {self.steps}")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple
    values: np.ndarray = field(compare=False)

    def __post_init__(self):
        orders = tuple(int(a) for a in self.orders)
        values = np.asarray(self.values, dtype=np.float64).copy()
        if len(orders) == 0 or values.shape != (len(orders),):
            raise ShapeError("RdpCurve needs one value per order")
        if any(a < 2 for a in orders) or any(b <= a for a, b in zip(orders, orders[1:])):
            raise DomainError("orders must be strictly increasing integers >= 2")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DomainError("RDP values must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, orders=DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), np.zeros(len(orders)))

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ShapeError("cannot compose RDP curves over different order grids")
        return RdpCurve(self.orders, self.values + other.values)

    def __eq__(self, other):
        return (isinstance(other, RdpCurve) and self.orders == other.orders
                and np.array_equal(self.values, other.values))

    def pairs(self):
        return [[a, float(r)] for a, r in zip(self.orders, self.values)]


@dataclass(frozen=True)
class DpBudget:
    epsilon: float
    delta: float
    best_order: int


def _check_order(order):
    if int(order) != order or order < 2:
        raise DomainError(f"order must be an integer >= 2, got {order}")


def sgm_rdp_step(sample_rate: float, noise_scale: float, order: int) -> float:
    """RDP of a single sampled-Gaussian step at one integer order."""
    if not 0.0 < sample_rate <= 1.0:
        raise DomainError(f"sample_rate must lie in (0, 1], got {sample_rate}")
    if not noise_scale > 0.0:
        raise DomainError(f"noise_scale must be positive, got {noise_scale}")
    _check_order(order)
    log_am1 = _backend.sgm_log_a_minus_one(float(sample_rate), float(noise_scale), int(order))
    # log(A) = log(1 + exp(log(A - 1)))
    if log_am1 == -math.inf:
        log_a = 0.0
    elif log_am1 > 0.0:
        log_a = log_am1 + math.log1p(math.exp(-log_am1))
    else:
        log_a = math.log1p(math.exp(log_am1))
    return log_a / (order - 1)


def sgm_rdp(sample_rate: float, noise_scale: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    return np.array([sgm_rdp_step(sample_rate, noise_scale, a) for a in orders])


def accumulate(curve: RdpCurve, params: SgmParams) -> RdpCurve:
    """Compose ``params.steps`` SGM steps onto ``curve``."""
    if params.steps == 0:
        return curve
    step = sgm_rdp(params.sample_rate, params.noise_scale, curve.orders)
    return RdpCurve(curve.orders, curve.values + params.steps * step)


def rdp_to_dp(curve: RdpCurve, delta: float) -> DpBudget:
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    alphas = np.asarray(curve.orders, dtype=np.float64)
    eps = (curve.values + np.log((alphas - 1.0) / alphas)
           - (math.log(delta) + np.log(alphas)) / (alphas - 1.0))
    best = int(np.argmin(eps))
    return DpBudget(float(eps[best]), float(delta), curve.orders[best])


def compute_epsilon(sample_rate, noise_scale, steps, delta, orders=DEFAULT_ORDERS) -> DpBudget:
    curve = RdpCurve.zeros(orders)
    if steps > 0:
        curve = accumulate(curve, SgmParams(sample_rate, noise_scale, int(steps)))
    return rdp_to_dp(curve, delta)


def calibrate_sigma(target_epsilon: float, delta: float, sample_rate: float,
                    total_steps: int, orders=DEFAULT_ORDERS, tol: float = 1e-4) -> float:
    """Smallest noise multiplier whose accounted epsilon does not exceed the target.

    Bisection over ``SIGMA_RANGE``. The bracket is shrunk below ``tol`` and
    further until the achieved epsilon sits within ``tol`` of the target, so the
    returned sigma always satisfies the budget.
    """
    if not target_epsilon > 0:
        raise DomainError("target_epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if not 0.0 < sample_rate <= 1.0:
        raise DomainError(f"sample_rate must lie in (0, 1], got {sample_rate}")
    if total_steps < 1:
        raise DomainError("total_steps must be >= 1")

    def eps(sigma):
        return compute_epsilon(sample_rate, sigma, total_steps, delta, orders).epsilon

    lo, hi = SIGMA_RANGE
    if eps(hi) > target_epsilon:
        raise CalibrationError(
            f"epsilon={target_epsilon} unreachable with sigma <= {hi} "
            f"(q={sample_rate}, steps={total_steps}, delta={delta})")
    if eps(lo) <= target_epsilon:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol and target_epsilon - eps(hi) < tol:
            break
    return hi


@dataclass
class PrivacyReport:
    epsilon: float | None
    delta: float
    sigma: float
    clip_bound: float | None
    sample_rate: float
    steps_stage1: int
    steps_stage2: int
    sgm_steps: int
    best_order: int | None
    rdp_curve: RdpCurve
    status: str = "private"
    mode: str = "partial"

    @classmethod
    def from_curve(cls, curve, delta, sigma, clip_bound, sample_rate, steps_stage1,
                   steps_stage2, sgm_steps, status="private", mode="partial"):
        if status == "non-private":
            eps, order = None, None
        else:
            budget = rdp_to_dp(curve, delta)
            eps, order = budget.epsilon, budget.best_order
        return cls(eps, delta, sigma, clip_bound, sample_rate, steps_stage1, steps_stage2,
                   sgm_steps, order, curve, status, mode)

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "sigma": self.sigma,
            "clip_bound": self.clip_bound,
            "sample_rate": self.sample_rate,
            "steps_stage1": self.steps_stage1,
            "steps_stage2": self.steps_stage2,
            "sgm_steps": self.sgm_steps,
            "best_order": self.best_order,
            "status": self.status,
            "mode": self.mode,
            "rdp_curve": self.rdp_curve.pairs(),
        }

