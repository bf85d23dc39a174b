"""Distribution-matching auxiliary losses and the activation tracker.

The distinction loss pulls each token's sorted routing weights toward a
truncated Poisson pmf; the balance loss pulls the experts' cumulative
activation frequencies toward a truncated normal pmf centred at N/2.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

DEFAULT_POISSON_COEF = 0.005
DEFAULT_NORMAL_COEF = 8.0


def inverse_softplus(y):
    return float(y + math.log(-math.expm1(-y)))


class PoissonTarget:
    """Learnable rate ``lambda = softplus(lambda_raw)``; starts at 1."""

    def __init__(self, num_experts, lam=1.0):
        self.num_experts = int(num_experts)
        self.lambda_raw = Tensor(inverse_softplus(lam), requires_grad=True)

    @property
    def lam(self):
        return float(np.logaddexp(0.0, self.lambda_raw.data))

    def parameters(self):
        return [self.lambda_raw]


class NormalTarget:
    """Learnable spread ``sigma = softplus(sigma_raw)``, mean fixed at N/2; starts at N/4."""

    def __init__(self, num_experts, sigma=None):
        self.num_experts = int(num_experts)
        self.mu = self.num_experts / 2.0
        sigma = self.num_experts / 4.0 if sigma is None else sigma
        self.sigma_raw = Tensor(inverse_softplus(sigma), requires_grad=True)

    @property
    def sigma(self):
        return float(np.logaddexp(0.0, self.sigma_raw.data))

    def parameters(self):
        return [self.sigma_raw]


def _normalize(v):
    return ag.div(v, ag.sum_(v))


def _normalize_log(log_v):
    # the shift cancels in the ratio; it only keeps exp from underflowing to 0/0
    return _normalize(ag.exp(ag.sub(log_v, Tensor(log_v.data.max()))))


def poisson_target_vector(target):
    """Poisson pmf at i = 1..N, renormalized to sum to one."""
    n = target.num_experts
    i = np.arange(1, n + 1, dtype=np.float64)
    log_fact = np.array([math.lgamma(k + 1.0) for k in i])
    lam = ag.softplus(target.lambda_raw)
    log_pmf = ag.sub(ag.sub(ag.mul(Tensor(i), ag.log(lam)), Tensor(log_fact)), lam)
    return _normalize_log(log_pmf)


def normal_target_vector(target):
    """Normal density at i = 1..N around mu = N/2, renormalized to sum to one."""
    n = target.num_experts
    i = np.arange(1, n + 1, dtype=np.float64)
    sigma = ag.softplus(target.sigma_raw)
    sq = Tensor((i - target.mu) ** 2)
    log_density = ag.sub(
        ag.neg(ag.div(sq, ag.scale(ag.mul(sigma, sigma), 2.0))),
        ag.scale(ag.log(ag.scale(sigma, 2.0 * math.pi)), 0.5),
    )
    return _normalize_log(log_density)


def loss_poisson(target, weights, batch_mean_first=False):
    """Mean over tokens of KL(sorted Poisson target || sorted routing weights).

    With ``batch_mean_first`` the sorted weight rows are averaged before a
    single KL is taken.
    """
    ag.check_probability(weights, "router weights o_r")
    v_r, _ = ag.sort_descending_with_grad(weights)
    p, _ = ag.sort_descending_with_grad(poisson_target_vector(target))
    if batch_mean_first:
        return ag.kl_divergence(p, ag.mean(v_r, axis=0))
    t = weights.shape[0]
    p_rows = ag.mul(p, Tensor(np.ones((t, 1))))
    return ag.mean(ag.kl_divergence(p_rows, v_r))


class ActivationTracker:
    """Running per-expert sum of assigned Top-K gate weight.

    Updates happen outside the gradient tape.
    """

    def __init__(self, num_experts):
        self.cumulative = np.zeros(int(num_experts))
        self.step_count = 0

    @property
    def num_experts(self):
        return self.cumulative.shape[0]

    def frequency(self):
        """Normalized cumulative weights; ``None`` before the first update."""
        total = self.cumulative.sum()
        if self.step_count == 0 or total <= 0:
            return None
        return self.cumulative / total

    def reset(self):
        self.cumulative[:] = 0.0
        self.step_count = 0

    def state(self):
        return {"cumulative": self.cumulative.tolist(), "step_count": self.step_count}


def batch_gate_mass(out):
    """(N,) sum over tokens of each expert's renormalized gate weight."""
    return ag.sum_(out.dense_gates(), axis=0)


def tracker_update(tracker, out):
    tracker.cumulative = tracker.cumulative + batch_gate_mass(out).data
    tracker.step_count += 1


def loss_normal(target, tracker, out, sorted_=True):
    """KL(normal target || live activation frequency).

    The frequency mixes the detached history with the current batch's gates,
    so gradients flow only through this batch's routing.
    """
    if tracker.step_count == 0:
        raise ContractError("loss_normal needs a tracker with at least one recorded update")
    live = ag.add(Tensor(tracker.cumulative.copy()), batch_gate_mass(out))
    v_a = _normalize(live)
    p = normal_target_vector(target)
    if sorted_:
        v_a, _ = ag.sort_descending_with_grad(v_a)
        p, _ = ag.sort_descending_with_grad(p)
    return ag.kl_divergence(p, v_a)


def total_loss(task, lp, ln_, c_p=DEFAULT_POISSON_COEF, c_n=DEFAULT_NORMAL_COEF):
    return ag.add(ag.add(task, ag.scale(lp, c_p)), ag.scale(ln_, c_n))
