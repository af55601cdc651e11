"""Class priors, the prior-adjusted loss, and the conditional-shift simulator.

The adjusted loss shifts logits by log class priors before the softmax;
with a uniform prior it reduces to plain cross-entropy. The generalized
form adds a per-class log density-ratio term: setting that ratio to one
recovers the adjusted loss, and the simulator quantifies what happens in
a two-class Gaussian world when it is not one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, log_softmax

__all__ = [
    "ClassPrior",
    "estimate_prior",
    "uniform_prior",
    "cross_entropy",
    "la_loss",
    "generalized_la_loss",
    "BiasReport",
    "prop1_simulate",
]


@dataclass
class ClassPrior:
    """Normalized class frequencies plus the raw counts they came from."""

    probs: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        if np.any(self.probs <= 0):
            raise ValueError("class prior probabilities must be positive")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("class prior must sum to one")

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(self.probs)


def estimate_prior(counts) -> ClassPrior:
    counts = np.asarray(counts)
    if counts.size == 0 or np.any(counts < 1):
        raise ValueError("every class needs at least one training sample")
    total = counts.sum()
    return ClassPrior(probs=counts / total, counts=counts)


def uniform_prior(num_classes: int) -> ClassPrior:
    if num_classes < 1:
        raise ValueError("need at least one class")
    return ClassPrior(
        probs=np.full(num_classes, 1.0 / num_classes), counts=np.ones(num_classes, dtype=int)
    )


def _nll(adjusted: Tensor, labels) -> Tensor:
    log_probs = log_softmax(adjusted)
    if log_probs.ndim == 1:
        return -log_probs[int(labels)]
    labels = np.asarray(labels)
    picked = log_probs[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def cross_entropy(logits, labels) -> Tensor:
    """Plain softmax cross-entropy (mean over a batch)."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    return _nll(z, labels)


def la_loss(logits, labels, prior: ClassPrior) -> Tensor:
    """Cross-entropy on logits shifted by log class priors."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    shift = prior.log_probs.astype(z.dtype)
    return _nll(z + Tensor(shift), labels)


def generalized_la_loss(logits, labels, prior: ClassPrior, zeta) -> Tensor:
    """Adjusted loss with an extra per-class log density-ratio offset."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    zeta = np.asarray(zeta, dtype=np.float64)
    if np.any(zeta <= 0):
        raise ValueError("density ratios must be positive")
    shift = (prior.log_probs + np.log(zeta)).astype(z.dtype)
    return _nll(z + Tensor(shift), labels)


# -- two-class Gaussian bias simulator ------------------------------------------


@dataclass
class BiasReport:
    """Decision-rule distortion caused by training on shifted conditionals."""

    threshold_target: float
    threshold_source_rule: float
    threshold_shift: float
    tail_class: int
    tail_recall_optimal: float
    tail_recall_source_rule: float
    tail_recall_drop: float
    quadrature_rel_error: float

    def as_record(self) -> dict:
        return {
            "threshold_target": self.threshold_target,
            "threshold_source_rule": self.threshold_source_rule,
            "threshold_shift": self.threshold_shift,
            "tail_class": self.tail_class,
            "tail_recall_optimal": self.tail_recall_optimal,
            "tail_recall_source_rule": self.tail_recall_source_rule,
            "tail_recall_drop": self.tail_recall_drop,
            "quadrature_rel_error": self.quadrature_rel_error,
        }


def _log_density(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma)


def _crossing_closed_form(mu0, s0, mu1, s1) -> float:
    """Point between the means where the two class densities are equal."""
    if mu0 == mu1 and s0 == s1:
        return mu0
    a = 1.0 / (2.0 * s1 * s1) - 1.0 / (2.0 * s0 * s0)
    b = mu0 / (s0 * s0) - mu1 / (s1 * s1)
    c = (mu1 * mu1) / (2.0 * s1 * s1) - (mu0 * mu0) / (2.0 * s0 * s0) + math.log(s1 / s0)
    if abs(a) < 1e-300:
        return -c / b
    disc = b * b - 4.0 * a * c
    if disc < 0:
        raise ValueError("class densities never cross; simulator needs overlap")
    roots = ((-b - math.sqrt(disc)) / (2.0 * a), (-b + math.sqrt(disc)) / (2.0 * a))
    lo, hi = min(mu0, mu1), max(mu0, mu1)
    inside = [r for r in roots if lo <= r <= hi]
    if inside:
        return inside[0]
    mid = 0.5 * (mu0 + mu1)
    return min(roots, key=lambda r: abs(r - mid))


def _crossing_bisection(mu0, s0, mu1, s1) -> float:
    """Numeric crossing search, independent of the quadratic solve."""
    if mu0 == mu1:
        return mu0
    lo, hi = (mu0, mu1) if mu0 < mu1 else (mu1, mu0)
    f = lambda x: _log_density(x, mu0, s0) - _log_density(x, mu1, s1)
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError("no density crossing between the class means")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if flo * fm <= 0:
            hi = mid
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _recall_above(threshold, mu, sigma) -> float:
    return 1.0 - _phi((threshold - mu) / sigma)


def _recall_above_quadrature(threshold, mu, sigma, points) -> float:
    hi = mu + 12.0 * sigma
    lo = max(threshold, mu - 12.0 * sigma)
    if lo >= hi:
        return 0.0
    x = np.linspace(lo, hi, points)
    pdf = np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    return float(np.trapezoid(pdf, x))


def prop1_simulate(
    mu_source,
    sigma_source,
    mu_target,
    sigma_target,
    prior: ClassPrior,
    quadrature_points: int = 20001,
) -> BiasReport:
    """Quantify prediction bias from training on shifted class conditionals.

    Two classes with 1-D Gaussian conditionals. The optimal rule under the
    balanced target uses the target densities; a model trained with the
    prior-adjusted loss on the source domain implies the same rule built
    from the source densities. The report gives the threshold displacement
    and the tail-class recall lost to it, with every closed-form quantity
    cross-checked numerically (bisection crossing, trapezoid integrals).
    """
    mu_s = np.asarray(mu_source, dtype=np.float64)
    s_s = np.asarray(sigma_source, dtype=np.float64)
    mu_t = np.asarray(mu_target, dtype=np.float64)
    s_t = np.asarray(sigma_target, dtype=np.float64)
    if not (mu_s.shape == s_s.shape == mu_t.shape == s_t.shape == (2,)):
        raise ValueError("the simulator covers exactly two classes")
    if np.any(s_s <= 0) or np.any(s_t <= 0):
        raise ValueError("standard deviations must be positive")
    if len(prior.probs) != 2:
        raise ValueError("prior must cover two classes")
    if quadrature_points < 10_000:
        raise ValueError("quadrature needs at least 1e4 points")

    tail = int(np.argmin(prior.probs))

    t_target = _crossing_closed_form(mu_t[0], s_t[0], mu_t[1], s_t[1])
    t_source = _crossing_closed_form(mu_s[0], s_s[0], mu_s[1], s_s[1])

    checks = []
    if mu_t[0] != mu_t[1]:
        checks.append(_err(t_target, _crossing_bisection(mu_t[0], s_t[0], mu_t[1], s_t[1])))
    if mu_s[0] != mu_s[1]:
        checks.append(_err(t_source, _crossing_bisection(mu_s[0], s_s[0], mu_s[1], s_s[1])))

    # recall of the tail class measured in the target domain, for a rule
    # that predicts the tail class on its own side of the threshold
    tail_right = mu_t[tail] >= mu_t[1 - tail]

    def tail_recall(threshold: float) -> tuple:
        if tail_right:
            exact = _recall_above(threshold, mu_t[tail], s_t[tail])
            quad = _recall_above_quadrature(threshold, mu_t[tail], s_t[tail], quadrature_points)
        else:
            exact = 1.0 - _recall_above(threshold, mu_t[tail], s_t[tail])
            quad = 1.0 - _recall_above_quadrature(
                threshold, mu_t[tail], s_t[tail], quadrature_points
            )
        return exact, quad

    recall_opt, quad_opt = tail_recall(t_target)
    recall_src, quad_src = tail_recall(t_source)
    checks.append(_err(recall_opt, quad_opt))
    checks.append(_err(recall_src, quad_src))

    return BiasReport(
        threshold_target=t_target,
        threshold_source_rule=t_source,
        threshold_shift=t_source - t_target,
        tail_class=tail,
        tail_recall_optimal=recall_opt,
        tail_recall_source_rule=recall_src,
        tail_recall_drop=recall_opt - recall_src,
        quadrature_rel_error=max(checks),
    )


def _err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)
