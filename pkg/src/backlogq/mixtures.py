"""Gaussian mixture approximation of the queue-length distribution.

The empirical QLD lives on a discrete support, so the mixture is fit with a
weighted EM over the integer support points, each point weighted by its
empirical mass. This is the infinite-sample limit of drawing samples in
proportion to time occupancy, and it keeps order selection free of sampling
noise. Continuous densities are mapped back to pmfs by evaluating on the
integers and normalizing.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .seeds import derive_seed
from .trajectory import Pmf, unify_support

LOG = logging.getLogger(__name__)

KL_SMOOTHING = 1e-9
VARIANCE_FLOOR = 0.25  # half a queue-length unit squared; prevents collapse onto one integer
EM_TOL = 1e-8
EM_MAX_ITER = 500
EM_RESTARTS = 10

_LOG_2PI = math.log(2.0 * math.pi)


class GmmFitError(ValueError):
    pass


@dataclass(frozen=True)
class GmmModel:
    """Univariate Gaussian mixture, components sorted by mean ascending."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if not len(w) == len(mu) == len(var) or len(w) == 0:
            raise GmmFitError("weights/means/variances must be equal-length, non-empty")
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise GmmFitError("component weights must be non-negative and sum to 1")
        if (var < VARIANCE_FLOOR - 1e-12).any():
            raise GmmFitError(f"variances below floor {VARIANCE_FLOOR}")
        order = np.argsort(mu, kind="stable")
        object.__setattr__(self, "weights", w[order])
        object.__setattr__(self, "means", mu[order])
        object.__setattr__(self, "variances", var[order])

    @property
    def c(self) -> int:
        return len(self.weights)

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[:, None] - self.means[None, :]) ** 2 / self.variances[None, :]
        comp = np.exp(-0.5 * z) / np.sqrt(2.0 * math.pi * self.variances[None, :])
        return comp @ self.weights

    def to_json(self) -> dict:
        return {
            "c": self.c,
            "components": [
                {"pi": float(w), "mu": float(m), "sigma2": float(v)}
                for w, m, v in zip(self.weights, self.means, self.variances)
            ],
        }

    @staticmethod
    def from_json(data: dict) -> "GmmModel":
        comps = data["components"]
        return GmmModel(
            np.array([c["pi"] for c in comps]),
            np.array([c["mu"] for c in comps]),
            np.array([c["sigma2"] for c in comps]),
        )


@dataclass
class OrderSelection:
    kl_by_order: dict[int, float]
    deltas: dict[int, float]
    chosen_c: int
    epsilon: float
    saturated: bool = False
    models: dict[int, GmmModel] = field(default_factory=dict)

    @property
    def chosen_model(self) -> GmmModel:
        return self.models[self.chosen_c]


def kl_divergence(p: Pmf, q: Pmf, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p || q) over the union support, natural log.

    q is smoothed as (q + eps) / (1 + eps * |support|) so points where the
    model assigns zero mass but the data does not stay finite and comparable.
    """
    a, b = unify_support(p, q)
    b = (b + smoothing) / (1.0 + smoothing * len(b))
    mask = a > 0
    val = float(np.sum(a[mask] * np.log(a[mask] / b[mask])))
    return max(0.0, val)


def _log_density_components(support: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log N(n | mu_k, var_k) for every support point n and component k."""
    z = (support[:, None] - means[None, :]) ** 2 / variances[None, :]
    return -0.5 * (z + np.log(variances[None, :]) + _LOG_2PI)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    return (peak + np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True))).squeeze(axis)


def _kmeanspp_init(support: np.ndarray, mass: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """Pick c initial means among positive-mass support points, spread apart."""
    probs = mass / mass.sum()
    centers = [float(rng.choice(support, p=probs))]
    while len(centers) < c:
        d2 = np.min((support[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        w = probs * d2
        if w.sum() <= 0:
            remaining = support[~np.isin(support, centers)]
            centers.append(float(rng.choice(remaining)))
            continue
        centers.append(float(rng.choice(support, p=w / w.sum())))
    return np.array(centers)


def _weighted_em(
    support: np.ndarray,
    mass: np.ndarray,
    init_means: np.ndarray,
    init_var: float,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    """EM on weighted support points; returns (weights, means, vars, ll trace).

    The M-step clamps variances at the floor, which is the constrained
    maximizer of the expected complete-data log-likelihood, so the trace is
    non-decreasing.
    """
    c = len(init_means)
    pis = np.full(c, 1.0 / c)
    means = init_means.astype(float).copy()
    variances = np.full(c, max(init_var, VARIANCE_FLOOR))

    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        log_comp = _log_density_components(support, means, variances) + np.log(pis)[None, :]
        log_mix = _logsumexp(log_comp, axis=1)
        ll = float(np.sum(mass * log_mix))
        trace.append(ll)

        resp = np.exp(log_comp - log_mix[:, None])
        weighted = resp * mass[:, None]
        nk = weighted.sum(axis=0) + 1e-300
        pis = nk / nk.sum()
        means = (weighted * support[:, None]).sum(axis=0) / nk
        variances = np.maximum(
            VARIANCE_FLOOR,
            (weighted * (support[:, None] - means[None, :]) ** 2).sum(axis=0) / nk,
        )
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return pis, means, variances, trace


def fit_gmm(qld: Pmf, c: int, seed: int, restarts: int = EM_RESTARTS) -> GmmModel:
    """Fit a c-component mixture to the QLD; best of ``restarts`` EM runs."""
    if c < 1:
        raise GmmFitError("component count must be >= 1")
    support_all = np.arange(len(qld.p), dtype=float)
    positive = qld.p > 0
    support = support_all[positive]
    mass = qld.p[positive]
    if len(support) < c:
        raise GmmFitError(
            f"{c} components exceed the {len(support)} positive-mass support points"
        )

    mean0 = float(np.sum(mass * support))
    var0 = float(np.sum(mass * (support - mean0) ** 2))
    if c == 1:
        return GmmModel(np.ones(1), np.array([mean0]), np.array([max(var0, VARIANCE_FLOOR)]))

    best: tuple[float, GmmModel] | None = None
    init_var = max(var0 / c**2, VARIANCE_FLOOR)
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "gmm-restart", r))
        init_means = _kmeanspp_init(support, mass, c, rng)
        pis, means, variances, trace = _weighted_em(support, mass, init_means, init_var)
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], GmmModel(pis, means, variances))
    assert best is not None
    return best[1]


def discretize(model: GmmModel, n_max: int) -> Pmf:
    """Evaluate the mixture density on 0..n_max and normalize to a pmf."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    dens = model.density(np.arange(n_max + 1, dtype=float))
    total = dens.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError(f"mixture density underflows everywhere on [0, {n_max}]")
    return Pmf(dens / total)


def component_pmf(model: GmmModel, k: int, n_max: int) -> Pmf:
    """Discretized pmf of component k alone (1-based index, weight ignored)."""
    if not 1 <= k <= model.c:
        raise IndexError(f"component index {k} out of range 1..{model.c}")
    single = GmmModel(
        np.ones(1), model.means[k - 1 : k].copy(), model.variances[k - 1 : k].copy()
    )
    return discretize(single, n_max)


def component_span(model: GmmModel, k: int, sigmas: float = 8.0) -> int:
    """Support size covering component k out to ``sigmas`` standard deviations."""
    if not 1 <= k <= model.c:
        raise IndexError(f"component index {k} out of range 1..{model.c}")
    return max(1, int(math.ceil(model.means[k - 1] + sigmas * math.sqrt(model.variances[k - 1]))))


def select_order(qld: Pmf, c_max: int, epsilon: float, seed: int) -> OrderSelection:
    """Fit orders 1..c_max and stop at the first marginal KL gain below epsilon.

    The marginal gain at order c is KL(c-1) - KL(c); the chosen order is the
    smallest c >= 2 whose gain is below epsilon in absolute value. If no
    order qualifies, c_max is chosen and the selection is flagged saturated.
    """
    if c_max < 2:
        raise ValueError("c_max must be >= 2")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    positive_points = int(np.count_nonzero(qld.p))
    top = min(c_max, positive_points)
    if top < c_max:
        LOG.info("select_order: capping c_max at %d positive-mass support points", top)

    kl_by_order: dict[int, float] = {}
    deltas: dict[int, float] = {}
    models: dict[int, GmmModel] = {}
    chosen: int | None = None
    for c in range(1, top + 1):
        model = fit_gmm(qld, c, derive_seed(seed, "order", c))
        models[c] = model
        kl_by_order[c] = kl_divergence(qld, discretize(model, qld.n_max))
        if c >= 2:
            deltas[c] = kl_by_order[c - 1] - kl_by_order[c]
            if chosen is None and abs(deltas[c]) < epsilon:
                chosen = c
                break

    saturated = chosen is None
    if saturated:
        chosen = top
        warnings.warn(
            f"order selection saturated at c_max={top} without a gain below {epsilon}",
            stacklevel=2,
        )
    return OrderSelection(kl_by_order, deltas, chosen, epsilon, saturated, models)
