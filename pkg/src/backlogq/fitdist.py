"""Parametric models for inter-arrival and service-time samples.

Candidate families cover both light- and heavy-tailed behavior; on top of
the single families, two-component mixtures fitted via EM capture
multi-scale or burst-driven dynamics. Model selection scores every candidate
by KL divergence between a log-binned empirical histogram and the
candidate's mass integrated over the same bins, lowest divergence winning.

Parameter vector layout per family (all durations in seconds):

    lognormal     (mu_log, sigma_log)
    loglogistic   (shape, scale)
    gen_pareto    (shape, scale)            loc fixed at 0
    gev           (shape, loc, scale)       scipy sign convention for shape
    gamma         (shape, scale)            loc fixed at 0
    inv_gaussian  (mu, scale)               loc fixed at 0
    mixture2      (weight, *params_a, *params_b)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .seeds import derive_seed
from .trajectory import Pmf, SampleSet

LOG = logging.getLogger(__name__)

HISTOGRAM_BINS = 64
MIN_SAMPLES_SINGLE = 10
MIN_SAMPLES_MIXTURE = 50
MIXTURE_WEIGHT_CLAMP = (0.001, 0.999)

DEFAULT_CANDIDATES: tuple = (
    "lognormal",
    "loglogistic",
    "gen_pareto",
    "gev",
    "gamma",
    "inv_gaussian",
    ("lognormal", "lognormal"),
    ("loglogistic", "gen_pareto"),
    ("gamma", "inv_gaussian"),
)


class FitError(ValueError):
    pass


class DegenerateSampleError(FitError):
    pass


class FitConvergenceError(FitError):
    pass


@dataclass(frozen=True)
class _Family:
    name: str
    param_names: tuple[str, ...]
    transforms: tuple[str, ...]  # "log" for positive params, "id" otherwise
    frozen: Callable  # params -> scipy frozen distribution
    mle: Callable  # samples -> params

    @property
    def n_params(self) -> int:
        return len(self.param_names)


def _lognormal_mle(x: np.ndarray) -> tuple[float, ...]:
    logs = np.log(x)
    mu = float(logs.mean())
    sigma = float(logs.std())
    if sigma <= 0:
        raise DegenerateSampleError("log-variance too low for lognormal")
    return (mu, sigma)


def _scipy_mle(dist, fixed: dict, picker: Callable) -> Callable:
    def fit(x: np.ndarray) -> tuple[float, ...]:
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            try:
                raw = dist.fit(x, **fixed)
            except Exception as exc:  # scipy raises several optimizer errors
                raise FitConvergenceError(f"{dist.name} MLE failed: {exc}") from exc
        return picker(raw)

    return fit


FAMILIES: dict[str, _Family] = {
    "lognormal": _Family(
        "lognormal",
        ("mu_log", "sigma_log"),
        ("id", "log"),
        lambda p: stats.lognorm(s=p[1], loc=0.0, scale=np.exp(p[0])),
        _lognormal_mle,
    ),
    "loglogistic": _Family(
        "loglogistic",
        ("shape", "scale"),
        ("log", "log"),
        lambda p: stats.fisk(c=p[0], loc=0.0, scale=p[1]),
        _scipy_mle(stats.fisk, {"floc": 0.0}, lambda r: (float(r[0]), float(r[2]))),
    ),
    "gen_pareto": _Family(
        "gen_pareto",
        ("shape", "scale"),
        ("id", "log"),
        lambda p: stats.genpareto(c=p[0], loc=0.0, scale=p[1]),
        _scipy_mle(stats.genpareto, {"floc": 0.0}, lambda r: (float(r[0]), float(r[2]))),
    ),
    "gev": _Family(
        "gev",
        ("shape", "loc", "scale"),
        ("id", "id", "log"),
        lambda p: stats.genextreme(c=p[0], loc=p[1], scale=p[2]),
        _scipy_mle(stats.genextreme, {}, lambda r: (float(r[0]), float(r[1]), float(r[2]))),
    ),
    "gamma": _Family(
        "gamma",
        ("shape", "scale"),
        ("log", "log"),
        lambda p: stats.gamma(a=p[0], loc=0.0, scale=p[1]),
        _scipy_mle(stats.gamma, {"floc": 0.0}, lambda r: (float(r[0]), float(r[2]))),
    ),
    "inv_gaussian": _Family(
        "inv_gaussian",
        ("mu", "scale"),
        ("log", "log"),
        lambda p: stats.invgauss(mu=p[0], loc=0.0, scale=p[1]),
        _scipy_mle(stats.invgauss, {"floc": 0.0}, lambda r: (float(r[0]), float(r[2]))),
    ),
}


@dataclass(frozen=True)
class DistFit:
    """A fitted duration model plus its histogram-KL score."""

    family: str
    params: tuple[float, ...]
    kl_score: float
    sample_count: int
    components: tuple[str, str] | None = None

    def __post_init__(self) -> None:
        if self.family == "mixture2":
            if self.components is None or len(self.components) != 2:
                raise FitError("mixture2 fit needs its two member families")
            lo, hi = MIXTURE_WEIGHT_CLAMP
            w = min(max(self.params[0], lo), hi)
            object.__setattr__(self, "params", (w,) + tuple(self.params[1:]))
        elif self.family not in FAMILIES:
            raise FitError(f"unknown family {self.family!r}")
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        if not all(np.isfinite(self.params)):
            raise FitError(f"non-finite parameters for {self.family}: {self.params}")
        if self.kl_score < 0:
            raise FitError("kl_score must be non-negative")

    @property
    def n_params(self) -> int:
        if self.family == "mixture2":
            a, b = self.components  # type: ignore[misc]
            return 1 + FAMILIES[a].n_params + FAMILIES[b].n_params
        return FAMILIES[self.family].n_params

    def _split(self) -> tuple[float, tuple[float, ...], tuple[float, ...]]:
        a, b = self.components  # type: ignore[misc]
        na = FAMILIES[a].n_params
        return self.params[0], self.params[1 : 1 + na], self.params[1 + na :]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            if self.family == "mixture2":
                w, pa, pb = self._split()
                fa, fb = self.components  # type: ignore[misc]
                la = FAMILIES[fa].frozen(pa).logpdf(x)
                lb = FAMILIES[fb].frozen(pb).logpdf(x)
                return np.logaddexp(np.log(w) + la, np.log1p(-w) + lb)
            return FAMILIES[self.family].frozen(self.params).logpdf(x)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            if self.family == "mixture2":
                w, pa, pb = self._split()
                fa, fb = self.components  # type: ignore[misc]
                return w * FAMILIES[fa].frozen(pa).cdf(x) + (1 - w) * FAMILIES[fb].frozen(pb).cdf(x)
            return FAMILIES[self.family].frozen(self.params).cdf(x)

    def mean(self) -> float:
        with np.errstate(all="ignore"):
            if self.family == "mixture2":
                w, pa, pb = self._split()
                fa, fb = self.components  # type: ignore[misc]
                return float(
                    w * FAMILIES[fa].frozen(pa).mean() + (1 - w) * FAMILIES[fb].frozen(pb).mean()
                )
            return float(FAMILIES[self.family].frozen(self.params).mean())

    def to_json(self) -> dict:
        data = {
            "family": self.family,
            "params": [float(v) for v in self.params],
            "kl_score": float(self.kl_score),
            "n": self.sample_count,
        }
        if self.components is not None:
            data["components"] = list(self.components)
        return data

    @staticmethod
    def from_json(data: dict) -> "DistFit":
        comps = data.get("components")
        return DistFit(
            data["family"],
            tuple(data["params"]),
            data["kl_score"],
            data["n"],
            tuple(comps) if comps else None,
        )


def draw_values(fit: DistFit, rng: np.random.Generator, n: int) -> np.ndarray:
    """n i.i.d. positive draws; non-positive draws are redrawn."""
    if n == 0:
        return np.zeros(0)
    if fit.family == "mixture2":
        w, pa, pb = fit._split()
        fa, fb = fit.components  # type: ignore[misc]
        pick_a = rng.random(n) < w
        out = np.empty(n)
        out[pick_a] = _draw_single(FAMILIES[fa], pa, rng, int(pick_a.sum()))
        out[~pick_a] = _draw_single(FAMILIES[fb], pb, rng, int(n - pick_a.sum()))
        return out
    return _draw_single(FAMILIES[fit.family], fit.params, rng, n)


def _draw_single(fam: _Family, params: Sequence[float], rng: np.random.Generator, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0)
    frozen = fam.frozen(tuple(params))
    out = np.asarray(frozen.rvs(size=n, random_state=rng), dtype=float)
    for _ in range(1000):
        bad = ~(out > 0) | ~np.isfinite(out)
        if not bad.any():
            return out
        out[bad] = frozen.rvs(size=int(bad.sum()), random_state=rng)
    raise FitError(f"{fam.name} keeps producing non-positive draws")


def sample(fit: DistFit, n: int, seed: int, kind: str = "service_time") -> SampleSet:
    """Seeded i.i.d. draws packaged as a SampleSet."""
    rng = np.random.default_rng(seed)
    return SampleSet(draw_values(fit, rng, n), kind, (0.0, 1.0))


def binned_kl(values: np.ndarray, fit: DistFit, bins: int = HISTOGRAM_BINS) -> float:
    """KL(empirical || candidate) over logarithmic bins spanning the sample range."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if not lo < hi:
        raise DegenerateSampleError("all samples identical; histogram undefined")
    edges = np.geomspace(lo, hi, bins + 1)
    emp_counts, _ = np.histogram(values, bins=edges)
    emp = Pmf(emp_counts / emp_counts.sum())
    cand_mass = np.clip(np.diff(fit.cdf(edges)), 0.0, None)
    total = cand_mass.sum()
    if not np.isfinite(total) or total <= 1e-12:
        return float("inf")
    from .mixtures import kl_divergence  # local import; mixtures owns the smoothing rule

    return kl_divergence(emp, Pmf(cand_mass / total))


def _check_samples(values: np.ndarray, floor: int) -> None:
    if len(values) < floor:
        raise DegenerateSampleError(f"{len(values)} samples; need at least {floor}")
    mean = float(values.mean())
    if float(values.var()) <= 1e-12 * mean * mean:
        raise DegenerateSampleError("sample variance too low to fit a distribution")


def _validate_params(fam: _Family, params: Sequence[float]) -> tuple[float, ...]:
    params = tuple(float(v) for v in params)
    if len(params) != fam.n_params or not all(np.isfinite(params)):
        raise FitConvergenceError(f"{fam.name} fit returned invalid parameters {params}")
    for value, tr in zip(params, fam.transforms):
        if tr == "log" and value <= 0:
            raise FitConvergenceError(f"{fam.name} fit left the parameter domain: {params}")
    return params


def fit_family(samples: SampleSet, family: str, min_samples: int = MIN_SAMPLES_SINGLE) -> DistFit:
    """Maximum-likelihood fit of one family, scored on the log-binned histogram."""
    if family not in FAMILIES:
        raise FitError(f"unknown family {family!r}")
    x = samples.values
    _check_samples(x, min_samples)
    fam = FAMILIES[family]
    params = _validate_params(fam, fam.mle(x))
    fit = DistFit(family, params, 0.0, len(x))
    nll = -float(np.sum(fit.logpdf(x)))
    if not np.isfinite(nll):
        raise FitConvergenceError(f"{family} MLE does not cover the sample support")
    return DistFit(family, params, binned_kl(x, fit), len(x))


def _pack(fam: _Family, params: Sequence[float]) -> np.ndarray:
    return np.array(
        [np.log(v) if tr == "log" else v for v, tr in zip(params, fam.transforms)]
    )


def _unpack(fam: _Family, vec: np.ndarray) -> tuple[float, ...]:
    return tuple(
        float(np.exp(v)) if tr == "log" else float(v) for v, tr in zip(vec, fam.transforms)
    )


def _weighted_nll(fam: _Family, params: Sequence[float], x: np.ndarray, w: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        lp = fam.frozen(tuple(params)).logpdf(x)
    val = -(w * lp).sum()
    return float(val) if np.isfinite(val) else float("inf")


def _weighted_mle(
    fam: _Family, x: np.ndarray, w: np.ndarray, start: Sequence[float]
) -> tuple[float, ...]:
    """Weighted MLE for one mixture component, warm-started at ``start``.

    lognormal has a closed form; everything else runs a Nelder-Mead search in
    a log-transformed parameter space.
    """
    if fam.name == "lognormal":
        total = w.sum()
        if total <= 0:
            return tuple(start)
        logs = np.log(x)
        mu = float((w * logs).sum() / total)
        sigma = float(np.sqrt((w * (logs - mu) ** 2).sum() / total))
        return (mu, max(sigma, 1e-6))

    res = optimize.minimize(
        lambda vec: _weighted_nll(fam, _unpack(fam, vec), x, w),
        _pack(fam, start),
        method="Nelder-Mead",
        options={"maxiter": 200 * fam.n_params, "xatol": 1e-6, "fatol": 1e-8},
    )
    return _unpack(fam, res.x)


def _mixture2_em(
    x: np.ndarray,
    fam_a: _Family,
    fam_b: _Family,
    rng: np.random.Generator,
    max_iter: int,
    tol: float,
) -> tuple[tuple[float, ...], list[float]]:
    """One EM run; returns ((w, *pa, *pb), log-likelihood trace).

    M-steps only accept component updates that do not lower the weighted
    likelihood, so the trace is non-decreasing even with an approximate
    inner optimizer.
    """
    split = float(np.quantile(x, rng.uniform(0.25, 0.75)))
    lower = x[x <= split]
    upper = x[x > split]
    if len(lower) < 5 or len(upper) < 5:
        raise DegenerateSampleError("initial split leaves a component nearly empty")
    pa = _validate_params(fam_a, fam_a.mle(lower))
    pb = _validate_params(fam_b, fam_b.mle(upper))
    w_lo, w_hi = MIXTURE_WEIGHT_CLAMP
    w = min(max(len(lower) / len(x), w_lo), w_hi)

    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        with np.errstate(all="ignore"):
            la = np.log(w) + fam_a.frozen(pa).logpdf(x)
            lb = np.log1p(-w) + fam_b.frozen(pb).logpdf(x)
        mix = np.logaddexp(la, lb)
        if not np.isfinite(mix).all():
            raise FitConvergenceError("mixture likelihood left the model support")
        ll = float(mix.sum())
        trace.append(ll)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

        ra = np.exp(la - mix)
        rb = 1.0 - ra
        cand_a = _weighted_mle(fam_a, x, ra, pa)
        if _weighted_nll(fam_a, cand_a, x, ra) <= _weighted_nll(fam_a, pa, x, ra):
            pa = cand_a
        cand_b = _weighted_mle(fam_b, x, rb, pb)
        if _weighted_nll(fam_b, cand_b, x, rb) <= _weighted_nll(fam_b, pb, x, rb):
            pb = cand_b
        w = min(max(float(ra.mean()), w_lo), w_hi)

    return (w,) + tuple(pa) + tuple(pb), trace


def fit_mixture2(
    samples: SampleSet,
    family_a: str,
    family_b: str,
    seed: int,
    restarts: int = 5,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> DistFit:
    """Two-component EM mixture; best restart by log-likelihood."""
    for name in (family_a, family_b):
        if name not in FAMILIES:
            raise FitError(f"unknown family {name!r}")
    x = samples.values
    _check_samples(x, MIN_SAMPLES_MIXTURE)
    fam_a, fam_b = FAMILIES[family_a], FAMILIES[family_b]

    best: tuple[float, tuple[float, ...]] | None = None
    for r in range(restarts):
        rng = np.random.default_rng(derive_seed(seed, "mix2-restart", r))
        try:
            params, trace = _mixture2_em(x, fam_a, fam_b, rng, max_iter, tol)
        except FitError as exc:
            LOG.debug("mixture2 restart %d failed: %s", r, exc)
            continue
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], params)
    if best is None:
        raise FitConvergenceError(f"all mixture2({family_a}, {family_b}) restarts failed")

    fit = DistFit("mixture2", best[1], 0.0, len(x), (family_a, family_b))
    return DistFit("mixture2", fit.params, binned_kl(x, fit), len(x), (family_a, family_b))


def select_best(
    samples: SampleSet,
    candidates: Sequence = DEFAULT_CANDIDATES,
    seed: int = 0,
    min_samples: int = MIN_SAMPLES_SINGLE,
) -> DistFit:
    """Fit every candidate and return the lowest histogram-KL fit.

    Candidates are family names or (family_a, family_b) mixture pairs. Failed
    fits are excluded; exact KL ties go to the fit with fewer parameters.
    """
    results: list[DistFit] = []
    for cand in candidates:
        try:
            if isinstance(cand, str):
                results.append(fit_family(samples, cand, min_samples))
            else:
                pair = tuple(cand)
                if pair and pair[0] == "mixture2":
                    pair = pair[1:]
                results.append(fit_mixture2(samples, pair[0], pair[1], derive_seed(seed, *pair)))
        except FitError as exc:
            LOG.debug("candidate %r failed: %s", cand, exc)
    if not results:
        raise FitError("every candidate fit failed")
    results = [f for f in results if np.isfinite(f.kl_score)] or results
    return min(results, key=lambda f: (f.kl_score, f.n_params, f.family, f.components or ()))
