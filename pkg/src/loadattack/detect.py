"""Episode-level plausibility tests for observation sets.

Two-sample testing uses the unbiased squared MMD with a Gaussian kernel whose
bandwidth is the median pairwise distance of the pooled sample. The bandwidth
is fixed once per test and shared by every permutation. Permutation p-values
count ties as exceedances.

Clean baselines come from day-stratified splits: each day gives 12 random
hours to one side and the other 12 to the other side, so both sides see the
same days and the same mix of hours.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

HOURS = 24
ESTIMATOR = "unbiased MMD^2, Gaussian kernel, median-heuristic bandwidth frozen across permutations"


class DegenerateSample(ValueError):
    """Raised when the pooled sample has no spread, so the bandwidth is undefined."""


def _as_sample(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"{name} needs at least 2 rows")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def _pooled(X, Y):
    X, Y = _as_sample(X, "X"), _as_sample(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y, np.vstack([X, Y])


def median_bandwidth(Z) -> float:
    """Median pairwise Euclidean distance over the rows of ``Z``."""
    d = pdist(np.asarray(Z, dtype=np.float64))
    sigma = float(np.median(d)) if d.size else 0.0
    if not sigma > 0:
        raise DegenerateSample("median pairwise distance is zero; bandwidth undefined")
    return sigma


def _kernel(Z, sigma) -> np.ndarray:
    sq = squareform(pdist(Z, "sqeuclidean"))
    K = np.exp(-sq / (2.0 * sigma * sigma))
    np.fill_diagonal(K, 0.0)
    return K


def _mmd_from_sums(sxx, syy, sxy, m, n):
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def gaussian_mmd(X, Y, sigma: float | None = None) -> float:
    """Unbiased squared MMD; may be slightly negative."""
    X, Y, Z = _pooled(X, Y)
    sigma = median_bandwidth(Z) if sigma is None else sigma
    K = _kernel(Z, sigma)
    m, n = len(X), len(Y)
    return float(_mmd_from_sums(K[:m, :m].sum(), K[m:, m:].sum(), K[:m, m:].sum(), m, n))


@dataclass
class MmdResult:
    mmd: float
    p_value: float
    bootstraps: int
    bandwidth: float
    sizes: tuple = ()
    estimator: str = ESTIMATOR


def bootstrap_p_value(X, Y, bootstraps: int = 10000, seed: int = 0, chunk: int = 500) -> MmdResult:
    """Permutation test of equal distributions.

    Each permutation re-splits the pooled rows into sets of the original sizes.
    The within/cross kernel sums for a split with indicator ``u`` follow from
    ``u' K u`` and ``u' K 1``, so batches of permutations cost one matrix
    product.
    """
    if bootstraps < 1:
        raise ValueError("bootstraps must be >= 1")
    X, Y, Z = _pooled(X, Y)
    sigma = median_bandwidth(Z)
    K = _kernel(Z, sigma)
    m, n = len(X), len(Y)
    N = m + n
    r = K.sum(axis=1)
    total = r.sum()

    def stats(U):
        KU = U @ K
        sxx = np.einsum("ij,ij->i", KU, U)
        ur = U @ r
        sxy = ur - sxx
        syy = total - 2.0 * ur + sxx
        return _mmd_from_sums(sxx, syy, sxy, m, n)

    u0 = np.zeros((1, N))
    u0[0, :m] = 1.0
    observed = float(stats(u0)[0])
    rng = np.random.default_rng(seed)
    exceed = 0
    done = 0
    tol = 1e-12 * max(1.0, abs(observed))
    while done < bootstraps:
        b = min(chunk, bootstraps - done)
        U = np.zeros((b, N))
        for i in range(b):
            U[i, rng.permutation(N)[:m]] = 1.0
        exceed += int(np.sum(stats(U) >= observed - tol))
        done += b
    return MmdResult(observed, exceed / bootstraps, bootstraps, sigma, (m, n))


# -- splits -------------------------------------------------------------------------


def _check_days(n):
    if n % HOURS:
        raise ValueError(f"{n} observations is not a whole number of days")
    return n // HOURS


def day_stratified_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per day, 12 random hours to side A and the remaining 12 to side B."""
    days = _check_days(n)
    rng = np.random.default_rng(seed)
    a, b = [], []
    for d in range(days):
        order = rng.permutation(HOURS) + d * HOURS
        a.append(np.sort(order[: HOURS // 2]))
        b.append(np.sort(order[HOURS // 2 :]))
    return np.concatenate(a), np.concatenate(b)


def day_stratified_split(observations, seed: int):
    obs = np.asarray(observations, dtype=np.float64)
    a, b = day_stratified_indices(len(obs), seed)
    return obs[a], obs[b]


def whole_days(series) -> np.ndarray:
    """Leading rows of ``series`` covering complete days only."""
    series = np.asarray(series)
    return series[: (len(series) // HOURS) * HOURS]


def month_split(observations, months):
    """Negative control: rows of the first calendar month present vs the next one."""
    obs = np.asarray(observations, dtype=np.float64)
    months = np.asarray(months)
    present = list(dict.fromkeys(months.tolist()))
    if len(present) < 2:
        raise ValueError("need at least two months of observations")
    return obs[months == present[0]], obs[months == present[1]]


def parity_split(observations):
    """Negative control: even hours vs odd hours."""
    obs = np.asarray(observations, dtype=np.float64)
    _check_days(len(obs))
    return obs[0::2], obs[1::2]


def consecutive_split(observations, days: int):
    """Negative control: the first ``days`` days vs the following ``days`` days."""
    obs = np.asarray(observations, dtype=np.float64)
    if len(obs) < 2 * days * HOURS:
        raise ValueError("episode too short for two consecutive blocks")
    k = days * HOURS
    return obs[:k], obs[k : 2 * k]


# -- baselines and verdicts -------------------------------------------------------


@dataclass
class Baseline:
    results: list

    @property
    def mmds(self) -> np.ndarray:
        return np.array([r.mmd for r in self.results])

    @property
    def p_values(self) -> np.ndarray:
        return np.array([r.p_value for r in self.results])

    def percentile_of(self, result: MmdResult) -> dict:
        return {
            "mmd_percentile": float(100.0 * np.mean(self.mmds < result.mmd)),
            "p_percentile": float(100.0 * np.mean(self.p_values < result.p_value)),
        }

    def verdict(self, result: MmdResult) -> dict:
        """Plausible when the MMD is within the baseline MMDs and p within the baseline p-values."""
        plausible = bool(result.mmd <= self.mmds.max() and result.p_value >= self.p_values.min())
        return dict(self.percentile_of(result), plausible=plausible)

    def summary(self) -> dict:
        return {
            "pairs": len(self.results),
            "mmd_max": float(self.mmds.max()),
            "mmd_median": float(np.median(self.mmds)),
            "p_min": float(self.p_values.min()),
            "p_p5": float(np.percentile(self.p_values, 5)),
            "p_median": float(np.median(self.p_values)),
            "p_above_005": int(np.sum(self.p_values > 0.05)),
        }


def clean_baseline(observations, pairs: int = 100, bootstraps: int = 10000, seed: int = 0) -> Baseline:
    """MMD tests of ``pairs`` independent day-stratified splits of one clean episode."""
    obs = np.asarray(observations, dtype=np.float64)
    _check_days(len(obs))
    seeds = np.random.SeedSequence(seed).generate_state(2 * pairs)
    results = []
    for i in range(pairs):
        A, B = day_stratified_split(obs, int(seeds[2 * i]))
        results.append(bootstrap_p_value(A, B, bootstraps, int(seeds[2 * i + 1])))
    return Baseline(results)


def paired_test(clean, adversarial, bootstraps: int = 10000, seed: int = 0) -> MmdResult:
    """Clean rows of one stratified half against adversarial rows of the other half.

    Both sets then have the baseline's sizes and day/hour structure, and
    differ only by the perturbation.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ValueError("clean and adversarial series differ in shape")
    seeds = np.random.SeedSequence(seed).generate_state(2)
    a, b = day_stratified_indices(len(clean), int(seeds[0]))
    return bootstrap_p_value(clean[a], adversarial[b], bootstraps, int(seeds[1]))


# -- absolute variation ------------------------------------------------------------


def abs_variation(series) -> np.ndarray:
    """Row ``t`` is ``|x[t+1] - x[t]|``."""
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two observations")
    return np.abs(np.diff(x, axis=0))


@dataclass
class VariationReport:
    clean_mean: list
    adversarial_mean: list
    clean_min: list
    clean_max: list
    outliers_per_feature: list
    outlying_features_per_row: list
    summary: dict = field(default_factory=dict)


def variation_outlier_report(adversarial_variation, clean_variation, features=None) -> VariationReport:
    """Compare adversarial variations with the range of clean variations, feature by feature."""
    adv = _as_sample(adversarial_variation, "adversarial variation")
    ref = _as_sample(clean_variation, "clean variation")
    if adv.shape[1] != ref.shape[1]:
        raise ValueError("feature widths differ")
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    outside = (adv < lo) | (adv > hi)
    per_row = outside.sum(axis=1)
    summary = {
        "rows": int(len(adv)),
        "values_within_range": float(1.0 - outside.mean()),
        "rows_with_any_outlier": float(np.mean(per_row >= 1)),
        "rows_with_multiple_outliers": float(np.mean(per_row >= 2)),
    }
    if features is not None:
        summary["outliers_by_name"] = {f: int(c) for f, c in zip(features, outside.sum(axis=0)) if c}
    return VariationReport(
        ref.mean(axis=0).tolist(),
        adv.mean(axis=0).tolist(),
        lo.tolist(),
        hi.tolist(),
        outside.sum(axis=0).astype(int).tolist(),
        per_row.astype(int).tolist(),
        summary,
    )


# -- full detection run -----------------------------------------------------------


@dataclass
class DetectionReport:
    observation: dict
    variation: dict
    baseline: dict
    variation_baseline: dict
    outliers: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def detect_episode(clean, adversarial, pairs: int = 100, bootstraps: int = 10000, seed: int = 0, features=None) -> DetectionReport:
    """Observation-space and variation-space tests of an attacked episode against clean baselines.

    ``clean`` are the true observations of a clean episode, ``adversarial``
    the perceived observations of the attacked one.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    s = np.random.SeedSequence(seed).generate_state(4)
    base = clean_baseline(clean, pairs, bootstraps, int(s[0]))
    obs = paired_test(clean, adversarial, bootstraps, int(s[1]))
    clean_var = whole_days(abs_variation(clean))
    adv_var = whole_days(abs_variation(adversarial))
    var_base = clean_baseline(clean_var, pairs, bootstraps, int(s[2]))
    var = paired_test(clean_var, adv_var, bootstraps, int(s[3]))
    obs_v = base.verdict(obs)
    var_v = var_base.verdict(var)
    var_v["below_p5"] = bool(var.p_value < np.percentile(var_base.p_values, 5))
    outliers = variation_outlier_report(abs_variation(adversarial), abs_variation(clean), features)
    return DetectionReport(
        observation=dict(asdict(obs), **obs_v),
        variation=dict(asdict(var), **var_v),
        baseline=base.summary(),
        variation_baseline=var_base.summary(),
        outliers=outliers.summary,
        metadata={"estimator": ESTIMATOR, "pairs": pairs, "bootstraps": bootstraps, "seed": seed},
    )
