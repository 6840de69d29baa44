"""Paired comparison statistics: Wilcoxon signed-rank and TOST equivalence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, InsufficientDataError

ALPHA = 0.05
EXACT_MAX_N = 25
MIN_N = 5
DEFAULT_BOUNDS = {"dice": 0.02, "hd95_mm": 3.0}


@dataclass
class PairedSample:
    values_a: list
    values_b: list
    label: str = ""

    def __post_init__(self):
        a = np.asarray(self.values_a, dtype=np.float64)
        b = np.asarray(self.values_b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise InsufficientDataError(f"{self.label}: paired lists must have equal length")
        if a.size < MIN_N:
            raise InsufficientDataError(f"{self.label}: need at least {MIN_N} pairs, got {a.size}")
        if np.isnan(a).any() or np.isnan(b).any():
            raise InsufficientDataError(f"{self.label}: NaN in paired values")
        self.values_a, self.values_b = a, b

    @property
    def differences(self):
        return self.values_a - self.values_b


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str  # exact | normal_approx | paired_t | degenerate
    n_effective: int
    decision: str  # reject | fail_to_reject
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _decision(p, alpha):
    return "reject" if p < alpha else "fail_to_reject"


def signed_rank_null_counts(doubled_ranks):
    """Number of sign patterns giving each value of 2*W+ (index = doubled rank sum)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r:reach + r + 1] = counts[r:reach + r + 1] + counts[: reach + 1].copy()
        reach += r
    return counts


def wilcoxon_signed_rank(s, alpha=ALPHA):
    """Two-sided signed-rank test on ``values_a - values_b``.

    Zero differences are dropped and ties get mid-ranks. Up to 25 non-zero
    pairs the p-value is exact (sign-pattern distribution by dynamic
    programming over doubled rank sums); above that a tie- and
    continuity-corrected normal approximation is used.
    """
    d = s.differences
    d = d[d != 0]
    n = int(d.size)
    if n < MIN_N:
        raise InsufficientDataError(f"{s.label}: {n} non-zero differences, need {MIN_N}")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        k = int(round(2 * w))
        tail = int(sum(counts[: k + 1]))
        p = min(1.0, 2 * tail / 2 ** n)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = (w - mean + 0.5) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, 2.0 * sps.norm.cdf(min(z, 0.0)))
        method = "normal_approx"
    return TestResult(w, float(p), method, n, _decision(p, alpha),
                      {"w_plus": w_plus, "w_minus": w_minus})


def tost_equivalence(s, bound, alpha=ALPHA):
    """Paired-t two one-sided tests of ``|mean(a - b)| < bound``.

    The reported p-value is the larger of the two one-sided p-values.
    Zero-variance differences are decided directly: equivalent with p = 0
    when ``|mean| < bound``, otherwise not equivalent with p = 1.
    """
    if bound <= 0:
        raise ConfigError("equivalence bound must be positive")
    d = s.differences
    n = int(d.size)
    if n < MIN_N:
        raise InsufficientDataError(f"{s.label}: need {MIN_N} pairs, got {n}")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        p = 0.0 if abs(mean) < bound else 1.0
        return TestResult(math.copysign(math.inf, bound - abs(mean)), p, "degenerate", n,
                          _decision(p, alpha), {"mean_diff": mean, "sd": 0.0, "bound": bound})
    se = sd / math.sqrt(n)
    t_lower = (mean + bound) / se
    t_upper = (mean - bound) / se
    p_lower = float(sps.t.sf(t_lower, n - 1))
    p_upper = float(sps.t.cdf(t_upper, n - 1))
    p = max(p_lower, p_upper)
    stat = t_lower if p_lower >= p_upper else t_upper
    return TestResult(stat, p, "paired_t", n, _decision(p, alpha),
                      {"mean_diff": mean, "sd": sd, "bound": bound,
                       "t_lower": t_lower, "t_upper": t_upper, "p_lower": p_lower, "p_upper": p_upper})


def run_region_panel(metric_table, bounds=None, alpha=ALPHA):
    """Wilcoxon and TOST for every region and metric.

    ``metric_table`` maps region -> metric -> PairedSample (or an exception
    instance recording why no sample could be built). Per-region failures are
    recorded, never raised.
    """
    bounds = dict(DEFAULT_BOUNDS if bounds is None else bounds)
    metrics = sorted({m for row in metric_table.values() for m in row})
    missing = [m for m in metrics if m not in bounds]
    if missing:
        raise ConfigError(f"no equivalence bound for metric(s) {missing}")
    regions = {}
    for region, row in metric_table.items():
        entry = {}
        for metric, sample in row.items():
            res = {}
            for name, fn in (("wilcoxon", lambda s: wilcoxon_signed_rank(s, alpha)),
                             ("tost", lambda s: tost_equivalence(s, bounds[metric], alpha))):
                try:
                    if isinstance(sample, Exception):
                        raise sample
                    res[name] = fn(sample).to_dict()
                except (InsufficientDataError, ConfigError) as exc:
                    res[name] = {"error": f"{type(exc).__name__}: {exc}"}
            entry[metric] = res
        regions[region] = entry

    def passing(test, metric):
        return [r for r, e in regions.items()
                if metric in e and e[metric][test].get("decision") == "reject"]

    summary = {
        "significant": {m: passing("wilcoxon", m) for m in metrics},
        "equivalent": {m: passing("tost", m) for m in metrics},
    }
    summary["equivalent_all_metrics"] = [
        r for r, e in regions.items()
        if e and all(e[m]["tost"].get("decision") == "reject" for m in e)
    ]
    return {"alpha": alpha, "bounds": bounds, "regions": regions, "summary": summary}


def format_panel(panel):
    """Plain-text table: one line per region and metric."""
    lines = [f"{'region':<16}{'metric':<10}{'wilcoxon p':>12}  {'sig':<4}{'tost p':>12}  equiv"]
    for region, entry in panel["regions"].items():
        for metric, res in entry.items():
            w, t = res["wilcoxon"], res["tost"]
            wp = f"{w['p_value']:.4g}" if "p_value" in w else "n/a"
            tp = f"{t['p_value']:.4g}" if "p_value" in t else "n/a"
            ws = "yes" if w.get("decision") == "reject" else "no"
            ts = "yes" if t.get("decision") == "reject" else "no"
            lines.append(f"{region:<16}{metric:<10}{wp:>12}  {ws:<4}{tp:>12}  {ts}")
    eq = panel["summary"]["equivalent_all_metrics"]
    lines.append(f"equivalent on every metric: {len(eq)}/{len(panel['regions'])} regions")
    return "\n".join(lines)
