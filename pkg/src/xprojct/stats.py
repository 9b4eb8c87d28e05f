"""Per-class classification metrics and the paired statistical tests.

Distribution tails come from ``math``/``statistics`` only; scipy is used in
the test-suite as an independent cross-check.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from statistics import NormalDist
from typing import List, Sequence

import numpy as np

from .errors import PreconditionError, UndefinedTestError

_STD_NORMAL = NormalDist()

MCNEMAR_EXACT_BELOW = 25
WILCOXON_EXACT_MAX_N = 25


# ---------------------------------------------------------------- metrics


@dataclass
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    classes: List[ClassMetrics]
    threshold: float
    summary: dict  # metric -> {"mean": .., "std": ..}
    zero_division: float = 0.0

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "zero_division": self.zero_division,
            "summary": self.summary,
            "classes": [asdict(c) for c in self.classes],
        }

    def format_table(self) -> str:
        """Aligned text table with ``mean ± std`` cells at three decimals."""
        head = f"{'region':<14} {'accuracy':>9} {'precision':>9} {'recall':>9} {'f1':>9}"
        lines = [head, "-" * len(head)]
        for c in self.classes:
            lines.append(f"{c.name:<14} {c.accuracy:9.3f} {c.precision:9.3f} {c.recall:9.3f} {c.f1:9.3f}")
        lines.append("-" * len(head))
        s = self.summary
        cells = [f"{s[k]['mean']:.3f} ± {s[k]['std']:.3f}" for k in ("accuracy", "precision", "recall", "f1")]
        lines.append("macro:  " + "  ".join(f"{k}={v}" for k, v in zip(("acc", "prec", "rec", "f1"), cells)))
        return "\n".join(lines)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics_summary(probs, truths, threshold: float = 0.5, names: Sequence[str] | None = None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    if probs.shape != truths.shape or probs.ndim != 2:
        raise PreconditionError(f"probs {probs.shape} and truths {truths.shape} must be matching 2D arrays")
    if probs.shape[0] == 0:
        raise PreconditionError("no samples to evaluate")
    names = list(names) if names is not None else [f"class_{i}" for i in range(probs.shape[1])]
    pred = probs >= threshold
    n = probs.shape[0]
    classes = []
    for j, name in enumerate(names):
        p, t = pred[:, j], truths[:, j]
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        tn = n - tp - fp - fn
        prec = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        classes.append(ClassMetrics(name, tp, fp, fn, tn, (tp + tn) / n, prec, rec, f1))
    summary = {}
    for key in ("accuracy", "precision", "recall", "f1"):
        vals = np.array([getattr(c, key) for c in classes])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return MetricsReport(classes, threshold, summary)


# ---------------------------------------------------------------- McNemar


@dataclass
class McNemarResult:
    b: int
    c: int
    statistic: float
    p_value: float
    method: str


def binom_cdf_half(k: int, n: int) -> float:
    """P(X <= k) for X ~ Binomial(n, 1/2), summed exactly over integers."""
    return sum(math.comb(n, i) for i in range(0, k + 1)) / 2**n


def chi2_1_sf(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def mcnemar(b: int, c: int) -> McNemarResult:
    if b < 0 or c < 0:
        raise PreconditionError("discordant counts must be non-negative")
    b, c = int(b), int(c)
    n = b + c
    if n == 0:
        raise UndefinedTestError("McNemar undefined without discordant pairs")
    if n < MCNEMAR_EXACT_BELOW:
        p = min(1.0, 2.0 * binom_cdf_half(min(b, c), n))
        return McNemarResult(b, c, float(min(b, c)), p, "exact")
    stat = (abs(b - c) - 1.0) ** 2 / n
    return McNemarResult(b, c, stat, min(1.0, chi2_1_sf(stat)), "chi-square-corrected")


def paired_model_comparison(preds_a, preds_b, truths, threshold: float = 0.5, names: Sequence[str] | None = None) -> list:
    """Per-class McNemar table from two models' probabilities on the same samples.

    ``b`` counts samples where A is right and B wrong; ``c`` the reverse.
    Classes without discordant pairs get ``result=None``.
    """
    a = np.asarray(preds_a, dtype=np.float64) >= threshold
    bb = np.asarray(preds_b, dtype=np.float64) >= threshold
    t = np.asarray(truths).astype(bool)
    if not (a.shape == bb.shape == t.shape) or a.ndim != 2:
        raise PreconditionError("prediction and truth arrays must share a 2D shape")
    names = list(names) if names is not None else [f"class_{i}" for i in range(a.shape[1])]
    ok_a = a == t
    ok_b = bb == t
    rows = []
    for j, name in enumerate(names):
        b = int(np.sum(ok_a[:, j] & ~ok_b[:, j]))
        c = int(np.sum(~ok_a[:, j] & ok_b[:, j]))
        if b + c == 0:
            rows.append({"region": name, "b": 0, "c": 0, "result": None, "status": "no discordance"})
        else:
            res = mcnemar(b, c)
            rows.append({"region": name, "b": b, "c": c, "result": res, "status": "tested"})
    return rows


def comparison_table_json(rows) -> list:
    out = []
    for r in rows:
        item = {"region": r["region"], "b": r["b"], "c": r["c"], "status": r["status"]}
        if r["result"] is not None:
            item.update(statistic=r["result"].statistic, p_value=r["result"].p_value, method=r["result"].method)
        out.append(item)
    return out


def format_comparison_table(rows) -> str:
    lines = [f"{'region':<14} {'b':>5} {'c':>5} {'p':>10}  method"]
    for r in rows:
        if r["result"] is None:
            lines.append(f"{r['region']:<14} {r['b']:>5} {r['c']:>5} {'-':>10}  no discordance")
        else:
            res = r["result"]
            lines.append(f"{r['region']:<14} {res.b:>5} {res.c:>5} {res.p_value:>10.3g}  {res.method}")
    return "\n".join(lines)


# ---------------------------------------------------------------- Wilcoxon


@dataclass
class WilcoxonResult:
    n_effective: int
    statistic: float  # sum of positive ranks
    z: float
    p_value: float
    method: str


def z_to_p_two_sided(z: float) -> float:
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def rank_with_ties(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share their mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_distribution(n: int) -> np.ndarray:
    """Counts of the 2**n sign patterns per positive-rank sum (ranks 1..n)."""
    top = n * (n + 1) // 2
    counts = np.zeros(top + 1, dtype=object)
    counts[0] = 1
    for r in range(1, n + 1):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y=None) -> WilcoxonResult:
    x = np.asarray(x, dtype=np.float64)
    if y is not None and np.shape(y) != x.shape:
        raise PreconditionError("paired samples differ in length")
    d = x if y is None else x - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    if n < 3:
        raise PreconditionError(f"need at least 3 non-zero differences, got {n}")
    absd = np.abs(d)
    ranks = rank_with_ties(absd)
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    diff = w_plus - mean
    z = (diff - 0.5 * np.sign(diff)) / math.sqrt(var) if var > 0 else 0.0
    ties = bool(np.any(tie_counts > 1))
    if n <= WILCOXON_EXACT_MAX_N and not ties:
        dist = signed_rank_distribution(n)
        total = 2**n
        t = int(round(w_plus))
        lower = int(dist[: t + 1].sum())
        upper = int(dist[t:].sum())
        p = min(1.0, 2.0 * min(lower, upper) / total)
        return WilcoxonResult(n, w_plus, float(z), p, "exact")
    return WilcoxonResult(n, w_plus, float(z), z_to_p_two_sided(z), "normal-approx")


# ---------------------------------------------------------------- Shapiro-Wilk


@dataclass
class ShapiroResult:
    n: int
    W: float
    p_value: float


def _poly(coef, x):
    return sum(c * x**i for i, c in enumerate(coef))


_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def shapiro_coefficients(n: int) -> np.ndarray:
    """Royston's approximation of the Shapiro-Wilk weights for the upper half (length n//2)."""
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    m = np.array([_STD_NORMAL.inv_cdf((i - 0.375) / (n + 0.25)) for i in range(1, half + 1)])
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    a = np.empty(half)
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
        a[2:] = -m[2:] / fac
        a[1] = a2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1**2))
        a[1:] = -m[1:] / fac
    a[0] = a1
    return a


def shapiro_wilk(sample) -> ShapiroResult:
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = len(x)
    if n < 3 or n > 5000:
        raise PreconditionError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    if x[-1] - x[0] <= 0 or not np.isfinite(x).all():
        raise UndefinedTestError("Shapiro-Wilk undefined for a zero-variance sample")
    half = shapiro_coefficients(n)
    weights = np.zeros(n)
    weights[n - len(half) :] = half[::-1]
    weights[: len(half)] = -half
    # centre and scale first; keeps the ratio well-conditioned
    xc = (x - x.mean()) / (x[-1] - x[0])
    ss = float(np.sum(xc * xc))
    num = float(np.dot(weights, xc)) ** 2
    w = min(1.0, num / ss / float(np.sum(weights * weights)))

    if n == 3:
        p = max(0.0, (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0))
        return ShapiroResult(n, w, min(1.0, p))
    w1 = 1.0 - w
    if w1 <= 0:
        return ShapiroResult(n, w, 1.0)
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return ShapiroResult(n, w, 1e-99)
        y = -math.log(gamma - y)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        lnn = math.log(n)
        mu = _poly(_C5, lnn)
        sigma = math.exp(_poly(_C6, lnn))
    p = 0.5 * math.erfc((y - mu) / (sigma * math.sqrt(2.0)))
    return ShapiroResult(n, w, p)
