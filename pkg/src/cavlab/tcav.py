"""Conceptual sensitivity, TCAV scores, and their significance testing."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .cav import Cav, ProbeConfig, _activations, fit_probes
from .dataset import ConceptSet
from .errors import ShapeError, SignificanceAbortError


def _check_cav(model, layer, cav: Cav):
    if cav.layer != layer:
        raise ShapeError(f"CAV was trained on layer {cav.layer!r}, not {layer!r}")
    m = model.width(layer)
    if cav.m != m:
        raise ShapeError(f"CAV has length {cav.m} but layer {layer!r} has width {m}")


def logit_gradients(model, layer: str, k: int, inputs, batch: int = 256) -> np.ndarray:
    """Rows of grad h_{l,k}(f_l(x)) for every input."""
    inputs = np.asarray(inputs, dtype=np.float64)
    out = []
    for i in range(0, len(inputs), batch):
        a = model.activation_at(layer, inputs[i:i + batch])
        out.append(model.logit_grad_at(layer, k, a))
    return np.concatenate(out) if out else np.empty((0, model.width(layer)))


def directional_derivative(model, layer: str, cav: Cav, k: int, x) -> float:
    """Sensitivity of the class-``k`` logit to moving f_l(x) along the CAV."""
    _check_cav(model, layer, cav)
    g = model.logit_grad_at(layer, k, model.activation_at(layer, x))
    return float(g @ cav.vector)


def sensitivities(model, layer: str, cav: Cav, k: int, inputs) -> np.ndarray:
    _check_cav(model, layer, cav)
    return logit_gradients(model, layer, k, inputs) @ cav.vector


def score_from_sensitivities(s) -> float:
    """Fraction of strictly positive sensitivities; zeros count as not positive."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("TCAV score of an empty input set is undefined")
    return float(np.count_nonzero(s > 0) / s.size)


def tcav_score(model, layer: str, cav: Cav, k: int, inputs) -> float:
    if len(inputs) == 0:
        raise ValueError("TCAV score of an empty input set is undefined")
    return score_from_sensitivities(sensitivities(model, layer, cav, k, inputs))


# -- t-tests -------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    statistic: float
    df: float
    p_value: float


def one_sample_ttest(samples, popmean: float = 0.5) -> TTestResult:
    """Two-sided one-sample t-test.

    With zero sample variance the statistic is infinite (p = 0) when the
    mean differs from ``popmean`` and zero (p = 1) when it equals it.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("a t-test needs at least two samples")
    diff = x.mean() - popmean
    sd = x.std(ddof=1)
    if sd == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, n - 1, 1.0)
        return TTestResult(float(np.copysign(np.inf, diff)), n - 1, 0.0)
    t = diff / (sd / np.sqrt(n))
    p = 2.0 * special.stdtr(n - 1, -abs(t))
    return TTestResult(float(t), float(n - 1), float(min(p, 1.0)))


def welch_ttest(a, b) -> TTestResult:
    """Two-sided two-sample t-test without assuming equal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("a t-test needs at least two samples per group")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    if va + vb == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, len(a) + len(b) - 2, 1.0)
        return TTestResult(float(np.copysign(np.inf, diff)), len(a) + len(b) - 2, 0.0)
    t = diff / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = 2.0 * special.stdtr(df, -abs(t))
    return TTestResult(float(t), float(df), float(min(p, 1.0)))


# -- reports ---------------------------------------------------------------------

@dataclass
class TcavReport:
    concept: str
    class_index: int
    layer: str
    scores: list[float]
    p_value: float
    alpha: float = 0.05
    bonferroni_m: int = 2
    master_seed: int = 0
    mode: str = "one-sample"
    failed_runs: int = 0
    class_name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = [float(s) for s in self.scores]
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("TCAV scores must lie in [0, 1]")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value must lie in [0, 1]")

    @property
    def runs(self) -> int:
        return len(self.scores)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.scores)) if self.scores else float("nan")

    @property
    def threshold(self) -> float:
        return self.alpha / self.bonferroni_m

    @property
    def significant(self) -> bool:
        return self.p_value < self.threshold

    def to_dict(self) -> dict:
        return {
            "concept": self.concept,
            "class": self.class_index,
            "class_name": self.class_name,
            "layer": self.layer,
            "scores": self.scores,
            "mean": self.mean,
            "p_value": self.p_value,
            "significant": self.significant,
            "alpha": self.alpha,
            "m": self.bonferroni_m,
            "runs": self.runs,
            "master_seed": self.master_seed,
            "mode": self.mode,
            "failed_runs": self.failed_runs,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TcavReport":
        return cls(d["concept"], int(d["class"]), d["layer"], list(d["scores"]), float(d["p_value"]),
                   float(d["alpha"]), int(d["m"]), int(d.get("master_seed", 0)), d.get("mode", "one-sample"),
                   int(d.get("failed_runs", 0)), d.get("class_name", ""), d.get("extra", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TcavReport":
        return cls.from_dict(json.loads(text))


CSV_COLUMNS = ("concept", "class", "class_name", "layer", "runs", "mean", "std", "p_value",
               "alpha", "m", "significant")


def reports_to_csv(reports) -> str:
    """One row per (concept, class, layer); rejected CAVs stay in, marked."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.concept, r.class_index, r.class_name, r.layer, r.runs, repr(r.mean), repr(r.std),
                    repr(r.p_value), r.alpha, r.bonferroni_m, int(r.significant)])
    return buf.getvalue()


def bar_chart_rows(reports) -> str:
    """Per-class bar data: mean, std and a '*' where the CAV failed testing."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("class", "layer", "concept", "mean", "std", "mark"))
    for r in sorted(reports, key=lambda r: (r.class_index, r.layer, r.concept)):
        w.writerow([r.class_index, r.layer, r.concept, repr(r.mean), repr(r.std), "" if r.significant else "*"])
    return buf.getvalue()


# -- significance testing ------------------------------------------------------------

def run_seed(master_seed: int, run: int) -> int:
    """Per-run seed hashed from the master seed and the run counter."""
    return int(np.random.SeedSequence([master_seed & 0xFFFFFFFF, run]).generate_state(1)[0])


@dataclass
class ScoreRuns:
    scores: list[float]
    failures: list[str]


def _score_runs(pos_acts, pool_acts, grads, runs, negatives_size, probe: ProbeConfig, master_seed,
                workers=None, positives_from_pool=False) -> ScoreRuns:
    def draw(run):
        rng = np.random.default_rng(run_seed(master_seed, run))
        if positives_from_pool:
            # Random-concept baseline: both sides drawn from the pool.
            idx = rng.choice(len(pool_acts), size=len(pos_acts) + negatives_size, replace=False)
            return pool_acts[idx[:len(pos_acts)]], pool_acts[idx[len(pos_acts):]]
        return pos_acts, pool_acts[rng.choice(len(pool_acts), size=negatives_size, replace=False)]

    def chunk(run_ids):
        cfgs = [ProbeConfig(probe.probe_kind, probe.epochs, probe.learning_rate, probe.l2, probe.heldout_fraction,
                            run_seed(master_seed, r)) for r in run_ids]
        return fit_probes([draw(r) for r in run_ids], cfgs)

    # Probes are fitted in stacked batches; each result is independent of the batching.
    bounds = range(0, runs, 100)
    chunks = [range(lo, min(lo + 100, runs)) for lo in bounds]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            fitted = [r for part in ex.map(chunk, chunks) for r in part]
    else:
        fitted = [r for c in chunks for r in chunk(c)]
    scores, failures = [], []
    for run, res in enumerate(fitted):
        if isinstance(res, Exception):
            failures.append(f"run {run}: {res}")
        else:
            scores.append(score_from_sensitivities(grads @ res.vector))
    return ScoreRuns(scores, failures)


def significance_test(model, layer: str, positives: ConceptSet, negative_pool: ConceptSet, k: int, class_inputs,
                      runs: int = 500, alpha: float = 0.05, bonferroni_m: int = 2, negatives_size: int | None = None,
                      probe: ProbeConfig = ProbeConfig(), master_seed: int = 0, mode: str = "one-sample",
                      max_failure_rate: float = 0.1, workers: int | None = None, class_name: str = "") -> TcavReport:
    """Retrain the CAV ``runs`` times against resampled negatives and test the scores.

    ``mode="one-sample"`` tests the scores against 0.5.  ``mode="two-sample"``
    compares them with scores of random-vs-random CAVs drawn from the pool
    (Welch t-test).  The report is returned whether or not the null is
    rejected.
    """
    if runs < 2:
        raise ValueError("significance testing needs at least 2 runs")
    if mode not in ("one-sample", "two-sample"):
        raise ValueError(f"unknown mode {mode!r}")
    class_inputs = np.asarray(class_inputs, dtype=np.float64)
    if len(class_inputs) == 0:
        raise ValueError("no inputs for the tested class")
    negatives_size = min(len(positives), len(negative_pool)) if negatives_size is None else negatives_size
    if negatives_size > len(negative_pool):
        raise ValueError(f"negative pool of {len(negative_pool)} cannot supply {negatives_size} per run")
    if mode == "two-sample" and len(positives) + negatives_size > len(negative_pool):
        raise ValueError("two-sample mode needs a pool large enough for random positives and negatives")

    pos_acts = _activations(model, layer, positives)
    pool_acts = _activations(model, layer, negative_pool)
    grads = logit_gradients(model, layer, k, class_inputs)
    res = _score_runs(pos_acts, pool_acts, grads, runs, negatives_size, probe, master_seed, workers)
    _check_failures(res, runs, max_failure_rate)
    extra = {"negatives_size": negatives_size, "probe": probe.to_dict()}
    if mode == "one-sample":
        test = one_sample_ttest(res.scores, 0.5) if len(res.scores) >= 2 else TTestResult(0.0, 0, 1.0)
    else:
        base = _score_runs(pos_acts, pool_acts, grads, runs, negatives_size, probe, master_seed + 1, workers,
                           positives_from_pool=True)
        _check_failures(base, runs, max_failure_rate)
        test = welch_ttest(res.scores, base.scores)
        extra["random_scores"] = base.scores
    extra["t"] = test.statistic
    return TcavReport(positives.name, k, layer, res.scores, test.p_value, alpha, bonferroni_m, master_seed, mode,
                      len(res.failures), class_name, extra)


def _check_failures(res: ScoreRuns, runs: int, max_failure_rate: float):
    if len(res.failures) > max_failure_rate * runs:
        raise SignificanceAbortError(
            f"{len(res.failures)} of {runs} CAV training runs failed; first: {res.failures[0]}", res.failures)


def test_scores(scores, alpha: float = 0.05, bonferroni_m: int = 2, **report_fields) -> TcavReport:
    """Wrap precomputed per-run scores in a report with the one-sample test applied."""
    test = one_sample_ttest(scores, 0.5)
    fields = {"concept": "", "class_index": 0, "layer": ""}
    fields.update(report_fields)
    return TcavReport(scores=list(scores), p_value=test.p_value, alpha=alpha, bonferroni_m=bonferroni_m, **fields)


test_scores.__test__ = False  # not a pytest test despite the name


# -- distribution comparison -----------------------------------------------------------

@dataclass(frozen=True)
class ShiftEntry:
    key: tuple
    mean_delta: float
    ks_statistic: float
    flagged: bool


def _index(reports):
    out = {}
    for r in reports:
        key = (r.concept, r.class_index, r.layer)
        if key in out:
            raise ValueError(f"duplicate report for {key}")
        out[key] = r
    return out


def ks_statistic(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a, float), np.asarray(b, float)).statistic)


def score_distribution_compare(reports_a, reports_b, threshold: float = 0.5) -> list[ShiftEntry]:
    """Mean-score deltas (b - a) and two-sample KS statistics per (concept, class, layer)."""
    ia, ib = _index(reports_a), _index(reports_b)
    if set(ia) != set(ib):
        raise ValueError(f"report grids differ: {sorted(set(ia) ^ set(ib))}")
    out = []
    for key in sorted(ia):
        a, b = ia[key], ib[key]
        ks = ks_statistic(a.scores, b.scores)
        out.append(ShiftEntry(key, b.mean - a.mean, ks, ks > threshold))
    return out
