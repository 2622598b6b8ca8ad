"""
Evaluation harness
Detection rates per attack corpus, false-positive sweep over p0, SCFD vs PST
comparison and classify cost measurements, collected into one EvalReport.
"""

import logging
import time
from collections import Counter
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

try:
    import config
    import detector
    import errors
    import pst_baseline
    import scfd_stats
    import synthgen
    import trace_model
    import workers
except ImportError:
    # Fallback if running from root
    from scripts import config
    from scripts import detector
    from scripts import errors
    from scripts import pst_baseline
    from scripts import scfd_stats
    from scripts import synthgen
    from scripts import trace_model
    from scripts import workers

logger = logging.getLogger(__name__)

COST_DIMS = (5, 10, 14)
COST_CLUSTERS = 5
QUADRATIC_TOLERANCE = 0.15


class VerdictRecord(BaseModel):
    corpus: str
    source_id: str
    method: str
    malicious: bool
    rule: Optional[str] = None
    distance: Optional[float] = None
    position: Optional[int] = None


class CorpusResult(BaseModel):
    trials: int
    detected: int
    rate: float
    rules: dict[str, int] = {}


class DetectionSection(BaseModel):
    disabled_rules: list[str] = []
    results: dict[str, CorpusResult] = {}


class FalsePositiveSection(BaseModel):
    trials: int
    rates: dict[str, float] = {}
    counts: dict[str, int] = {}


class PstSection(BaseModel):
    threshold: float
    depths: list[int] = []
    results: dict[str, dict[str, CorpusResult]] = {}  # corpus -> "N=3" -> result


class CostRow(BaseModel):
    reduced_dim: int
    clusters: int
    madds: int
    madds_long_trace: int
    latency_mean_us: float
    latency_stdev_us: float


class CostSection(BaseModel):
    trials: int
    rows: list[CostRow] = []
    profile_madds: int = 0
    scaling: dict[str, float] = {}


class EvalReport(BaseModel):
    generated_at: str = ""
    config: dict = {}
    detection: Optional[DetectionSection] = None
    false_positive: Optional[FalsePositiveSection] = None
    pst_comparison: Optional[PstSection] = None
    cost: Optional[CostSection] = None
    verdict_log: list[VerdictRecord] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

def standard_attack_corpora(seed: int = config.SEED, trials: int = config.ATTACK_TRIALS):
    """The five attack rows, each from its own seed offset."""
    base = synthgen.WorkloadSpec(seed=seed)
    rows = [
        ("http_leak", synthgen.AttackKind.HTTP_LEAK, None),
        ("ftp_leak/flow1", synthgen.AttackKind.FTP_LEAK, synthgen.FLOW_FTP),
        ("ftp_leak/flow2", synthgen.AttackKind.FTP_LEAK, synthgen.FLOW_NO_FTP),
        ("data_corrupt", synthgen.AttackKind.DATA_CORRUPT, None),
        ("shellcode", synthgen.AttackKind.SHELLCODE, None),
    ]
    corpora = {}
    for offset, (name, attack, flow) in enumerate(rows, start=1):
        spec = base.model_copy(update={"seed": (seed + 1000 * offset) & synthgen.MASK64})
        corpora[name] = synthgen.gen_corpus(spec, trials, attack, flow)
    return corpora


def _result(flags, rules=None):
    trials = len(flags)
    detected = sum(1 for f in flags if f)
    return CorpusResult(trials=trials, detected=detected,
                        rate=detected / trials if trials else 0.0, rules=dict(sorted((rules or {}).items())))


# ---------------------------------------------------------------------------
# SCFD detection and false positives
# ---------------------------------------------------------------------------

def _classify_all(profile, traces, disabled_rules=(), threads=1):
    return workers.run_parallel(lambda t: detector.classify(profile, t, disabled_rules), traces, threads)


def run_detection_eval(profile, attack_corpora, ablation_flags=(), threads=1, log=None):
    section = DetectionSection(disabled_rules=sorted(str(f) for f in ablation_flags))
    for name, traces in attack_corpora.items():
        verdicts = _classify_all(profile, traces, ablation_flags, threads)
        rules = Counter(v.rule.kind.value for v in verdicts if v.rule)
        section.results[name] = _result([v.malicious for v in verdicts], rules)
        if log is not None:
            log.extend(
                VerdictRecord(corpus=name, source_id=t.source_id, method="scfd", malicious=v.malicious,
                              rule=v.rule.kind.value if v.rule else None, distance=v.distance)
                for t, v in zip(traces, verdicts)
            )
        logger.info(f"SCFD {name}: {section.results[name].rate:.1%} of {len(traces)}")
    return section


def run_false_positive_eval(profile, fresh_normal_corpus, p0_list=tuple(config.DEFAULT_P0_LIST),
                            threads=1, log=None):
    traces = list(fresh_normal_corpus)
    if not traces:
        raise errors.EmptyCorpus("false-positive evaluation needs at least one normal trace")
    section = FalsePositiveSection(trials=len(traces))
    for p0 in sorted(p0_list, reverse=True):
        verdicts = _classify_all(profile.with_cutoff(p0), traces, threads=threads)
        key = f"{p0:g}"
        section.counts[key] = sum(1 for v in verdicts if v.malicious)
        section.rates[key] = section.counts[key] / len(traces)
        if log is not None:
            log.extend(
                VerdictRecord(corpus=f"normal@p0={key}", source_id=t.source_id, method="scfd",
                              malicious=v.malicious, rule=v.rule.kind.value if v.rule else None,
                              distance=v.distance)
                for t, v in zip(traces, verdicts)
            )
    # A smaller p0 means a larger theta, so alarms can only drop
    ordered = [section.counts[f"{p:g}"] for p in sorted(p0_list, reverse=True)]
    if any(b > a for a, b in zip(ordered, ordered[1:])):
        raise errors.EvalInvariantError(f"false positives grew as p0 decreased: {section.counts}")
    return section


# ---------------------------------------------------------------------------
# PST comparison
# ---------------------------------------------------------------------------

def run_pst_comparison(traces_train, corpora, depths=tuple(config.PST_DEPTHS),
                       threshold=config.PST_THRESHOLD, threads=1, log=None):
    section = PstSection(threshold=threshold, depths=list(depths))
    for depth in depths:
        model = pst_baseline.pst_train(traces_train, depth)
        for name, traces in corpora.items():
            verdicts = workers.run_parallel(lambda t: pst_baseline.pst_classify(model, t, threshold),
                                            traces, threads)
            section.results.setdefault(name, {})[f"N={depth}"] = _result([v.malicious for v in verdicts])
            if log is not None:
                log.extend(
                    VerdictRecord(corpus=name, source_id=t.source_id, method=f"pst{depth}",
                                  malicious=v.malicious, position=v.position)
                    for t, v in zip(traces, verdicts)
                )
            logger.info(f"PST N={depth} {name}: {section.results[name][f'N={depth}'].rate:.1%}")
    return section


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------

def synthetic_cost_profile(reduced_dim, clusters=COST_CLUSTERS, seed=config.SEED):
    """Profile over `reduced_dim` varying syscalls with `clusters` random centroids."""
    rng = np.random.default_rng(seed + reduced_dim)
    names = [f"sys{i:02d}" for i in range(reduced_dim)]
    alphabet = trace_model.SyscallAlphabet(names)
    reduction = scfd_stats.DimReduction(tuple(range(reduced_dim)), (), 0, reduced_dim)
    centroids = []
    for j in range(clusters):
        rows = rng.poisson(lam=5 + 10 * j, size=(4 * reduced_dim, reduced_dim))
        centroids.append(scfd_stats.estimate_centroid(rows))
    return detector.Profile(alphabet, reduction, tuple(centroids), scfd_stats.compute_cutoff(config.P0),
                            detector.ProfileMeta(app_id=f"cost-d{reduced_dim}"))


def _cost_trace(profile, repeat=1):
    calls = [name for name in profile.alphabet.names for _ in range(3 * repeat)]
    return trace_model.ExecutionTrace.from_calls(calls, f"cost-x{repeat}")


def measure_classify(profile, trace, trials):
    counter = scfd_stats.OpCounter()
    detector.classify(profile, trace, counter=counter)
    timings = []
    for _ in range(trials):
        start = time.perf_counter()
        detector.classify(profile, trace)
        timings.append((time.perf_counter() - start) * 1e6)
    mean = float(np.mean(timings)) if timings else 0.0
    stdev = float(np.std(timings)) if len(timings) > 1 else 0.0
    return counter.madds, mean, stdev


def run_cost_eval(profile, trials=100, dims=COST_DIMS):
    section = CostSection(trials=trials)
    if profile is not None:
        section.profile_madds, _, _ = measure_classify(profile, _cost_trace(profile), 1)
    for d in dims:
        p = synthetic_cost_profile(d)
        madds, mean, stdev = measure_classify(p, _cost_trace(p), trials)
        long_madds, _, _ = measure_classify(p, _cost_trace(p, repeat=10), 1)
        if long_madds != madds:
            raise errors.EvalInvariantError(f"op count depends on trace length at D'={d}")
        section.rows.append(CostRow(reduced_dim=d, clusters=len(p.clusters), madds=madds,
                                    madds_long_trace=long_madds, latency_mean_us=mean,
                                    latency_stdev_us=stdev))
    for a, b in zip(section.rows, section.rows[1:]):
        observed = b.madds / a.madds
        expected = (b.reduced_dim / a.reduced_dim) ** 2
        section.scaling[f"{a.reduced_dim}->{b.reduced_dim}"] = observed / expected
        if abs(observed / expected - 1.0) > QUADRATIC_TOLERANCE:
            raise errors.EvalInvariantError(
                f"op count ratio {observed:.3f} not within 15% of quadratic {expected:.3f}")
    return section


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def rates_from_log(log, corpus, method):
    rows = [r for r in log if r.corpus == corpus and r.method == method]
    return sum(1 for r in rows if r.malicious) / len(rows) if rows else 0.0


def zero_latencies(report: EvalReport) -> EvalReport:
    if report.cost is not None:
        for row in report.cost.rows:
            row.latency_mean_us = 0.0
            row.latency_stdev_us = 0.0
    report.generated_at = ""
    return report


def render_table(report: EvalReport) -> str:
    depths = report.pst_comparison.depths if report.pst_comparison else []
    headers = ["Attack", "SCFD"] + [f"PST (N={d})" for d in depths]
    names = list(report.detection.results) if report.detection else []
    if report.pst_comparison:
        names += [n for n in report.pst_comparison.results if n not in names]
    rows = []
    for name in names:
        cells = [name]
        scfd = report.detection.results.get(name) if report.detection else None
        cells.append(f"{scfd.rate:.0%}" if scfd else "-")
        for d in depths:
            res = report.pst_comparison.results.get(name, {}).get(f"N={d}")
            cells.append(f"{res.rate:.0%}" if res else "-")
        rows.append(cells)
    widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    out = [fmt.format(*headers), "  ".join("-" * w for w in widths)]
    out += [fmt.format(*r) for r in rows]

    if report.false_positive:
        out.append("")
        out.append(f"False positives over {report.false_positive.trials} normal executions:")
        for key, rate in report.false_positive.rates.items():
            out.append(f"  p0={key:<6} {report.false_positive.counts[key]:>5}  ({rate:.2%})")
    if report.cost:
        out.append("")
        out.append("Classify cost (multiply-adds per execution):")
        for row in report.cost.rows:
            out.append(f"  D'={row.reduced_dim:<3} k={row.clusters}  madds={row.madds:<6} "
                       f"latency={row.latency_mean_us:.2f}us (sd {row.latency_stdev_us:.2f})")
    return "\n".join(out) + "\n"
