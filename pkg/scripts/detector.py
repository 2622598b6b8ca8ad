"""
Detector: profile training, persistence and the legitimacy test.

Rules are applied in order:
  unseen_type            a syscall the profile never observed
  zero_variance_changed  the merged constant-count residual moved
  distance               nearest-cluster Mahalanobis distance above theta
plus out_of_region for calls seen outside any monitored region.
"""

import datetime
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from dateutil import parser as dateutil_parser
from pydantic import BaseModel

try:
    import clustering
    import config
    import errors
    import scfd_stats
    import trace_model
except ImportError:
    # Fallback if running from root
    from scripts import clustering
    from scripts import config
    from scripts import errors
    from scripts import scfd_stats
    from scripts import trace_model

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<8sII")  # magic, format version, JSON header length
_DIGEST_LEN = hashlib.sha256().digest_size


class Decision(str, Enum):
    LEGIT = "LEGIT"
    MALICIOUS = "MALICIOUS"


class RuleKind(str, Enum):
    UNSEEN_TYPE = "unseen_type"
    ZERO_VARIANCE_CHANGED = "zero_variance_changed"
    DISTANCE_EXCEEDED = "distance"
    OUT_OF_REGION = "out_of_region"


# Rules that can be switched off for the ablation re-test
ABLATABLE_RULES = {
    "i": RuleKind.UNSEEN_TYPE,
    "ii": RuleKind.ZERO_VARIANCE_CHANGED,
}


@dataclass(frozen=True)
class Rule:
    kind: RuleKind
    name: Optional[str] = None  # unseen_type
    expected: Optional[int] = None  # zero_variance_changed
    observed: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Verdict:
    decision: Decision
    rule: Optional[Rule]
    closest_cluster: Optional[int]
    distance: Optional[float]
    theta: float
    reduced: Optional[np.ndarray] = None

    @property
    def malicious(self):
        return self.decision is Decision.MALICIOUS


class ProfileMeta(BaseModel):
    app_id: str = config.APP_ID
    trained_at: Optional[datetime.datetime] = None
    tool_version: str = config.TOOL_VERSION
    gkm_config: clustering.GkmConfig = clustering.GkmConfig()
    total_distance: float = 0.0
    k_totals: list[float] = []
    stop_reason: str = ""
    converged: bool = True
    monotone_in_k: bool = True
    training_rows: int = 0


@dataclass(frozen=True, eq=False)
class Profile:
    alphabet: trace_model.SyscallAlphabet
    reduction: scfd_stats.DimReduction
    clusters: tuple
    cutoff: scfd_stats.Cutoff
    meta: ProfileMeta

    def __post_init__(self):
        if not self.clusters:
            raise ValueError("profile needs at least one cluster")
        for c in self.clusters:
            if c.dim != self.reduction.reduced_dim:
                raise errors.DimensionMismatch(self.reduction.reduced_dim, c.dim)

    def with_cutoff(self, p0: float) -> "Profile":
        return replace(self, cutoff=scfd_stats.compute_cutoff(p0))

    @property
    def kept_names(self):
        return [self.alphabet.names[i] for i in self.reduction.kept]

    @property
    def merged_names(self):
        return [self.alphabet.names[i] for i in self.reduction.merged]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_profile(ts: trace_model.TrainingSet, cfg: clustering.GkmConfig = clustering.GkmConfig(),
                  p0: float = config.P0, app_id: str = config.APP_ID,
                  threads: int = 1, trained_at: Optional[datetime.datetime] = None) -> Profile:
    if len(ts) < 2:
        raise errors.InsufficientTraining(f"need at least 2 training traces, got {len(ts)}")
    cutoff = scfd_stats.compute_cutoff(p0)
    reduction = scfd_stats.fit_reduction(ts)
    X, _ = scfd_stats.reduce_matrix(reduction, ts.matrix)
    cs = clustering.global_kmeans(X, cfg, threads=threads)
    if not cs.monotone_in_k:
        logger.warning("Best total distance was not monotone in k for this training set")
    meta = ProfileMeta(
        app_id=app_id,
        trained_at=trained_at,
        gkm_config=cfg,
        total_distance=cs.total_distance,
        k_totals=list(cs.k_totals),
        stop_reason=cs.stop_reason,
        converged=cs.converged,
        monotone_in_k=cs.monotone_in_k,
        training_rows=len(ts),
    )
    logger.info(f"Trained profile '{app_id}': k={cs.k}, D'={reduction.reduced_dim}, theta={cutoff.theta:.5f}")
    return Profile(ts.alphabet, reduction, cs.centroids, cutoff, meta)


# ---------------------------------------------------------------------------
# Legitimacy test
# ---------------------------------------------------------------------------

def _parse_disabled(disabled_rules):
    out = set()
    for r in disabled_rules or ():
        if isinstance(r, RuleKind):
            out.add(r)
        elif r in ABLATABLE_RULES:
            out.add(ABLATABLE_RULES[r])
        else:
            out.add(RuleKind(r))
    return out


def classify(p: Profile, trace: trace_model.ExecutionTrace, disabled_rules=(),
             counter: Optional[scfd_stats.OpCounter] = None) -> Verdict:
    theta = p.cutoff.theta
    disabled = _parse_disabled(disabled_rules)

    if not trace.in_region and trace.events:
        return Verdict(Decision.MALICIOUS, Rule(RuleKind.OUT_OF_REGION), None, None, theta)

    calls = trace.calls
    if RuleKind.UNSEEN_TYPE not in disabled:
        for name in calls:
            if name not in p.alphabet:
                return Verdict(Decision.MALICIOUS, Rule(RuleKind.UNSEEN_TYPE, name=name), None, None, theta)
    else:
        trace = replace(trace, events=tuple(e for e in trace.events if e.syscall_name in p.alphabet))

    scfd = trace_model.build_scfd(trace, p.alphabet, trace_model.UnknownPolicy.REJECT)
    reduced, residual = scfd_stats.apply_reduction(p.reduction, scfd)
    closest, distance = clustering.assign_closest(p.clusters, reduced, counter)

    if RuleKind.ZERO_VARIANCE_CHANGED not in disabled and residual != p.reduction.residual_expected:
        rule = Rule(RuleKind.ZERO_VARIANCE_CHANGED, expected=p.reduction.residual_expected, observed=residual)
        return Verdict(Decision.MALICIOUS, rule, closest, distance, theta, reduced)
    if distance > theta:
        return Verdict(Decision.MALICIOUS, Rule(RuleKind.DISTANCE_EXCEEDED), closest, distance, theta, reduced)
    return Verdict(Decision.LEGIT, None, closest, distance, theta, reduced)


def verdict_line(v: Verdict) -> str:
    rule = v.rule.kind.value if v.rule else "none"
    dist = "n/a" if v.distance is None else f"{v.distance:.6f}"
    return f"VERDICT={v.decision.value} rule={rule} dist={dist} theta={v.theta:.6f}"


def explain(v: Verdict, p: Profile, top: int = 5) -> str:
    lines = [verdict_line(v)]
    if v.rule is not None:
        if v.rule.kind is RuleKind.UNSEEN_TYPE:
            lines.append(f"  unseen syscall: {v.rule.name}")
        elif v.rule.kind is RuleKind.ZERO_VARIANCE_CHANGED:
            lines.append(f"  merged syscalls ({', '.join(p.merged_names)}) "
                         f"expected sum {v.rule.expected}, observed {v.rule.observed}")
        elif v.rule.kind is RuleKind.OUT_OF_REGION:
            lines.append("  syscalls executed outside a monitored region")
    if v.closest_cluster is not None:
        lines.append(f"  closest cluster: c{v.closest_cluster + 1} "
                     f"(members={p.clusters[v.closest_cluster].member_count})")
        if v.reduced is not None and v.reduced.size:
            terms = scfd_stats.contributions(p.clusters[v.closest_cluster], v.reduced)
            order = sorted(range(len(terms)), key=lambda j: (-abs(terms[j]), j))
            names = p.kept_names
            lines.append("  contributions to distance^2 (largest first):")
            for j in order[:top]:
                lines.append(f"    {names[j]:<16} {terms[j]:+.6g}")
    lines.append(f"  theta={v.theta:.6f} (p0={p.cutoff.p0:g})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _header_dict(p: Profile):
    meta = p.meta.model_dump(mode="json")
    return {
        "alphabet": list(p.alphabet.names),
        "reduction": {
            "dim": p.reduction.dim,
            "kept": list(p.reduction.kept),
            "merged": list(p.reduction.merged),
            "residual_expected": p.reduction.residual_expected,
        },
        "clusters": [{"member_count": c.member_count, "ridge_lambda": c.ridge_lambda} for c in p.clusters],
        "p0": p.cutoff.p0,
        "meta": meta,
    }


def dumps_profile(p: Profile) -> bytes:
    header = json.dumps(_header_dict(p), sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(_HEADER.pack(config.PROFILE_MAGIC, config.PROFILE_FORMAT_VERSION, len(header)))
    body.write(header)
    for c in p.clusters:
        stdev = c.stdev if c.stdev is not None else np.zeros(c.dim)
        for arr in (c.mean, c.inv_cov, stdev):
            body.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body.write(np.array([p.cutoff.theta], dtype="<f8").tobytes())
    payload = body.getvalue()
    return payload + hashlib.sha256(payload).digest()


def loads_profile(blob: bytes) -> Profile:
    if len(blob) < _HEADER.size + _DIGEST_LEN:
        raise errors.CorruptProfile("file too short")
    magic, version, header_len = _HEADER.unpack_from(blob)
    if magic != config.PROFILE_MAGIC:
        raise errors.CorruptProfile("bad magic")
    if version != config.PROFILE_FORMAT_VERSION:
        raise errors.VersionMismatch(version, config.PROFILE_FORMAT_VERSION)
    payload, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(payload).digest() != digest:
        raise errors.CorruptProfile("checksum mismatch")

    try:
        offset = _HEADER.size
        header = json.loads(payload[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        floats = np.frombuffer(payload, dtype="<f8", offset=offset).astype(np.float64)

        alphabet = trace_model.SyscallAlphabet(header["alphabet"])
        red = header["reduction"]
        reduction = scfd_stats.DimReduction(tuple(red["kept"]), tuple(red["merged"]),
                                            int(red["residual_expected"]), int(red["dim"]))
        d = reduction.reduced_dim
        per_cluster = d + d * d + d
        expected = per_cluster * len(header["clusters"]) + 1
        if floats.size != expected:
            raise errors.CorruptProfile(f"expected {expected} float64 values, found {floats.size}")
        clusters = []
        for i, info in enumerate(header["clusters"]):
            chunk = floats[i * per_cluster:(i + 1) * per_cluster]
            clusters.append(scfd_stats.ClusterCentroid(
                mean=chunk[:d].copy(),
                inv_cov=chunk[d:d + d * d].reshape(d, d).copy(),
                member_count=int(info["member_count"]),
                stdev=chunk[d + d * d:].copy(),
                ridge_lambda=float(info["ridge_lambda"]),
            ))
        meta_raw = header["meta"]
        if meta_raw.get("trained_at"):
            meta_raw["trained_at"] = dateutil_parser.isoparse(meta_raw["trained_at"])
        meta = ProfileMeta.model_validate(meta_raw)
        cutoff = scfd_stats.Cutoff(float(header["p0"]), float(floats[-1]))
        return Profile(alphabet, reduction, tuple(clusters), cutoff, meta)
    except (KeyError, ValueError, TypeError, UnicodeDecodeError) as e:
        raise errors.CorruptProfile(f"unreadable profile header: {e}") from None


def save_profile(p: Profile, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(dumps_profile(p))
    except OSError as e:
        raise errors.ProfileIoError(f"cannot write profile {path}: {e}") from e
    logger.info(f"Saved profile to {path}")


def load_profile(path) -> Profile:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise errors.ProfileIoError(f"cannot read profile {path}: {e}") from e
    return loads_profile(blob)


# ---------------------------------------------------------------------------
# Human-readable views
# ---------------------------------------------------------------------------

def export_profile_text(p: Profile) -> str:
    """Lossy JSON view (values rounded) for people, not for reloading."""
    doc = _header_dict(p)
    doc["theta"] = round(p.cutoff.theta, 6)
    doc["clusters"] = [
        {
            "id": f"c{i + 1}",
            "members": c.member_count,
            "mean": {n: round(float(m), 3) for n, m in zip(p.kept_names, c.mean)},
            "stdev": {n: round(float(s), 3) for n, s in zip(p.kept_names, c.stdev if c.stdev is not None else [])},
        }
        for i, c in enumerate(p.clusters)
    ]
    return json.dumps(doc, indent=2, sort_keys=True)


def format_cluster_summary(p: Profile) -> str:
    """Per-cluster mean/stdev table over the kept syscalls; `*` marks varying columns."""
    names = p.kept_names
    width = max([8] + [len(n) + 1 for n in names])
    lines = [f"k={len(p.clusters)}  D={len(p.alphabet)} -> D'={p.reduction.reduced_dim}  "
             f"theta={p.cutoff.theta:.5f} (p0={p.cutoff.p0:g})"]
    if p.merged_names:
        lines.append(f"merged (constant sum {p.reduction.residual_expected}): {', '.join(p.merged_names)}")
    lines.append(f"{'cluster':<10}{'#pts':>6}  {'':<6}" + "".join(f"{n:>{width}}" for n in names))
    for i, c in enumerate(p.clusters):
        stdev = c.stdev if c.stdev is not None else np.zeros(c.dim)
        mean_cells = "".join(f"{m:>{width}.3f}" for m in c.mean)
        sd_cells = "".join(f"{s:>{width - 1}.3f}{'*' if s > 0 else ' '}" for s in stdev)
        lines.append(f"{'c' + str(i + 1):<10}{c.member_count:>6}  {'Mean':<6}{mean_cells}")
        lines.append(f"{'':<10}{'':>6}  {'Stdev':<6}{sd_cells}")
    return "\n".join(lines)
