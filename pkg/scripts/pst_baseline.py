"""
Probabilistic suffix tree baseline.
Variable-order Markov model over syscall sequences, depth-limited, no smoothing.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

try:
    import config
    import trace_model
except ImportError:
    # Fallback if running from root
    from scripts import config
    from scripts import trace_model

logger = logging.getLogger(__name__)


@dataclass
class PstNode:
    context: tuple  # oldest symbol first
    counts: Counter = field(default_factory=Counter)
    children: dict = field(default_factory=dict)  # keyed by the symbol prepended to context

    @property
    def total(self):
        return sum(self.counts.values())

    def probability(self, symbol):
        total = self.total
        return self.counts.get(symbol, 0) / total if total else 0.0


@dataclass
class PstModel:
    alphabet: trace_model.SyscallAlphabet
    max_depth: int
    root: PstNode

    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def longest_suffix(self, history):
        """Deepest tree-resident node whose context is a suffix of `history`."""
        node = self.root
        for symbol in reversed(history[-self.max_depth:]):
            child = node.children.get(symbol)
            if child is None:
                break
            node = child
        return node


@dataclass(frozen=True)
class PstVerdict:
    malicious: bool
    position: Optional[int] = None
    syscall: Optional[str] = None
    probability: Optional[float] = None


def pst_train(traces, max_depth: int, min_count: int = config.PST_MIN_COUNT) -> PstModel:
    traces = list(traces)
    if not traces:
        raise ValueError("pst_train needs at least one trace")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")

    root = PstNode(())
    names = set()
    for trace in traces:
        calls = trace.calls
        names.update(calls)
        for t, nxt in enumerate(calls):
            node = root
            node.counts[nxt] += 1
            # Contexts end at t-1 and never reach before the trace start
            for depth in range(1, min(t, max_depth) + 1):
                symbol = calls[t - depth]
                child = node.children.get(symbol)
                if child is None:
                    child = PstNode((symbol,) + node.context)
                    node.children[symbol] = child
                node = child
                node.counts[nxt] += 1

    model = PstModel(trace_model.SyscallAlphabet.from_names(names), max_depth, root)
    if min_count > 1:
        _prune(root, min_count)
    logger.info(f"PST depth {max_depth}: {sum(1 for _ in model.nodes())} nodes over {len(traces)} traces")
    return model


def _prune(node, min_count):
    for symbol in list(node.children):
        child = node.children[symbol]
        if child.total < min_count:
            del node.children[symbol]
        else:
            _prune(child, min_count)


def pst_score(m: PstModel, trace) -> list:
    calls = trace.calls
    depth = m.max_depth
    return [m.longest_suffix(calls[max(0, t - depth):t]).probability(nxt) for t, nxt in enumerate(calls)]


def pst_classify(m: PstModel, trace, threshold: float = config.PST_THRESHOLD) -> PstVerdict:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    calls = trace.calls
    for t, prob in enumerate(pst_score(m, trace)):
        if prob < threshold:
            return PstVerdict(True, t, calls[t], prob)
    return PstVerdict(False)


def dump_model(m: PstModel) -> str:
    """Deterministic text dump: one line per context, `ctx -> next:count ...`, sorted."""
    lines = [f"# depth={m.max_depth}"]
    for node in sorted(m.nodes(), key=lambda n: (len(n.context), n.context)):
        ctx = ",".join(node.context) if node.context else "<root>"
        nexts = " ".join(f"{s}:{c}" for s, c in sorted(node.counts.items()))
        lines.append(f"{ctx} -> {nexts}")
    return "\n".join(lines) + "\n"
