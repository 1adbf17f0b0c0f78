"""Greedy output-to-input edge pruning.

Nodes are visited from the output backwards; each incoming edge is
tentatively removed and the removal kept when the metric moves by less
than the threshold. The running metric of the current subgraph is cached
and only refreshed when a removal is accepted.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import TaskDataset
from .errors import UsageError
from .graph import OUT, POLICIES, TOK, POS, CompGraph, Subgraph, ordered_parents, reverse_topo
from .metrics import MetricSpec, RemovalCondition, removal_condition
from .model import Model
from .patching import IncrementalEvaluator, SubgraphEvaluator, check_ablation


@dataclass(frozen=True)
class AcdcConfig:
    tau: float
    metric: MetricSpec | None = None  # None: use the dataset's metric
    ablation: str = "corrupted"
    policy: str = "default"
    prune_disconnected: bool | None = None  # None: on for corrupted, off for zero
    removal: str = "direct"

    def __post_init__(self):
        RemovalCondition(self.removal, self.tau)  # validates tau and mode
        check_ablation(self.ablation)
        if self.policy not in POLICIES:
            raise UsageError(f"unknown parent policy {self.policy!r}")

    @property
    def condition(self) -> RemovalCondition:
        return RemovalCondition(self.removal, self.tau)

    @property
    def prune(self) -> bool:
        return self.ablation == "corrupted" if self.prune_disconnected is None else self.prune_disconnected


@dataclass
class LogEntry:
    edge: str
    f_before: float
    f_after: float
    removed: bool

    def to_dict(self):
        return {"edge": self.edge, "f_before": self.f_before, "f_after": self.f_after, "removed": self.removed}


@dataclass
class DiscoveryResult:
    subgraph: Subgraph
    log: list[LogEntry]
    final_metric: float
    n_evals: int
    tau: float
    unpruned: Subgraph | None = None
    seconds: float = 0.0
    f_full: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def n_edges(self) -> int:
        return self.subgraph.n_edges


def acdc_run(
    model: Model,
    graph: CompGraph,
    dataset: TaskDataset,
    config: AcdcConfig,
    reference=None,
    evaluator: IncrementalEvaluator | None = None,
    check_every: int = 0,
) -> DiscoveryResult:
    """Run the pruning loop.

    ``reference`` overrides the outputs the metric compares against.
    ``check_every`` > 0 re-evaluates the cached baseline after every
    n-th accepted removal and raises if it drifted (coherence check).
    """
    t0 = time.perf_counter()
    ev = evaluator or IncrementalEvaluator(model, graph, dataset, config.metric, config.ablation, reference)
    ev.n_evals = 0
    f_full = ev.start(Subgraph.full(graph))
    f_H = f_full
    cond = config.condition
    log: list[LogEntry] = []
    accepted = 0
    for v in reverse_topo(graph):
        for parent, slot in ordered_parents(graph, v, config.policy):
            e = f"{parent}->{v}.{slot}"
            f_new, state = ev.propose(graph.edge(e))
            keep_removed = removal_condition(cond, f_H, f_new, f_full)
            log.append(LogEntry(e, f_H, f_new, keep_removed))
            if keep_removed:
                ev.commit(state)
                f_H = f_new
                accepted += 1
                if check_every and accepted % check_every == 0:
                    fresh = SubgraphEvaluator.__call__(ev, ev.H)
                    if abs(fresh - f_H) > 1e-9:
                        raise AssertionError(f"cached metric {f_H} drifted from fresh {fresh}")
    H = ev.H.copy()
    unpruned = H.copy()
    if config.prune:
        H = prune_disconnected(H)
    return DiscoveryResult(H, log, f_H, ev.n_evals, config.tau, unpruned, time.perf_counter() - t0, f_full)


def replay_log(graph: CompGraph, log) -> Subgraph:
    """Rebuild the (unpruned) subgraph from a decision log."""
    H = Subgraph.full(graph)
    for entry in log:
        edge = entry.edge if isinstance(entry, LogEntry) else entry["edge"]
        removed = entry.removed if isinstance(entry, LogEntry) else entry["removed"]
        if removed:
            H.included[graph.edge(edge)] = False
    return H


def prune_disconnected(H: Subgraph) -> Subgraph:
    """Keep only edges on a directed input-to-output path inside ``H``."""
    graph = H.graph
    edges = H.edges()
    fwd = {TOK, POS}
    for e in sorted(edges, key=lambda e: e.dst.topo_key(graph.config.n_layers)):
        if e.src in fwd:
            fwd.add(e.dst)
    bwd = {OUT}
    for e in sorted(edges, key=lambda e: e.src.topo_key(graph.config.n_layers), reverse=True):
        if e.dst in bwd:
            bwd.add(e.src)
    out = Subgraph.empty(graph)
    for e in edges:
        if e.src in fwd and e.dst in bwd:
            out.included[graph.edge(e)] = True
    return out


def tau_sweep(model, graph, dataset, base: AcdcConfig, taus, reference=None) -> list[DiscoveryResult]:
    """Independent runs, one per threshold, in the given order.

    The corrupted cache and reference outputs are shared across runs.
    """
    taus = list(taus)
    for t in taus:
        if not t > 0:
            raise UsageError("every tau must be positive")
    ev = IncrementalEvaluator(model, graph, dataset, base.metric, base.ablation, reference)
    results = []
    for t in taus:
        results.append(acdc_run(model, graph, dataset, replace(base, tau=float(t)), evaluator=ev))
    return results


def log_sweep(lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` log-spaced thresholds in the half-open interval (lo, hi]."""
    if not 0 < lo < hi or n < 1:
        raise UsageError("need 0 < lo < hi and n >= 1")
    return np.logspace(np.log10(lo), np.log10(hi), n + 1)[1:]
