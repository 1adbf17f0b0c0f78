"""Scoring recovered circuits: confusion counts, ROC/AUC, sparsity curves,
and reset networks as a negative control."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import TaskDataset
from .errors import UsageError
from .graph import CompGraph, Subgraph
from .metrics import MetricSpec
from .model import Model
from .patching import SubgraphEvaluator
from .zoo import CanonicalCircuit

LEVELS = ("edge", "node")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0


def _truth(canonical, graph: CompGraph) -> Subgraph:
    if isinstance(canonical, Subgraph):
        if canonical.graph is not graph:
            raise UsageError("canonical subgraph belongs to a different graph")
        return canonical
    if isinstance(canonical, CanonicalCircuit):
        return canonical.subgraph(graph)
    return Subgraph.from_edges(graph, canonical)


def edge_confusion(H: Subgraph, canonical, level: str = "edge") -> Confusion:
    """Confusion counts over all graph edges, or over heads and MLPs."""
    if level not in LEVELS:
        raise UsageError(f"unknown level {level!r}")
    graph = H.graph
    truth = _truth(canonical, graph)
    if level == "edge":
        pred, gold = H.included, truth.included
    else:
        pn, gn = set(H.nodes()), set(truth.nodes())
        pred = np.array([n in pn for n in graph.maskable])
        gold = np.array([n in gn for n in graph.maskable])
    return Confusion(
        int(np.sum(pred & gold)), int(np.sum(pred & ~gold)), int(np.sum(~pred & ~gold)), int(np.sum(~pred & gold))
    )


@dataclass
class RocCurve:
    points: list[tuple[float, float]]  # Pareto frontier with endpoints, sorted by FPR
    raw: list[tuple[float, float, object]] = field(default_factory=list)  # (fpr, tpr, param) per result

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def pareto_roc(points) -> list[tuple[float, float]]:
    """Points not dominated by another (lower-or-equal FPR, higher-or-equal TPR)."""
    pts = sorted(set((float(f), float(t)) for f, t in points), key=lambda p: (p[0], -p[1]))
    out = []
    best = -np.inf
    for f, t in pts:
        if t > best:
            out.append((f, t))
            best = t
    return out


def roc_from_points(points, raw=None) -> RocCurve:
    front = pareto_roc(points)
    if (0.0, 0.0) not in front:
        front.insert(0, (0.0, 0.0))
    if (1.0, 1.0) not in front:
        front.append((1.0, 1.0))
    return RocCurve(front, list(raw or []))


def roc_curve(results, canonical, level: str = "edge", params=None) -> RocCurve:
    results = list(results)
    if not results:
        raise UsageError("no results to score")
    params = list(params) if params is not None else [None] * len(results)
    raw = []
    for H, p in zip(results, params):
        c = edge_confusion(H, canonical, level)
        raw.append((c.fpr, c.tpr, p))
    return roc_from_points([(f, t) for f, t, _ in raw], raw)


def pessimistic_auc(curve) -> float:
    """Hold-left staircase area: TPR keeps each point's value until the next FPR."""
    pts = curve.points if isinstance(curve, RocCurve) else list(curve)
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(x) * y[:-1]))


def trapezoid_auc(curve) -> float:
    pts = curve.points if isinstance(curve, RocCurve) else list(curve)
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(x) * (y[:-1] + y[1:]) / 2))


def sparsity_frontier(points) -> list[tuple[int, float]]:
    """(edges, metric) points where no smaller circuit does at least as well."""
    out = []
    best = np.inf
    for e, v in sorted(points, key=lambda p: (p[0], p[1])):
        if v < best:
            out.append((int(e), float(v)))
            best = v
    return out


def sparsity_curve(
    results,
    dataset: TaskDataset,
    model: Model,
    graph: CompGraph,
    metric: MetricSpec | None = None,
    ablation: str = "corrupted",
    reference=None,
):
    """Held-out metric per subgraph; returns (points, frontier)."""
    ev = SubgraphEvaluator(model, graph, dataset, metric, ablation, reference)
    pts = [(H.n_edges, ev(H)) for H in results]
    return pts, sparsity_frontier(pts)


def reset_network(model: Model, seed: int) -> Model:
    """Permute each layer's head axis of Q, K and V (weights with their
    biases; three independent permutations) and each MLP input bias."""
    rng = np.random.default_rng(seed)
    W = {k: v.copy() for k, v in model.weights.items()}
    cfg = model.config
    for l in range(cfg.n_layers):
        p = f"blocks.{l}"
        for m in "QKV":
            perm = rng.permutation(cfg.n_heads)
            W[f"{p}.attn.W_{m}"] = W[f"{p}.attn.W_{m}"][perm]
            W[f"{p}.attn.b_{m}"] = W[f"{p}.attn.b_{m}"][perm]
        if cfg.has_mlp:
            W[f"{p}.mlp.b_in"] = W[f"{p}.mlp.b_in"][rng.permutation(cfg.d_mlp)]
    return Model(cfg, W)


def matched_edge_comparison(frontier, other_points):
    """For each (edges, value) on ``frontier``, the best value among
    ``other_points`` using no more edges. Returns (edges, value, other) rows;
    ``other`` is None when nothing qualifies."""
    rows = []
    for e, v in frontier:
        cands = [ov for oe, ov in other_points if oe <= e]
        rows.append((e, v, min(cands) if cands else None))
    return rows
