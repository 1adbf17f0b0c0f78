"""Node-level baselines: Subnetwork Probing and HISP.

Both work on *components*: head outputs (or, at q/k/v granularity, each
head's query, key and value activations) and MLP outputs. A component set
is turned into an edge subgraph by keeping every edge whose source and
destination slot are alive; embeddings and the output are always alive.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .dataset import TaskDataset
from .errors import CoverageError, NumericError, UsageError
from .graph import CompGraph, NodeId, Subgraph
from .metrics import MetricSpec, eval_metric
from .model import ActivationCache, Model, forward
from .patching import build_corrupt_cache, check_ablation

BETA, GAMMA, ZETA = 2.0 / 3.0, -0.1, 1.1
_COMP_RE = re.compile(r"a(\d+)\.h(\d+)(?:\.(q|k|v))?|m(\d+)")


def components(graph: CompGraph) -> list[str]:
    """Maskable components in forward order."""
    out = []
    for n in graph.maskable:
        if n.is_head and graph.granularity == "heads-qkv":
            out += [f"{n}.{s}" for s in ("q", "k", "v")]
        else:
            out.append(str(n))
    return out


def component_layer(name: str) -> int:
    m = _COMP_RE.fullmatch(name)
    if not m:
        raise UsageError(f"not a component name: {name!r}")
    return int(m.group(1) if m.group(1) is not None else m.group(4))


def induced_subgraph(graph: CompGraph, alive) -> Subgraph:
    """Edges whose source and destination slot both survive."""
    alive = set(alive)
    unknown = alive - set(components(graph)) - {"tok", "pos", "out"}
    if unknown:
        raise UsageError(f"unknown components: {sorted(unknown)}")
    qkv = graph.granularity == "heads-qkv"

    def src_alive(n: NodeId) -> bool:
        if n.is_embed:
            return True
        if n.is_head and qkv:
            return any(f"{n}.{s}" in alive for s in "qkv")
        return str(n) in alive

    def slot_alive(n: NodeId, slot: str) -> bool:
        if n.kind == "out":
            return True
        if n.is_head and qkv:
            return f"{n}.{slot}" in alive
        return str(n) in alive

    inc = np.array([src_alive(e.src) and slot_alive(e.dst, e.slot) for e in graph.edges], dtype=bool)
    return Subgraph(graph, inc)


def _node_set(graph: CompGraph, alive) -> list[str]:
    alive = set(alive)
    names = []
    for n in graph.nodes:
        s = str(n)
        if n.is_embed or n.kind == "out" or s in alive or any(f"{s}.{q}" in alive for q in "qkv"):
            names.append(s)
    return names


# ---------------------------------------------------------------------------
# gating hooks shared by SP and HISP


def _corrupt_values(graph: CompGraph, cache: ActivationCache | None) -> dict:
    """Replacement value per component (None in zero mode)."""
    if cache is None:
        return {}
    out = {}
    for c in components(graph):
        out[c] = cache[c]
    return out


class _ComponentHook:
    """Forward hook that rewrites component activations through ``fn``.

    ``fn(component_name, value) -> new value`` is applied per head slice or
    per MLP output. Head tensors arrive stacked (heads, batch, seq, d).
    """

    def __init__(self, graph: CompGraph, fn):
        self.qkv = graph.granularity == "heads-qkv"
        self.fn = fn
        self.seen: set[str] = set()

    def __call__(self, name, layer, value):
        if name == "mlp_out":
            c = f"m{layer}"
            self.seen.add(c)
            return self.fn(c, value)
        if (name in ("q", "k", "v") and self.qkv) or (name == "head_out" and not self.qkv):
            n_heads = nx.value_of(value).shape[0]
            if n_heads == 0:
                return value
            parts = []
            for h in range(n_heads):
                c = f"a{layer}.h{h}" + (f".{name}" if self.qkv else "")
                self.seen.add(c)
                parts.append(self.fn(c, nx.getitem(value, h) if isinstance(value, nx.Var) else value[h]))
            return nx.stack(parts, axis=0)
        return value


# ---------------------------------------------------------------------------
# Subnetwork Probing


@dataclass
class SpConfig:
    lam: float = 1.0
    steps: int = 1000
    lr: float = 0.05
    seed: int = 0
    ablation: str = "corrupted"
    metric: MetricSpec | None = None
    alpha_init: float = 1.0
    alpha_noise: float = 0.01  # small seeded jitter so symmetric gates can separate

    def __post_init__(self):
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")
        if self.steps < 1:
            raise UsageError("steps must be >= 1")
        if not self.lr > 0:
            raise UsageError("learning rate must be positive")
        check_ablation(self.ablation)


@dataclass
class NodeMask:
    components: list[str]
    alpha: np.ndarray
    beta: float = BETA
    gamma: float = GAMMA
    zeta: float = ZETA

    def expectation(self) -> np.ndarray:
        return np.clip(_sigmoid(self.alpha) * (self.zeta - self.gamma) + self.gamma, 0.0, 1.0)

    def rounded(self) -> np.ndarray:
        return (self.expectation() >= 0.5).astype(np.int64)

    def alive(self) -> list[str]:
        return [c for c, r in zip(self.components, self.rounded()) if r]

    def to_dict(self):
        return {"components": self.components, "alpha": self.alpha.tolist(), "beta": self.beta, "gamma": self.gamma, "zeta": self.zeta}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def open_probability(alpha, beta=BETA, gamma=GAMMA, zeta=ZETA):
    """P(gate != 0) for the hard-concrete gate; the expected-L0 term."""
    return nx.sigmoid(alpha - beta * np.log(-gamma / zeta))


def sample_gates(alpha, u, beta=BETA, gamma=GAMMA, zeta=ZETA):
    """Stretched, clipped concrete sample for uniform noise ``u``."""
    s = nx.sigmoid((np.log(u) - np.log1p(-u) + alpha) / beta)
    return nx.clip(s * (zeta - gamma) + gamma, 0.0, 1.0)


class SpObjective:
    """Loss of the gated model for given gate logits and frozen noise."""

    def __init__(self, model: Model, graph: CompGraph, dataset: TaskDataset, config: SpConfig):
        self.model, self.graph, self.dataset, self.config = model, graph, dataset, config
        self.metric = config.metric or dataset.metric
        self.components = components(graph)
        self.index = {c: i for i, c in enumerate(self.components)}
        cache = None
        if config.ablation == "corrupted":
            cache = build_corrupt_cache(model, dataset.corrupted, dataset.corrupt_pos_ids, like=dataset.clean)
        self.replacement = _corrupt_values(graph, cache)
        self.reference = forward(model, dataset.clean)[0] if self.metric.needs_reference else None

    def loss(self, alpha, u, lam: float | None = None):
        lam = self.config.lam if lam is None else lam
        z = sample_gates(alpha, u)

        def gate(c, value):
            zc = nx.getitem(z, self.index[c])
            rep = self.replacement.get(c)
            if rep is None:
                return value * zc
            return value * zc + rep * (1.0 - zc)

        hook = _ComponentHook(self.graph, gate)
        out, _ = forward(self.model, self.dataset.clean, hook=hook)
        task = eval_metric(self.metric, out, self.reference, self.dataset.positions)
        if lam == 0:
            return task
        return task + lam * nx.sum_(open_probability(alpha))

    def value_and_grad(self, alpha: np.ndarray, u: np.ndarray, lam: float | None = None):
        tape = nx.Tape()
        a = tape.leaf(alpha, "alpha")
        loss = self.loss(a, u, lam)
        if not isinstance(loss, nx.Var):
            return float(loss), np.zeros_like(alpha)
        g = nx.reverse_grad(tape, loss, [a])[a.slot]
        return float(loss.value), g


def _draw_u(rng, n):
    return rng.uniform(1e-6, 1.0 - 1e-6, n)


def sp_train(model: Model, graph: CompGraph, dataset: TaskDataset, config: SpConfig):
    """Plain gradient descent on the gate logits; returns (mask, history)."""
    obj = SpObjective(model, graph, dataset, config)
    rng = np.random.default_rng(config.seed)
    n = len(obj.components)
    alpha = config.alpha_init + config.alpha_noise * rng.standard_normal(n)
    history = []
    for step in range(config.steps):
        u = _draw_u(rng, n)
        loss, g = obj.value_and_grad(alpha, u)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite loss at step {step}")
        history.append(loss)
        alpha = alpha - config.lr * g
    return NodeMask(obj.components, alpha), history


def sp_finalize(mask: NodeMask, graph: CompGraph):
    """Round the gates; return (node names, induced subgraph)."""
    alive = mask.alive()
    return _node_set(graph, alive), induced_subgraph(graph, alive)


# ---------------------------------------------------------------------------
# HISP


@dataclass
class ImportanceTable:
    components: list[str]
    scores: np.ndarray
    layers: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.layers is None:
            self.layers = np.array([component_layer(c) for c in self.components])
        if np.any(self.scores < 0):
            raise UsageError("importance scores must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {c: float(s) for c, s in zip(self.components, self.scores)}

    def to_dict(self):
        return {"components": self.components, "scores": self.scores.tolist(), "layers": self.layers.tolist()}


def hisp_gradients(model: Model, graph: CompGraph, dataset: TaskDataset, metric: MetricSpec | None = None):
    """Clean activations and d(sum of per-example metric)/d(activation) per
    component, from one taped clean run. Returns (values, grads) dicts."""
    metric = metric or dataset.metric
    reference = forward(model, dataset.clean)[0] if metric.needs_reference else None
    # each component gets an additive zero leaf, so its gradient is the
    # total derivative including paths through later components
    tape = nx.Tape()
    leaves: dict[str, nx.Var] = {}
    values: dict[str, np.ndarray] = {}

    def tap(c, value):
        values[c] = np.array(nx.value_of(value))
        leaves[c] = tape.leaf(np.zeros_like(values[c]), c)
        return value + leaves[c]

    out, _ = forward(model, dataset.clean, hook=_ComponentHook(graph, tap))
    missing = [c for c in components(graph) if c not in leaves]
    if missing:
        raise CoverageError(f"no gradient path recorded for {missing}")
    F = eval_metric(metric, out, reference, dataset.positions, per_example=True)
    if not isinstance(F, nx.Var):
        raise CoverageError("metric does not depend on any component")
    g = nx.reverse_grad(tape, nx.sum_(F), list(leaves.values()))
    return values, {c: g[v.slot] for c, v in leaves.items()}


def hisp_scores(
    model: Model,
    graph: CompGraph,
    dataset: TaskDataset,
    metric: MetricSpec | None = None,
    ablation: str = "corrupted",
    corrupt_cache: ActivationCache | None = None,
) -> ImportanceTable:
    """Mean over examples of |(C(x) - C(x'))^T dF(x)/dC(x)| per component.

    In zero mode the C(x') term is dropped.
    """
    check_ablation(ablation)
    comps = components(graph)
    if ablation == "corrupted" and corrupt_cache is None:
        corrupt_cache = build_corrupt_cache(model, dataset.corrupted, dataset.corrupt_pos_ids, like=dataset.clean)
    replacement = _corrupt_values(graph, corrupt_cache if ablation == "corrupted" else None)
    values, grads = hisp_gradients(model, graph, dataset, metric)
    scores = np.zeros(len(comps))
    for i, c in enumerate(comps):
        v = values[c]
        diff = v - replacement[c] if c in replacement else v
        dots = np.sum((diff * grads[c]).reshape(len(v), -1), axis=1)
        scores[i] = np.mean(np.abs(dots))
    return ImportanceTable(comps, scores)


def hisp_layer_normalize(table: ImportanceTable) -> ImportanceTable:
    """Divide each layer's scores by that layer's Euclidean norm."""
    out = table.scores.copy()
    for l in np.unique(table.layers):
        sel = table.layers == l
        norm = np.linalg.norm(out[sel])
        out[sel] = out[sel] / norm if norm > 0 else 0.0
    return ImportanceTable(list(table.components), out, table.layers.copy())


def hisp_topk(table: ImportanceTable, k: int, skip_zero: bool = False) -> list[str]:
    """The k best components; ties keep canonical order.

    With ``skip_zero`` a component scoring exactly 0 is never kept, so fewer
    than k may come back.
    """
    if not 0 <= k <= len(table.components):
        raise UsageError(f"k={k} outside [0, {len(table.components)}]")
    order = np.argsort(-table.scores, kind="stable")
    if skip_zero:
        order = [i for i in order if table.scores[i] > 0]
    return [table.components[i] for i in order[:k]]


def hisp_topk_sweep(table: ImportanceTable, graph: CompGraph, ks=None, skip_zero: bool = False):
    """(node names, induced subgraph) for each k; all k by default."""
    if ks is None:
        ks = range(len(table.components) + 1)
    out = []
    for k in ks:
        alive = hisp_topk(table, int(k), skip_zero)
        out.append((_node_set(graph, alive), induced_subgraph(graph, alive)))
    return out
