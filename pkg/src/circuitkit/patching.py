"""Edge-level patched execution of a subgraph.

Each component's input slot is assembled from its parents' contributions:
the live (clean) contribution when the edge is in the subgraph, otherwise
the contribution cached on the corrupted prompt (or zero). Components are
recomputed in order, so clean contributions reflect upstream patching.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .dataset import TaskDataset
from .errors import PairingError, UsageError
from .graph import OUT, CompGraph, Subgraph
from .metrics import MetricSpec, eval_metric
from .model import ActivationCache, Model, attention, check_tokens, embed, forward, head_output, mlp, readout

ABLATIONS = ("corrupted", "zero")


def check_ablation(ablation: str) -> str:
    if ablation not in ABLATIONS:
        raise UsageError(f"unknown ablation mode {ablation!r}")
    return ablation


def build_corrupt_cache(model: Model, corrupted, pos_ids=None, like=None) -> ActivationCache:
    """Unmodified forward cache on the corrupted prompts."""
    corrupted = check_tokens(model.config, corrupted)
    if like is not None and np.shape(like) != corrupted.shape:
        raise PairingError(f"corrupted batch {corrupted.shape} does not match clean batch {np.shape(like)}")
    _, cache = forward(model, corrupted, pos_ids)
    return cache


def _assemble(w: np.ndarray, clean: np.ndarray, corrupt: np.ndarray | None) -> np.ndarray:
    """w: (rows, k) weights over the first k sources; clean/corrupt: (k, B, T, D)."""
    out = np.einsum("rs,sbtd->rbtd", w, clean)
    if corrupt is not None:
        out += np.einsum("rs,sbtd->rbtd", 1.0 - w, corrupt)
    return out


def run_subgraph(
    model: Model,
    graph: CompGraph,
    H: Subgraph,
    tokens,
    ablation: str = "corrupted",
    corrupt_cache: ActivationCache | None = None,
    pos_ids=None,
    return_inputs: bool = False,
):
    """Patched logits for ``tokens`` with every edge outside ``H`` overwritten."""
    check_ablation(ablation)
    if H.graph is not graph:
        raise UsageError("subgraph belongs to a different graph")
    tokens = check_tokens(model.config, tokens)
    corrupt = _corrupt_stack(model, graph, tokens.shape, ablation, corrupt_cache)
    logits, _, inputs = _patched_pass(model, graph, graph.slot_weights(H.included), tokens, corrupt, pos_ids, return_inputs)
    return (logits, inputs) if return_inputs else logits


def _corrupt_stack(model, graph, shape, ablation, corrupt_cache):
    if ablation != "corrupted":
        return None
    if corrupt_cache is None:
        raise UsageError("corrupted ablation needs a corrupted cache")
    if corrupt_cache["tok"].shape != (*shape, model.config.d_model):
        raise PairingError("corrupted cache does not match the clean batch shape")
    return np.stack([corrupt_cache[str(s)] for s in graph.sources])


def _patched_pass(model, graph, W, tokens, corrupt, pos_ids=None, return_inputs=False):
    """Returns (logits, clean contributions per source, assembled inputs)."""
    cfg = model.config
    B, T = tokens.shape
    tok, pos = embed(model, tokens, pos_ids)
    srcs = graph.sources
    clean = np.zeros((len(srcs), B, T, cfg.d_model))
    clean[0] = tok
    if pos is not None:
        clean[1] = pos
    k = 2 if pos is not None else 1
    inputs = {} if return_inputs else None
    slot_idx = graph.dst_slot_index
    for l in range(cfg.n_layers):
        if cfg.n_heads:
            heads = srcs[k : k + cfg.n_heads]
            per_slot = {}
            for slot in graph.slots_of(heads[0]):
                rows = [slot_idx[(h, slot)] for h in heads]
                per_slot[slot] = _assemble(W[rows, :k], clean[:k], None if corrupt is None else corrupt[:k])
            if "in" in per_slot:
                xq = xk = xv = per_slot["in"]
            else:
                xq, xk, xv = per_slot["q"], per_slot["k"], per_slot["v"]
            if inputs is not None:
                for slot, x in per_slot.items():
                    for i, h in enumerate(heads):
                        inputs[f"{h}.{slot}"] = x[i]
            clean[k : k + cfg.n_heads] = attention(model, l, xq, xk, xv)["out"]
            k += cfg.n_heads
        if cfg.has_mlp:
            m = srcs[k]
            x = _assemble(W[[slot_idx[(m, "in")]], :k], clean[:k], None if corrupt is None else corrupt[:k])[0]
            if inputs is not None:
                inputs[f"{m}.in"] = x
            clean[k] = mlp(model, l, x)["out"]
            k += 1
    x = _assemble(W[[slot_idx[(OUT, "in")]], :k], clean[:k], None if corrupt is None else corrupt[:k])[0]
    if inputs is not None:
        inputs["out.in"] = x
    logits = nx.check_finite(readout(model, x), "patched output")
    return logits, clean, inputs


class SubgraphEvaluator:
    """Scores subgraphs on a fixed dataset.

    The corrupted cache and the reference output (unpatched model, or an
    externally supplied one such as a trained model's outputs when scoring
    a reset network) are computed once.
    """

    def __init__(
        self,
        model: Model,
        graph: CompGraph,
        dataset: TaskDataset,
        metric: MetricSpec | None = None,
        ablation: str = "corrupted",
        reference: np.ndarray | None = None,
    ):
        if len(dataset) == 0:
            raise UsageError("dataset is empty")
        self.model, self.graph, self.dataset = model, graph, dataset
        self.metric = metric if metric is not None else dataset.metric
        self.ablation = check_ablation(ablation)
        self.cache = None
        if ablation == "corrupted":
            self.cache = build_corrupt_cache(model, dataset.corrupted, dataset.corrupt_pos_ids, like=dataset.clean)
        if reference is None:
            reference, _ = forward(model, dataset.clean)
        self.reference = np.asarray(reference)
        self.n_evals = 0

    def outputs(self, H: Subgraph) -> np.ndarray:
        return run_subgraph(self.model, self.graph, H, self.dataset.clean, self.ablation, self.cache)

    def __call__(self, H: Subgraph) -> float:
        self.n_evals += 1
        out = self.outputs(H)
        return float(eval_metric(self.metric, out, self.reference, self.dataset.positions))


def evaluate_subgraph(
    model: Model,
    graph: CompGraph,
    H: Subgraph,
    dataset: TaskDataset,
    metric: MetricSpec | None = None,
    ablation: str = "corrupted",
    reference=None,
) -> float:
    """Mean metric over examples and measured positions."""
    return SubgraphEvaluator(model, graph, dataset, metric, ablation, reference)(H)


class IncrementalEvaluator(SubgraphEvaluator):
    """Evaluates single-edge removals from a current subgraph by
    recomputing only the destination node and the nodes it feeds.

    ``propose(edge_index)`` returns the candidate's metric and a state
    token; ``commit(state)`` makes that candidate the current subgraph.
    """

    def __init__(self, model, graph, dataset, metric=None, ablation="corrupted", reference=None):
        super().__init__(model, graph, dataset, metric, ablation, reference)
        self.tokens = check_tokens(model.config, dataset.clean)
        self.corrupt = _corrupt_stack(model, graph, self.tokens.shape, ablation, self.cache)
        self.start(Subgraph.full(graph))

    def start(self, H: Subgraph) -> float:
        self.H = H.copy()
        self.W = self.graph.slot_weights(self.H.included)
        self.logits, self.clean, _ = _patched_pass(self.model, self.graph, self.W, self.tokens, self.corrupt)
        return self._score(self.logits)

    def _score(self, logits) -> float:
        self.n_evals += 1
        return float(eval_metric(self.metric, logits, self.reference, self.dataset.positions))

    def _input(self, W, clean, row, k):
        corrupt = None if self.corrupt is None else self.corrupt[:k]
        return _assemble(W[[row], :k], clean[:k], corrupt)[0]

    def _recompute(self, W, clean, j: int) -> np.ndarray:
        g, model = self.graph, self.model
        n = g.sources[j]
        idx = g.dst_slot_index
        k = g.source_index[g.sources[j]] if n.kind == "mlp" else self._layer_start(n.layer)
        if n.kind == "mlp":
            return mlp(model, n.layer, self._input(W, clean, idx[(n, "in")], k))["out"]
        xs = {s: self._input(W, clean, idx[(n, s)], k) for s in g.slots_of(n)}
        if "in" in xs:
            return head_output(model, n.layer, n.head, xs["in"], xs["in"], xs["in"])
        return head_output(model, n.layer, n.head, xs["q"], xs["k"], xs["v"])

    def _layer_start(self, layer: int) -> int:
        cfg = self.model.config
        return (2 if cfg.has_pos else 1) + layer * (cfg.n_heads + (1 if cfg.has_mlp else 0))

    def propose(self, edge_index: int):
        g = self.graph
        e = g.edges[edge_index]
        W = self.W.copy()
        row, col = g.dst_slot_index[(e.dst, e.slot)], g.source_index[e.src]
        W[row, col] = 0.0
        if e.src.kind == "tok" and g.config.has_pos and not e.dst.is_head:
            W[row, g.source_index[g.sources[1]]] = 0.0
        clean = self.clean
        if e.dst.kind != "out":
            clean = clean.copy()
            j0 = g.source_index[e.dst]
            clean[j0] = self._recompute(W, clean, j0)
            changed = [j0]
            for j in range(j0 + 1, len(g.sources)):
                n = g.sources[j]
                rows = [g.dst_slot_index[(n, s)] for s in g.slots_of(n)]
                if np.any(W[np.ix_(rows, changed)] > 0):
                    clean[j] = self._recompute(W, clean, j)
                    changed.append(j)
        x = self._input(W, clean, g.dst_slot_index[(OUT, "in")], len(g.sources))
        logits = nx.check_finite(readout(self.model, x), "patched output")
        return self._score(logits), (edge_index, W, clean, logits)

    def commit(self, state) -> None:
        edge_index, self.W, self.clean, self.logits = state
        self.H.included[edge_index] = False
