"""Computational DAG over model components.

Node identity is canonical (``tok``, ``pos``, ``a{l}.h{h}``, ``m{l}``,
``out``) and edges are ``(src, dst, slot)`` triples rendered as
``"src->dst.slot"``.

Connectivity convention: ``tok`` feeds every input slot; ``pos`` feeds only
attention q/k/v slots (at MLP and output inputs the positional term travels
with the ``tok`` edge); every head and MLP feeds all later components, and a
layer's heads feed that layer's MLP. This reproduces 305 edges for a
2-layer, 8-head attention-only model and 32,923 for a 12-layer, 12-head
model with MLPs when heads are split into q/k/v slots.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import IdentifierError, UsageError
from .model import ModelConfig

GRANULARITIES = ("heads", "heads-qkv")
POLICIES = ("default", "ascending-heads")
_KIND_ORDER = {"tok": 0, "pos": 1, "head": 2, "mlp": 3, "out": 4}
_NODE_RE = re.compile(r"(tok|pos|out)|a(\d+)\.h(\d+)|m(\d+)")
_EDGE_RE = re.compile(r"(.+)->(.+)\.(q|k|v|in)")


@dataclass(frozen=True, order=False)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    def __str__(self):
        if self.kind == "head":
            return f"a{self.layer}.h{self.head}"
        if self.kind == "mlp":
            return f"m{self.layer}"
        return self.kind

    def __repr__(self):
        return f"NodeId({self})"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        m = _NODE_RE.fullmatch(text)
        if not m:
            raise IdentifierError(f"not a node identifier: {text!r}")
        if m.group(1):
            return cls(m.group(1))
        if m.group(2) is not None:
            return cls("head", int(m.group(2)), int(m.group(3)))
        return cls("mlp", int(m.group(4)))

    @property
    def is_head(self) -> bool:
        return self.kind == "head"

    @property
    def is_embed(self) -> bool:
        return self.kind in ("tok", "pos")

    def topo_key(self, n_layers: int) -> tuple:
        """Forward topological sort key."""
        if self.kind in ("tok", "pos"):
            return (-1, _KIND_ORDER[self.kind], 0)
        if self.kind == "out":
            return (n_layers, 0, 0)
        return (self.layer, _KIND_ORDER[self.kind], self.head)


TOK, POS, OUT = NodeId("tok"), NodeId("pos"), NodeId("out")


def node(text: str) -> NodeId:
    return NodeId.parse(text)


@dataclass(frozen=True)
class Edge:
    src: NodeId
    dst: NodeId
    slot: str

    def __str__(self):
        return f"{self.src}->{self.dst}.{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "Edge":
        m = _EDGE_RE.fullmatch(text)
        if not m:
            raise IdentifierError(f"not an edge string: {text!r}")
        return cls(NodeId.parse(m.group(1)), NodeId.parse(m.group(2)), m.group(3))


class CompGraph:
    def __init__(self, config: ModelConfig, granularity: str = "heads-qkv"):
        if granularity not in GRANULARITIES:
            raise UsageError(f"unknown granularity {granularity!r}")
        self.config = config
        self.granularity = granularity
        L, H = config.n_layers, config.n_heads
        nodes = [TOK] + ([POS] if config.has_pos else [])
        for l in range(L):
            nodes += [NodeId("head", l, h) for h in range(H)]
            if config.has_mlp:
                nodes.append(NodeId("mlp", l))
        nodes.append(OUT)
        self.nodes: list[NodeId] = nodes
        self._node_set = set(nodes)
        self.sources: list[NodeId] = nodes[:-1]
        self.source_index = {n: i for i, n in enumerate(self.sources)}

        self.dst_slots: list[tuple[NodeId, str]] = []
        for n in nodes:
            for s in self.slots_of(n):
                self.dst_slots.append((n, s))
        self.dst_slot_index = {ds: i for i, ds in enumerate(self.dst_slots)}

        edges = []
        for dst, slot in self.dst_slots:
            for p in self._parents_sorted(dst, "default"):
                edges.append(Edge(p, dst, slot))
        self.edges: list[Edge] = edges
        self.edge_index = {e: i for i, e in enumerate(edges)}
        self._edge_by_str = {str(e): i for i, e in enumerate(edges)}
        self.edge_src = np.array([self.source_index[e.src] for e in edges], dtype=np.int64)
        self.edge_dst_slot = np.array([self.dst_slot_index[(e.dst, e.slot)] for e in edges], dtype=np.int64)

    # -- structure ---------------------------------------------------------

    def __len__(self):
        return len(self.edges)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __contains__(self, n) -> bool:
        return n in self._node_set

    def slots_of(self, n: NodeId) -> tuple[str, ...]:
        if n.is_embed:
            return ()
        if n.is_head:
            return ("q", "k", "v") if self.granularity == "heads-qkv" else ("in",)
        return ("in",)

    def _parents_sorted(self, v: NodeId, policy: str) -> list[NodeId]:
        cfg = self.config
        if v.is_embed:
            return []
        heads = range(cfg.n_heads - 1, -1, -1) if policy == "default" else range(cfg.n_heads)
        out = []
        if v.kind == "mlp":
            out += [NodeId("head", v.layer, h) for h in heads]
        below = cfg.n_layers if v.kind == "out" else v.layer
        for l in range(below - 1, -1, -1):
            if cfg.has_mlp:
                out.append(NodeId("mlp", l))
            out += [NodeId("head", l, h) for h in heads]
        if v.is_head and cfg.has_pos:
            out.append(POS)
        out.append(TOK)
        return out

    def parents(self, v: NodeId) -> list[NodeId]:
        return self._parents_sorted(self._check(v), "default")

    def _check(self, v) -> NodeId:
        if isinstance(v, str):
            v = NodeId.parse(v)
        if v not in self._node_set:
            raise IdentifierError(f"node {v} is not in this graph")
        return v

    def edge(self, text_or_edge) -> int:
        """Index of an edge given as an :class:`Edge` or its string form."""
        key = str(text_or_edge)
        try:
            return self._edge_by_str[key]
        except KeyError:
            raise IdentifierError(f"edge {key!r} is not in this graph") from None

    def children(self, v: NodeId) -> list[NodeId]:
        v = self._check(v)
        seen = []
        for e in self.edges:
            if e.src == v and e.dst not in seen:
                seen.append(e.dst)
        return seen

    @cached_property
    def maskable(self) -> list[NodeId]:
        """Heads and MLPs: the nodes node-level methods classify."""
        return [n for n in self.nodes if n.kind in ("head", "mlp")]

    @cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(
            {"config": self.config.to_dict(), "granularity": self.granularity, "edges": [str(e) for e in self.edges]},
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- executor support -------------------------------------------------

    def slot_weights(self, included: np.ndarray) -> np.ndarray:
        """Per destination slot, a 0/1 weight per source.

        At non-attention destinations the ``pos`` column copies the ``tok``
        column, since positional information reaches them through that edge.
        """
        W = np.zeros((len(self.dst_slots), len(self.sources)))
        W[self.edge_dst_slot, self.edge_src] = np.asarray(included, dtype=np.float64)
        if self.config.has_pos:
            t, p = self.source_index[TOK], self.source_index[POS]
            for i, (n, _) in enumerate(self.dst_slots):
                if not n.is_head:
                    W[i, p] = W[i, t]
        return W

    def __repr__(self):
        return f"CompGraph({self.granularity}, {len(self.nodes)} nodes, {self.n_edges} edges)"


def build_graph(config: ModelConfig, granularity: str = "heads-qkv") -> CompGraph:
    return CompGraph(config, granularity)


def reverse_topo(graph: CompGraph) -> list[NodeId]:
    """Output first; every node precedes its parents."""
    L = graph.config.n_layers
    return sorted(graph.nodes, key=lambda n: n.topo_key(L), reverse=True)


def ordered_parents(graph: CompGraph, v, policy: str = "default") -> list[tuple[NodeId, str]]:
    """Parents of every input slot of ``v`` in iteration order (slot-major)."""
    if policy not in POLICIES:
        raise UsageError(f"unknown parent policy {policy!r}")
    v = graph._check(v)
    parents = graph._parents_sorted(v, policy)
    return [(p, s) for s in graph.slots_of(v) for p in parents]


def closed_form_edge_count(config: ModelConfig, granularity: str = "heads-qkv") -> int:
    L, H = config.n_layers, config.n_heads
    M = 1 if config.has_mlp else 0
    slots = 3 if granularity == "heads-qkv" else 1
    emb_head = 2 if config.has_pos else 1
    total = 0
    for l in range(L):
        total += H * slots * (emb_head + l * (H + M))
        total += M * (1 + (l + 1) * H + l * M)
    return total + 1 + L * (H + M)


class Subgraph:
    """Edge-inclusion mask over a :class:`CompGraph`."""

    def __init__(self, graph: CompGraph, included=None):
        self.graph = graph
        if included is None:
            included = np.ones(graph.n_edges, dtype=bool)
        included = np.array(included, dtype=bool)
        if included.shape != (graph.n_edges,):
            raise UsageError(f"inclusion mask has shape {included.shape}, expected ({graph.n_edges},)")
        self.included = included

    @classmethod
    def full(cls, graph: CompGraph) -> "Subgraph":
        return cls(graph)

    @classmethod
    def empty(cls, graph: CompGraph) -> "Subgraph":
        return cls(graph, np.zeros(graph.n_edges, dtype=bool))

    @classmethod
    def from_edges(cls, graph: CompGraph, edges) -> "Subgraph":
        inc = np.zeros(graph.n_edges, dtype=bool)
        for e in edges:
            inc[graph.edge(e)] = True
        return cls(graph, inc)

    @property
    def n_edges(self) -> int:
        return int(self.included.sum())

    def edges(self) -> list[Edge]:
        return [self.graph.edges[i] for i in np.flatnonzero(self.included)]

    def edge_strings(self) -> list[str]:
        return [str(e) for e in self.edges()]

    def copy(self) -> "Subgraph":
        return Subgraph(self.graph, self.included.copy())

    def __contains__(self, edge) -> bool:
        return bool(self.included[self.graph.edge(edge)])

    def without(self, edge) -> "Subgraph":
        s = self.copy()
        s.included[self.graph.edge(edge)] = False
        return s

    def nodes(self) -> list[NodeId]:
        """Nodes with at least one incident included edge, in forward order."""
        touched = set()
        for e in self.edges():
            touched.add(e.src)
            touched.add(e.dst)
        return [n for n in self.graph.nodes if n in touched]

    def issubset(self, other: "Subgraph") -> bool:
        return bool(np.all(~self.included | other.included))

    def __eq__(self, other):
        return isinstance(other, Subgraph) and other.graph is self.graph and np.array_equal(self.included, other.included)

    def __repr__(self):
        return f"Subgraph({self.n_edges}/{self.graph.n_edges} edges)"
