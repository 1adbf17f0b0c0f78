"""Artifact formats: circuit / dataset / run-log JSON, DOT, CSV and run manifests.

All writers are deterministic: stable key order, stable edge order, fixed
float formatting, trailing newline.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TaskDataset
from .errors import FormatError, IdentifierError
from .graph import CompGraph, Subgraph
from .zoo import CanonicalCircuit

MANIFEST_SUFFIX = ".manifest.json"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# circuits


def circuit_to_dict(graph: CompGraph, H) -> dict:
    if isinstance(H, CanonicalCircuit):
        edges = H.edge_strings(graph.granularity)
        Subgraph.from_edges(graph, edges)  # validate
        order = {str(e): i for i, e in enumerate(graph.edges)}
        edges = sorted(edges, key=order.__getitem__)
    else:
        if H.graph is not graph:
            raise FormatError("subgraph belongs to a different graph")
        edges = H.edge_strings()
    return {"graph_fingerprint": graph.fingerprint, "granularity": graph.granularity, "edges": edges}


def save_circuit(path, graph: CompGraph, H) -> None:
    write_json(path, circuit_to_dict(graph, H))


def circuit_from_dict(d: dict, graph: CompGraph) -> Subgraph:
    if not isinstance(d, dict) or "edges" not in d:
        raise FormatError("circuit JSON needs an 'edges' list")
    fp = d.get("graph_fingerprint")
    if fp is not None and fp != graph.fingerprint:
        raise FormatError("graph fingerprint mismatch: circuit was built for a different graph")
    try:
        return Subgraph.from_edges(graph, d["edges"])
    except IdentifierError as exc:
        raise FormatError(f"unknown edge in circuit: {exc.args[0]}") from exc


def load_circuit(path, graph: CompGraph) -> Subgraph:
    return circuit_from_dict(read_json(path), graph)


# ---------------------------------------------------------------------------
# datasets and logs


def save_dataset(path, ds: TaskDataset) -> None:
    write_json(path, ds.to_dict())


def load_dataset(path) -> TaskDataset:
    d = read_json(path)
    try:
        return TaskDataset.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed dataset ({exc})") from exc


def save_run_log(path, result, extra: dict | None = None) -> None:
    d = {
        "tau": result.tau,
        "f_full": result.f_full,
        "final_metric": result.final_metric,
        "n_evals": result.n_evals,
        "log": [e.to_dict() for e in result.log],
    }
    if extra:
        d.update(extra)
    write_json(path, d)


# ---------------------------------------------------------------------------
# DOT


def export_dot(graph: CompGraph, H: Subgraph, scores: dict | None = None, name: str = "circuit") -> str:
    """Graphviz text: every node, every included edge, penwidth from scores."""
    lines = [f"digraph {name} {{", "  rankdir=BT;", "  node [shape=box, fontname=Helvetica];"]
    for n in graph.nodes:
        lines.append(f'  "{n}";')
    top = max((abs(v) for v in (scores or {}).values()), default=0.0)
    for e in H.edges():
        s = str(e)
        w = 1.0
        if scores and s in scores and top > 0:
            w = 1.0 + 4.0 * abs(scores[s]) / top
        lines.append(f'  "{e.src}" -> "{e.dst}" [label="{e.slot}", penwidth={w:.3f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    command: list[str]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        try:
            return cls(list(d["command"]), d.get("config", {}), d.get("seeds", {}), d.get("inputs", {}), list(d.get("outputs", [])), float(d.get("seconds", 0.0)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest ({exc})") from exc

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(read_json(path))

    def check_inputs(self) -> None:
        for p, digest in self.inputs.items():
            if not Path(p).exists():
                raise FormatError(f"manifest input {p} is missing")
            if sha256_file(p) != digest:
                raise FormatError(f"manifest input {p} changed since the recorded run")


def manifest_path(primary_output) -> Path:
    return Path(str(primary_output) + MANIFEST_SUFFIX)
