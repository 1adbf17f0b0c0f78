"""Models with known circuits, plus paired dataset generation.

* ``or-gate``: one layer, two heads whose biases carry the two input bits,
  an MLP computing ``1 - relu(1 - x - y)``.
* ``reverse``: hand-compiled list reversal (three layers, one head each).
* ``xproportion``: running fraction of ``x`` tokens (two layers).
* ``induction``: a small attention-only model trained on repeated blocks.

Compiled models ship with the exact edge set their construction uses.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .dataset import TaskDataset
from .errors import TrainingError, UsageError
from .graph import CompGraph, Edge, Subgraph
from .metrics import MetricSpec, eval_metric
from .model import Model, ModelConfig, forward, init_random_model, weight_shapes

TASKS = ("or-gate", "reverse", "xproportion", "induction")
XPROP_ALPHABET = ("a", "b", "x")
SATURATION = 1000.0  # attention scale that turns one-hot score gaps into hard selection


@dataclass
class CanonicalCircuit:
    """Ground-truth edge set, written at q/k/v granularity."""

    edges: list[str]
    note: str = ""

    def edge_strings(self, granularity: str = "heads-qkv") -> list[str]:
        if granularity == "heads-qkv":
            return list(self.edges)
        out = []
        for s in self.edges:
            e = Edge.parse(s)
            t = str(Edge(e.src, e.dst, "in"))
            if t not in out:
                out.append(t)
        return out

    def subgraph(self, graph: CompGraph) -> Subgraph:
        return Subgraph.from_edges(graph, self.edge_strings(graph.granularity))

    def nodes(self) -> list[str]:
        seen = []
        for s in self.edges:
            e = Edge.parse(s)
            for n in (str(e.src), str(e.dst)):
                if n not in seen:
                    seen.append(n)
        return seen


@dataclass(frozen=True)
class InductionProperty:
    """Structural test standing in for an induction edge list: some
    layer-0 head feeds the key or value input of a layer-1 head."""

    note: str = "previous-token head composing into an induction head"

    def composing_edges(self, H: Subgraph) -> list[str]:
        return [
            str(e)
            for e in H.edges()
            if e.src.is_head and e.dst.is_head and e.src.layer == 0 and e.dst.layer == 1 and e.slot in ("k", "v")
        ]

    def holds(self, H: Subgraph) -> bool:
        return bool(self.composing_edges(H))


def _zeros(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in weight_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# OR gate


def build_or_gate_model(inputs=(1, 1)) -> tuple[Model, CanonicalCircuit]:
    """Heads write their input bits into dimension 0; the MLP reads it and
    writes the OR into dimension 1, which alone feeds the readout."""
    cfg = ModelConfig(
        n_layers=1, n_heads=2, d_model=2, d_head=1, d_mlp=1, vocab=1, n_ctx=1,
        activation="relu", norm="none", pos_embed="none", n_out=2,
    )
    W = _zeros(cfg)
    for h, bit in enumerate(inputs):
        W["blocks.0.attn.b_V"][h, 0] = float(bit)
        W["blocks.0.attn.W_O"][h, 0, 0] = 1.0
    W["blocks.0.mlp.W_in"][0, 0] = -1.0
    W["blocks.0.mlp.b_in"][0] = 1.0
    W["blocks.0.mlp.W_out"][0, 1] = -1.0
    W["blocks.0.mlp.b_out"][1] = 1.0
    W["unembed.W_U"][1, 1] = 1.0
    circuit = CanonicalCircuit(["a0.h0->m0.in", "a0.h1->m0.in", "m0->out.in"], "MLP computes OR of both head outputs")
    return Model(cfg, W), circuit


# ---------------------------------------------------------------------------
# list reversal


def build_reverse_model(n: int, vocab: int = 4) -> tuple[Model, CanonicalCircuit]:
    """Output position i reads token n-1-i.

    Layer 0 head copies the one-hot position into an index subspace; MLP 0
    maps index j to ``n - j`` and MLP 1 subtracts one, giving the opposite
    index; the layer-2 head queries with it against positional keys and
    copies the selected token into the readout subspace.
    """
    if n < 1 or vocab < 1:
        raise UsageError("need n >= 1 and vocab >= 1")
    V = vocab
    tok, pos, idx, raw, opp, out = (np.arange(V), V + np.arange(n), V + n + np.arange(n),
                                    V + 2 * n + np.arange(n), V + 3 * n + np.arange(n), V + 4 * n + np.arange(V))
    cfg = ModelConfig(
        n_layers=3, n_heads=1, d_model=2 * V + 4 * n, d_head=max(n, V), d_mlp=n, vocab=V, n_ctx=n,
        activation="relu", norm="none", pos_embed="one-hot", attn_scale=SATURATION, causal=False,
    )
    W = _zeros(cfg)
    W["embed.W_E"][np.arange(V), tok] = 1.0
    W["pos_embed.W_pos"][np.arange(n), pos] = 1.0
    j = np.arange(n)
    # a0.h0: attend to self, copy position into idx
    W["blocks.0.attn.W_Q"][0, pos, j] = 1.0
    W["blocks.0.attn.W_K"][0, pos, j] = 1.0
    W["blocks.0.attn.W_V"][0, pos, j] = 1.0
    W["blocks.0.attn.W_O"][0, j, idx] = 1.0
    # m0: index j -> value n - j, stored at slot n - j - 1
    W["blocks.0.mlp.W_in"][idx, j] = 1.0
    W["blocks.0.mlp.W_out"][j, raw[n - j - 1]] = 1.0
    # m1: value v (slot v - 1) -> v - 1
    W["blocks.1.mlp.W_in"][raw, j] = 1.0
    W["blocks.1.mlp.W_out"][j, opp[j]] = 1.0
    # a2.h0: query opposite index, key position, value token
    W["blocks.2.attn.W_Q"][0, opp, j] = 1.0
    W["blocks.2.attn.W_K"][0, pos, j] = 1.0
    W["blocks.2.attn.W_V"][0, tok, np.arange(V)] = 1.0
    W["blocks.2.attn.W_O"][0, np.arange(V), out] = 1.0
    W["unembed.W_U"][out, np.arange(V)] = 1.0
    circuit = CanonicalCircuit(
        [
            "pos->a0.h0.q", "pos->a0.h0.k", "pos->a0.h0.v", "a0.h0->m0.in", "m0->m1.in",
            "m1->a2.h0.q", "pos->a2.h0.k", "tok->a2.h0.v", "a2.h0->out.in",
        ],
        "index copy, opposite-index lookup, selection by position",
    )
    return Model(cfg, W), circuit


def reverse_oracle(tokens) -> np.ndarray:
    return np.asarray(tokens)[..., ::-1]


# ---------------------------------------------------------------------------
# fraction of x tokens


def build_xproportion_model(n: int) -> tuple[Model, CanonicalCircuit]:
    """MLP 0 flags ``x`` tokens; a uniform causal head in layer 1 averages
    the flag over the prefix and writes the single readout dimension."""
    if n < 1:
        raise UsageError("need n >= 1")
    V = len(XPROP_ALPHABET)
    x_id = XPROP_ALPHABET.index("x")
    flag, out = V + n, V + n + 1
    cfg = ModelConfig(
        n_layers=2, n_heads=1, d_model=V + n + 2, d_head=1, d_mlp=1, vocab=V, n_ctx=n,
        activation="relu", norm="none", pos_embed="one-hot", causal=True, n_out=1,
    )
    W = _zeros(cfg)
    W["embed.W_E"][np.arange(V), np.arange(V)] = 1.0
    W["pos_embed.W_pos"][np.arange(n), V + np.arange(n)] = 1.0
    W["blocks.0.mlp.W_in"][x_id, 0] = 1.0
    W["blocks.0.mlp.W_out"][0, flag] = 1.0
    W["blocks.1.attn.W_V"][0, flag, 0] = 1.0
    W["blocks.1.attn.W_O"][0, 0, out] = 1.0
    W["unembed.W_U"][out, 0] = 1.0
    circuit = CanonicalCircuit(["tok->m0.in", "m0->a1.h0.v", "a1.h0->out.in"], "flag x, average over prefix")
    return Model(cfg, W), circuit


def encode_xproportion(text) -> np.ndarray:
    try:
        return np.array([XPROP_ALPHABET.index(c) for c in text], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"xproportion alphabet is {XPROP_ALPHABET}") from exc


def xproportion_oracle(tokens) -> np.ndarray:
    is_x = (np.asarray(tokens) == XPROP_ALPHABET.index("x")).astype(float)
    return np.cumsum(is_x, axis=-1) / np.arange(1, is_x.shape[-1] + 1)


# ---------------------------------------------------------------------------
# induction


@dataclass
class TrainConfig:
    vocab: int = 64
    seq_len: int = 24
    block: int = 8
    n_layers: int = 2
    n_heads: int = 8
    d_model: int = 32
    d_head: int = 8
    lr: float = 3e-3
    steps: int = 2000
    batch: int = 32
    seed: int = 0
    init_scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.99
    log_every: int = 0

    def __post_init__(self):
        if self.seq_len != 3 * self.block:
            raise UsageError("seq_len must be three blocks: prefix filler, block, repeat")
        if self.vocab < 2 * self.block:
            raise UsageError("vocab too small for distinct tokens in one sequence")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model, d_head=self.d_head,
            d_mlp=0, vocab=self.vocab, n_ctx=self.seq_len, activation="gelu", norm="pre-layernorm",
            pos_embed="learned",
        )

    def to_dict(self):
        return asdict(self)


def induction_sequences(rng, n: int, vocab: int = 64, block: int = 8):
    """Sequences ``[a fillers][block][block - a fillers][block again]``.

    All non-repeated tokens in a sequence are distinct, so the only
    predictable continuations are inside the repeat. Returns tokens and the
    measured (logit) positions: every position whose next token is a
    repeated one, i.e. the repeat start up to the second-last position.
    """
    T = 3 * block
    toks = np.empty((n, T), dtype=np.int64)
    for i in range(n):
        fresh = rng.permutation(vocab)[: 2 * block]
        a = int(rng.integers(0, block + 1))
        blk, fill = fresh[:block], fresh[block:]
        toks[i] = np.concatenate([fill[:a], blk, fill[a:], blk])
    positions = np.broadcast_to(np.arange(2 * block, T - 1), (n, block - 1)).copy()
    return toks, positions


def random_sequences(rng, n: int, vocab: int, T: int) -> np.ndarray:
    return np.stack([rng.permutation(vocab)[:T] for _ in range(n)]) if T <= vocab else rng.integers(0, vocab, (n, T))


def _adam(params, grads, state, lr, b1, b2, t, eps=1e-8):
    for k, g in grads.items():
        m, v = state.setdefault(k, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[k] = (m, v)
        params[k] = params[k] - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)


def nll_loss(model: Model, tokens, positions, params=None):
    logits, _ = forward(model, tokens, params=params)
    n = len(tokens)
    correct = np.asarray(tokens)[np.arange(n)[:, None], np.asarray(positions) + 1]
    return eval_metric(MetricSpec("nll", correct=correct), logits, None, positions)


def train_induction(config: TrainConfig | None = None, history: list | None = None) -> Model:
    """Adam on next-token loss at the repeat positions; deterministic per seed."""
    cfg = config or TrainConfig()
    model = init_random_model(cfg.model_config(), seed=cfg.seed, scale=cfg.init_scale)
    rng = np.random.default_rng(cfg.seed + 1)
    params = dict(model.weights)
    state: dict = {}
    for step in range(1, cfg.steps + 1):
        toks, pos = induction_sequences(rng, cfg.batch, cfg.vocab, cfg.block)
        tape = nx.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in params.items()}
        loss = nll_loss(model, toks, pos, params=leaves)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise TrainingError(f"loss diverged at step {step}")
        g = nx.reverse_grad(tape, loss, list(leaves.values()))
        _adam(params, {k: g[v.slot] for k, v in leaves.items()}, state, cfg.lr, cfg.beta1, cfg.beta2, step)
        if history is not None:
            history.append(lv)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"step {step} loss {lv:.4f}")
    return Model(model.config, params)


def bigram_baseline_nll(train_tokens, test_tokens, positions, vocab: int, alpha: float = 1.0) -> float:
    """NLL of an add-alpha bigram model fitted on ``train_tokens``."""
    counts = np.full((vocab, vocab), alpha)
    np.add.at(counts, (train_tokens[:, :-1].ravel(), train_tokens[:, 1:].ravel()), 1.0)
    probs = counts / counts.sum(axis=1, keepdims=True)
    n = len(test_tokens)
    cur = test_tokens[np.arange(n)[:, None], positions]
    nxt = test_tokens[np.arange(n)[:, None], positions + 1]
    return float(-np.log(probs[cur, nxt]).mean())


# ---------------------------------------------------------------------------
# datasets


def derangement(rng, n: int) -> np.ndarray:
    if n < 2:
        raise UsageError("a derangement needs at least two items")
    while True:
        p = rng.permutation(n)
        if np.all(p != np.arange(n)):
            return p


def _distinct_rows(rng, n: int, vocab: int, T: int) -> np.ndarray:
    if vocab**T < n:
        raise UsageError(f"only {vocab**T} distinct sequences of length {T} exist")
    rows, seen = [], set()
    while len(rows) < n:
        r = rng.integers(0, vocab, T)
        key = r.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(r)
    return np.stack(rows)


def gen_dataset(task: str, n: int, seed: int, length: int | None = None, vocab: int | None = None) -> TaskDataset:
    """Paired prompts for ``task``.

    Compiled tasks: distinct random clean prompts, corrupted = a
    derangement of them, with random positional ids for the corrupted run.
    Induction: repeated-block prompts, corrupted = fresh prompts with no
    repeats.
    """
    rng = np.random.default_rng(seed)
    if task == "or-gate":
        if n != 1:
            raise UsageError("the OR-gate dataset is a single prompt")
        z = np.zeros((1, 1), dtype=np.int64)
        return TaskDataset(z, z.copy(), z.copy(), MetricSpec("logit_diff", correct=[[1]], incorrect=[[0]]), task=task)
    if task in ("reverse", "xproportion"):
        T = length or 4
        V = (vocab or 4) if task == "reverse" else len(XPROP_ALPHABET)
        clean = _distinct_rows(rng, n, V, T)
        corrupted = clean[derangement(rng, n)]
        cpos = rng.integers(0, T, (n, T))
        positions = np.broadcast_to(np.arange(T), (n, T)).copy()
        if task == "reverse":
            targets = np.eye(V)[reverse_oracle(clean)]
        else:
            targets = xproportion_oracle(clean)[..., None]
        return TaskDataset(clean, corrupted, positions, MetricSpec("l2", targets=targets), cpos, task)
    if task == "induction":
        V = vocab or 64
        block = (length or 24) // 3
        clean, positions = induction_sequences(rng, n, V, block)
        corrupted = random_sequences(rng, n, V, 3 * block)
        correct = clean[np.arange(n)[:, None], positions + 1]
        return TaskDataset(clean, corrupted, positions, MetricSpec("kl", correct=correct), task=task)
    raise UsageError(f"unknown task {task!r}")


def canonical_circuit(task: str, **kw):
    if task == "or-gate":
        return build_or_gate_model()[1]
    if task == "reverse":
        return build_reverse_model(kw.get("n", 4), kw.get("vocab", 4))[1]
    if task == "xproportion":
        return build_xproportion_model(kw.get("n", 4))[1]
    if task == "induction":
        return InductionProperty()
    raise UsageError(f"unknown task {task!r}")


def build_task_model(task: str, length: int = 4, vocab: int = 4):
    if task == "or-gate":
        return build_or_gate_model()
    if task == "reverse":
        return build_reverse_model(length, vocab)
    if task == "xproportion":
        return build_xproportion_model(length)
    raise UsageError(f"no compiled model for task {task!r}")
