"""Decoder-only transformer runtime with a per-node activation cache.

Weights follow a fixed naming scheme (see :func:`weight_shapes`). Attention
tensors are stored head-major so that per-head inputs can differ, which is
what edge-level patching needs: the same block functions serve the ordinary
forward pass (all heads read one residual stream) and the patched executor
(each head slot reads its own assembled input).
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ContextError, FormatError, IdentifierError, UsageError, VocabError

ACTIVATIONS = ("relu", "gelu", "identity")
NORMS = ("pre-layernorm", "none")
POS_EMBEDS = ("learned", "one-hot", "none")
MASK_FILL = -1e30
CTM_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int = 0
    vocab: int = 2
    n_ctx: int = 8
    activation: str = "gelu"
    norm: str = "none"
    pos_embed: str = "learned"
    attn_scale: float | None = None
    causal: bool = True
    n_out: int | None = None  # readout width; defaults to vocab

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_mlp", "vocab", "n_ctx"):
            if int(getattr(self, name)) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.norm not in NORMS:
            raise UsageError(f"unknown norm {self.norm!r}")
        if self.pos_embed not in POS_EMBEDS:
            raise UsageError(f"unknown positional embedding {self.pos_embed!r}")
        if self.attn_scale is not None and not self.attn_scale > 0:
            raise UsageError("attn_scale must be positive")
        if self.n_out is not None and self.n_out < 1:
            raise UsageError("n_out must be positive")

    @property
    def scale(self) -> float:
        if self.attn_scale is not None:
            return float(self.attn_scale)
        return 1.0 / np.sqrt(self.d_head) if self.d_head else 1.0

    @property
    def out_dim(self) -> int:
        return self.vocab if self.n_out is None else self.n_out

    @property
    def has_mlp(self) -> bool:
        return self.d_mlp > 0

    @property
    def has_pos(self) -> bool:
        return self.pos_embed != "none"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor the config requires, in canonical order."""
    H, D, E, M = cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_mlp
    shapes: dict[str, tuple[int, ...]] = {"embed.W_E": (cfg.vocab, D)}
    if cfg.has_pos:
        shapes["pos_embed.W_pos"] = (cfg.n_ctx, D)
    for l in range(cfg.n_layers):
        p = f"blocks.{l}"
        if cfg.norm == "pre-layernorm":
            shapes[f"{p}.ln1.w"] = (D,)
            shapes[f"{p}.ln1.b"] = (D,)
        for m in "QKV":
            shapes[f"{p}.attn.W_{m}"] = (H, D, E)
            shapes[f"{p}.attn.b_{m}"] = (H, E)
        shapes[f"{p}.attn.W_O"] = (H, E, D)
        if cfg.has_mlp:
            if cfg.norm == "pre-layernorm":
                shapes[f"{p}.ln2.w"] = (D,)
                shapes[f"{p}.ln2.b"] = (D,)
            shapes[f"{p}.mlp.W_in"] = (D, M)
            shapes[f"{p}.mlp.b_in"] = (M,)
            shapes[f"{p}.mlp.W_out"] = (M, D)
            shapes[f"{p}.mlp.b_out"] = (D,)
    if cfg.norm == "pre-layernorm":
        shapes["ln_final.w"] = (D,)
        shapes["ln_final.b"] = (D,)
    shapes["unembed.W_U"] = (D, cfg.out_dim)
    shapes["unembed.b_U"] = (cfg.out_dim,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = weight_shapes(self.config)
        for name, shape in shapes.items():
            if name not in self.weights:
                raise FormatError(f"missing tensor {name}")
            w = nx.as_tensor(self.weights[name])
            if w.shape != shape:
                raise FormatError(f"tensor {name} has shape {w.shape}, expected {shape}")
            self.weights[name] = w
        extra = set(self.weights) - set(shapes)
        if extra:
            raise FormatError(f"unexpected tensors: {sorted(extra)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.weights.items()})

    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights.values()))


def init_random_model(cfg: ModelConfig, seed: int = 0, scale: float = 1.0) -> Model:
    """Gaussian weights at roughly unit residual scale; used for tests and training init."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        if name.endswith((".ln1.w", ".ln2.w")) or name == "ln_final.w":
            weights[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.endswith((".ln1.b", ".ln2.b")) or name == "ln_final.b":
            weights[name] = 0.1 * rng.standard_normal(shape)
        elif name in ("embed.W_E", "pos_embed.W_pos"):
            weights[name] = scale * rng.standard_normal(shape)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else max(cfg.d_model, 1)
            std = scale / np.sqrt(max(fan_in, 1))
            if len(shape) == 1 or name.split(".")[-1].startswith("b_"):
                std = 0.1 * scale
            weights[name] = std * rng.standard_normal(shape)
    return Model(cfg, weights)


# ---------------------------------------------------------------------------
# building blocks shared by forward() and the patched executor

Hook = Callable[[str, int, object], object]


def check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise UsageError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise VocabError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise VocabError(f"token id out of range for vocab {cfg.vocab}")
    if tokens.shape[1] > cfg.n_ctx:
        raise ContextError(f"sequence length {tokens.shape[1]} exceeds n_ctx {cfg.n_ctx}")
    return tokens


def embed(model: Model, tokens: np.ndarray, pos_ids: np.ndarray | None = None, params=None):
    """Token and positional contributions, each of shape (batch, seq, d_model)."""
    W = params if params is not None else model.weights
    tok = nx.take_rows(W["embed.W_E"], tokens)
    if not model.config.has_pos:
        return tok, None
    B, T = tokens.shape
    if pos_ids is None:
        pos_ids = np.broadcast_to(np.arange(T), (B, T))
    pos_ids = np.asarray(pos_ids)
    if pos_ids.shape != (B, T):
        raise UsageError(f"pos_ids shape {pos_ids.shape} does not match tokens {tokens.shape}")
    if pos_ids.size and (pos_ids.min() < 0 or pos_ids.max() >= model.config.n_ctx):
        raise ContextError("positional id out of range")
    pos = nx.take_rows(W["pos_embed.W_pos"], pos_ids)
    return tok, pos


def _ln(model: Model, x, name: str, params=None):
    if model.config.norm == "none":
        return x
    W = params if params is not None else model.weights
    return nx.layer_norm(x, W[f"{name}.w"], W[f"{name}.b"])


def attention(model: Model, layer: int, xq, xk, xv, hook: Hook | None = None, params=None) -> dict:
    """Run every head of ``layer``.

    ``xq, xk, xv`` are pre-norm inputs, either shared (batch, seq, d_model) or
    per head (heads, batch, seq, d_model). Returns q/k/v, pattern and the
    per-head output contributions (heads, batch, seq, d_model).
    """
    cfg = model.config
    W = params if params is not None else model.weights
    p = f"blocks.{layer}"
    res = {}
    for slot, x in (("q", xq), ("k", xk), ("v", xv)):
        x = _ln(model, x, f"{p}.ln1", params)
        spec = "btd,hde->hbte" if nx.value_of(x).ndim == 3 else "hbtd,hde->hbte"
        y = nx.einsum(spec, x, W[f"{p}.attn.W_{slot.upper()}"]) + nx.reshape(
            W[f"{p}.attn.b_{slot.upper()}"], (cfg.n_heads, 1, 1, cfg.d_head)
        )
        if hook is not None:
            y = hook(slot, layer, y)
        res[slot] = y
    scores = nx.einsum("hbqe,hbke->hbqk", res["q"], res["k"]) * cfg.scale
    if cfg.causal:
        T = nx.value_of(scores).shape[-1]
        scores = nx.where(np.tril(np.ones((T, T), dtype=bool)), scores, MASK_FILL)
    pattern = nx.softmax(scores, axis=-1)
    z = nx.einsum("hbqk,hbke->hbqe", pattern, res["v"])
    out = nx.einsum("hbqe,hed->hbqd", z, W[f"{p}.attn.W_O"])
    if hook is not None:
        out = hook("head_out", layer, out)
    res["pattern"] = pattern
    res["out"] = out
    return res


def head_output(model: Model, layer: int, head: int, xq, xk, xv) -> np.ndarray:
    """One head's output contribution (batch, seq, d_model); plain arrays only."""
    cfg = model.config
    W = model.weights
    p = f"blocks.{layer}"
    qkv = []
    for m, x in (("Q", xq), ("K", xk), ("V", xv)):
        x = _ln(model, x, f"{p}.ln1")
        qkv.append(x @ W[f"{p}.attn.W_{m}"][head] + W[f"{p}.attn.b_{m}"][head])
    q, k, v = qkv
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * cfg.scale
    if cfg.causal:
        T = scores.shape[-1]
        scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, MASK_FILL)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    pattern = e / e.sum(axis=-1, keepdims=True)
    return np.matmul(pattern, v) @ W[f"{p}.attn.W_O"][head]


def mlp(model: Model, layer: int, x, hook: Hook | None = None, params=None) -> dict:
    W = params if params is not None else model.weights
    p = f"blocks.{layer}"
    h = _ln(model, x, f"{p}.ln2", params)
    pre = nx.einsum("btd,dm->btm", h, W[f"{p}.mlp.W_in"]) + W[f"{p}.mlp.b_in"]
    act = nx.ACTIVATIONS[model.config.activation](pre)
    out = nx.einsum("btm,md->btd", act, W[f"{p}.mlp.W_out"]) + W[f"{p}.mlp.b_out"]
    if hook is not None:
        out = hook("mlp_out", layer, out)
    return {"pre": pre, "out": out}


def readout(model: Model, x, params=None):
    W = params if params is not None else model.weights
    h = _ln(model, x, "ln_final", params)
    return nx.einsum("btd,dv->btv", h, W["unembed.W_U"]) + W["unembed.b_U"]


# ---------------------------------------------------------------------------
# cache and forward


class ActivationCache(dict):
    """Activations keyed by name.

    Contributions use canonical node names (``tok``, ``pos``, ``a{l}.h{h}``,
    ``m{l}``), each of shape (batch, seq, d_model). Other keys:
    ``a{l}.h{h}.q`` (and ``.k``, ``.v``, ``.pattern``), ``m{l}.in``,
    ``resid_pre.{l}``, ``resid_mid.{l}``, ``resid_final``, ``logits``.
    """

    def contribution(self, node) -> np.ndarray:
        return node_contribution(self, node)


def _split_heads(cache: ActivationCache, layer: int, res: dict, n_heads: int):
    for h in range(n_heads):
        name = f"a{layer}.h{h}"
        cache[name] = nx.getitem(res["out"], h) if isinstance(res["out"], nx.Var) else res["out"][h]
        for key in ("q", "k", "v", "pattern"):
            r = res[key]
            cache[f"{name}.{key}"] = nx.getitem(r, h) if isinstance(r, nx.Var) else r[h]


def forward(model: Model, tokens, pos_ids=None, hook: Hook | None = None, params=None):
    """Unpatched forward pass; returns ``(logits, cache)``.

    ``params`` substitutes a weight mapping (e.g. tape leaves for training).
    ``hook(name, layer, value)`` may replace q/k/v, head outputs or MLP
    outputs; it must return a value of the same shape.
    """
    cfg = model.config
    tokens = check_tokens(cfg, tokens)
    cache = ActivationCache()
    tok, pos = embed(model, tokens, pos_ids, params)
    cache["tok"] = tok
    resid = tok
    if pos is not None:
        cache["pos"] = pos
        resid = resid + pos
    for l in range(cfg.n_layers):
        cache[f"resid_pre.{l}"] = resid
        res = attention(model, l, resid, resid, resid, hook, params)
        _split_heads(cache, l, res, cfg.n_heads)
        if cfg.n_heads:
            resid = resid + nx.sum_(res["out"], axis=0)
        if cfg.has_mlp:
            cache[f"resid_mid.{l}"] = resid
            cache[f"m{l}.in"] = resid
            m = mlp(model, l, resid, hook, params)
            cache[f"m{l}"] = m["out"]
            resid = resid + m["out"]
    cache["resid_final"] = resid
    logits = readout(model, resid, params)
    cache["logits"] = logits
    if not isinstance(logits, nx.Var):
        nx.check_finite(logits, "logits")
    return logits, cache


def node_contribution(cache: ActivationCache, node) -> np.ndarray:
    """The additive term ``node`` writes into the residual stream."""
    name = str(node)
    if not _SOURCE_RE.fullmatch(name) or name not in cache:
        raise IdentifierError(f"no contribution recorded for node {name!r}")
    return cache[name]


_SOURCE_RE = re.compile(r"tok|pos|a\d+\.h\d+|m\d+")


# ---------------------------------------------------------------------------
# CTM weight files


def save_model(model: Model, path) -> None:
    """Write a CTM file: u64 LE manifest length, JSON manifest, f32 LE payload."""
    shapes = weight_shapes(model.config)
    tensors = []
    blobs = []
    offset = 0
    for name, shape in shapes.items():
        data = np.ascontiguousarray(model.weights[name], dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(shape), "dtype": "f32", "offset": offset, "length": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {"format_version": CTM_VERSION, "config": model.config.to_dict(), "tensors": tensors}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("file too short for a CTM header")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise FormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != CTM_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (KeyError, TypeError, UsageError) as exc:
        raise FormatError(f"bad manifest: {exc}") from exc
    payload = raw[8 + n :]
    shapes = weight_shapes(cfg)
    weights = {}
    spans = []
    for t in entries:
        name = t.get("name")
        if t.get("dtype") != "f32":
            raise FormatError(f"tensor {name}: unsupported dtype {t.get('dtype')!r}")
        shape = tuple(t["shape"])
        off, length = int(t["offset"]), int(t["length"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + length > len(payload):
            raise FormatError(f"tensor {name}: bad offset/length")
        spans.append((off, off + length, name))
        weights[name] = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off).astype(np.float64).reshape(shape)
    spans.sort()
    for (a0, a1, na), (b0, b1, nb) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"tensors {na} and {nb} overlap")
    for name, shape in shapes.items():
        if name not in weights:
            raise FormatError(f"missing tensor {name}")
        if weights[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {weights[name].shape}, expected {shape}")
    return Model(cfg, weights)


def quantize(model: Model) -> Model:
    """Round weights to 32-bit storage width and widen back."""
    return Model(model.config, {k: v.astype(np.float32).astype(np.float64) for k, v in model.weights.items()})
