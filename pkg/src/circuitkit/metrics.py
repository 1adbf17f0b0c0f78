"""Task metrics (all oriented so that smaller is better) and edge-removal rules.

Metrics are evaluated at measured positions only. Every function works on
plain arrays and on tape ``Var`` values, so the same code drives ACDC
scoring, Subnetwork Probing losses and HISP gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import NumericError, SpecError, UsageError

KINDS = ("kl", "logit_diff", "abs_logit_diff", "prob_diff", "nll", "l2")
REMOVAL_MODES = ("direct", "match-model", "small-change")


def _ids(a, name):
    if a is None:
        return None
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.integer):
        raise SpecError(f"{name} ids must be integers")
    return a[..., None] if a.ndim == 2 else a


@dataclass
class MetricSpec:
    """Metric kind plus per-example targets aligned with measured positions.

    ``correct``/``incorrect`` are token ids of shape (n, P) or id sets
    (n, P, k); ``targets`` are raw output vectors (n, P, n_out) for ``l2``.
    When ``l2`` has no targets the reference (unpatched) output is used.
    """

    kind: str = "kl"
    correct: np.ndarray | None = None
    incorrect: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown metric kind {self.kind!r}")
        self.correct = _ids(self.correct, "correct")
        self.incorrect = _ids(self.incorrect, "incorrect")
        if self.targets is not None:
            self.targets = nx.as_tensor(self.targets)
        need_c = self.kind in ("logit_diff", "abs_logit_diff", "prob_diff", "nll")
        need_i = self.kind in ("logit_diff", "abs_logit_diff", "prob_diff")
        if need_c and self.correct is None:
            raise SpecError(f"metric {self.kind} needs correct token ids")
        if need_i and self.incorrect is None:
            raise SpecError(f"metric {self.kind} needs incorrect token ids")

    def subset(self, idx) -> "MetricSpec":
        pick = lambda a: None if a is None else a[idx]
        return MetricSpec(self.kind, pick(self.correct), pick(self.incorrect), pick(self.targets))

    @property
    def needs_reference(self) -> bool:
        return self.kind == "kl" or (self.kind == "l2" and self.targets is None)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k in ("correct", "incorrect", "targets"):
            v = getattr(self, k)
            if v is not None:
                out[k] = v.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSpec":
        return cls(d["kind"], *(np.asarray(d[k]) if d.get(k) is not None else None for k in ("correct", "incorrect", "targets")))


def gather_positions(out, positions: np.ndarray):
    """Select ``out[i, positions[i, p]]`` -> shape (n, P, d)."""
    positions = np.asarray(positions)
    rows = np.arange(positions.shape[0])[:, None]
    return nx.getitem(out, (rows, positions))


def _gather_ids(x, ids):
    n, P, k = ids.shape
    return nx.getitem(x, (np.arange(n)[:, None, None], np.arange(P)[None, :, None], ids))


def kl_divergence(ref_logits, sub_logits, positions=None, per_example: bool = False):
    """D(P || Q), P = softmax(ref), Q = softmax(sub), averaged over positions."""
    if positions is not None:
        ref_logits = gather_positions(nx.value_of(ref_logits), positions)
        sub_logits = gather_positions(sub_logits, positions)
    ref = nx.value_of(ref_logits)
    if nx.value_of(sub_logits).shape != np.shape(ref):
        raise UsageError("reference and subgraph logits differ in shape")
    lp = nx.softmax_logprobs(nx.as_tensor(ref))
    lq = nx.softmax_logprobs(sub_logits)
    per_pos = nx.sum_(np.exp(lp) * (lp - lq), axis=-1)
    return _reduce(per_pos, per_example)


def _reduce(per_pos, per_example):
    v = nx.value_of(per_pos)
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite metric value")
    if per_example:
        return nx.mean(per_pos, axis=tuple(range(1, v.ndim))) if v.ndim > 1 else per_pos
    return nx.mean(per_pos)


def eval_metric(spec: MetricSpec, sub_out, ref_out, positions, per_example: bool = False):
    """Metric value at measured positions, averaged over (example, position).

    ``sub_out``/``ref_out`` have shape (n, T, d); ``positions`` (n, P).
    """
    positions = np.asarray(positions)
    nx.check_finite(np.asarray(nx.value_of(sub_out)), "subgraph output")
    if spec.kind == "kl":
        return kl_divergence(ref_out, sub_out, positions, per_example)
    x = gather_positions(sub_out, positions)
    n, P = positions.shape
    if spec.kind == "l2":
        tgt = spec.targets if spec.targets is not None else gather_positions(nx.value_of(ref_out), positions)
        if np.shape(tgt) != nx.value_of(x).shape:
            raise SpecError(f"targets have shape {np.shape(tgt)}, expected {nx.value_of(x).shape}")
        d = x - tgt
        return _reduce(nx.sum_(d * d, axis=-1), per_example)
    for name, ids in (("correct", spec.correct), ("incorrect", spec.incorrect)):
        if ids is not None and ids.shape[:2] != (n, P):
            raise SpecError(f"{name} ids have shape {ids.shape}, expected ({n}, {P}, k)")
    if spec.kind in ("logit_diff", "abs_logit_diff"):
        diff = nx.mean(_gather_ids(x, spec.correct), axis=-1) - nx.mean(_gather_ids(x, spec.incorrect), axis=-1)
        if spec.kind == "logit_diff":
            return _reduce(-diff, per_example)
        # |d| written with ops the tape knows: relu(d) + relu(-d)
        return _reduce(nx.relu(diff) + nx.relu(-diff), per_example)
    lp = nx.softmax_logprobs(x)
    if spec.kind == "nll":
        return _reduce(-nx.mean(_gather_ids(lp, spec.correct), axis=-1), per_example)
    p = nx.exp(lp)
    diff = nx.sum_(_gather_ids(p, spec.correct), axis=-1) - nx.sum_(_gather_ids(p, spec.incorrect), axis=-1)
    return _reduce(-diff, per_example)


@dataclass(frozen=True)
class RemovalCondition:
    mode: str = "direct"
    tau: float = 0.01

    def __post_init__(self):
        if self.mode not in REMOVAL_MODES:
            raise UsageError(f"unknown removal mode {self.mode!r}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise UsageError("threshold tau must be a positive finite number")


def removal_condition(cond: RemovalCondition, F_H: float, F_new: float, F_G: float = 0.0) -> bool:
    """True when the candidate edge may be removed (strict comparison)."""
    if cond.mode == "direct":
        delta = F_new - F_H
    elif cond.mode == "match-model":
        delta = abs(F_new - F_G) - abs(F_H - F_G)
    else:
        delta = abs(F_new - F_H)
    return bool(delta < cond.tau)
