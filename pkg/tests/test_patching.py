import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuitkit.dataset import TaskDataset
from circuitkit.errors import PairingError, UsageError
from circuitkit.graph import Subgraph, build_graph
from circuitkit.metrics import MetricSpec
from circuitkit.model import forward
from circuitkit.patching import (
    IncrementalEvaluator, SubgraphEvaluator, build_corrupt_cache, evaluate_subgraph, run_subgraph,
)
from circuitkit.zoo import build_or_gate_model, build_reverse_model, gen_dataset

from conftest import random_model, random_tokens


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["heads", "heads-qkv"]), st.sampled_from(["learned", "none"]))
def test_full_and_empty_identities(seed, gran, pos):
    m = random_model(seed, pos_embed=pos, n_layers=1 + seed % 2)
    rng = np.random.default_rng(seed)
    x, xc = random_tokens(rng, m.config, 2), random_tokens(rng, m.config, 2)
    g = build_graph(m.config, gran)
    cache = build_corrupt_cache(m, xc)
    assert np.max(np.abs(run_subgraph(m, g, Subgraph.full(g), x, "corrupted", cache) - forward(m, x)[0])) <= 1e-9
    assert np.max(np.abs(run_subgraph(m, g, Subgraph.empty(g), x, "corrupted", cache) - forward(m, xc)[0])) <= 1e-9


def test_corrupt_cache_on_same_input_equals_clean(rng):
    m = random_model()
    x = random_tokens(rng, m.config)
    cache = build_corrupt_cache(m, x)
    _, clean = forward(m, x)
    assert all(np.array_equal(cache[k], clean[k]) for k in clean)


def test_or_gate_missing_one_head_edge():
    m, _ = build_or_gate_model((1, 1))
    g = build_graph(m.config, "heads")
    H = Subgraph.full(g).without("a0.h1->m0.in")
    _, inputs = run_subgraph(m, g, H, np.zeros((1, 1), dtype=int), "zero", return_inputs=True)
    x = inputs["m0.in"][0, 0, 0]
    assert 1 - max(0.0, 1 - x) == pytest.approx(1.0)
    logits = run_subgraph(m, g, H, np.zeros((1, 1), dtype=int), "zero")
    assert logits[0, 0, 1] == pytest.approx(1.0)


def test_full_graph_metrics_zero():
    m, _ = build_reverse_model(4)
    ds = gen_dataset("reverse", 20, 0)
    g = build_graph(m.config)
    assert evaluate_subgraph(m, g, Subgraph.full(g), ds) == pytest.approx(0.0, abs=1e-12)
    kl = ds.with_metric(MetricSpec("kl"))
    assert evaluate_subgraph(m, g, Subgraph.full(g), kl) == pytest.approx(0.0, abs=1e-9)


def test_pos_edge_only_reaches_head_slots(rng):
    m = random_model(n_layers=1)
    g = build_graph(m.config)
    x = random_tokens(rng, m.config, 2)
    cache = build_corrupt_cache(m, random_tokens(rng, m.config, 2))
    H = Subgraph.full(g).without("tok->out.in")
    _, inputs = run_subgraph(m, g, H, x, "corrupted", cache, return_inputs=True)
    _, clean = forward(m, x)
    expected = clean["resid_final"] - clean["tok"] - clean["pos"] + cache["tok"] + cache["pos"]
    np.testing.assert_allclose(inputs["out.in"], expected, atol=1e-12)


def test_errors(rng):
    m = random_model()
    g = build_graph(m.config)
    x = random_tokens(rng, m.config, 2)
    with pytest.raises(UsageError):
        run_subgraph(m, g, Subgraph.full(g), x, "mean")
    with pytest.raises(UsageError):
        run_subgraph(m, g, Subgraph.full(g), x, "corrupted")
    with pytest.raises(PairingError):
        build_corrupt_cache(m, random_tokens(rng, m.config, 3), like=x)
    other = build_graph(m.config)
    with pytest.raises(UsageError):
        run_subgraph(m, g, Subgraph.full(other), x, "zero")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["corrupted", "zero"]))
def test_incremental_matches_fresh(seed, ablation):
    m = random_model(seed)
    rng = np.random.default_rng(seed)
    x, xc = random_tokens(rng, m.config, 3), random_tokens(rng, m.config, 3)
    ds = TaskDataset(x, xc, np.tile(np.arange(5), (3, 1)), MetricSpec("kl"))
    g = build_graph(m.config)
    inc = IncrementalEvaluator(m, g, ds, ablation=ablation)
    fresh = SubgraphEvaluator(m, g, ds, ablation=ablation)
    H = Subgraph.full(g)
    for i in rng.permutation(g.n_edges)[:12]:
        f, state = inc.propose(int(i))
        assert f == pytest.approx(fresh(H.without(g.edges[i])), abs=1e-10)
        if rng.random() < 0.5:
            inc.commit(state)
            H = H.without(g.edges[i])
    assert inc.H == H
