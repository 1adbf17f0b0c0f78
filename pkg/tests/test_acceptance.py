"""End-to-end acceptance checks, one test per criterion."""
import filecmp
import time

import numpy as np
import pytest

from circuitkit import numerics as nx
from circuitkit.acdc import AcdcConfig, acdc_run, log_sweep, tau_sweep
from circuitkit.cli import main
from circuitkit.dataset import TaskDataset
from circuitkit.evaluation import matched_edge_comparison, pessimistic_auc, reset_network, roc_curve, sparsity_frontier
from circuitkit.fileio import RunManifest, manifest_path
from circuitkit.graph import Subgraph, build_graph
from circuitkit.maskers import SpConfig, SpObjective, hisp_gradients, hisp_layer_normalize, hisp_scores, hisp_topk_sweep, sp_finalize, sp_train
from circuitkit.metrics import MetricSpec, RemovalCondition, kl_divergence, removal_condition
from circuitkit.model import ModelConfig, forward, init_random_model, save_model
from circuitkit.patching import SubgraphEvaluator, build_corrupt_cache, run_subgraph
from circuitkit.zoo import (
    InductionProperty, build_or_gate_model, build_reverse_model, build_xproportion_model, gen_dataset,
)

INDUCTION_TAUS = np.logspace(-2, -0.5, 9)


def test_criterion_1_graph_counts():
    t0 = time.perf_counter()
    induction = ModelConfig(n_layers=2, n_heads=8, d_model=32, d_head=8, vocab=64, n_ctx=24, norm="pre-layernorm")
    gpt2 = ModelConfig(n_layers=12, n_heads=12, d_model=768, d_head=64, d_mlp=3072, vocab=50257, n_ctx=1024, norm="pre-layernorm")
    assert build_graph(induction).n_edges == 305
    assert build_graph(gpt2).n_edges == 32923
    assert time.perf_counter() - t0 < 1.0


def test_criterion_2_exact_recovery():
    t0 = time.perf_counter()
    taus = log_sweep(1e-5, 1e-1, 12)
    for task, builder in (("reverse", build_reverse_model), ("xproportion", build_xproportion_model)):
        for n in (3, 4, 5):
            m, canon = builder(n)
            g = build_graph(m.config)
            ds = gen_dataset(task, min(40, 3**n - 1), n, length=n)
            results = tau_sweep(m, g, ds, AcdcConfig(1.0, ablation="zero"), taus)
            truth = canon.subgraph(g)
            assert all(r.subgraph == truth for r in results), (task, n)
            assert pessimistic_auc(roc_curve([r.subgraph for r in results], canon)) == 1.0
    assert time.perf_counter() - t0 < 60


def test_criterion_3_or_gate():
    t0 = time.perf_counter()
    m, _ = build_or_gate_model()
    g = build_graph(m.config, "heads")
    ds = gen_dataset("or-gate", 1, 0)

    acdc = acdc_run(m, g, ds, AcdcConfig(0.1, ablation="zero")).subgraph
    head_edges = [e for e in acdc.edge_strings() if e in ("a0.h0->m0.in", "a0.h1->m0.in")]
    assert head_edges == ["a0.h0->m0.in"]
    acdc_nodes = {str(n) for n in acdc.nodes()}
    assert acdc_nodes == {"a0.h0", "m0", "out"}

    table = hisp_layer_normalize(hisp_scores(m, g, ds, ablation="zero"))
    nodes, _ = hisp_topk_sweep(table, g, [1])[0]
    assert nodes == ["tok", "m0", "out"]

    mask, _ = sp_train(m, g, ds, SpConfig(lam=1.0, ablation="zero", seed=0))
    sp_nodes, H = sp_finalize(mask, g)
    heads = [n for n in sp_nodes if n.startswith("a0.")]
    assert len(heads) == 1 and "m0" in sp_nodes
    assert {str(n) for n in H.nodes()} - acdc_nodes  # at least one extra node
    assert time.perf_counter() - t0 < 10


def test_criterion_4_patching_identities():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(100):
        cfg = ModelConfig(
            n_layers=int(rng.integers(1, 3)), n_heads=int(rng.integers(1, 4)), d_model=6, d_head=3,
            d_mlp=int(rng.choice([0, 5])), vocab=7, n_ctx=5, norm=str(rng.choice(["none", "pre-layernorm"])),
            pos_embed=str(rng.choice(["learned", "none"])),
        )
        m = init_random_model(cfg, i)
        g = build_graph(cfg, "heads-qkv" if i % 2 else "heads")
        x, xc = rng.integers(0, 7, (3, 5)), rng.integers(0, 7, (3, 5))
        cache = build_corrupt_cache(m, xc)
        full = run_subgraph(m, g, Subgraph.full(g), x, "corrupted", cache)
        empty = run_subgraph(m, g, Subgraph.empty(g), x, "corrupted", cache)
        worst = max(worst, np.max(np.abs(full - forward(m, x)[0])), np.max(np.abs(empty - forward(m, xc)[0])))
    assert worst <= 1e-9


def _logit_dataset(m, rng, n=2):
    x = rng.integers(0, m.config.vocab, (n, m.config.n_ctx))
    xc = rng.integers(0, m.config.vocab, (n, m.config.n_ctx))
    pos = np.tile(np.arange(m.config.n_ctx), (n, 1))
    correct = rng.integers(0, m.config.vocab, pos.shape)
    return TaskDataset(x, xc, pos, MetricSpec("logit_diff", correct=correct, incorrect=(correct + 1) % m.config.vocab))


def test_criterion_5_gradient_fidelity():
    rng = np.random.default_rng(5)
    worst = 0.0
    for layers in (1, 2):
        cfg = ModelConfig(layers, 2, 4, 2, d_mlp=3, vocab=5, n_ctx=4, norm="pre-layernorm")
        m = init_random_model(cfg, layers)
        ds = _logit_dataset(m, rng)
        for gran in ("heads", "heads-qkv"):
            g = build_graph(cfg, gran)
            values, grads = hisp_gradients(m, g, ds)
            for c, v in values.items():
                layer = int(c[1])
                kind = "mlp_out" if c.startswith("m") else (c.split(".")[2] if gran == "heads-qkv" else "head_out")
                head = None if c.startswith("m") else int(c.split(".")[1][1:])

                def F(a, c=c, kind=kind, layer=layer, head=head):
                    def hook(name, l, val):
                        if name != kind or l != layer:
                            return val
                        if head is None:
                            return a
                        val = val.copy()
                        val[head] = a
                        return val

                    out = forward(m, ds.clean, hook=hook)[0]
                    from circuitkit.metrics import eval_metric

                    return float(np.sum(eval_metric(ds.metric, out, None, ds.positions, per_example=True)))

                worst = max(worst, nx.relative_error(grads[c], nx.finite_diff_oracle(F, v.copy())))
            obj = SpObjective(m, g, ds, SpConfig(lam=0.2))
            alpha = rng.standard_normal(len(obj.components))
            u = rng.uniform(0.1, 0.9, len(alpha))
            _, ga = obj.value_and_grad(alpha, u)
            fd = nx.finite_diff_oracle(lambda a: float(nx.value_of(obj.loss(a, u))), alpha)
            worst = max(worst, nx.relative_error(ga, fd))
    assert worst <= 1e-4


@pytest.fixture(scope="module")
def induction_run(trained_induction):
    model, hist, train_seconds = trained_induction
    g = build_graph(model.config)
    discover, test = gen_dataset("induction", 80, 123), gen_dataset("induction", 80, 456)
    base = AcdcConfig(1.0, policy="ascending-heads")
    t0 = time.perf_counter()
    results = tau_sweep(model, g, discover, base, INDUCTION_TAUS)
    test_ev = SubgraphEvaluator(model, g, test)
    points = [(r.n_edges, test_ev(r.subgraph)) for r in results]
    return dict(
        model=model, graph=g, discover=discover, test=test, results=results, points=points,
        empty=test_ev(Subgraph.empty(g)), seconds=train_seconds + time.perf_counter() - t0,
    )


def test_criterion_6_induction_structure(induction_run):
    r = induction_run
    g, prop = r["graph"], InductionProperty()
    good = [
        (res.tau, n, kl)
        for res, (n, kl) in zip(r["results"], r["points"])
        if n <= 0.15 * g.n_edges and kl <= 0.10 * r["empty"] and prop.holds(res.subgraph)
    ]
    assert good, r["points"]
    assert r["seconds"] < 600


def test_criterion_7_reset_control(induction_run):
    r = induction_run
    model, g = r["model"], r["graph"]
    reset = reset_network(model, 0)
    ref_discover = forward(model, r["discover"].clean)[0]
    ref_test = forward(model, r["test"].clean)[0]
    base = AcdcConfig(1.0, policy="ascending-heads")
    reset_results = tau_sweep(reset, g, r["discover"], base, INDUCTION_TAUS, reference=ref_discover)
    ev = SubgraphEvaluator(reset, g, r["test"], reference=ref_test)
    reset_points = [(x.n_edges, ev(x.subgraph)) for x in reset_results]
    rows = [row for row in matched_edge_comparison(sparsity_frontier(r["points"]), reset_points) if row[2] is not None]
    assert rows
    assert all(v < other for _, v, other in rows), rows
    assert np.median([other / v for _, v, other in rows]) >= 1.5


def test_criterion_8_metric_suite():
    assert kl_divergence(np.log([[[0.5, 0.5]]]), np.log([[[0.25, 0.75]]]), np.zeros((1, 1), int)) == pytest.approx(0.14384, abs=1e-5)
    assert not removal_condition(RemovalCondition("direct", 0.25), 0.5, 0.75)
    assert removal_condition(RemovalCondition("direct", 0.05), 0.10, 0.12)
    # match-model and direct agree under KL, on a real run
    m, _ = build_reverse_model(4)
    g = build_graph(m.config)
    ds = gen_dataset("reverse", 20, 8).with_metric(MetricSpec("kl"))
    a = acdc_run(m, g, ds, AcdcConfig(0.01, removal="direct"))
    b = acdc_run(m, g, ds, AcdcConfig(0.01, removal="match-model"))
    assert [e.removed for e in a.log] == [e.removed for e in b.log]
    assert pessimistic_auc([(0, 0), (0, 1), (1, 1)]) == 1.0
    assert pessimistic_auc([(0, 0), (0.5, 0.5), (1, 1)]) == 0.25
    assert pessimistic_auc([(0, 0), (1, 1)]) == 0.0


def test_criterion_9_reproducibility(tmp_path, monkeypatch, trained_induction):
    monkeypatch.chdir(tmp_path)
    save_model(trained_induction[0], "ind.ctm")
    commands = [
        ["build-model", "--task", "reverse", "--out", "rev.ctm", "--circuit", "canon.json"],
        ["build-model", "--task", "or-gate", "--granularity", "heads", "--out", "or.ctm", "--circuit", "or.json"],
        ["gen-data", "--task", "reverse", "--n", "30", "--seed", "1", "--out", "rev_data.json"],
        ["gen-data", "--task", "or-gate", "--n", "1", "--seed", "0", "--out", "or_data.json"],
        ["gen-data", "--task", "induction", "--n", "20", "--seed", "3", "--out", "ind_data.json"],
        ["train", "--task", "induction", "--steps", "15", "--seed", "2", "--out", "small.ctm"],
        ["run", "acdc", "--model", "rev.ctm", "--data", "rev_data.json", "--tau", "0.0575", "--out", "c.json", "--log", "c.log", "--dot", "c.dot"],
        ["run", "acdc", "--model", "ind.ctm", "--data", "ind_data.json", "--task", "induction", "--tau", "0.5623", "--out", "ind_c.json", "--dot", "ind_c.dot"],
        ["run", "sp", "--model", "or.ctm", "--data", "or_data.json", "--granularity", "heads", "--ablation", "zero", "--lambda", "1", "--steps", "200", "--seed", "0", "--out", "sp.json", "--log", "sp.log", "--dot", "sp.dot"],
        ["run", "hisp", "--model", "or.ctm", "--data", "or_data.json", "--granularity", "heads", "--ablation", "zero", "--k", "1", "--out", "hisp.json", "--dot", "hisp.dot"],
        ["sweep", "acdc", "--model", "rev.ctm", "--data", "rev_data.json", "--ablation", "zero", "--taus", "0.001,0.01,0.1,1,10", "--out-dir", "sw"],
        ["sweep", "hisp", "--model", "rev.ctm", "--data", "rev_data.json", "--out-dir", "swh"],
        ["eval", "roc", "--model", "rev.ctm", "--circuits", "sw/circuit_000.json", "sw/circuit_003.json", "--canonical", "canon.json", "--out", "roc.csv"],
        ["eval", "auc", "--model", "rev.ctm", "--circuits", "sw/circuit_000.json", "sw/circuit_003.json", "--canonical", "canon.json", "--out", "auc.csv"],
        ["eval", "pareto", "--model", "rev.ctm", "--data", "rev_data.json", "--circuits", "swh/circuit_000.json", "swh/circuit_002.json", "--out", "pareto.csv"],
        ["eval", "reset", "--model", "ind.ctm", "--seed", "0", "--out", "reset.ctm"],
    ]
    manifests = []
    for argv in commands:
        assert main(argv) == 0, argv
    for argv in commands:
        out = argv[argv.index("--out") + 1] if "--out" in argv else f"{argv[argv.index('--out-dir') + 1]}/sweep.csv"
        man = RunManifest.load(manifest_path(out))
        snap = tmp_path / "snap" / str(len(manifests))
        snap.mkdir(parents=True)
        for i, o in enumerate(man.outputs):
            (snap / str(i)).write_bytes((tmp_path / o).read_bytes())
        manifests.append((manifest_path(out), man, snap))
    checked = 0
    for path, man, snap in manifests:
        assert main(["rerun", "--manifest", str(path)]) == 0, man.command
        for i, o in enumerate(man.outputs):
            assert filecmp.cmp(snap / str(i), tmp_path / o, shallow=False), (man.command, o)
            checked += 1
    assert checked >= len(commands)
