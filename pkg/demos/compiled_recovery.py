"""Exact recovery on hand-compiled models.

The reverse and x-proportion models are built weight by weight, so the edges
they use are known. Zero-ablation ACDC over a range of thresholds should
return exactly that edge set every time, giving a perfect ROC.

    python3 demos/compiled_recovery.py
"""
import numpy as np

from circuitkit.acdc import AcdcConfig, log_sweep, tau_sweep
from circuitkit.evaluation import pessimistic_auc, roc_curve
from circuitkit.graph import build_graph
from circuitkit.model import forward
from circuitkit.zoo import build_reverse_model, build_xproportion_model, encode_xproportion, gen_dataset

m, canon = build_reverse_model(4)
print("reverse [0,3,2,1] ->", forward(m, np.array([[0, 3, 2, 1]]))[0].argmax(-1)[0].tolist())
m2, _ = build_xproportion_model(4)
print("xproportion a x b x ->", np.round(forward(m2, encode_xproportion("axbx"))[0][0, :, 0], 3).tolist())

taus = log_sweep(1e-5, 1e-1, 8)
for task, build in (("reverse", build_reverse_model), ("xproportion", build_xproportion_model)):
    model, canonical = build(4)
    graph = build_graph(model.config)
    data = gen_dataset(task, 40, seed=0)
    results = tau_sweep(model, graph, data, AcdcConfig(1.0, ablation="zero"), taus)
    truth = canonical.subgraph(graph)
    exact = [r.subgraph == truth for r in results]
    auc = pessimistic_auc(roc_curve([r.subgraph for r in results], canonical))
    print(f"{task}: {graph.n_edges} edges, canonical {truth.n_edges}; exact at {sum(exact)}/{len(exact)} taus; AUC {auc}")
    print("  ", truth.edge_strings())
