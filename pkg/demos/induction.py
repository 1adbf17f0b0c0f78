"""Train the small induction model, sweep ACDC, compare with a reset network.

Takes a couple of minutes on one core.

    python3 demos/induction.py [--steps 2000] [--seed 0]
"""
import argparse
import time

import numpy as np

from circuitkit.acdc import AcdcConfig, tau_sweep
from circuitkit.evaluation import matched_edge_comparison, reset_network, sparsity_frontier
from circuitkit.graph import Subgraph, build_graph
from circuitkit.model import forward
from circuitkit.patching import SubgraphEvaluator
from circuitkit.zoo import InductionProperty, TrainConfig, gen_dataset, train_induction

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

t0 = time.perf_counter()
hist = []
model = train_induction(TrainConfig(steps=args.steps, seed=args.seed), hist)
print(f"trained in {time.perf_counter() - t0:.0f}s; loss {np.mean(hist[:20]):.2f} -> {np.mean(hist[-50:]):.2f}")

graph = build_graph(model.config)
discover, test = gen_dataset("induction", 80, 123), gen_dataset("induction", 80, 456)
taus = np.logspace(-2, -0.5, 9)
base = AcdcConfig(1.0, policy="ascending-heads")
results = tau_sweep(model, graph, discover, base, taus)
ev = SubgraphEvaluator(model, graph, test)
empty = ev(Subgraph.empty(graph))
prop = InductionProperty()
print(f"{graph.n_edges} edges; empty-circuit test KL {empty:.3f}")
points = []
for tau, r in zip(taus, results):
    kl = ev(r.subgraph)
    points.append((r.n_edges, kl))
    comp = prop.composing_edges(r.subgraph)
    print(f"  tau {tau:.4f}: {r.n_edges:3d} edges ({r.n_edges / graph.n_edges:.1%}), test KL {kl:.4f} ({kl / empty:.1%}), {len(comp)} composing k/v edges")

reset = reset_network(model, 0)
ref_d, ref_t = forward(model, discover.clean)[0], forward(model, test.clean)[0]
reset_res = tau_sweep(reset, graph, discover, base, taus, reference=ref_d)
rev = SubgraphEvaluator(reset, graph, test, reference=ref_t)
reset_points = [(r.n_edges, rev(r.subgraph)) for r in reset_res]
print("matched edge counts (edges, trained KL, best reset KL with no more edges):")
for e, v, o in matched_edge_comparison(sparsity_frontier(points), reset_points):
    print(f"  {e:3d}  {v:.4f}  {'-' if o is None else f'{o:.4f} (x{o / v:.1f})'}")
