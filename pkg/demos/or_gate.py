"""Three discovery methods on a one-layer OR gate.

Two heads each write an input bit; the MLP computes 1 - relu(1 - x - y).
With both bits on, removing either head alone leaves the output at 1, so
greedy edge pruning can only see one of the two inputs matter.

    python3 demos/or_gate.py
"""
from circuitkit.acdc import AcdcConfig, acdc_run
from circuitkit.graph import build_graph
from circuitkit.maskers import SpConfig, hisp_layer_normalize, hisp_scores, hisp_topk_sweep, sp_finalize, sp_train
from circuitkit.zoo import build_or_gate_model, gen_dataset

model, canonical = build_or_gate_model(inputs=(1, 1))
graph = build_graph(model.config, "heads")
data = gen_dataset("or-gate", 1, seed=0)
print("canonical:", canonical.edge_strings("heads"))

res = acdc_run(model, graph, data, AcdcConfig(0.1, ablation="zero"))
print("ACDC keeps:", res.subgraph.edge_strings())
for e in res.log:
    print(f"  {e.edge:16s} {e.f_before:+.3f} -> {e.f_after:+.3f}  {'removed' if e.removed else 'kept'}")

table = hisp_layer_normalize(hisp_scores(model, graph, data, ablation="zero"))
print("HISP scores:", table.as_dict())
for k, (nodes, _) in zip((1, 2, 3), hisp_topk_sweep(table, graph, [1, 2, 3])):
    print(f"  top-{k}: {nodes}")

for seed in range(3):
    mask, hist = sp_train(model, graph, data, SpConfig(lam=1.0, ablation="zero", seed=seed))
    nodes, _ = sp_finalize(mask, graph)
    print(f"SP seed {seed}: {nodes}  final loss {hist[-1]:.3f}")
