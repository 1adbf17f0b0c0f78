"""Command-line pipeline: build or train a model, generate paired data,
discover circuits, score them. Every command writes a run manifest next to
its primary output; ``rerun --manifest`` replays it.

Exit status: 0 success, 1 usage error, 2 runtime error. Errors are printed
as one line: ``error: <Kind>: <message>``.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits


from . import acdc as acdc_mod
from . import maskers
from .errors import CircuitKitError, UsageError
from .evaluation import pessimistic_auc, reset_network, roc_curve, sparsity_curve
from .fileio import (
    RunManifest, export_dot, load_circuit, load_dataset, manifest_path, read_json, save_circuit,
    save_dataset, save_run_log, sha256_file, write_csv, write_json,
)
from .graph import GRANULARITIES, POLICIES, build_graph
from .metrics import KINDS, REMOVAL_MODES, MetricSpec
from .model import forward, load_model, save_model
from .patching import ABLATIONS, SubgraphEvaluator
from .zoo import TASKS, TrainConfig, build_task_model, gen_dataset, train_induction

METRIC_FLAGS = {k.replace("_", "-"): k for k in KINDS}


@dataclass
class Run:
    outputs: list[str]
    inputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError("empty value list")
    return vals


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


# ---------------------------------------------------------------------------
# shared loading


def _model_graph(args):
    model = load_model(args.model)
    return model, build_graph(model.config, args.granularity)


def _dataset(args):
    ds = load_dataset(args.data)
    if getattr(args, "metric", None):
        m = ds.metric
        ds = ds.with_metric(MetricSpec(METRIC_FLAGS[args.metric], m.correct, m.incorrect, m.targets))
    return ds


def _reference(args, ds):
    if not getattr(args, "reference_model", None):
        return None
    ref = load_model(args.reference_model)
    return forward(ref, ds.clean)[0]


def _policy(args, ds):
    if args.policy:
        return args.policy
    task = args.task or ds.task
    return "ascending-heads" if task == "induction" else "default"


def _acdc_scores(result) -> dict:
    return {e.edge: abs(e.f_after - e.f_before) for e in result.log if not e.removed}


def _inputs(args, *names) -> list[str]:
    out = []
    for n in names:
        v = getattr(args, n, None)
        if isinstance(v, list):
            out += v
        elif v:
            out.append(v)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_build_model(args) -> Run:
    model, circuit = build_task_model(args.task, args.length, args.vocab)
    save_model(model, args.out)
    outs = [args.out]
    if args.circuit:
        save_circuit(args.circuit, build_graph(model.config, args.granularity), circuit)
        outs.append(args.circuit)
    return Run(outs, config={"task": args.task, "length": args.length, "vocab": args.vocab})


def cmd_gen_data(args) -> Run:
    ds = gen_dataset(args.task, args.n, args.seed, args.length, args.vocab)
    save_dataset(args.out, ds)
    return Run([args.out], config={"task": args.task, "n": args.n}, seeds={"data": args.seed})


def cmd_train(args) -> Run:
    if args.task != "induction":
        raise UsageError("only the induction task is trained")
    overrides = read_json(args.config) if args.config else {}
    overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    try:
        cfg = TrainConfig(**overrides)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from None
    save_model(train_induction(cfg), args.out)
    return Run([args.out], _inputs(args, "config"), cfg.to_dict(), {"train": args.seed})


def _run_acdc(args, model, graph, ds, tau):
    cfg = acdc_mod.AcdcConfig(
        tau, ablation=args.ablation, policy=_policy(args, ds), removal=args.removal,
        prune_disconnected=args.prune,
    )
    return acdc_mod.acdc_run(model, graph, ds, cfg, reference=_reference(args, ds)), cfg


def _run_sp(args, model, graph, ds, lam):
    cfg = maskers.SpConfig(lam=lam, steps=args.steps, lr=args.lr, seed=args.seed, ablation=args.ablation, alpha_init=args.alpha_init)
    mask, hist = maskers.sp_train(model, graph, ds, cfg)
    nodes, H = maskers.sp_finalize(mask, graph)
    return H, {"mask": mask.to_dict(), "nodes": nodes, "loss": hist}


def cmd_run(args) -> Run:
    model, graph = _model_graph(args)
    ds = _dataset(args)
    cfg = {"method": args.method, "granularity": args.granularity, "ablation": args.ablation, "metric": ds.metric.kind}
    seeds = {}
    if args.method == "acdc":
        if args.tau is None:
            raise UsageError("run acdc needs --tau")
        res, acfg = _run_acdc(args, model, graph, ds, args.tau)
        H, scores = res.subgraph, _acdc_scores(res)
        cfg.update(tau=args.tau, policy=acfg.policy, removal=acfg.removal, prune=acfg.prune)
        if args.log:
            save_run_log(args.log, res)
    elif args.method == "sp":
        if args.lam is None or args.seed is None:
            raise UsageError("run sp needs --lambda and --seed")
        H, info = _run_sp(args, model, graph, ds, args.lam)
        scores = None
        cfg.update(lam=args.lam, steps=args.steps, lr=args.lr, alpha_init=args.alpha_init)
        seeds["sp"] = args.seed
        if args.log:
            write_json(args.log, info)
    else:
        if args.k is None:
            raise UsageError("run hisp needs --k")
        table = maskers.hisp_layer_normalize(maskers.hisp_scores(model, graph, ds, ablation=args.ablation))
        nodes, H = maskers.hisp_topk_sweep(table, graph, [args.k])[0]
        scores = None
        cfg.update(k=args.k)
        if args.log:
            write_json(args.log, {"scores": table.to_dict(), "nodes": nodes})
    save_circuit(args.out, graph, H)
    outs = [args.out] + [p for p in (args.log, args.dot) if p]
    if args.dot:
        Path(args.dot).write_text(export_dot(graph, H, scores))
    return Run(outs, _inputs(args, "model", "data", "reference_model"), cfg, seeds)


def cmd_sweep(args) -> Run:
    model, graph = _model_graph(args)
    ds = _dataset(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = SubgraphEvaluator(model, graph, ds, None, args.ablation, _reference(args, ds))
    rows, outs, seeds = [], [], {}
    if args.method == "acdc":
        if not args.taus:
            raise UsageError("sweep acdc needs --taus")
        params = args.taus
        base = acdc_mod.AcdcConfig(params[0], ablation=args.ablation, policy=_policy(args, ds), removal=args.removal, prune_disconnected=args.prune)
        results = [r.subgraph for r in acdc_mod.tau_sweep(model, graph, ds, base, params, _reference(args, ds))]
    elif args.method == "sp":
        if not args.lambdas or args.seed is None:
            raise UsageError("sweep sp needs --lambdas and --seed")
        params = args.lambdas
        results = [_run_sp(args, model, graph, ds, lam)[0] for lam in params]
        seeds["sp"] = args.seed
    else:
        table = maskers.hisp_layer_normalize(maskers.hisp_scores(model, graph, ds, ablation=args.ablation))
        params = args.ks if args.ks else list(range(len(table.components) + 1))
        results = [H for _, H in maskers.hisp_topk_sweep(table, graph, params)]
    for i, (p, H) in enumerate(zip(params, results)):
        path = out_dir / f"circuit_{i:03d}.json"
        save_circuit(path, graph, H)
        outs.append(str(path))
        rows.append((p, H.n_edges, ev(H)))
    summary = out_dir / "sweep.csv"
    write_csv(summary, ["param", "edges", "metric"], rows)
    cfg = {"method": args.method, "params": list(params), "granularity": args.granularity, "ablation": args.ablation}
    return Run([str(summary)] + outs, _inputs(args, "model", "data", "reference_model"), cfg, seeds)


def _load_results(args, graph):
    return [load_circuit(p, graph) for p in args.circuits]


def cmd_eval(args) -> Run:
    if args.what == "reset":
        if args.seed is None:
            raise UsageError("eval reset needs --seed")
        save_model(reset_network(load_model(args.model), args.seed), args.out)
        return Run([args.out], _inputs(args, "model"), {"what": "reset"}, {"reset": args.seed})
    if not args.circuits:
        raise UsageError(f"eval {args.what} needs --circuits")
    model, graph = _model_graph(args)
    results = _load_results(args, graph)
    inputs = _inputs(args, "model", "circuits", "canonical", "data", "reference_model")
    if args.what in ("roc", "auc"):
        if not args.canonical:
            raise UsageError(f"eval {args.what} needs --canonical")
        canon = load_circuit(args.canonical, graph)
        params = args.params if args.params else list(range(len(results)))
        if len(params) != len(results):
            raise UsageError("--params must match the number of circuits")
        curve = roc_curve(results, canon, args.level, params)
        if args.what == "roc":
            first = {}
            for f, t, p in curve.raw:
                first.setdefault((f, t), p)
            write_csv(args.out, ["param", "fpr", "tpr"], [(first.get(pt), pt[0], pt[1]) for pt in curve.points])
        else:
            write_csv(args.out, ["level", "n_results", "auc"], [(args.level, len(results), pessimistic_auc(curve))])
        return Run([args.out], inputs, {"what": args.what, "level": args.level})
    # pareto: held-out metric against edge count
    if not args.data:
        raise UsageError("eval pareto needs --data (held-out)")
    ds = _dataset(args)
    _, frontier = sparsity_curve(results, ds, model, graph, None, args.ablation, _reference(args, ds))
    write_csv(args.out, ["edges", "metric"], frontier)
    return Run([args.out], inputs, {"what": "pareto", "ablation": args.ablation})


def cmd_rerun(args) -> Run:
    man = RunManifest.load(args.manifest)
    man.check_inputs()
    cwd = man.config.get("cwd")
    with _chdir(cwd):
        status = main(man.command)
    if status != 0:
        raise CircuitKitError(f"replayed command exited with status {status}")
    return Run([], [args.manifest], {"replayed": man.command})


@contextmanager
def _chdir(path):
    old = os.getcwd()
    if path:
        os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


# ---------------------------------------------------------------------------
# parser


def _add_common(p, data=True):
    p.add_argument("--model", required=True)
    if data:
        p.add_argument("--data", required=True)
    p.add_argument("--granularity", choices=GRANULARITIES, default="heads-qkv")
    p.add_argument("--metric", choices=sorted(METRIC_FLAGS))
    p.add_argument("--ablation", choices=ABLATIONS, default="corrupted")
    p.add_argument("--reference-model", help="score against this model's clean outputs (reset-network control)")


def _add_method_opts(p):
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--removal", choices=REMOVAL_MODES, default="direct")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prune", dest="prune", action="store_true", default=None)
    g.add_argument("--no-prune", dest="prune", action="store_false")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--alpha-init", type=float, default=1.0)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="circuitkit", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS threads used by numpy kernels")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-model", help="write a hand-compiled model (and its canonical circuit)")
    p.add_argument("--task", choices=[t for t in TASKS if t != "induction"], required=True)
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--vocab", type=int, default=4)
    p.add_argument("--granularity", choices=GRANULARITIES, default="heads-qkv")
    p.add_argument("--circuit", help="also write the canonical circuit JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_model)

    p = sub.add_parser("gen-data", help="generate a paired clean/corrupted dataset")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--length", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train the induction model")
    p.add_argument("--task", choices=["induction"], required=True)
    p.add_argument("--config", help="JSON of training-config overrides")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("run", help="discover one circuit")
    p.add_argument("method", choices=["acdc", "sp", "hisp"])
    _add_common(p)
    _add_method_opts(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--dot")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("sweep", help="discover circuits over a list of hyperparameters")
    p.add_argument("method", choices=["acdc", "sp", "hisp"])
    _add_common(p)
    _add_method_opts(p)
    p.add_argument("--taus", type=_floats)
    p.add_argument("--lambdas", type=_floats)
    p.add_argument("--ks", type=_ints)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("eval", help="score circuits (roc, auc, pareto) or build a reset network")
    p.add_argument("what", choices=["roc", "auc", "pareto", "reset"])
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--circuits", nargs="+")
    p.add_argument("--params", type=_floats)
    p.add_argument("--canonical")
    p.add_argument("--level", choices=["edge", "node"], default="edge")
    p.add_argument("--granularity", choices=GRANULARITIES, default="heads-qkv")
    p.add_argument("--metric", choices=sorted(METRIC_FLAGS))
    p.add_argument("--ablation", choices=ABLATIONS, default="corrupted")
    p.add_argument("--reference-model")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("rerun", help="replay a command from its run manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(handler=cmd_rerun)
    return parser


def _fail(kind: str, exc: BaseException) -> None:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        t0 = time.perf_counter()
        with threadpool_limits(limits=args.threads):
            run = args.handler(args)
        if args.command != "rerun":
            cfg = dict(run.config, cwd=os.getcwd(), threads=args.threads)
            inputs = {p: sha256_file(p) for p in run.inputs}
            RunManifest(argv, cfg, run.seeds, inputs, run.outputs, time.perf_counter() - t0).save(manifest_path(run.outputs[0]))
        return 0
    except UsageError as exc:
        _fail("UsageError", exc)
        return 1
    except (CircuitKitError, OSError, ValueError, KeyError) as exc:
        _fail(type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
