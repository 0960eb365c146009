"""slimforge command line: cost, slim-train, plan, prune, branch-prune,
train, distill-train, pipeline, report."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import (accounting, autodiff as ad, blobio, branch_prune, detection,
               graph_ir, harness, residual_matching, slimming)


def _load_graph(path):
    with open(path) as f:
        return graph_ir.deserialize(f.read())


def _load_params(path):
    return blobio.unflatten_params(blobio.load_blob(path))


def _parse_hw(text):
    h, _, w = text.partition("x")
    return int(h), int(w)


def cmd_cost(args):
    g = _load_graph(args.graph)
    rep = accounting.cost(g, _parse_hw(args.input))
    sys.stdout.write(accounting.report_csv(rep, g))


def _training_setup(args):
    config = harness.load_config(args.config)
    if args.seed is not None:
        config.set("data", "seed", str(args.seed))
    return config


def cmd_slim_train(args):
    config = _training_setup(args)
    seed = config.getint("data", "seed")
    size = config.getint("data", "image_size")
    scenes = detection.generate_scenes(config.getint("data", "train_scenes"),
                                       seed, image_size=size)
    backbone = graph_ir.build_toy_backbone(config.getint("backbone", "width"),
                                           config.getint("backbone", "groups"),
                                           num_classes=detection.NUM_SHAPE_CLASSES)
    cfg = slimming.SlimConfig(lam=config.getfloat("slim", "lambda"),
                              schedule=config.get("slim", "schedule"),
                              lr0=config.getfloat("slim", "lr0"),
                              epoch_max=config.getint("slim", "epochs"),
                              target_prune_rate=config.getfloat("slim", "target_prune_rate"))
    batches = detection.scenes_to_class_batches(scenes, config.getint("data", "batch_size"))
    session = ad.Session(backbone, mode="train", seed=seed)
    session, gammas, _ = slimming.train_slim(session, batches, cfg)
    with open(args.graph_out, "w") as f:
        f.write(graph_ir.serialize(backbone))
    blobio.save_blob(blobio.flatten_params(session.export_params()), args.params_out)
    blobio.save_blob({k: v for k, v in gammas.items()}, args.gammas_out)
    print(f"slim-trained backbone written to {args.graph_out}")


def cmd_plan(args):
    gammas = blobio.load_blob(args.gammas)
    plan = slimming.global_prune_plan(gammas, args.rate,
                                      protected=set(args.protect or ()))
    if args.graph:
        g = _load_graph(args.graph)
        plan = residual_matching.unify_plan(plan, g.residual_groups)
    with open(args.out, "w") as f:
        f.write(slimming.plan_to_text(plan))
    print(f"plan written to {args.out} (achieved rate {plan.achieved_rate:.3f})")


def cmd_prune(args):
    g = _load_graph(args.graph)
    params = _load_params(args.params)
    with open(args.plan) as f:
        plan = slimming.plan_from_text(f.read())
    if args.match:
        plan = residual_matching.unify_plan(plan, g.residual_groups)
    else:
        plan = residual_matching.disable_matching(plan, g.residual_groups)
    pruned, pparams, remap = residual_matching.apply_plan(g, params, plan)
    with open(args.graph_out, "w") as f:
        f.write(graph_ir.serialize(pruned))
    blobio.save_blob(blobio.flatten_params(pparams), args.params_out)
    with open(args.remap_out, "w") as f:
        f.write(residual_matching.remap_to_text(remap))
    print(f"pruned graph written to {args.graph_out}")


def cmd_branch_prune(args):
    g = _load_graph(args.graph)
    pruned = branch_prune.fixed_prune_branches(g, args.rate, scope=args.scope)
    params = _load_params(args.params) if args.params else {}
    params = branch_prune.reinitialize_branches(
        harness.assemble_params(pruned, params, args.seed or 0),
        pruned, args.seed or 0)
    with open(args.graph_out, "w") as f:
        f.write(graph_ir.serialize(pruned))
    blobio.save_blob(blobio.flatten_params(params), args.params_out)
    print(f"branch-pruned graph written to {args.graph_out}")


def _run_variants(args, variants):
    config = _training_setup(args)
    result = harness.run_pipeline(config, args.out,
                                  seed=config.getint("data", "seed"),
                                  variants=variants)
    for name, acc in sorted(result.accuracies.items()):
        print(f"{name}: accuracy={acc:.3f} "
              f"capacity={result.capacities[name]:.3f}MB "
              f"flops={result.flops[name]}")


def cmd_train(args):
    _run_variants(args, ("+P", "+P+R"))


def cmd_distill_train(args):
    _run_variants(args, ("teacher", "+P+R+KD"))


def cmd_pipeline(args):
    _run_variants(args, ("teacher", "+P", "+P+R", "+P+R+KD"))


def cmd_report(args):
    sys.stdout.write(harness.report_from_dir(args.run_dir))


def build_parser():
    p = argparse.ArgumentParser(prog="slimforge")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cost", help="parameter/FLOPS accounting of a graph file")
    c.add_argument("graph")
    c.add_argument("--input", default="300x300", help="input size, e.g. 300x300")
    c.set_defaults(func=cmd_cost)

    def training_args(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)

    c = sub.add_parser("slim-train", help="sparsity-regularized backbone training")
    training_args(c)
    c.add_argument("--graph-out", default="backbone.graph.json")
    c.add_argument("--params-out", default="backbone.params.bin")
    c.add_argument("--gammas-out", default="gammas.bin")
    c.set_defaults(func=cmd_slim_train)

    c = sub.add_parser("plan", help="global pruning plan from trained gammas")
    c.add_argument("gammas")
    c.add_argument("--rate", type=float, required=True)
    c.add_argument("--protect", nargs="*", default=None)
    c.add_argument("--graph", default=None,
                   help="graph file; when given, group masks are unified")
    c.add_argument("--out", default="plan.txt")
    c.set_defaults(func=cmd_plan)

    c = sub.add_parser("prune", help="apply a pruning plan to graph + params")
    c.add_argument("graph")
    c.add_argument("params")
    c.add_argument("plan")
    m = c.add_mutually_exclusive_group()
    m.add_argument("--match", dest="match", action="store_true", default=True)
    m.add_argument("--no-match", dest="match", action="store_false")
    c.add_argument("--graph-out", default="pruned.graph.json")
    c.add_argument("--params-out", default="pruned.params.bin")
    c.add_argument("--remap-out", default="remap.txt")
    c.set_defaults(func=cmd_prune)

    c = sub.add_parser("branch-prune", help="fixed-rate branch channel deletion")
    c.add_argument("graph")
    c.add_argument("--params", default=None)
    c.add_argument("--rate", type=float, required=True)
    c.add_argument("--scope", choices=("all", "extras"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--graph-out", default="branch_pruned.graph.json")
    c.add_argument("--params-out", default="branch_pruned.params.bin")
    c.set_defaults(func=cmd_branch_prune)

    for name, fn in (("train", cmd_train), ("distill-train", cmd_distill_train),
                     ("pipeline", cmd_pipeline)):
        c = sub.add_parser(name)
        training_args(c)
        c.add_argument("--out", default="runs/latest")
        c.set_defaults(func=fn)

    c = sub.add_parser("report", help="comparison table for a run directory")
    c.add_argument("run_dir")
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except harness.StageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:
        print(f"[{args.command}] {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
