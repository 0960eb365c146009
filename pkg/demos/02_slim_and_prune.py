"""Sparsity-regularized training, the global pruning plan, and the
physical rewrite, end to end on the toy backbone.

The interesting property to watch: channels whose gamma and beta reach
exactly zero can be deleted without changing the network function at
all. We force that situation here by zeroing the low-|gamma| channels
the plan selects, then check the eval outputs match to machine noise.

    python3 demos/02_slim_and_prune.py     (about a minute on CPU)
"""

import numpy as np

from slimforge import (accounting, autodiff as ad, detection, graph_ir,
                       residual_matching, slimming)

rng = np.random.default_rng(0)

# small classification proxy task: which shape class dominates the scene
scenes = detection.generate_scenes(48, seed=0, image_size=16)
batches = detection.scenes_to_class_batches(scenes, batch_size=12)

g = graph_ir.build_toy_backbone(width=4, groups=2, num_classes=3)
session = ad.Session(g, mode="train", seed=0)

# lambda large enough that unimportant gammas actually reach ~0 in a
# couple hundred epochs of L1 shrinkage
cfg = slimming.SlimConfig(lam=1e-2, schedule="slim_b", lr0=0.1,
                          epoch_max=200, target_prune_rate=0.4)
session, gammas, _ = slimming.train_slim(session, batches, cfg)

small = sum(int((np.abs(v) < 0.01).sum()) for v in gammas.values())
total = sum(len(v) for v in gammas.values())
print(f"after slim training: {small}/{total} gammas below 0.01")

# global plan: pool every |gamma|, cut at the target quantile
plan = slimming.global_prune_plan(gammas, cfg.target_prune_rate)
print(f"plan threshold {plan.threshold:.4f}, achieved rate "
      f"{plan.achieved_rate:.2f}")

# residual groups must share one mask (OR of the members) or the adds
# stop type-checking
plan = residual_matching.unify_plan(plan, g.residual_groups)

# zero out the doomed channels so the rewrite is exactly
# function-preserving, then compare outputs before/after
for nid, mask in plan.masks.items():
    drop = ~np.asarray(mask.keep)
    session.params[nid]["gamma"].data[drop] = 0.0
    session.params[nid]["beta"].data[drop] = 0.0

session.eval()
x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
ref = ad.forward(session, ad.Tensor(x))["fc"].data

pruned, pparams, remap = residual_matching.apply_plan(
    g, session.export_params(), plan)
got = ad.forward(ad.Session(pruned, pparams, mode="eval"),
                 ad.Tensor(x))["fc"].data

print(f"max output deviation after physical pruning: "
      f"{np.abs(got - ref).max():.2e}")

before = accounting.cost(g, (16, 16))
after = accounting.cost(pruned, (16, 16))
print(f"params {before.total_params:,} -> {after.total_params:,}, "
      f"FLOPS {before.total_flops / 1e6:.2f}M -> "
      f"{after.total_flops / 1e6:.2f}M")
