"""Unified-mask channel matching across residual groups and the physical
channel-removal rewrite.

Blocks whose outputs meet at an add node must share one mask; the unified
mask is the elementwise OR of the member masks (a channel survives if any
block keeps it). `apply_plan` then drops pruned output channels of each
conv+BN pair and the matching input slices of every consumer.
"""

from __future__ import annotations

import copy

import numpy as np

from .graph_ir import ChannelMask, GraphError, ModelGraph, out_channels, validate
from .slimming import PruningPlan


def unify_group_masks(plan: PruningPlan, group) -> ChannelMask:
    """OR the masks of a residual group's output BNs (and downsample BN,
    when present) and write the result back for every member. Returns the
    unified mask. Mutates `plan`; use `unify_plan` for a pure version."""
    members = list(group.block_output_bn_ids)
    if group.downsample_bn_id is not None:
        members.append(group.downsample_bn_id)
    masks = [plan.masks[m].keep for m in members]
    lengths = {len(m) for m in masks}
    if len(lengths) != 1:
        raise ValueError(
            f"group {group.group_index}: mask lengths differ: {sorted(lengths)}")
    unified = [any(bits) for bits in zip(*masks)]
    for m in members:
        plan.masks[m] = ChannelMask(m, list(unified))
    return ChannelMask(f"group{group.group_index}", unified)


def unify_plan(plan: PruningPlan, groups) -> PruningPlan:
    out = copy.deepcopy(plan)
    for group in groups:
        unify_group_masks(out, group)
    return out


def disable_matching(plan: PruningPlan, groups) -> PruningPlan:
    """Baseline without channel matching: residual-group output channels
    are kept unpruned (masks forced to all-ones); inner masks untouched."""
    out = copy.deepcopy(plan)
    for group in groups:
        members = list(group.block_output_bn_ids)
        if group.downsample_bn_id is not None:
            members.append(group.downsample_bn_id)
        for m in members:
            out.masks[m] = ChannelMask(m, [True] * len(out.masks[m].keep))
    total = sum(len(m.keep) for m in out.masks.values())
    pruned = sum(len(m.keep) - m.n_kept for m in out.masks.values())
    out.achieved_rate = pruned / total if total else 0.0
    return out


def _keep_indices(mask: ChannelMask):
    idx = np.flatnonzero(np.asarray(mask.keep, dtype=bool))
    if idx.size == 0:
        raise ValueError(f"{mask.layer_id}: mask keeps zero channels")
    return idx


def apply_plan(graph: ModelGraph, parameters: dict, plan: PruningPlan):
    """Physically remove pruned channels.

    Returns (pruned graph, pruned parameters, remap) where remap maps node
    id -> list of kept original output-channel indices. Group masks must
    already be unified; an add node whose inputs disagree is rejected.
    """
    g = graph.copy()
    params = {nid: {k: np.asarray(v).copy() for k, v in grp.items()}
              for nid, grp in parameters.items()}
    cache = {}

    # masks attach to BN layers; the producing conv shares the BN's mask
    conv_keep = {}
    for bn_id, mask in plan.masks.items():
        if bn_id not in g.nodes:
            raise ValueError(f"plan references unknown BN {bn_id!r}")
        bn = g.nodes[bn_id]
        if bn.kind != "batchnorm":
            raise ValueError(f"plan mask on non-BN node {bn_id!r}")
        if len(mask.keep) != bn.attrs["channels"]:
            raise ValueError(
                f"{bn_id}: mask length {len(mask.keep)} != channels {bn.attrs['channels']}")
        producer = g.nodes[bn.inputs[0]]
        if producer.kind == "conv":
            conv_keep[producer.id] = _keep_indices(mask)

    keep = {}
    for nid in g.order:
        node = g.nodes[nid]
        k = node.kind
        if k == "input":
            keep[nid] = np.arange(node.attrs["channels"])
        elif k == "conv":
            in_keep = keep[node.inputs[0]]
            out_keep = conv_keep.get(nid,
                                     np.arange(node.attrs["out_channels"]))
            w = params[nid]["weight"]
            params[nid]["weight"] = w[out_keep][:, _relative(in_keep, w.shape[1], node, graph, cache)]
            if "bias" in params[nid]:
                params[nid]["bias"] = params[nid]["bias"][out_keep]
            node.attrs["in_channels"] = len(in_keep)
            node.attrs["out_channels"] = len(out_keep)
            keep[nid] = out_keep
        elif k == "batchnorm":
            out_keep = keep[node.inputs[0]]
            if nid in plan.masks:
                mask_keep = _keep_indices(plan.masks[nid])
                if not np.array_equal(mask_keep, out_keep):
                    raise ValueError(
                        f"{nid}: BN mask disagrees with producer pruning")
            for name in ("gamma", "beta", "running_mean", "running_var"):
                params[nid][name] = params[nid][name][out_keep]
            node.attrs["channels"] = len(out_keep)
            keep[nid] = out_keep
        elif k == "add":
            k0, k1 = keep[node.inputs[0]], keep[node.inputs[1]]
            if not np.array_equal(k0, k1):
                raise ValueError(
                    f"{nid}: add inputs keep different channels; "
                    "group masks not unified")
            keep[nid] = k0
        elif k == "concat":
            offsets = np.cumsum(
                [0] + [out_channels(graph, i, cache) for i in node.inputs])
            keep[nid] = np.concatenate(
                [keep[i] + off for i, off in zip(node.inputs, offsets)])
        elif k == "fc":
            in_keep = keep[node.inputs[0]]
            params[nid]["weight"] = params[nid]["weight"][in_keep, :]
            node.attrs["in_features"] = len(in_keep)
            keep[nid] = np.arange(node.attrs["out_features"])
        else:  # relu, pools, softmax, output: passthrough
            keep[nid] = keep[node.inputs[0]]

    violations = validate(g)
    if violations:
        raise GraphError("pruned graph invalid: " + "; ".join(violations))
    remap = {nid: idx.tolist() for nid, idx in keep.items()}
    return g, params, remap


def _relative(in_keep, current_cin, node, original_graph, cache):
    """Input-channel slice for a conv whose producer was pruned. in_keep
    holds original producer indices; conv weights are indexed by original
    input channel position, so the indices are used directly."""
    if current_cin != out_channels(original_graph, node.inputs[0], cache):
        raise ValueError(
            f"{node.id}: weight in-channels {current_cin} do not match graph")
    return in_keep


def remap_to_text(remap: dict) -> str:
    lines = [f"{nid} {','.join(map(str, idx))}" for nid, idx in sorted(remap.items())]
    return "\n".join(lines) + "\n"
