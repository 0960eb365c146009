"""Fixed prune-rate channel deletion for detection-branch layers, applied
before training (branch layers are randomly re-initialized afterwards).
"""

from __future__ import annotations

import numpy as np

from . import autodiff
from .graph_ir import GraphError, ModelGraph, out_channels, validate

BRANCH_ROLES = {"extras", "resblock", "cls", "loc"}


def _is_prunable(node, scope):
    if node.kind != "conv":
        return False
    if node.role == "extras":
        return True
    if node.role == "resblock" and scope == "all":
        # internal resblock convs only; the expand conv tracks the add input
        return not node.attrs.get("is_block_output")
    return False


def fixed_prune_branches(graph: ModelGraph, rate: float,
                         scope: str = "all") -> ModelGraph:
    """Shrink branch conv widths to max(1, round(out * (1 - rate))),
    round-half-up. cls/loc and ResBlock output widths are never touched;
    input channels follow the producers transitively.

    scope: "all" prunes extras convs plus internal ResBlock convs,
    "extras" restricts to extras convs.
    """
    if not 0 <= rate < 1:
        raise GraphError(f"rate must be in [0, 1), got {rate}")
    if scope not in ("all", "extras"):
        raise GraphError(f"unknown scope {scope!r}")
    g = graph.copy()
    for node in g.nodes.values():
        if _is_prunable(node, scope):
            kept = int(node.attrs["out_channels"] * (1.0 - rate) + 0.5)
            node.attrs["out_channels"] = max(1, kept)

    # propagate widths: in_channels from producers; resblock expand convs
    # must match the skip side of their add so the residual stays legal
    cache = {}
    for nid in g.order:
        node = g.nodes[nid]
        if node.kind == "conv":
            if node.attrs.get("is_block_output"):
                adds = [g.nodes[c] for c in g.consumers(nid)] + \
                       [g.nodes[c2] for c in g.consumers(nid)
                        for c2 in g.consumers(c)]
                add_node = next(a for a in adds if a.kind == "add")
                skip = [i for i in add_node.inputs
                        if i != nid and g.nodes[i].kind != "batchnorm"][0]
                node.attrs["out_channels"] = out_channels(g, skip, cache)
            node.attrs["in_channels"] = out_channels(g, node.inputs[0], cache)
            cache.pop(nid, None)
        elif node.kind == "batchnorm":
            node.attrs["channels"] = out_channels(g, node.inputs[0], cache)
            cache.pop(nid, None)
        elif node.kind == "fc":
            node.attrs["in_features"] = out_channels(g, node.inputs[0], cache)
    violations = validate(g)
    if violations:
        raise GraphError("branch-pruned graph invalid: " + "; ".join(violations))
    return g


def reinitialize_branches(parameters: dict, graph: ModelGraph, seed: int) -> dict:
    """Redraw branch-layer parameters (He fan-in normal for convs, zero
    bias, fresh BN) at the graph's current shapes; backbone untouched."""
    fresh = autodiff.init_params(graph, seed=seed)
    out = {}
    for nid, group in parameters.items():
        if nid in graph.nodes and graph.nodes[nid].role in BRANCH_ROLES:
            out[nid] = fresh[nid]
        else:
            out[nid] = {k: np.asarray(v).copy() for k, v in group.items()}
    # branch nodes with no previous entry (fresh graph) still need params
    for nid, node in graph.nodes.items():
        if node.role in BRANCH_ROLES and nid not in out and nid in fresh:
            out[nid] = fresh[nid]
    # zero-init the block-output BN scale so each branch ResBlock starts
    # as an identity; without this the freshly drawn block output can
    # swamp the skip path and push the whole branch into dead ReLUs
    for nid, node in graph.nodes.items():
        if (node.kind == "batchnorm" and node.role in BRANCH_ROLES
                and graph.nodes[node.inputs[0]].attrs.get("is_block_output")):
            out[nid]["gamma"] = np.zeros_like(out[nid]["gamma"])
    return out
