"""Parameter counts, fp32 capacity (MiB) and FLOPS of a ModelGraph.

FLOPS convention: one multiply-accumulate counts as two operations
(multiplies plus adds). Elementwise layers (BN, ReLU, add, pooling,
softmax) are included in total_flops but also reported separately so a
conv/fc-only figure can be read off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import graph_ir
from .graph_ir import ModelGraph, out_channels, spatial_sizes


@dataclass
class CostReport:
    per_node: dict = field(default_factory=dict)  # id -> {"params": int, "flops": int}
    total_params: int = 0
    capacity_mb: float = 0.0
    total_flops: int = 0
    conv_fc_flops: int = 0
    elementwise_flops: int = 0


def _node_params(node, cin):
    k = node.kind
    if k == "conv":
        p = node.attrs["kernel"] ** 2 * cin * node.attrs["out_channels"]
        if node.attrs.get("has_bias"):
            p += node.attrs["out_channels"]
        return p
    if k == "batchnorm":
        # gamma, beta, running mean, running var are all stored fp32
        return 4 * node.attrs["channels"]
    if k == "fc":
        p = node.attrs["in_features"] * node.attrs["out_features"]
        if node.attrs.get("has_bias"):
            p += node.attrs["out_features"]
        return p
    return 0


def _node_flops(node, cin, cout, hw_in, hw_out):
    k = node.kind
    ho, wo = hw_out
    if k == "conv":
        f = 2 * node.attrs["kernel"] ** 2 * cin * cout * ho * wo
        if node.attrs.get("has_bias"):
            f += cout * ho * wo
        return f
    if k == "fc":
        f = 2 * node.attrs["in_features"] * node.attrs["out_features"]
        if node.attrs.get("has_bias"):
            f += node.attrs["out_features"]
        return f
    if k == "batchnorm":
        return 2 * cout * ho * wo  # scale + shift per element
    if k in ("relu", "add"):
        return cout * ho * wo
    if k in ("max_pool", "avg_pool"):
        return node.attrs["kernel"] ** 2 * cout * ho * wo
    if k == "global_pool":
        hi, wi = hw_in
        return cout * hi * wi
    if k == "softmax":
        return 3 * cout * ho * wo  # exp, accumulate, divide per element
    return 0


def cost(graph: ModelGraph, input_hw) -> CostReport:
    violations = graph_ir.validate(graph)
    if violations:
        raise graph_ir.GraphError(
            "refusing to cost an invalid graph: " + "; ".join(violations))
    sizes = spatial_sizes(graph, input_hw)
    cache = {}
    rep = CostReport()
    for nid in graph.order:
        node = graph.nodes[nid]
        cin = out_channels(graph, node.inputs[0], cache) if node.inputs else 0
        cout = out_channels(graph, nid, cache)
        hw_in = sizes[node.inputs[0]] if node.inputs else sizes[nid]
        p = _node_params(node, cin)
        f = _node_flops(node, cin, cout, hw_in, sizes[nid])
        rep.per_node[nid] = {"params": p, "flops": f}
        rep.total_params += p
        rep.total_flops += f
        if node.kind in ("conv", "fc"):
            rep.conv_fc_flops += f
        else:
            rep.elementwise_flops += f
    rep.capacity_mb = rep.total_params * 4 / 2 ** 20
    return rep


def report_csv(rep: CostReport, graph: ModelGraph) -> str:
    lines = ["node,kind,params,flops"]
    for nid in graph.order:
        e = rep.per_node[nid]
        lines.append(f"{nid},{graph.nodes[nid].kind},{e['params']},{e['flops']}")
    lines.append(f"TOTAL,,{rep.total_params},{rep.total_flops}")
    lines.append(f"CAPACITY_MB,,{rep.capacity_mb:.3f},")
    return "\n".join(lines) + "\n"
