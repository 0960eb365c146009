"""CNN computation-graph IR: layer nodes, model graphs, builders and validation.

Graphs are plain data with value semantics. Every rewrite pass in this
package takes a graph and returns a new one; nothing mutates a graph in
place. Parameters live outside the graph (see `blobio` / `autodiff`).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

LAYER_KINDS = {
    "conv", "batchnorm", "relu", "add", "global_pool", "max_pool",
    "avg_pool", "fc", "concat", "softmax", "input", "output",
}

ROLES = {"backbone", "extras", "resblock", "cls", "loc"}


class GraphError(ValueError):
    pass


@dataclass(eq=True)
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    role: str = "backbone"


@dataclass(eq=True)
class ResidualGroup:
    group_index: int
    block_output_bn_ids: list
    downsample_bn_id: str | None = None


@dataclass(eq=True)
class ChannelMask:
    layer_id: str
    keep: list  # list of bool, length = channel count

    def __post_init__(self):
        self.keep = [bool(k) for k in self.keep]

    @property
    def n_kept(self):
        return sum(self.keep)


@dataclass(eq=True)
class ModelGraph:
    nodes: dict = field(default_factory=dict)      # id -> LayerNode
    order: list = field(default_factory=list)      # topological order of ids
    residual_groups: list = field(default_factory=list)
    tags: set = field(default_factory=set)

    def node(self, nid):
        return self.nodes[nid]

    def consumers(self, nid):
        return [n.id for n in self.nodes.values() if nid in n.inputs]

    def copy(self):
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# channel inference

def out_channels(graph: ModelGraph, nid: str, _cache=None) -> int:
    """Output channel count of a node, derived along the graph."""
    if _cache is None:
        _cache = {}
    if nid in _cache:
        return _cache[nid]
    node = graph.nodes[nid]
    k = node.kind
    if k == "input":
        c = node.attrs["channels"]
    elif k == "conv":
        c = node.attrs["out_channels"]
    elif k == "batchnorm":
        c = node.attrs["channels"]
    elif k == "fc":
        c = node.attrs["out_features"]
    elif k == "concat":
        c = sum(out_channels(graph, i, _cache) for i in node.inputs)
    else:  # relu, add, pools, softmax, output: passthrough
        c = out_channels(graph, node.inputs[0], _cache)
    _cache[nid] = c
    return c


def spatial_sizes(graph: ModelGraph, input_hw):
    """Map node id -> (H, W) of its output feature map."""
    sizes = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        k = node.kind
        if k == "input":
            sizes[nid] = tuple(input_hw)
        elif k == "conv":
            h, w = sizes[node.inputs[0]]
            kk, s, p = node.attrs["kernel"], node.attrs["stride"], node.attrs["padding"]
            sizes[nid] = ((h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1)
        elif k in ("max_pool", "avg_pool"):
            h, w = sizes[node.inputs[0]]
            kk, s, p = node.attrs["kernel"], node.attrs["stride"], node.attrs["padding"]
            sizes[nid] = ((h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1)
        elif k in ("global_pool", "fc"):
            sizes[nid] = (1, 1)
        else:
            sizes[nid] = sizes[node.inputs[0]]
    return sizes


# ---------------------------------------------------------------------------
# validation

def validate(graph: ModelGraph):
    """Return a list of 'node_id: rule' violation strings; [] iff valid."""
    violations = []
    ids = set(graph.nodes)
    if set(graph.order) != ids or len(graph.order) != len(ids):
        violations.append("<graph>: topological order does not cover nodes exactly")
        return violations
    pos = {nid: i for i, nid in enumerate(graph.order)}
    for node in graph.nodes.values():
        if node.kind not in LAYER_KINDS:
            violations.append(f"{node.id}: unknown kind {node.kind!r}")
            continue
        for src in node.inputs:
            if src not in ids:
                violations.append(f"{node.id}: missing input {src!r}")
            elif pos[src] >= pos[node.id]:
                violations.append(f"{node.id}: edge from {src} breaks topological order")
    if violations:
        return violations

    cache = {}
    for node in graph.nodes.values():
        k = node.kind
        if k == "conv":
            cin = out_channels(graph, node.inputs[0], cache)
            if node.attrs["in_channels"] != cin:
                violations.append(
                    f"{node.id}: in_channels {node.attrs['in_channels']} != producer channels {cin}")
            if "deployable" in graph.tags and node.attrs["kernel"] not in (1, 3):
                violations.append(f"{node.id}: kernel {node.attrs['kernel']} not in {{1, 3}} for deployable graph")
            if "slimmable" in graph.tags:
                cons = graph.consumers(node.id)
                bns = [c for c in cons if graph.nodes[c].kind == "batchnorm"]
                if len(cons) != 1 or len(bns) != 1:
                    violations.append(f"{node.id}: conv in slimmable graph must feed exactly one batchnorm")
        elif k == "batchnorm":
            cin = out_channels(graph, node.inputs[0], cache)
            if node.attrs["channels"] != cin:
                violations.append(f"{node.id}: channels {node.attrs['channels']} != producer channels {cin}")
        elif k == "add":
            if len(node.inputs) != 2:
                violations.append(f"{node.id}: add must have exactly two inputs")
            else:
                c0 = out_channels(graph, node.inputs[0], cache)
                c1 = out_channels(graph, node.inputs[1], cache)
                if c0 != c1:
                    violations.append(f"{node.id}: add inputs have {c0} vs {c1} channels")
        elif k == "fc":
            cin = out_channels(graph, node.inputs[0], cache)
            if node.attrs["in_features"] != cin:
                violations.append(f"{node.id}: in_features {node.attrs['in_features']} != producer channels {cin}")
    for group in graph.residual_groups:
        members = list(group.block_output_bn_ids)
        if group.downsample_bn_id is not None:
            members.append(group.downsample_bn_id)
        counts = set()
        for bn in members:
            if bn not in graph.nodes:
                violations.append(f"{bn}: residual group {group.group_index} references missing BN")
            else:
                counts.add(graph.nodes[bn].attrs["channels"])
        if len(counts) > 1:
            violations.append(
                f"<group {group.group_index}>: member BN channel counts differ: {sorted(counts)}")
    return violations


# ---------------------------------------------------------------------------
# builders

class _Builder:
    def __init__(self, tags=()):
        self.g = ModelGraph(tags=set(tags))

    def add(self, nid, kind, inputs=(), role="backbone", **attrs):
        if nid in self.g.nodes:
            raise GraphError(f"duplicate node id {nid!r}")
        self.g.nodes[nid] = LayerNode(nid, kind, dict(attrs), list(inputs), role)
        self.g.order.append(nid)
        return nid

    def conv(self, nid, src, cin, cout, kernel, stride=1, role="backbone",
             has_bias=False, **extra):
        return self.add(nid, "conv", [src], role=role, kernel=kernel,
                        stride=stride, padding=kernel // 2, in_channels=cin,
                        out_channels=cout, has_bias=has_bias, **extra)

    def bn(self, nid, src, channels, role="backbone", **extra):
        return self.add(nid, "batchnorm", [src], role=role, channels=channels,
                        eps=1e-5, **extra)

    def conv_bn_relu(self, prefix, src, cin, cout, kernel, stride=1, role="backbone"):
        c = self.conv(prefix + "_conv", src, cin, cout, kernel, stride, role=role)
        b = self.bn(prefix + "_bn", c, cout, role=role)
        return self.add(prefix + "_relu", "relu", [b], role=role)


def _bottleneck(b: _Builder, prefix, src, cin, mid, cout, stride, downsample,
                avg_pool_shortcut):
    """Post-activation bottleneck: 1x1 -> 3x3(stride) -> 1x1, add, relu."""
    x = b.conv_bn_relu(prefix + "_1", src, cin, mid, 1)
    x = b.conv_bn_relu(prefix + "_2", x, mid, mid, 3, stride=stride)
    c3 = b.conv(prefix + "_3_conv", x, mid, cout, 1)
    bn3 = b.bn(prefix + "_3_bn", c3, cout)
    if downsample:
        sc = src
        if avg_pool_shortcut:
            sc = b.add(prefix + "_ds_pool", "avg_pool", [sc], kernel=2, stride=2,
                       padding=0)
        dsc = b.conv(prefix + "_ds_conv", sc, cin, cout, 1)
        ds_bn = b.bn(prefix + "_ds_bn", dsc, cout)
        shortcut = ds_bn
    else:
        shortcut = src
        ds_bn = None
    out = b.add(prefix + "_add", "add", [bn3, shortcut])
    out = b.add(prefix + "_out", "relu", [out])
    return out, bn3, ds_bn


def _residual_trunk(b: _Builder, src, stem_out, group_widths, blocks_per_group,
                    expansion, groups_meta, first_group_stride=1):
    x = src
    cin = stem_out
    for gi, (width, nblocks) in enumerate(zip(group_widths, blocks_per_group), start=1):
        cout = width * expansion
        bn_ids, ds_bn = [], None
        for bi in range(1, nblocks + 1):
            stride = (first_group_stride if gi == 1 else 2) if bi == 1 else 1
            downsample = bi == 1
            x, bn3, ds = _bottleneck(
                b, f"g{gi}_b{bi}", x, cin, width, cout,
                stride=stride, downsample=downsample,
                avg_pool_shortcut=(stride != 1))
            bn_ids.append(bn3)
            if ds is not None:
                ds_bn = ds
            cin = cout
        groups_meta.append(ResidualGroup(gi, bn_ids, ds_bn))
    return x, cin


def build_resnet50_v1d(num_classes=1000) -> ModelGraph:
    """Resnet50-v1d: deep 3x3 stem (32, 32, 64), bottleneck groups of
    (3, 4, 6, 3) blocks with avg-pool downsample shortcuts, global pool, fc."""
    b = _Builder(tags=("deployable", "slimmable"))
    b.add("input", "input", channels=3)
    x = b.conv_bn_relu("stem1", "input", 3, 32, 3, stride=2)
    x = b.conv_bn_relu("stem2", x, 32, 32, 3)
    x = b.conv_bn_relu("stem3", x, 32, 64, 3)
    x = b.add("stem_pool", "max_pool", [x], kernel=3, stride=2, padding=1)
    groups = []
    x, cin = _residual_trunk(b, x, 64, [64, 128, 256, 512], [3, 4, 6, 3],
                             expansion=4, groups_meta=groups)
    x = b.add("gpool", "global_pool", [x])
    x = b.add("fc", "fc", [x], in_features=cin, out_features=num_classes,
              has_bias=True)
    b.add("output", "output", [x])
    b.g.residual_groups = groups
    return b.g


def build_toy_backbone(width: int, groups: int, num_classes=3) -> ModelGraph:
    """Miniature residual net with the same structural grammar as the full
    backbone, small enough to train on the CPU in seconds."""
    if width < 4:
        raise GraphError(f"width must be >= 4, got {width}")
    if groups < 1:
        raise GraphError(f"groups must be >= 1, got {groups}")
    b = _Builder(tags=("deployable", "slimmable"))
    b.add("input", "input", channels=3)
    x = b.conv_bn_relu("stem", "input", 3, width, 3, stride=2)
    meta = []
    widths = [width * 2 ** i for i in range(groups)]
    x, cin = _residual_trunk(b, x, width, widths, [2] * groups,
                             expansion=2, groups_meta=meta)
    x = b.add("gpool", "global_pool", [x])
    x = b.add("fc", "fc", [x], in_features=cin, out_features=num_classes,
              has_bias=True)
    b.add("output", "output", [x])
    b.g.residual_groups = meta
    return b.g


def strip_classifier_head(graph: ModelGraph) -> ModelGraph:
    """Drop global_pool/fc/softmax/output tail so the trunk can feed
    detection branches."""
    g = graph.copy()
    drop = {nid for nid in g.nodes
            if g.nodes[nid].kind in ("global_pool", "fc", "softmax", "output")}
    g.nodes = {nid: n for nid, n in g.nodes.items() if nid not in drop}
    g.order = [nid for nid in g.order if nid not in drop]
    return g


def attach_detection_branches(backbone: ModelGraph, branch_specs,
                              add_resblock=True, extras_width=None) -> ModelGraph:
    """Append detection branches: extras conv (3x3), optional simple ResBlock
    (1x1 reduce, 3x3, 1x1 expand, residual add), then 1x1 cls and loc convs.

    branch_specs: list of dicts with keys feature_node_id, num_anchors,
    num_classes. Pre-existing nodes are never modified.
    """
    g = backbone.copy()
    if branch_specs:
        g.tags.discard("slimmable")  # cls/loc convs have no trailing BN
    b = _Builder()
    b.g = g
    cache = {}
    for k, spec in enumerate(branch_specs):
        feat = spec["feature_node_id"]
        if feat not in g.nodes:
            raise GraphError(f"unknown feature node {feat!r}")
        na, nc = spec["num_anchors"], spec["num_classes"]
        cin = out_channels(g, feat, cache)
        w = spec.get("extras_width", extras_width or cin)
        p = f"br{k}"
        x = b.conv_bn_relu(p + "_ex", feat, cin, w, 3, role="extras")
        if add_resblock:
            mid = max(4, w // 2)
            skip = x
            y = b.conv_bn_relu(p + "_rb1", x, w, mid, 1, role="resblock")
            y = b.conv_bn_relu(p + "_rb2", y, mid, mid, 3, role="resblock")
            c3 = b.conv(p + "_rb3_conv", y, mid, w, 1, role="resblock",
                        is_block_output=True)
            bn3 = b.bn(p + "_rb3_bn", c3, w, role="resblock")
            x = b.add(p + "_rb_add", "add", [bn3, skip], role="resblock")
            x = b.add(p + "_rb_out", "relu", [x], role="resblock")
        b.conv(p + "_cls", x, w, na * nc, 1, role="cls", has_bias=True)
        b.conv(p + "_loc", x, w, na * 4, 1, role="loc", has_bias=True)
    return g


# ---------------------------------------------------------------------------
# serialization

class ParseError(ValueError):
    pass


def serialize(graph: ModelGraph) -> str:
    edges = []
    for nid in graph.order:
        for src in graph.nodes[nid].inputs:
            edges.append([src, nid])
    doc = {
        "tags": sorted(graph.tags),
        "nodes": [
            {"id": n.id, "kind": n.kind, "role": n.role, "attrs": n.attrs}
            for n in (graph.nodes[i] for i in graph.order)
        ],
        "edges": edges,
        "residual_groups": [
            {"group_index": g.group_index,
             "block_output_bn_ids": g.block_output_bn_ids,
             "downsample_bn_id": g.downsample_bn_id}
            for g in graph.residual_groups
        ],
    }
    return json.dumps(doc, indent=1)


def deserialize(text: str) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"line {e.lineno}: {e.msg}") from e
    for key in ("nodes", "edges", "residual_groups", "tags"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")
    g = ModelGraph(tags=set(doc["tags"]))
    for nd in doc["nodes"]:
        try:
            node = LayerNode(nd["id"], nd["kind"], dict(nd["attrs"]),
                             [], nd.get("role", "backbone"))
        except KeyError as e:
            raise ParseError(f"node record missing field {e.args[0]!r}") from e
        if node.id in g.nodes:
            raise ParseError(f"duplicate node id {node.id!r}")
        g.nodes[node.id] = node
        g.order.append(node.id)
    for edge in doc["edges"]:
        if len(edge) != 2:
            raise ParseError(f"malformed edge {edge!r}")
        src, dst = edge
        if src not in g.nodes or dst not in g.nodes:
            raise ParseError(f"edge {edge!r} references unknown node")
        g.nodes[dst].inputs.append(src)
    for gd in doc["residual_groups"]:
        g.residual_groups.append(ResidualGroup(
            gd["group_index"], list(gd["block_output_bn_ids"]),
            gd.get("downsample_bn_id")))
    return g
