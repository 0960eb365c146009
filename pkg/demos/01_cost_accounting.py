"""Walk through the computation-graph IR and the cost model.

Builds the ResNet50-v1d reference graph plus the small toy backbone and
prints their parameter/FLOPS breakdowns. Run from the repo root:

    python3 demos/01_cost_accounting.py
"""

import numpy as np

from slimforge import accounting, graph_ir

# the big reference network first
g = graph_ir.build_resnet50_v1d()
assert graph_ir.validate(g) == []
rep = accounting.cost(g, (224, 224))
print(f"resnet50-v1d @224: {rep.total_params:,} params, "
      f"{rep.capacity_mb:.2f} MB, {rep.total_flops / 1e9:.2f} GFLOPS")
print(f"  conv+fc FLOPS  {rep.conv_fc_flops / 1e9:.2f} G")
print(f"  elementwise    {rep.elementwise_flops / 1e9:.3f} G")

# heaviest layers
top = sorted(rep.per_node.items(), key=lambda kv: -kv[1]["flops"])[:5]
print("heaviest nodes:")
for nid, e in top:
    print(f"  {nid:24s} {e['flops'] / 1e6:9.1f} MFLOPS  {e['params']:>9,} params")

# the toy backbone used everywhere in the demos; same IR, same cost model
toy = graph_ir.build_toy_backbone(width=8, groups=3, num_classes=3)
trep = accounting.cost(toy, (48, 48))
print(f"\ntoy backbone @48: {trep.total_params:,} params, "
      f"{trep.capacity_mb * 1024:.1f} KB, {trep.total_flops / 1e6:.1f} MFLOPS")

# graphs serialize to a plain json text form
text = graph_ir.serialize(toy)
assert graph_ir.deserialize(text) == toy
print(f"serialized toy graph: {len(text):,} chars, round-trips exactly")
