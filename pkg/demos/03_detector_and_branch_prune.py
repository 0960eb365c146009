"""Detector assembly on top of a trunk, anchor matching on the synthetic
shapes data, and fixed-rate branch pruning.

    python3 demos/03_detector_and_branch_prune.py
"""

import numpy as np

from slimforge import (accounting, branch_prune, detection, graph_ir,
                       harness)

num_classes = detection.NUM_SHAPE_CLASSES + 1  # + background

backbone = graph_ir.build_toy_backbone(width=8, groups=3, num_classes=3)
det = harness.build_toy_detector(backbone, add_resblock=True,
                                 extras_width=32, num_anchors=2,
                                 num_classes=num_classes)
assert graph_ir.validate(det) == []

grid = harness.grid_for(det, 48)
print(f"feature grid {grid.height}x{grid.width}, "
      f"{grid.num_anchors} anchors/cell, "
      f"{grid.height * grid.width * grid.num_anchors} anchors total")

# match a few scenes and look at the positive rate; detection losses are
# normalized by this count (the recalled positives)
scenes = detection.generate_scenes(8, seed=1, image_size=48)
for s in scenes[:3]:
    y_cls, y_loc, pos, n = detection.match_anchors(grid, (s.boxes, s.labels))
    print(f"  {len(s.labels)} objects -> {n} positive anchors, "
          f"classes {sorted(set(y_cls[pos]))}")

# encoded targets decode back to the truth box (single-object scene so
# there is no ambiguity about which truth an anchor matched)
s = next(sc for sc in scenes if len(sc.labels) == 1)
y_cls, y_loc, pos, _ = detection.match_anchors(grid, (s.boxes, s.labels))
ai = int(np.flatnonzero(pos)[0])
back = detection.decode_box(y_loc[ai], grid.centers_wh()[ai])
print(f"decode(encode(box)) error: "
      f"{np.abs(back - s.boxes[0]).max():.2e}")

# fixed-rate branch pruning: branch convs shrink, cls/loc stay put, and
# the ResBlock expand conv tracks the skip width so the add stays legal
for rate in (0.0, 0.3, 0.6, 0.9):
    p = branch_prune.fixed_prune_branches(det, rate)
    rep = accounting.cost(p, (48, 48))
    print(f"rate {rate:.1f}: extras {p.nodes['br0_ex_conv'].attrs['out_channels']:3d} "
          f"rb inner {p.nodes['br0_rb1_conv'].attrs['out_channels']:3d} "
          f"cls {p.nodes['br0_cls'].attrs['out_channels']} "
          f"total {rep.total_params:,} params")
