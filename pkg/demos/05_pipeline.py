"""The whole pipeline at toy scale: slim-train a backbone, prune it,
attach detection branches, prune those too, train the variants, and
report. Uses a deliberately tiny config so it finishes in about a
minute; the package defaults train longer and separate the variants
more cleanly.

    python3 demos/05_pipeline.py
"""

import configparser
import tempfile

from slimforge import harness

overrides = {
    "data": {"train_scenes": "24", "eval_scenes": "12", "image_size": "32",
             "batch_size": "12"},
    "backbone": {"width": "4", "groups": "2"},
    "slim": {"epochs": "2"},
    "branch": {"extras_width": "16"},
    "detector": {"epochs": "4", "teacher_epochs": "4"},
}

config = harness.load_config()
config.read_dict(overrides)

with tempfile.TemporaryDirectory() as outdir:
    result = harness.run_pipeline(config, outdir, seed=0)
    print(f"{'variant':10s} {'capacity':>10s} {'flops':>12s} {'acc':>6s}")
    for name in ("teacher", "+P", "+P+R", "+P+R+KD"):
        print(f"{name:10s} {result.capacities[name]:9.3f}M "
              f"{result.flops[name]:>12,} {result.accuracies[name]:6.3f}")
    print("\nartifacts written to the run directory:")
    print(harness.report_from_dir(outdir))

# with the tiny budget above the accuracies are noisy; what is stable is
# the capacity ordering: every pruned variant is strictly smaller than
# the teacher, and +P (no ResBlock) is the smallest
assert result.capacities["+P"] < result.capacities["teacher"]
