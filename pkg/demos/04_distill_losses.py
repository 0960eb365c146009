"""The distillation objective piece by piece: weighted hard/soft class
loss, teacher-bounded regression, and attention transfer.

    python3 demos/04_distill_losses.py
"""

import numpy as np

from slimforge import distill
from slimforge.autodiff import Tensor

rng = np.random.default_rng(0)


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# a fake batch of 6 anchors, 4 classes (0 = background), 2 positives
m, c = 6, 4
P_s = softmax(rng.normal(size=(m, c)))
P_t = softmax(rng.normal(size=(m, c)) * 2)   # sharper teacher
R_s = rng.normal(size=(m, 4)) * 0.5
R_t = rng.normal(size=(m, 4)) * 0.1          # teacher boxes are better
y_cls = np.array([0, 1, 0, 0, 3, 0])
y_loc = rng.normal(size=(m, 4)) * 0.1
positives = y_cls > 0

batch = distill.DetectionBatch(
    Tensor(P_s, requires_grad=True), Tensor(P_t),
    Tensor(R_s, requires_grad=True), Tensor(R_t), y_cls, y_loc, positives)
cfg = distill.KDConfig()  # alpha=beta=1, mu0=0.9, nu=0.5, margin=1.5

# the soft-loss weight decays by halving; background anchors get a
# larger class weight so the student stays honest about negatives
for epoch in (0, 60, 120):
    print(f"mu at epoch {epoch:3d}: {cfg.mu_at(epoch):.3f}")
print(f"class weights: {cfg.omega(c)}")

hard, soft = distill.hard_soft_cls(batch, cfg.omega(c))
print(f"hard CE {hard.item():.3f}   soft CE {soft.item():.3f}")

# the bounded term only fires when the student is NOT at least `margin`
# better than the teacher (squared-error sense)
sl1, bounded = distill.loc_components(batch, cfg.margin)
print(f"smooth-L1 {sl1.item():.3f}   bounded {bounded.item():.3f}")

# attention transfer compares normalized channel-energy maps, so channel
# counts may differ between teacher and student
s_map = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)  # student: 3 channels
t_map = Tensor(rng.normal(size=(2, 16, 6, 6)))  # teacher: 16 channels
print(f"AT distance (different nets)  {distill.at_loss([s_map], [t_map]).item():.4f}")
print(f"AT distance (identical maps)  {distill.at_loss([s_map], [s_map]).item():.4f}")

total, report = distill.total_loss(batch, [s_map], [t_map], cfg, epoch=0)
print(f"total objective {report.total:.4f} "
      f"(cls {report.hard:.2f}/{report.soft:.2f}, "
      f"loc {report.loc_smooth:.2f}/{report.loc_bounded:.2f}, "
      f"at {report.at:.3f})")

# everything is differentiable wrt the student tensors
total.backward()
print(f"grad norms: P_s {np.linalg.norm(batch.P_s.grad):.3f}, "
      f"R_s {np.linalg.norm(batch.R_s.grad):.3f}, "
      f"feature {np.linalg.norm(s_map.grad):.3f}")
