"""Knowledge-distillation losses for detection: weighted hard/soft class
loss, teacher-bounded box regression, and attention transfer on feature
maps. All losses are differentiable Tensor expressions; teacher tensors
are expected to be gradient-free constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class KDConfig:
    alpha: float = 1.0
    beta: float = 1.0
    mu0: float = 0.9           # soft-loss weight, halved every 60 epochs
    mu_halve_every: int = 60
    nu: float = 0.5            # bounded-regression weight
    margin: float = 1.5
    omega_background: float = 1.5
    omega_object: float = 1.0
    temperature: float = 1.0
    at_layer_ids: tuple = ()

    def __post_init__(self):
        for name in ("alpha", "beta", "mu0", "nu", "omega_background",
                     "omega_object"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")

    def mu_at(self, epoch: int) -> float:
        return self.mu0 * 0.5 ** (epoch // self.mu_halve_every)

    def omega(self, num_classes: int) -> np.ndarray:
        w = np.full(num_classes, self.omega_object)
        w[0] = self.omega_background  # class 0 is background
        return w


@dataclass
class DetectionBatch:
    P_s: Tensor               # (M, C) student class probabilities per anchor
    P_t: Tensor               # (M, C) teacher class probabilities
    R_s: Tensor               # (M, 4) student box regression
    R_t: Tensor               # (M, 4) teacher box regression
    y_cls: np.ndarray         # (M,) int labels, 0 = background
    y_loc: np.ndarray         # (M, 4) encoded box targets
    positives: np.ndarray     # (M,) bool
    N: int = 0

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=bool)
        if self.N == 0:
            self.N = int(self.positives.sum())
        if self.N != int(self.positives.sum()):
            raise ValueError("N must equal the positive-anchor count")


@dataclass
class LossReport:
    hard: float = 0.0
    soft: float = 0.0
    loc_smooth: float = 0.0
    loc_bounded: float = 0.0
    at: float = 0.0
    total: float = 0.0
    mu: float = 0.0


def _check_probs(p, name):
    sums = p.data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError(f"{name} rows must sum to 1 (max dev {np.abs(sums - 1).max():.2e})")


def _sharpen(p: Tensor, temperature: float) -> Tensor:
    if temperature == 1.0:
        return p
    q = ad.power(p, 1.0 / temperature)
    return ad.div(q, ad.tsum(q, axis=-1, keepdims=True))


def hard_soft_cls(batch: DetectionBatch, omega, temperature=1.0):
    """Summed-over-anchors hard CE and omega-weighted soft CE components."""
    _check_probs(batch.P_s, "P_s")
    _check_probs(batch.P_t, "P_t")
    ps = _sharpen(batch.P_s, temperature)
    pt = _sharpen(batch.P_t, temperature)
    logp = ad.log(ps, eps=1e-12)
    hard = -ad.tsum(ad.gather_rows(logp, np.asarray(batch.y_cls)))
    w = Tensor(np.asarray(omega, dtype=float).reshape(1, -1))
    soft = -ad.tsum(w * pt.detach() * logp)
    return hard, soft


def cls_loss(batch: DetectionBatch, mu: float, omega) -> Tensor:
    """(1 - mu) * hard CE + mu * weighted soft CE, summed over anchors."""
    hard, soft = hard_soft_cls(batch, omega)
    return Tensor(np.asarray(1.0 - mu)) * hard + Tensor(np.asarray(mu)) * soft


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    a = np.abs(x.data)
    inner = a < 1.0
    out = np.where(inner, 0.5 * x.data ** 2, a - 0.5)
    dout = np.where(inner, x.data, np.sign(x.data))
    return ad._unop(x, out, lambda g: g * dout)


def loc_components(batch: DetectionBatch, margin: float):
    """(smooth-L1 sum, bounded-L2 sum) over positive anchors. The bound
    gate compares squared errors as constants; gradient flows only through
    the student's squared error."""
    if batch.N < 1:
        raise ValueError("loc loss requires at least one positive anchor")
    pos = np.flatnonzero(batch.positives)
    rs = ad.take_rows(batch.R_s, pos)
    rt = batch.R_t.data[pos]
    y = np.asarray(batch.y_loc)[pos]
    diff = rs - Tensor(y)
    sl1 = ad.tsum(smooth_l1(diff))
    s_err = ad.tsum(ad.square(diff), axis=1)          # (P,) per-anchor L2^2
    t_err = ((rt - y) ** 2).sum(axis=1)
    gate = (s_err.data + margin > t_err).astype(float)  # constant, no grad
    bounded = ad.tsum(s_err * Tensor(gate))
    return sl1, bounded


def loc_loss(batch: DetectionBatch, nu: float, margin: float) -> Tensor:
    sl1, bounded = loc_components(batch, margin)
    return sl1 + Tensor(np.asarray(nu)) * bounded


def attention_map(feature: Tensor) -> Tensor:
    """Channel-summed squared activations, flattened and L2-normalized.
    feature: (C, H, W) or (N, C, H, W)."""
    caxis = 0 if feature.data.ndim == 3 else 1
    amap = ad.tsum(ad.square(feature), axis=caxis)
    flat = ad.reshape(amap, (-1,) if feature.data.ndim == 3
                      else (amap.data.shape[0], -1))
    norm = ad.sqrt(ad.tsum(ad.square(flat), axis=-1, keepdims=True))
    return ad.div(flat, norm + Tensor(np.asarray(1e-8)))


def _sqrt_safe(x: Tensor) -> Tensor:
    # exact sqrt forward; derivative clamped near 0 so a zero distance
    # (student == teacher) stays finite instead of blowing up
    out = np.sqrt(x.data)
    return ad._unop(x, out, lambda g: g * 0.5 / np.maximum(out, 1e-12))


def at_loss(student_maps, teacher_maps) -> Tensor:
    """Sum over paired layers of the L2 distance between normalized
    attention maps. Channel counts may differ; spatial sizes must match.
    Batched (4-d) maps contribute their per-sample mean."""
    if len(student_maps) != len(teacher_maps):
        raise ValueError("student/teacher map lists must pair up")
    total = Tensor(np.asarray(0.0))
    for s, t in zip(student_maps, teacher_maps):
        if s.data.shape[-2:] != t.data.shape[-2:]:
            raise ValueError(
                f"spatial size mismatch {s.data.shape[-2:]} vs {t.data.shape[-2:]}")
        if s.data.ndim != t.data.ndim:
            raise ValueError("maps must have matching rank")
        fs = attention_map(s)
        ft = attention_map(t.detach())
        d = fs - ft
        dist = _sqrt_safe(ad.tsum(ad.square(d), axis=-1))
        total = total + (ad.tmean(dist) if s.data.ndim == 4 else dist)
    return total


def total_loss(batch: DetectionBatch, student_maps, teacher_maps,
               config: KDConfig, epoch: int):
    """Full distillation objective; returns (scalar Tensor, LossReport)."""
    mu = config.mu_at(epoch)
    omega = config.omega(batch.P_s.data.shape[-1])
    hard, soft = hard_soft_cls(batch, omega, config.temperature)
    sl1, bounded = loc_components(batch, config.margin)
    at = at_loss(student_maps, teacher_maps) if student_maps else Tensor(np.asarray(0.0))
    inv_n = Tensor(np.asarray(1.0 / batch.N))
    cls_part = inv_n * (Tensor(np.asarray(1.0 - mu)) * hard + Tensor(np.asarray(mu)) * soft)
    loc_part = inv_n * (sl1 + Tensor(np.asarray(config.nu)) * bounded)
    total = cls_part + Tensor(np.asarray(config.alpha)) * loc_part \
        + Tensor(np.asarray(config.beta)) * at
    report = LossReport(
        hard=float(hard.item()), soft=float(soft.item()),
        loc_smooth=float(sl1.item()), loc_bounded=float(bounded.item()),
        at=float(at.item()), total=float(total.item()), mu=mu)
    return total, report
