"""Sparsity-regularized (network-slimming) training and the global
automatic pruning step that turns trained BN scale factors into a plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graph_ir import ChannelMask, ModelGraph


@dataclass
class SlimConfig:
    lam: float = 1e-4            # balance factor between task loss and |gamma| penalty
    schedule: str = "slim_b"     # slim_a: x0.1 every 30 epochs; slim_b: cosine
    lr0: float = 0.1
    epoch_max: int = 120
    target_prune_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 <= self.target_prune_rate < 1:
            raise ValueError("target_prune_rate must be in [0, 1)")
        if self.schedule not in ("slim_a", "slim_b"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class PruningPlan:
    masks: dict = field(default_factory=dict)  # BN id -> ChannelMask
    threshold: float = 0.0
    achieved_rate: float = 0.0


def cosine_lr(lr0: float, epoch_max: int, t: int) -> float:
    if not 0 <= t <= epoch_max:
        raise ValueError(f"epoch {t} outside [0, {epoch_max}]")
    return 0.5 * lr0 * (math.cos(math.pi * t / epoch_max) + 1.0)


def step_lr(lr0: float, t: int, drop_every: int = 30) -> float:
    return lr0 * 0.1 ** (t // drop_every)


def schedule_lr(config: SlimConfig, t: int) -> float:
    if config.schedule == "slim_b":
        return cosine_lr(config.lr0, config.epoch_max, t)
    return step_lr(config.lr0, t)


def bn_ids(graph: ModelGraph):
    return [n.id for n in (graph.nodes[i] for i in graph.order)
            if n.kind == "batchnorm"]


def slim_loss(task_loss: ad.Tensor, graph: ModelGraph, parameters: dict,
              lam: float, exclude=frozenset()) -> ad.Tensor:
    """task_loss + lam * sum of |gamma| over the prunable BN layers
    (every BN in the graph minus `exclude`).

    The penalty subgradient is lam * sign(gamma) with sign(0) = 0.
    """
    if lam == 0:
        return task_loss
    total = task_loss
    for nid in bn_ids(graph):
        if nid in exclude:
            continue
        total = total + ad.Tensor(np.asarray(lam)) * ad.tsum(ad.absval(parameters[nid]["gamma"]))
    return total


def gamma_snapshot(session: ad.Session) -> dict:
    return {nid: session.params[nid]["gamma"].data.copy()
            for nid in bn_ids(session.graph)}


def global_prune_plan(gammas: dict, target_prune_rate: float,
                      protected=frozenset()) -> PruningPlan:
    """Pool |gamma| from non-protected layers, cut at the target quantile.

    Channels strictly above the threshold are kept (ties pruned); the pool
    is ordered by (|gamma|, layer id, channel index) so plans are
    deterministic. Every layer keeps at least one channel: if a layer would
    be emptied, its largest-|gamma| channel (lowest index on ties) is
    re-added.
    """
    if not 0 <= target_prune_rate < 1:
        raise ValueError("target_prune_rate must be in [0, 1)")
    pool = []
    for lid in sorted(gammas):
        if lid in protected:
            continue
        for ci, g in enumerate(np.abs(np.asarray(gammas[lid], dtype=float))):
            pool.append((float(g), lid, ci))
    if not pool:
        raise ValueError("no prunable gamma values (all layers protected?)")
    pool.sort()
    k = int(target_prune_rate * len(pool) + 0.5)
    threshold = pool[k - 1][0] if k > 0 else -1.0

    masks = {}
    for lid in sorted(gammas):
        absg = np.abs(np.asarray(gammas[lid], dtype=float))
        if lid in protected:
            keep = np.ones(len(absg), dtype=bool)
        else:
            keep = absg > threshold
            if not keep.any():
                keep[int(np.argmax(absg))] = True
        masks[lid] = ChannelMask(lid, keep.tolist())
    prunable = sum(len(gammas[lid]) for lid in gammas if lid not in protected)
    pruned = sum(len(m.keep) - m.n_kept for lid, m in masks.items()
                 if lid not in protected)
    return PruningPlan(masks, threshold, pruned / prunable)


# ---------------------------------------------------------------------------
# plan serialization (one line per BN id followed by a 0/1 string)

def plan_to_text(plan: PruningPlan) -> str:
    lines = [f"threshold {plan.threshold!r}",
             f"achieved_rate {plan.achieved_rate!r}"]
    for lid in sorted(plan.masks):
        bits = "".join("1" if k else "0" for k in plan.masks[lid].keep)
        lines.append(f"{lid} {bits}")
    return "\n".join(lines) + "\n"


def plan_from_text(text: str) -> PruningPlan:
    plan = PruningPlan()
    for lno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            key, val = line.split()
        except ValueError as e:
            raise ValueError(f"line {lno}: expected 'key value'") from e
        if key == "threshold":
            plan.threshold = float(val)
        elif key == "achieved_rate":
            plan.achieved_rate = float(val)
        else:
            if set(val) - {"0", "1"}:
                raise ValueError(f"line {lno}: mask must be a 0/1 string")
            plan.masks[key] = ChannelMask(key, [c == "1" for c in val])
    return plan


# ---------------------------------------------------------------------------
# training loop

def evaluate_accuracy(session: ad.Session, batches) -> float:
    mode = session.mode
    session.eval()
    correct = total = 0
    for x, y in batches:
        acts = ad.forward(session, ad.Tensor(np.asarray(x)))
        pred = acts["fc"].data.argmax(axis=1)
        correct += int((pred == np.asarray(y)).sum())
        total += len(y)
    session.mode = mode
    return correct / max(total, 1)


def _masked_accuracy_sweep(session: ad.Session, gammas, eval_batches,
                           step=0.05):
    """Accuracy after zeroing the k smallest |gamma| channels, for a sweep
    of removal fractions (the accuracy-vs-removed curve)."""
    pool = sorted((abs(float(g)), lid, ci)
                  for lid, arr in gammas.items() for ci, g in enumerate(arr))
    saved = {lid: (session.params[lid]["gamma"].data.copy(),
                   session.params[lid]["beta"].data.copy()) for lid in gammas}
    curve = []
    fracs = [round(f * step, 10) for f in range(int(1 / step))]
    for frac in fracs:
        k = int(frac * len(pool))
        for lid, (g0, b0) in saved.items():
            session.params[lid]["gamma"].data = g0.copy()
            session.params[lid]["beta"].data = b0.copy()
        for _, lid, ci in pool[:k]:
            session.params[lid]["gamma"].data[ci] = 0.0
            session.params[lid]["beta"].data[ci] = 0.0
        curve.append((frac, evaluate_accuracy(session, eval_batches)))
    for lid, (g0, b0) in saved.items():
        session.params[lid]["gamma"].data = g0
        session.params[lid]["beta"].data = b0
    return curve


def train_slim(session: ad.Session, data, config: SlimConfig,
               eval_data=None, log=None):
    """Train with the sparsity-regularized loss and configured schedule.

    data: list of (images, labels) numpy batches, replayed each epoch.
    Returns (session, gamma snapshot, accuracy-vs-removed curve or None).
    """
    session.train()
    for epoch in range(config.epoch_max):
        lr = schedule_lr(config, epoch)
        for step, (x, y) in enumerate(data):
            acts = ad.forward(session, ad.Tensor(np.asarray(x)))
            task = ad.softmax_cross_entropy(acts["fc"], np.asarray(y))
            loss = slim_loss(task, session.graph, session.params, config.lam)
            ad.backward(session, loss)
            ad.sgd_step(session, lr, config.momentum, config.weight_decay)
            if log is not None:
                log.append({"epoch": epoch, "step": step, "lr": lr,
                            "task": float(task.item()),
                            "total": float(loss.item())})
    gammas = gamma_snapshot(session)
    curve = None
    if eval_data is not None:
        curve = _masked_accuracy_sweep(session, gammas, eval_data)
    return session, gammas, curve
