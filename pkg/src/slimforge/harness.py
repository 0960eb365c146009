"""End-to-end orchestration: slim-train -> plan -> match+apply -> attach
branches -> branch-prune -> teacher train -> student train (with or
without distillation) -> report.

Configs are flat key=value INI files with one section per stage; defaults
follow the hyper-parameters used throughout the package.
"""

from __future__ import annotations

import configparser
import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import (accounting, autodiff as ad, blobio, branch_prune, detection,
               distill, graph_ir, residual_matching, slimming)

DEFAULT_CONFIG = {
    "data": {"train_scenes": "128", "eval_scenes": "64", "image_size": "48",
             "batch_size": "12", "seed": "0"},
    "backbone": {"width": "8", "groups": "3"},
    "slim": {"lambda": "1e-2", "schedule": "slim_b", "lr0": "0.05",
             "epochs": "10", "target_prune_rate": "0.4",
             "momentum": "0.9", "weight_decay": "1e-4"},
    "branch": {"rate": "0.5", "extras_width": "32", "num_anchors": "2"},
    "detector": {"epochs": "40", "lr0": "0.05", "momentum": "0.9",
                 "weight_decay": "1e-4", "teacher_epochs": "60",
                 "warmup_epochs": "0"},
    "kd": {"alpha": "1.0", "beta": "0.5", "mu0": "0.2", "nu": "0.0",
           "mu_halve_every": "10", "margin": "1.5",
           "omega_background": "1.5", "omega_object": "1.0"},
}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def load_config(path=None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            cp.read_file(f)
    return cp


# ---------------------------------------------------------------------------
# detector assembly

def anchor_sizes():
    return [(0.3, 0.3), (0.5, 0.5)]


def build_toy_detector(backbone: graph_ir.ModelGraph, add_resblock: bool,
                       extras_width: int, num_anchors: int, num_classes: int):
    """Strip the classifier head and hang one detection branch off the
    trunk output. num_classes includes background."""
    trunk = graph_ir.strip_classifier_head(backbone)
    feature = trunk.order[-1]
    return graph_ir.attach_detection_branches(
        trunk,
        [{"feature_node_id": feature, "num_anchors": num_anchors,
          "num_classes": num_classes, "extras_width": extras_width}],
        add_resblock=add_resblock)


def _role_nodes(graph, role):
    return [nid for nid in graph.order if graph.nodes[nid].role == role
            and graph.nodes[nid].kind == "conv"]


def at_tap_ids(graph):
    """Default attention-transfer taps: ResBlock output relu per branch,
    falling back to the extras relu when there is no ResBlock."""
    taps = [nid for nid in graph.order if nid.endswith("_rb_out")]
    if not taps:
        taps = [nid for nid in graph.order
                if nid.endswith("_ex_relu") and graph.nodes[nid].role == "extras"]
    return taps


def detector_heads(graph, acts, num_classes):
    """Flatten cls/loc conv outputs to per-anchor tensors.

    Returns (P (M, C) probabilities, R (M, 4)) with anchors ordered
    (image, row, col, anchor) to match AnchorGrid.centers_wh()."""
    def flatten(nid, per_anchor):
        t = acts[nid]
        n, ac, h, w = t.data.shape
        a = ac // per_anchor
        t = ad.reshape(t, (n, a, per_anchor, h, w))
        t = ad.transpose(t, (0, 3, 4, 1, 2))  # (n, h, w, a, per_anchor)
        return ad.reshape(t, (n * h * w * a, per_anchor))

    cls_ids = _role_nodes(graph, "cls")
    loc_ids = _role_nodes(graph, "loc")
    logits = ad.concat([flatten(nid, num_classes) for nid in cls_ids], axis=0)
    regs = ad.concat([flatten(nid, 4) for nid in loc_ids], axis=0)
    return ad.softmax(logits, axis=-1), regs


def grid_for(graph, image_size):
    """AnchorGrid matching the (single) cls conv's feature map size."""
    sizes = graph_ir.spatial_sizes(graph, (image_size, image_size))
    cls_id = _role_nodes(graph, "cls")[0]
    h, w = sizes[cls_id]
    return detection.AnchorGrid(h, w, anchor_sizes())


def match_batch(grid, scenes):
    ys, yl, pos = [], [], []
    for s in scenes:
        y_cls, y_loc, p, _ = detection.match_anchors(grid, (s.boxes, s.labels))
        ys.append(y_cls)
        yl.append(y_loc)
        pos.append(p)
    return (np.concatenate(ys), np.concatenate(yl), np.concatenate(pos))


def mine_anchors(probs, y_cls, positives, neg_ratio=3):
    """Hard-negative mining: keep every positive anchor plus the
    neg_ratio hardest negatives (lowest predicted background prob).
    Returns sorted row indices into the flattened anchor axis."""
    pos_idx = np.flatnonzero(positives)
    neg_idx = np.flatnonzero(~positives)
    n_neg = min(len(neg_idx), max(neg_ratio * len(pos_idx), neg_ratio))
    hardest = neg_idx[np.argsort(probs[neg_idx, 0])[:n_neg]]
    return np.sort(np.concatenate([pos_idx, hardest]))


# ---------------------------------------------------------------------------
# training

def train_detector(graph, params, scenes, config, seed, num_classes,
                   image_size, teacher=None, kd_config=None, epochs=None,
                   log_path=None):
    """Train a detector session; with teacher+kd_config the full
    distillation objective is used, otherwise the plain multibox loss."""
    session = ad.Session(graph, params, mode="train", seed=seed)
    grid = grid_for(graph, image_size)
    batch_size = config.getint("data", "batch_size")
    lr0 = config.getfloat("detector", "lr0")
    momentum = config.getfloat("detector", "momentum")
    wd = config.getfloat("detector", "weight_decay")
    epochs = epochs if epochs is not None else config.getint("detector", "epochs")
    warmup = config.getint("detector", "warmup_epochs", fallback=0)
    plain = distill.KDConfig(mu0=0.0, nu=0.0, beta=0.0)
    taps = at_tap_ids(graph)
    teacher_taps = at_tap_ids(teacher.graph) if teacher is not None else []

    rng = np.random.default_rng(seed)
    order = np.arange(len(scenes))
    rows = []
    for epoch in range(epochs):
        lr = slimming.cosine_lr(lr0, max(epochs, 1), epoch)
        if epoch < warmup:  # linear ramp against early branch collapse
            lr *= (epoch + 1) / warmup
        rng.shuffle(order)
        for step, start in enumerate(range(0, len(scenes), batch_size)):
            chunk = [scenes[i] for i in order[start:start + batch_size]]
            x = ad.Tensor(np.stack([s.image for s in chunk]))
            y_cls, y_loc, positives = match_batch(grid, chunk)
            if positives.sum() == 0:
                continue
            acts = ad.forward(session, x)
            P_s, R_s = detector_heads(graph, acts, num_classes)
            sel = mine_anchors(P_s.data, y_cls, positives)
            P_s, R_s = ad.take_rows(P_s, sel), ad.take_rows(R_s, sel)
            y_cls_s, y_loc_s = y_cls[sel], y_loc[sel]
            positives_s = positives[sel]
            if teacher is not None:
                t_acts = ad.forward(teacher.eval(), x)
                P_t, R_t = detector_heads(teacher.graph, t_acts, num_classes)
                P_t, R_t = ad.take_rows(P_t, sel), ad.take_rows(R_t, sel)
                batch = distill.DetectionBatch(P_s, P_t.detach(), R_s,
                                               R_t.detach(), y_cls_s, y_loc_s,
                                               positives_s)
                smaps = [acts[t] for t in taps]
                tmaps = [t_acts[t].detach() for t in teacher_taps]
                loss, report = distill.total_loss(batch, smaps, tmaps,
                                                  kd_config, epoch)
            else:
                batch = distill.DetectionBatch(P_s, P_s.detach(), R_s,
                                               R_s.detach(), y_cls_s, y_loc_s,
                                               positives_s)
                loss, report = distill.total_loss(batch, [], [], plain, epoch)
            ad.backward(session, loss)
            ad.sgd_step(session, lr, momentum, wd)
            rows.append([epoch, step, report.hard, report.soft,
                         report.loc_smooth, report.loc_bounded, report.at,
                         report.total, report.mu, lr])
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "step", "hard", "soft", "loc", "bounded",
                        "at", "total", "mu", "lr"])
            w.writerows(rows)
    return session


def eval_detector(session, scenes, num_classes, image_size):
    """Positive-anchor classification accuracy on held-out scenes."""
    grid = grid_for(session.graph, image_size)
    session.eval()
    correct = total = 0
    for start in range(0, len(scenes), 16):
        chunk = scenes[start:start + 16]
        x = ad.Tensor(np.stack([s.image for s in chunk]))
        y_cls, _, positives = match_batch(grid, chunk)
        acts = ad.forward(session, x)
        P, _ = detector_heads(session.graph, acts, num_classes)
        pred = P.data.argmax(axis=-1)
        correct += int((pred[positives] == y_cls[positives]).sum())
        total += int(positives.sum())
    return correct / max(total, 1)


def kd_config_from(config) -> distill.KDConfig:
    sec = config["kd"]
    return distill.KDConfig(
        alpha=float(sec["alpha"]), beta=float(sec["beta"]),
        mu0=float(sec["mu0"]), nu=float(sec["nu"]),
        mu_halve_every=int(sec.get("mu_halve_every", "60")),
        margin=float(sec["margin"]),
        omega_background=float(sec["omega_background"]),
        omega_object=float(sec["omega_object"]))


# ---------------------------------------------------------------------------
# pipeline

def assemble_params(graph, trained, seed):
    """Fresh init for every param-bearing node, overridden by trained
    entries (the transferred backbone) where present."""
    fresh = ad.init_params(graph, seed)
    return {nid: trained.get(nid, fresh[nid]) for nid in fresh}


@dataclass
class PipelineResult:
    outdir: str
    accuracies: dict
    capacities: dict
    flops: dict


def _save_graph(graph, path):
    with open(path, "w") as f:
        f.write(graph_ir.serialize(graph))


def _save_params(params, path):
    blobio.save_blob(blobio.flatten_params(params), path)


def _checked(graph, stage):
    violations = graph_ir.validate(graph)
    if violations:
        raise StageError(stage, "graph validation failed: " + "; ".join(violations))
    return graph


def run_pipeline(config, outdir, seed=None, variants=("teacher", "+P", "+P+R", "+P+R+KD")):
    os.makedirs(outdir, exist_ok=True)
    seed = seed if seed is not None else config.getint("data", "seed")
    image_size = config.getint("data", "image_size")
    num_classes = detection.NUM_SHAPE_CLASSES + 1  # + background
    n_train = config.getint("data", "train_scenes")
    n_eval = config.getint("data", "eval_scenes")

    scenes = detection.generate_scenes(n_train + n_eval, seed,
                                       image_size=image_size)
    train_scenes, eval_scenes = scenes[:n_train], scenes[n_train:]

    # --- slim-regularized backbone training on the classification proxy
    try:
        backbone = graph_ir.build_toy_backbone(
            config.getint("backbone", "width"),
            config.getint("backbone", "groups"),
            num_classes=detection.NUM_SHAPE_CLASSES)
        slim_cfg = slimming.SlimConfig(
            lam=config.getfloat("slim", "lambda"),
            schedule=config.get("slim", "schedule"),
            lr0=config.getfloat("slim", "lr0"),
            epoch_max=config.getint("slim", "epochs"),
            target_prune_rate=config.getfloat("slim", "target_prune_rate"),
            momentum=config.getfloat("slim", "momentum"),
            weight_decay=config.getfloat("slim", "weight_decay"))
        batches = detection.scenes_to_class_batches(
            train_scenes, config.getint("data", "batch_size"))
        session = ad.Session(backbone, mode="train", seed=seed)
        session, gammas, _ = slimming.train_slim(session, batches, slim_cfg)
        _save_graph(backbone, os.path.join(outdir, "backbone.graph.json"))
        _save_params(session.export_params(),
                     os.path.join(outdir, "backbone.params.bin"))
    except StageError:
        raise
    except Exception as e:
        raise StageError("slim-train", e) from e

    # --- global plan + channel matching + physical rewrite
    try:
        plan = slimming.global_prune_plan(gammas, slim_cfg.target_prune_rate)
        plan = residual_matching.unify_plan(plan, backbone.residual_groups)
        with open(os.path.join(outdir, "plan.txt"), "w") as f:
            f.write(slimming.plan_to_text(plan))
        pruned_graph, pruned_params, remap = residual_matching.apply_plan(
            backbone, session.export_params(), plan)
        _checked(pruned_graph, "prune")
        _save_graph(pruned_graph, os.path.join(outdir, "pruned.graph.json"))
        _save_params(pruned_params, os.path.join(outdir, "pruned.params.bin"))
        with open(os.path.join(outdir, "remap.txt"), "w") as f:
            f.write(residual_matching.remap_to_text(remap))
    except StageError:
        raise
    except Exception as e:
        raise StageError("plan", e) from e

    extras_width = config.getint("branch", "extras_width")
    num_anchors = config.getint("branch", "num_anchors")
    rate = config.getfloat("branch", "rate")
    kd_cfg = kd_config_from(config)

    accuracies, capacities, flops = {}, {}, {}

    def register(name, sess):
        rep = accounting.cost(sess.graph, (image_size, image_size))
        accuracies[name] = eval_detector(sess, eval_scenes, num_classes,
                                         image_size)
        capacities[name] = rep.capacity_mb
        flops[name] = rep.total_flops
        _save_graph(sess.graph, os.path.join(outdir, f"{name.replace('+', 'p')}.graph.json"))
        _save_params(sess.export_params(),
                     os.path.join(outdir, f"{name.replace('+', 'p')}.params.bin"))
        with open(os.path.join(outdir, f"{name.replace('+', 'p')}.metrics.csv"), "w") as f:
            f.write("variant,capacity_mb,flops,accuracy\n")
            f.write(f"{name},{rep.capacity_mb:.6f},{rep.total_flops},{accuracies[name]:.6f}\n")

    # --- teacher: unpruned backbone, full-width branches with ResBlocks
    teacher = None
    if "teacher" in variants or "+P+R+KD" in variants:
        try:
            tg = build_toy_detector(backbone, True, extras_width, num_anchors,
                                    num_classes)
            _checked(tg, "teacher")
            tp = branch_prune.reinitialize_branches(
                assemble_params(tg, session.export_params(), seed), tg, seed)
            teacher = train_detector(
                tg, tp, train_scenes, config, seed, num_classes, image_size,
                epochs=config.getint("detector", "teacher_epochs"),
                log_path=os.path.join(outdir, "teacher.log.csv"))
            register("teacher", teacher)
        except StageError:
            raise
        except Exception as e:
            raise StageError("teacher", e) from e

    def student(name, with_resblock, with_kd):
        try:
            dg = build_toy_detector(pruned_graph, with_resblock, extras_width,
                                    num_anchors, num_classes)
            dg = branch_prune.fixed_prune_branches(dg, rate)
            _checked(dg, name)
            dp = branch_prune.reinitialize_branches(
                assemble_params(dg, pruned_params, seed + 1), dg, seed + 1)
            sess = train_detector(
                dg, dp, train_scenes, config, seed, num_classes, image_size,
                teacher=teacher if with_kd else None,
                kd_config=kd_cfg if with_kd else None,
                log_path=os.path.join(outdir, f"{name.replace('+', 'p')}.log.csv"))
            register(name, sess)
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e

    if "+P" in variants:
        student("+P", False, False)
    if "+P+R" in variants:
        student("+P+R", True, False)
    if "+P+R+KD" in variants:
        student("+P+R+KD", True, True)

    with open(os.path.join(outdir, "report.csv"), "w") as f:
        f.write(report_from_dir(outdir))
    return PipelineResult(outdir, accuracies, capacities, flops)


def report_from_dir(run_dir) -> str:
    """Comparison table over all *.metrics.csv in a run directory; the
    capacity column is recomputed from the stored graphs."""
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["variant", "capacity_mb", "flops", "accuracy"])
    rows = []
    for fname in sorted(os.listdir(run_dir)):
        if not fname.endswith(".metrics.csv"):
            continue
        with open(os.path.join(run_dir, fname)) as f:
            r = list(csv.DictReader(f))[0]
        stem = fname[:-len(".metrics.csv")]
        gpath = os.path.join(run_dir, stem + ".graph.json")
        cap = r["capacity_mb"]
        if os.path.exists(gpath):
            with open(gpath) as f:
                g = graph_ir.deserialize(f.read())
            # input size is not stored with the graph; reuse recorded flops
            cap_nodes = sum(accounting._node_params(
                n, graph_ir.out_channels(g, n.inputs[0]) if n.inputs else 0)
                for n in g.nodes.values())
            cap = f"{cap_nodes * 4 / 2 ** 20:.6f}"
        rows.append([r["variant"], cap, r["flops"], r["accuracy"]])
    for row in sorted(rows):
        w.writerow(row)
    return out.getvalue()
