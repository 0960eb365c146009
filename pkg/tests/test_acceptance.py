"""Acceptance checks. Each test prints one PASS/FAIL line (run with -s).

Criteria 8 and 9 are statistical multi-seed training runs and dominate
the runtime (tens of minutes on CPU); everything else finishes in
seconds. Budgets are asserted alongside the numeric tolerances.
"""

import math
import time

import numpy as np
import pytest

from slimforge import (accounting, autodiff as ad, branch_prune, detection,
                       distill, graph_ir, harness, residual_matching,
                       slimming)
from slimforge.autodiff import Tensor
from tests.conftest import check_grad, fd_grad, random_slimmable_chain


def report(name, ok, detail):
    line = f"[{name}] {detail}: {'PASS' if ok else 'FAIL'}"
    print(line)
    assert ok, line


# -------------------------------------------------------------------------
# 1. capacity reproduction

def test_criterion_1_capacity():
    t0 = time.monotonic()
    rep = accounting.cost(graph_ir.build_resnet50_v1d(), (224, 224))
    elapsed = time.monotonic() - t0
    ok = abs(rep.capacity_mb - 97.6) / 97.6 <= 0.02 and elapsed < 1.0
    report("criterion 1", ok,
           f"resnet50-v1d capacity {rep.capacity_mb:.2f} MB "
           f"(target 97.6 +/- 2%), {elapsed:.2f}s")


# -------------------------------------------------------------------------
# 2. function preservation oracle

def _zeroed_plan(session, rng):
    g = session.graph
    masks = {}
    for nid in slimming.bn_ids(g):
        n = g.nodes[nid].attrs["channels"]
        keep = rng.random(n) < 0.6
        if not keep.any():
            keep[0] = True
        masks[nid] = graph_ir.ChannelMask(nid, keep.tolist())
    plan = slimming.PruningPlan(masks)
    plan = residual_matching.unify_plan(plan, g.residual_groups)
    for nid, mask in plan.masks.items():
        drop = ~np.asarray(mask.keep)
        session.params[nid]["gamma"].data[drop] = 0.0
        session.params[nid]["beta"].data[drop] = 0.0
    return plan


def test_criterion_2_function_preservation():
    t0 = time.monotonic()
    worst = 0.0
    n_graphs = 120
    for seed in range(n_graphs):
        rng = np.random.default_rng(seed)
        g = random_slimmable_chain(rng)
        s = ad.Session(g, mode="eval", seed=seed)
        r = np.random.default_rng(seed + 10_000)
        for nid in slimming.bn_ids(g):
            p = s.params[nid]
            c = p["gamma"].data.shape
            p["gamma"].data = r.normal(size=c)
            p["beta"].data = r.normal(size=c)
            p["running_mean"][:] = r.normal(size=c)
            p["running_var"][:] = r.uniform(0.5, 2.0, size=c)
        plan = _zeroed_plan(s, rng)
        x = rng.normal(size=(2, 3, 6, 6))
        ref = ad.forward(s, Tensor(x))["output"].data
        pg, pp, remap = residual_matching.apply_plan(g, s.export_params(), plan)
        assert graph_ir.validate(pg) == []
        got = ad.forward(ad.Session(pg, pp, mode="eval"), Tensor(x))["output"].data
        worst = max(worst, float(np.abs(got - ref[:, remap["output"]]).max()))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-6 and elapsed < 60
    report("criterion 2", ok,
           f"{n_graphs} random graphs, worst output deviation {worst:.2e} "
           f"(<= 1e-6), {elapsed:.1f}s")


# -------------------------------------------------------------------------
# 3. gradient suite

def _sm(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_criterion_3_gradient_suite():
    t0 = time.monotonic()
    failures = []

    def check(name, f, x0, rtol=1e-4):
        try:
            check_grad(f, x0, rtol=rtol)
        except AssertionError as e:
            failures.append(f"{name}: {e}")

    for point in range(10):
        r = np.random.default_rng(point)
        probe2 = Tensor(r.normal(size=(3, 4)))
        a = r.normal(size=(3, 4))
        b = Tensor(r.normal(size=(3, 4)) + 2.0)  # offset: safe divisor
        check("add", lambda x: ad.tsum(probe2 * (x + b)), a)
        check("mul", lambda x: ad.tsum(probe2 * (x * b)), a)
        check("div", lambda x: ad.tsum(probe2 * ad.div(x, b)), a)
        kink_free = a + np.where(np.abs(a) < 0.2, 0.5, 0.0)
        check("relu", lambda x: ad.tsum(probe2 * ad.relu(x)), kink_free)
        check("absval", lambda x: ad.tsum(probe2 * ad.absval(x)), kink_free)
        check("square", lambda x: ad.tsum(probe2 * ad.square(x)), a)
        check("sqrt", lambda x: ad.tsum(probe2 * ad.sqrt(x)), np.abs(a) + 0.5)
        check("exp", lambda x: ad.tsum(probe2 * ad.exp(x)), a)
        check("log", lambda x: ad.tsum(probe2 * ad.log(x)), np.abs(a) + 0.5)
        check("tsum", lambda x: ad.tsum(probe2 * ad.tsum(x, axis=1, keepdims=True)), a)
        check("tmean", lambda x: ad.tsum(probe2 * ad.tmean(x, axis=0, keepdims=True)), a)
        check("reshape", lambda x: ad.tsum(probe2 * ad.reshape(x, (3, 4))), a.reshape(4, 3))
        check("transpose", lambda x: ad.tsum(probe2 * ad.transpose(x, (1, 0))), a.T)
        check("concat", lambda x: ad.tsum(probe2 * ad.concat([x, Tensor(a[:, 2:])], axis=1)),
              a[:, :2])
        mm_w = Tensor(r.normal(size=(5, 4)))
        check("matmul", lambda x: ad.tsum(probe2 * ad.matmul(x, mm_w)),
              r.normal(size=(3, 5)))
        check("gather_rows", lambda x: ad.tsum(ad.gather_rows(x, np.array([1, 3, 0]))), a)
        check("take_rows", lambda x: ad.tsum(Tensor(probe2.data[:2]) * ad.take_rows(x, np.array([0, 2]))), a)
        check("softmax", lambda x: ad.tsum(probe2 * ad.softmax(x, axis=-1)), a)
        check("log_softmax", lambda x: ad.tsum(probe2 * ad.log_softmax(x, axis=-1)), a)
        check("softmax_cross_entropy",
              lambda x: ad.softmax_cross_entropy(x, np.array([0, 3, 1])), a)

        pc = Tensor(r.normal(size=(2, 2, 4, 4)))
        w = Tensor(r.normal(size=(2, 3, 3, 3)))
        check("conv2d", lambda x: ad.tsum(pc * ad.conv2d(x, w, padding=1)),
              r.normal(size=(2, 3, 4, 4)))
        pp = Tensor(r.normal(size=(1, 2, 2, 2)))
        check("max_pool2d",
              lambda x: ad.tsum(ad.max_pool2d(x, 2, 2, 0) * pp),
              r.normal(size=(1, 2, 4, 4)))
        check("avg_pool2d",
              lambda x: ad.tsum(ad.avg_pool2d(x, 2, 2, 0) * pp),
              r.normal(size=(1, 2, 4, 4)))
        pg = Tensor(r.normal(size=(1, 3, 1, 1)))
        check("global_avg_pool",
              lambda x: ad.tsum(ad.global_avg_pool(x) * pg),
              r.normal(size=(1, 3, 4, 4)))
        gam, bet = Tensor(r.normal(size=2) + 1), Tensor(r.normal(size=2))
        pb = Tensor(r.normal(size=(3, 2, 3, 3)))
        check("batch_norm", lambda x: ad.tsum(pb * ad.batch_norm(
            x, gam, bet, np.zeros(2), np.ones(2), training=True)),
            r.normal(size=(3, 2, 3, 3)))

        # distillation losses, differentiated through the student inputs
        pt = _sm(r.normal(size=(4, 3)))
        y = r.integers(0, 3, size=4)
        yl = r.normal(size=(4, 4)) * 0.1
        rt = r.normal(size=(4, 4)) * 3
        pos = np.ones(4, dtype=bool)

        def cls_f(z):
            batch = distill.DetectionBatch(
                ad.softmax(z, axis=-1), Tensor(pt), Tensor(np.zeros((4, 4))),
                Tensor(np.zeros((4, 4))), y, yl, pos)
            return distill.cls_loss(batch, mu=0.6, omega=[1.5, 1, 1])

        check("cls_loss", cls_f, r.normal(size=(4, 3)))

        def loc_f(rs):
            batch = distill.DetectionBatch(
                Tensor(_sm(np.zeros((4, 3)))), Tensor(_sm(np.zeros((4, 3)))),
                rs, Tensor(rt), y, yl, pos)
            return distill.loc_loss(batch, nu=0.5, margin=1.5)

        check("loc_loss", loc_f, r.normal(size=(4, 4)))

        sl_in = r.normal(size=8) * 2
        sl_in[np.abs(np.abs(sl_in) - 1) < 0.05] += 0.2
        sl_probe = Tensor(r.normal(size=8))
        check("smooth_l1", lambda x: ad.tsum(sl_probe * distill.smooth_l1(x)),
              sl_in)

        tmap = Tensor(r.normal(size=(4, 3, 3)))
        check("at_loss", lambda s: distill.at_loss([s], [tmap]),
              r.normal(size=(2, 3, 3)))

        def total_f(z):
            p = ad.softmax(ad.reshape(z, (4, 3)), axis=-1)
            batch = distill.DetectionBatch(p, Tensor(pt), Tensor(np.zeros((4, 4))),
                                           Tensor(rt), y, yl, pos)
            loss, _ = distill.total_loss(batch, [], [],
                                         distill.KDConfig(), epoch=0)
            return loss

        check("total_loss", total_f, r.normal(size=12))

    elapsed = time.monotonic() - t0
    ok = not failures and elapsed < 120
    report("criterion 3", ok,
           f"all ops and losses x10 points, rel err < 1e-4, {elapsed:.1f}s"
           + ("" if not failures else f"; failures: {failures[:3]}"))


# -------------------------------------------------------------------------
# 4. global pruning oracle

def _oracle_plan(gammas, rate):
    """Sorted-pool re-derivation: cut at the k-th smallest |gamma|, prune
    everything at or below it (ties pruned), floor-rule one channel."""
    pool = sorted(abs(float(v)) for lid in gammas for v in gammas[lid])
    k = int(rate * len(pool) + 0.5)
    threshold = pool[k - 1] if k > 0 else -1.0
    masks = {}
    for lid, arr in gammas.items():
        keep = [abs(float(v)) > threshold for v in arr]
        if not any(keep):
            absg = [abs(float(v)) for v in arr]
            keep[absg.index(max(absg))] = True
        masks[lid] = keep
    return masks


def test_criterion_4_global_plan_oracle():
    t0 = time.monotonic()
    n_cases = 1000
    mismatches = 0
    for case in range(n_cases):
        r = np.random.default_rng(case)
        gammas = {f"l{i}": r.normal(size=int(r.integers(2, 65))).tolist()
                  for i in range(int(r.integers(2, 9)))}
        if case % 5 == 0:  # force ties so the tie-breaking path is exercised
            gammas["l0"] = (np.round(np.asarray(gammas["l0"]), 1)).tolist()
        rate = float(r.uniform(0, 0.97))
        plan = slimming.global_prune_plan(gammas, rate)
        expect = _oracle_plan(gammas, rate)
        if any(plan.masks[lid].keep != expect[lid] for lid in gammas):
            mismatches += 1
    elapsed = time.monotonic() - t0
    ok = mismatches == 0 and elapsed < 30
    report("criterion 4", ok,
           f"{n_cases} random gamma configs vs brute-force oracle, "
           f"{mismatches} mismatches, {elapsed:.1f}s")


# -------------------------------------------------------------------------
# 5. channel matching

def test_criterion_5_channel_matching():
    t0 = time.monotonic()
    bad = 0
    for n in range(1, 9):
        for abits in range(2 ** n):
            a = [(abits >> i) & 1 == 1 for i in range(n)]
            for bbits in range(2 ** n):
                b = [(bbits >> i) & 1 == 1 for i in range(n)]
                plan = slimming.PruningPlan({
                    "p": graph_ir.ChannelMask("p", a),
                    "q": graph_ir.ChannelMask("q", b)})
                got = residual_matching.unify_group_masks(
                    plan, graph_ir.ResidualGroup(0, ["p"], "q"))
                if got.keep != [x or y for x, y in zip(a, b)]:
                    bad += 1
    # pruned graphs always validate (apply_plan raises otherwise, and
    # criterion 2 already asserted validate() == [] on 120 graphs)
    elapsed = time.monotonic() - t0
    cases = sum(4 ** n for n in range(1, 9))
    ok = bad == 0 and elapsed < 30
    report("criterion 5", ok,
           f"unify == OR on {cases} exhaustive mask pairs "
           f"(len <= 8), {bad} mismatches, {elapsed:.1f}s")


# -------------------------------------------------------------------------
# 6. scheduler exactness

def test_criterion_6_schedulers():
    c0 = abs(slimming.cosine_lr(0.1, 120, 0) - 0.1)
    c1 = abs(slimming.cosine_lr(0.1, 120, 60) - 0.05)
    c2 = abs(slimming.cosine_lr(0.1, 120, 120) - 0.0)
    s = [slimming.step_lr(0.1, t) for t in (0, 30, 60)]
    ok = (max(c0, c1, c2) <= 1e-12
          and s == [pytest.approx(v, abs=1e-15) for v in (0.1, 0.01, 0.001)])
    report("criterion 6", ok,
           f"cosine anchors dev {max(c0, c1, c2):.1e} (<= 1e-12), "
           f"step schedule {s}")


# -------------------------------------------------------------------------
# 7. KD degeneracies

def test_criterion_7_kd_degeneracies():
    r = np.random.default_rng(0)
    P = _sm(r.normal(size=(5, 4)))
    Pt = _sm(r.normal(size=(5, 4)))
    y = r.integers(0, 4, size=5)
    batch = distill.DetectionBatch(Tensor(P), Tensor(Pt),
                                   Tensor(np.zeros((5, 4))),
                                   Tensor(np.zeros((5, 4))), y,
                                   np.zeros((5, 4)), np.ones(5, dtype=bool))
    hard_dev = abs(distill.cls_loss(batch, 0.0, [1.5, 1, 1, 1]).item()
                   - (-np.log(P[np.arange(5), y]).sum()))

    f = r.normal(size=(2, 6, 5, 5))
    at_zero = distill.at_loss([Tensor(f.copy())], [Tensor(f.copy())]).item()

    def bounded(rs, rt):
        b = distill.DetectionBatch(
            Tensor(_sm(np.zeros((1, 2)))), Tensor(_sm(np.zeros((1, 2)))),
            Tensor(np.asarray([rs])), Tensor(np.asarray([rt])),
            np.ones(1, dtype=int), np.zeros((1, 4)), np.ones(1, dtype=bool))
        return distill.loc_components(b, margin=1.5)[1].item()

    # student clearly better: s_err 0.25, t_err 4.0 -> gate closed -> 0
    gate_closed = bounded([0.5, 0, 0, 0], [2.0, 0, 0, 0])
    # student no better: s_err 4.0 == t_err -> gate open -> s_err
    gate_open = bounded([2.0, 0, 0, 0], [2.0, 0, 0, 0])

    cfg = distill.KDConfig(mu0=0.9)
    mus = [cfg.mu_at(e) for e in (0, 60, 120)]

    ok = (hard_dev <= 1e-9 and at_zero == 0.0
          and gate_closed == 0.0 and abs(gate_open - 4.0) <= 1e-12
          and mus == [pytest.approx(v) for v in (0.9, 0.45, 0.225)])
    report("criterion 7", ok,
           f"mu=0 hard-CE dev {hard_dev:.1e} (<= 1e-9), AT(identical)="
           f"{at_zero}, gate examples ({gate_closed}, {gate_open}), "
           f"mu schedule {mus}")


# -------------------------------------------------------------------------
# 8. desk-scale pipeline property (slow)

def test_criterion_8_pipeline_ordering(tmp_path):
    t0 = time.monotonic()
    config = harness.load_config()
    seeds = range(5)
    accs = {}
    cap_ok = True
    for seed in seeds:
        res = harness.run_pipeline(config, str(tmp_path / f"seed{seed}"),
                                   seed=seed)
        for k, v in res.accuracies.items():
            accs.setdefault(k, []).append(v)
        cap_ok &= all(res.capacities[v] < res.capacities["teacher"]
                      for v in ("+P", "+P+R", "+P+R+KD"))
    mean = {k: float(np.mean(v)) for k, v in accs.items()}
    elapsed = time.monotonic() - t0
    ok = (mean["+P+R"] >= mean["+P"] and mean["+P+R+KD"] >= mean["+P+R"]
          and cap_ok and elapsed < 1800)
    report("criterion 8", ok,
           f"mean accuracy over {len(list(seeds))} seeds: "
           f"+P {mean['+P']:.3f} <= +P+R {mean['+P+R']:.3f} <= "
           f"+P+R+KD {mean['+P+R+KD']:.3f} (teacher {mean['teacher']:.3f}), "
           f"pruned < teacher capacity: {cap_ok}, {elapsed / 60:.1f} min")


# -------------------------------------------------------------------------
# 9. slimming effect (slow)

def _slim_small_count(lam, seed, epochs=400):
    scenes = detection.generate_scenes(48, seed, image_size=16)
    batches = detection.scenes_to_class_batches(scenes, 12)
    g = graph_ir.build_toy_backbone(4, 2, num_classes=3)
    s = ad.Session(g, mode="train", seed=seed)
    cfg = slimming.SlimConfig(lam=lam, schedule="slim_b", lr0=0.1,
                              epoch_max=epochs, target_prune_rate=0.4)
    _, gammas, _ = slimming.train_slim(s, batches, cfg)
    return sum(int((np.abs(v) < 0.01).sum()) for v in gammas.values())


def test_criterion_9_slimming_effect():
    t0 = time.monotonic()
    pairs = []
    for seed in range(3):
        with_l1 = _slim_small_count(1e-2, seed)
        without = _slim_small_count(0.0, seed)
        pairs.append((with_l1, without))
    elapsed = time.monotonic() - t0
    ok = (all(a >= 2 * max(b, 1) for a, b in pairs) and elapsed < 900)
    report("criterion 9", ok,
           f"|gamma| < 0.01 counts (lam=1e-2 vs lam=0) per seed: {pairs}, "
           f"ratio >= 2 everywhere, {elapsed / 60:.1f} min")
