"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line with the measured numbers; the lines are
printed together at the end of the pytest run (see conftest.py). The
directional replication trains 20 models on 2,000 synthetic pairs and is
marked ``slow``.
"""
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from m3rpd import evaluation as ev
from m3rpd import saliency as S
from m3rpd import trainer as tr
from m3rpd.cli import EXIT_OK, main
from m3rpd.datasets import ExamRecord, SynthConfig, generate_synthetic, load_manifest, split_indices, split_participants
from m3rpd.models import build_m3
from m3rpd.trainer import TrainConfig

from helpers import brute_auroc, brute_rank_sum_p, exact_rates, grad_cases, grad_check, random_confusions, tiny_backbone, tiny_splits
from test_saliency import ConvProbe

RESULTS = {}
BB = tiny_backbone()


def record(name, ok, detail):
    RESULTS[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- gradients


def test_gradient_correctness():
    t = time.perf_counter()
    errors = {name: grad_check(op, arrays) for name, op, arrays in grad_cases()}
    secs = time.perf_counter() - t
    worst = max(errors, key=errors.get)
    ok = len(errors) >= 20 and errors[worst] < 1e-4 and secs < 60
    record("gradient correctness", ok, f"{len(errors)} cases, worst rel err {errors[worst]:.1e} ({worst}), {secs:.1f}s")


# ---------------------------------------------------------------- metric oracles


def test_metric_oracles():
    t = time.perf_counter()
    bad = []
    for cm in random_confusions(50, 11):
        got = ev.rates_from_confusion(*cm)
        bad += [(cm, k) for k, v in exact_rates(*cm).items() if abs(got[k] - float(v)) > 1e-15]

    rng = np.random.default_rng(2)
    auc_gap = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 60))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding leaves ties
        a = ev.auroc(s, y)
        auc_gap = max(auc_gap, abs(a - ev.trapezoid_auc(ev.roc_curve(s, y))), abs(a - brute_auroc(s, y)))

    wil_gap, n_cases = 0.0, 0
    for na in range(1, 7):
        for nb in range(1, 7):
            for _ in range(3):
                a, b = rng.integers(0, 5, na).astype(float), rng.integers(0, 5, nb).astype(float)
                _, p = ev.wilcoxon_rank_sum(a, b, exact=True)
                wil_gap = max(wil_gap, abs(p - brute_rank_sum_p(a, b)))
                n_cases += 1
    secs = time.perf_counter() - t
    ok = not bad and auc_gap < 1e-9 and wil_gap < 1e-12 and secs < 60
    detail = f"50 confusions ({len(bad)} mismatches), AUROC |d|max {auc_gap:.1e} on 100, rank-sum |d|max {wil_gap:.1e} on {n_cases}, {secs:.1f}s"
    record("metric oracles", ok, detail)


# ---------------------------------------------------------------- directional replication


def _directional_job(manifest, kind, seed):
    from m3rpd.trainer import build_splits, split_predictions, train_baselines, train_m3

    recs = load_manifest(manifest)
    splits = build_splits(recs, split_participants(recs, seed=0))
    train = train_m3 if kind == "m3" else train_baselines
    model, _ = train(splits, TrainConfig(seed=seed))
    probs = split_predictions(model, splits.test)
    return kind, seed, {s: ev.auroc(probs[s], splits.test.labels) for s in probs}


@pytest.mark.slow
def test_directional_replication(tmp_path):
    t = time.perf_counter()
    generate_synthetic(SynthConfig(), str(tmp_path))
    manifest = str(tmp_path / "manifest.csv")
    jobs = [(kind, seed) for kind in ("m3", "non_m3") for seed in range(1, 6)]
    workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_directional_job, [manifest] * len(jobs), *zip(*jobs)))
    else:
        results = [_directional_job(manifest, k, s) for k, s in jobs]
    secs = time.perf_counter() - t

    med = {k: {s: float(np.median([r[s] for kind, _, r in results if kind == k])) for s in ("cfp", "faf", "fused")} for k in ("m3", "non_m3")}
    m3_wins = all(med["m3"][s] > med["non_m3"][s] for s in med["m3"])
    cfp_margin = med["m3"]["cfp"] - med["non_m3"]["cfp"]
    faf_over_cfp = all(med[k]["faf"] > med[k]["cfp"] for k in med)
    fmt = lambda d: "/".join(f"{d[s]:.3f}" for s in ("cfp", "faf", "fused"))
    detail = (
        f"median AUROC cfp/faf/fused M3 {fmt(med['m3'])} vs non-M3 {fmt(med['non_m3'])}; "
        f"CFP margin {cfp_margin:+.3f}; {secs / 60:.1f} min on {workers} worker(s)"
    )
    print(json.dumps({"per_run": results, "median": med, "seconds": secs}))
    record("directional (a) M3 > non-M3, CFP margin >= 0.02", m3_wins and cfp_margin >= 0.02, detail)
    record("directional (b) FAF > CFP for both kinds", faf_over_cfp, detail)
    record("directional runtime <= 30 min", secs <= 30 * 60, detail)


# ---------------------------------------------------------------- ablation


def test_ablation_structure():
    splits = tiny_splits(32, 16, 8, seed=9)
    cfg = TrainConfig(seed=3, max_epochs=3, non_m3_max_epochs=3, finetune_max_epochs=2)

    def trajectory(logs):
        return [(e.stage, e.epoch, e.train_loss, e.val_loss) for e in logs]

    _, ref = tr.train_baselines(splits, cfg, BB)
    _, both_off = tr.train_m3(splits, replace(cfg, no_attention=True, no_multitask=True), BB)
    _, attention = tr.train_m3(splits, replace(cfg, no_multitask=True), BB)
    _, multitask = tr.train_m3(splits, replace(cfg, no_attention=True), BB)
    same = trajectory(both_off) == trajectory(ref)
    changed = [trajectory(x) != trajectory(ref) for x in (attention, multitask)]
    record(
        "ablation structure",
        same and all(changed),
        f"both off == non-M3: {same}; attention alone differs: {changed[0]}; multitask alone differs: {changed[1]}",
    )


# ---------------------------------------------------------------- differential analysis


def test_differential_analysis():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 80)
    ca, cb = rng.random((5, 80)) < 0.8, rng.random((5, 80)) < 0.65
    worst = 0.0
    for iterations in (50, 200):
        s = ev.bootstrap_differential(ca, cb, y, iterations=iterations, seed=iterations)
        for stratum in ev.STRATA:
            worst = max(worst, float(np.abs(s.per_iteration[stratum].sum(axis=1) - 1).max()))
    single = ev.bootstrap_differential(ca[:1], cb[:1], y, iterations=200)
    sd_max = max(v for st_ in single.sd.values() for v in st_.values())
    record("differential analysis", worst <= 1e-9 and sd_max == 0.0, f"max |sum - 1| {worst:.1e} at 50/200 iterations; single-run sd max {sd_max}")


# ---------------------------------------------------------------- splits


def test_split_integrity():
    rng = np.random.default_rng(8)
    failures = 0
    for k in range(1000):
        n = int(rng.integers(3, 300))
        recs = [ExamRecord(f"P{p}", eye, f"v{v}", "c", "f", {"rpd": 0}) for p in range(n) for eye in ("left", "right") for v in range(int(rng.integers(1, 3)))]
        a = split_participants(recs, seed=k)
        idx = split_indices(recs, a)
        owners = [{recs[i].participant_id for i in rows} for rows in idx.values()]
        disjoint = all(not (x & y) for i, x in enumerate(owners) for y in owners[i + 1 :])
        sizes = [len(o) for o in owners]
        in_range = all(abs(sz - round(f * n)) <= 1 for sz, f in zip(sizes, (0.7, 0.1, 0.2))) and sum(sizes) == n
        failures += not (disjoint and in_range)
    record("split integrity", failures == 0, f"1000 random splits, {failures} violations")


# ---------------------------------------------------------------- stage-II freeze


def test_stage_two_freeze(monkeypatch):
    splits = tiny_splits(32, 16, 8, seed=4)
    cfg = TrainConfig(max_epochs=2, finetune_max_epochs=3, finetune_learning_rate=1e-2)
    model, _ = tr.train_multitask(build_m3(BB, seed=5), splits, cfg)
    snaps = {}
    real_fit = tr._fit

    def spy(stage, params, *args, **kwargs):
        if stage == "stage2_fused":
            snaps["before"] = {n: p.data.copy() for n, p in model.named_parameters()}
        return real_fit(stage, params, *args, **kwargs)

    monkeypatch.setattr(tr, "_fit", spy)
    tr.cascade_finetune(model, splits, cfg)
    after = dict(model.named_parameters())
    frozen = [n for n in snaps["before"] if n.startswith(("cfp_backbone", "faf_backbone", "sa_cfp", "sa_faf"))]
    changed = [n for n in frozen if not np.array_equal(snaps["before"][n], after[n].data)]
    trained = sum(not np.array_equal(snaps["before"][n], after[n].data) for n in snaps["before"] if n not in frozen)
    record("stage-II freeze", frozen and not changed, f"{len(frozen)} frozen tensors, {len(changed)} changed by step (c); {trained} trainable tensors moved")


# ---------------------------------------------------------------- saliency


def test_saliency_contract():
    rng = np.random.default_rng(6)
    zero = S.saliency_map(ConvProbe([1.0], w=0.0, c=2.0), "faf", faf=rng.random((12, 12, 1)))["faf"]
    zero_ok = not np.any(zero.values)

    sign_bad = 0
    for _ in range(50):
        w, k = rng.choice([-1, 1]) * rng.uniform(0.1, 3), rng.choice([-1, 1]) * rng.uniform(0.1, 2)
        img = rng.normal(size=(7, 9, 1))
        smap = S.saliency_map(ConvProbe([k], w=w), "faf", faf=img)["faf"]
        sign_bad += not np.array_equal(np.sign(smap.values), np.sign(w * k * img[..., 0]))

    range_bad = 0
    for seed in range(5):
        m = build_m3(BB, seed=seed)
        c, f = rng.random((16, 16, 3)), rng.random((16, 16, 1))
        for smap in S.saliency_map(m, "fused", c, f, "r").values():
            v = smap.values
            range_bad += v.min() < -1 or v.max() > 1 or (np.ptp(v) > 0 and np.abs(v).max() != 1.0)
    record("saliency contract", zero_ok and not sign_bad and not range_bad, f"zero probe all-zero: {zero_ok}; sign mismatches {sign_bad}/50; range violations {range_bad}/10")


# ---------------------------------------------------------------- end to end

E2E = {
    "synth": {"n_participants": 12, "image_size": 16, "seed": 2},
    "backbone": {"input_size": 16, "blocks": [[4, True], [8, True]], "head_width": 8},
    "train": {"max_epochs": 2, "non_m3_max_epochs": 2, "finetune_max_epochs": 1},
    "ensemble": {"runs": 2},
    "eval": {"iterations": 50},
    "saliency": {"ids": ["P00001_left_v1", "P00002_right_v2"]},
}


def _pipeline(root, echoes=None):
    """synth -> train (M3 and non-M3) -> eval -> saliency under ``root``.

    With ``echoes`` every step runs from the config.json its first execution
    wrote, with only the paths pointed at ``root``.
    """
    first = root / "given.json"
    first.write_text(json.dumps(E2E))

    def cfg(step):
        return str(echoes / step / "config.json") if echoes else str(first)

    data, man = root / "synth", str(root / "synth" / "manifest.csv")
    ck = str(root / "m3" / "run_01" / "checkpoint.m3ck")
    steps = [
        ("synth", ["synth", "--out", str(data)]),
        ("m3", ["train", "--manifest", man, "--kind", "m3", "--out", str(root / "m3")]),
        ("non_m3", ["train", "--manifest", man, "--kind", "non_m3", "--out", str(root / "non_m3")]),
        ("eval", ["eval", "--manifest", man, "--ensemble", str(root / "m3"), "--compare", str(root / "non_m3"), "--differential", str(root / "non_m3"), "--out", str(root / "eval")]),
        ("saliency", ["saliency", "--checkpoint", ck, "--manifest", man, "--out", str(root / "saliency")]),
    ]
    for step, args in steps:
        assert main([args[0], "--config", cfg(step)] + args[1:]) == EXIT_OK, step


def _artifacts(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            if name in ("timings.csv", "given.json"):
                continue  # wall-clock times; the hand-written input
            p = os.path.join(dirpath, name)
            data = open(p, "rb").read()
            if name.endswith(".json"):  # configs and summaries name their input directories
                data = data.replace(str(root).encode(), b"<root>")
            out[os.path.relpath(p, root)] = data
    return out


def test_end_to_end_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b, echoes=a)
    fa, fb = _artifacts(a), _artifacts(b)
    differ = sorted(k for k in fa if fa[k] != fb.get(k))
    missing = sorted(set(fa) ^ set(fb))
    n_ck = sum(k.endswith("checkpoint.m3ck") for k in fa)
    n_png = sum(k.endswith(".png") for k in fa)
    ok = not differ and not missing and n_ck == 4 and n_png > 0
    record("end-to-end reproducibility", ok, f"{len(fa)} artifacts ({n_ck} checkpoints, {n_png} PNGs); differing {differ[:3]}; missing {missing[:3]}")
