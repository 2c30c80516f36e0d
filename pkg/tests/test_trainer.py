import json
from dataclasses import replace

import numpy as np
import pytest

from m3rpd import trainer as tr
from m3rpd.models import build_m3
from m3rpd.tensor import Tensor, backward, bce_with_logits, mul, sum_
from m3rpd.trainer import EarlyStopping, TrainConfig, TrainingAborted

from helpers import tiny_backbone, tiny_split, tiny_splits

BB = tiny_backbone()


def quick(**kw):
    base = dict(max_epochs=2, non_m3_max_epochs=2, finetune_max_epochs=1, augment=False)
    base.update(kw)
    return TrainConfig(**base)


def params_of(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


# ---------------------------------------------------------------- config and early stopping


@pytest.mark.parametrize(
    "kw,match",
    [
        ({"learning_rate": 0}, "learning_rate"),
        ({"finetune_learning_rate": -1}, "finetune_learning_rate"),
        ({"early_stop_patience": 0}, "patience"),
        ({"multitask_weights": (1, 1)}, "multitask_weights"),
        ({"feature": "oct"}, "feature"),
    ],
)
def test_config_validation(kw, match):
    with pytest.raises(ValueError, match=match):
        TrainConfig(**kw)


def test_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.finetune_learning_rate, c.batch_size, c.early_stop_patience) == (1e-3, 1e-4, 16, 5)
    assert (c.max_epochs, c.non_m3_max_epochs, c.multitask_weights) == (30, 10, (1.0, 1.0, 1.0))


def test_patience_rule_stops_after_epoch_7_keeping_epoch_2():
    es = EarlyStopping(5)
    stops = [es.update(v, e) for e, v in enumerate([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9], start=1)]
    assert stops == [False] * 6 + [True] and es.best_epoch == 2


def test_fit_restores_best_epoch_parameters():
    p = Tensor(np.array([1.0]), requires_grad=True)
    data = tiny_split(4, 0)
    script = iter([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.1])
    seen = {}

    def step(c, f, y):
        return sum_(mul(p, p)), {"cfp": 0.0}

    def val():
        seen[len(seen) + 1] = p.data.copy()
        return {"cfp": next(script)}

    logs = []
    best = tr._fit("s", [p], step, val, lambda v: v["cfp"], data, 0.1, 30, 5, np.random.default_rng(0), 16, False, ("cfp",), logs)
    assert best == 2 and len(logs) == 7
    assert np.array_equal(p.data, seen[2])
    # never returns an epoch whose monitored loss exceeds the best
    assert logs[best - 1].monitored == min(e.monitored for e in logs)


def test_non_finite_input_aborts_with_last_good_state():
    splits = tiny_splits(16, 8, 8)
    splits.train.faf[3, 0, 0, 0] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        tr.train_non_m3("faf", splits, quick(), BB)
    assert exc.value.stage == "single_faf" and exc.value.epoch == 1 and exc.value.state


# ---------------------------------------------------------------- stage I / II mechanics


def test_zero_weights_cut_gradient_to_other_tasks():
    m = build_m3(BB, seed=0)
    s = tiny_split(4, 0)
    out = m.forward_all(s.cfp, s.faf)
    loss = mul(bce_with_logits(out["cfp"], s.labels), 1.0)
    for k in ("faf", "fused"):
        loss = loss + mul(bce_with_logits(out[k], s.labels), 0.0)
    backward(loss, m.parameters())
    named = dict(m.named_parameters())
    for name, p in named.items():
        if name.startswith(("faf_backbone", "sa_faf", "head_faf", "head_fused", "xattn")):
            assert not np.any(p.grad), name
    assert np.any(named["head_cfp.out.w"].grad) and np.any(named["cfp_backbone.blocks.0.b1.w"].grad)


def test_stage_two_freezes_backbones_and_self_attention(monkeypatch):
    splits = tiny_splits(32, 16, 8)
    cfg = quick(finetune_max_epochs=2)
    model, _ = tr.train_multitask(build_m3(BB, seed=1), splits, cfg)
    captured = {}
    real_fit = tr._fit

    def spy(stage, params, *args, **kwargs):
        if stage == "stage2_fused":
            captured["before"] = params_of(model)
        out = real_fit(stage, params, *args, **kwargs)
        if stage == "stage2_fused":
            captured["after"] = params_of(model)
        return out

    monkeypatch.setattr(tr, "_fit", spy)
    tr.cascade_finetune(model, splits, cfg)
    before, after = captured["before"], captured["after"]
    frozen = [n for n in before if n.startswith(("cfp_backbone", "faf_backbone", "sa_cfp", "sa_faf", "head_cfp", "head_faf"))]
    assert frozen and all(np.array_equal(before[n], after[n]) for n in frozen)


def test_finetune_with_zero_lr_changes_nothing():
    splits = tiny_splits(16, 8, 8)
    model = build_m3(BB, seed=2)
    before = params_of(model)
    tr.cascade_finetune(model, splits, quick(finetune_learning_rate=0.0, finetune_max_epochs=2))
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())


def test_finetune_never_worsens_its_monitored_loss():
    splits = tiny_splits(32, 16, 8)
    model = build_m3(BB, seed=3)
    _, logs = tr.cascade_finetune(model, splits, quick(finetune_learning_rate=0.05, finetune_max_epochs=3))
    for stage in ("stage2_cfp", "stage2_faf", "stage2_fused"):
        rows = [e for e in logs if e.stage == stage]
        assert rows[0].epoch == 0 and min(e.monitored for e in rows) <= rows[0].monitored


# ---------------------------------------------------------------- baselines


def test_separable_set_is_learned():
    splits = tiny_splits(128, 32, 16, separation=0.7)
    _, logs = tr.train_non_m3("faf", splits, TrainConfig(non_m3_max_epochs=30, augment=False, early_stop_patience=30), BB)
    assert min(e.train_loss["faf"] for e in logs) < 0.05


def test_fused_baseline_needs_both_images():
    from m3rpd.models import build_non_m3

    s = tiny_split(2, 0)
    with pytest.raises(ValueError, match="requires an FAF image"):
        build_non_m3("fused", BB).logits("fused", s.cfp, None)


def test_fixed_seed_reproduces_checkpoint(tmp_path):
    splits = tiny_splits(24, 8, 8)
    a, logs_a = tr.train_non_m3("cfp", splits, quick(seed=7, augment=True), BB)
    b, logs_b = tr.train_non_m3("cfp", splits, quick(seed=7, augment=True), BB)
    tr.save_model(tmp_path / "a.m3ck", a)
    tr.save_model(tmp_path / "b.m3ck", b)
    assert (tmp_path / "a.m3ck").read_bytes() == (tmp_path / "b.m3ck").read_bytes()
    assert [e.val_loss for e in logs_a] == [e.val_loss for e in logs_b]


def test_ablation_reproduces_baseline_trajectory():
    splits = tiny_splits(32, 16, 8)
    cfg = quick(seed=4, augment=True)
    ref_model, ref = tr.train_baselines(splits, cfg, BB)
    abl_model, abl = tr.train_m3(splits, replace(cfg, no_attention=True, no_multitask=True), BB)
    assert [(e.stage, e.epoch, e.train_loss, e.val_loss) for e in abl] == [(e.stage, e.epoch, e.train_loss, e.val_loss) for e in ref]
    assert all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(ref_model.named_parameters(), abl_model.named_parameters()))
    _, att = tr.train_m3(splits, replace(cfg, no_multitask=True), BB)
    assert [e.val_loss for e in att] != [e.val_loss for e in ref]


# ---------------------------------------------------------------- ensembles and artifacts


def test_ensemble_writes_runs_and_is_reproducible(tmp_path):
    splits = tiny_splits(24, 8, 12)
    cfg = quick()
    ens = tr.run_ensemble("non_m3", 2, splits, cfg, BB, str(tmp_path / "a"), scenario="faf")
    assert ens.seeds == [1, 2] and len(ens.reports["faf"]) == 2 and not ens.partial
    run = tmp_path / "a" / "run_01"
    for name in ("checkpoint.m3ck", "epochs.csv", "timings.csv", "config.json", "predictions.csv", "metrics.json"):
        assert (run / name).exists(), name
    rows = tr.read_epoch_logs(run / "epochs.csv")
    assert list(rows[0]) == tr.EPOCH_COLUMNS
    model, meta = tr.load_model(run / "checkpoint.m3ck")
    assert meta["train"]["seed"] == 1
    np.testing.assert_allclose(tr.split_predictions(model, splits.test)["faf"], ens.predictions["faf"][0], rtol=1e-6)
    again = tr.run_ensemble("non_m3", 2, splits, cfg, BB, str(tmp_path / "b"), scenario="faf", threads=2)
    assert (tmp_path / "a" / "ensemble.json").read_text() == (tmp_path / "b" / "ensemble.json").read_text()
    meta, runs = tr.load_ensemble_dir(str(tmp_path / "a"))
    assert meta["seeds"] == [1, 2] and len(runs) == 2


def test_ensemble_marks_failed_runs_partial(monkeypatch):
    splits = tiny_splits(16, 8, 8)
    real = tr._train_kind

    def flaky(kind, splits_, config, backbone, scenario):
        if config.seed == 2:
            raise TrainingAborted("boom", "single_faf", 1, [], [])
        return real(kind, splits_, config, backbone, scenario)

    monkeypatch.setattr(tr, "_train_kind", flaky)
    ens = tr.run_ensemble("non_m3", 3, splits, quick(), BB, scenario="faf")
    assert ens.partial and ens.seeds == [1, 3]
    assert ens.failed[0]["seed"] == 2 and "boom" in ens.failed[0]["error"]


def test_ensemble_argument_checks():
    splits = tiny_splits(8, 4, 4)
    with pytest.raises(ValueError, match="at least 2"):
        tr.run_ensemble("m3", 1, splits, quick(), BB)
    with pytest.raises(ValueError, match="kind"):
        tr.run_ensemble("svm", 2, splits, quick(), BB)
    with pytest.raises(ValueError, match="scenario"):
        tr.run_ensemble("m3", 2, splits, quick(), BB, scenario="cfp")


def test_m3_ensemble_config_echo(tmp_path):
    splits = tiny_splits(16, 8, 8)
    tr.run_ensemble("m3", 2, splits, quick(), BB, str(tmp_path))
    cfg = json.loads((tmp_path / "run_02" / "config.json").read_text())
    assert cfg["kind"] == "m3" and cfg["train"]["seed"] == 2 and cfg["model"]["kind"] == "m3"
    metrics = json.loads((tmp_path / "run_02" / "metrics.json").read_text())
    assert [m["scenario"] for m in metrics] == ["cfp", "faf", "fused"]
