"""Two-stage M3 training, single-task baseline training and repeated-run ensembles.

Stage I trains the three heads jointly on a weighted sum of per-task BCE
losses. Stage II fine-tunes the CFP path, then the FAF path, then only the
fusion module and fused head on frozen per-modality features.

Every stochastic choice (batch order, augmentation) draws from a generator
keyed on ``(seed, tag)``, so a run is a pure function of its seed, its data
and its config.
"""
import csv
import json
import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evaluation
from .attention import AttentionOutput
from .datasets import FEATURES, SPLITS, apply_transform, load_arrays, sample_transform, select_feature
from .models import SCENARIOS, BackboneConfig, M3Model, SeparateModels, build_m3, build_non_m3, predict_batch, scenarios_of
from .tensor import Adam, NonFiniteError, Tensor, add, backward, bce_with_logits, mul, no_grad
from .tensor import checkpoint as ckpt

log = logging.getLogger(__name__)

KINDS = ("m3", "non_m3")
EVAL_BATCH = 64


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient stopped training; ``state`` holds the last good parameters."""

    def __init__(self, message, stage, epoch, state, logs):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
        self.state = state
        self.logs = logs


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    finetune_learning_rate: float = 0.0001
    batch_size: int = 16
    early_stop_patience: int = 5
    max_epochs: int = 30
    non_m3_max_epochs: int = 10
    finetune_max_epochs: int = 10
    multitask_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 1
    feature: str = "rpd"
    no_attention: bool = False
    no_multitask: bool = False
    augment: bool = True

    def __post_init__(self):
        self.multitask_weights = tuple(float(w) for w in self.multitask_weights)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.finetune_learning_rate >= 0:
            raise ValueError(f"finetune_learning_rate must be >= 0, got {self.finetune_learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        for nm in ("max_epochs", "non_m3_max_epochs", "finetune_max_epochs"):
            if getattr(self, nm) < 0:
                raise ValueError(f"{nm} must be >= 0, got {getattr(self, nm)}")
        if len(self.multitask_weights) != 3 or any(w < 0 for w in self.multitask_weights):
            raise ValueError(f"multitask_weights must be three non-negative numbers, got {self.multitask_weights}")
        if self.feature not in FEATURES:
            raise ValueError(f"feature must be one of {FEATURES}, got {self.feature!r}")

    def to_dict(self):
        d = asdict(self)
        d["multitask_weights"] = list(self.multitask_weights)
        return d


@dataclass
class EpochLog:
    stage: str
    epoch: int
    train_loss: dict  # task -> mean loss over the epoch (empty for the epoch-0 baseline)
    val_loss: dict  # task -> mean loss over the validation split
    monitored: float
    wall_time: float = 0.0


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = None
        self.best_state = None
        self.wait = 0

    def update(self, loss, epoch, state_fn=None):
        """Record one epoch; returns True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.best_state = state_fn() if state_fn is not None else None
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# ---------------------------------------------------------------- data


@dataclass
class SplitData:
    cfp: np.ndarray
    faf: np.ndarray
    labels: np.ndarray
    record_ids: list

    def __len__(self):
        return len(self.labels)


@dataclass
class Splits:
    train: SplitData
    val: SplitData
    test: SplitData

    def __getitem__(self, name):
        return getattr(self, name)


def build_splits(records, assignment, backbone=None, feature="rpd"):
    """Decode the images of every labelled record and group them by split."""
    backbone = backbone or BackboneConfig()
    kept = select_feature(records, feature)
    cfp, faf, labels = load_arrays(kept, backbone.input_size, backbone.cfp_channels, backbone.faf_channels, feature)
    parts = {}
    for s in SPLITS:
        idx = np.array([i for i, r in enumerate(kept) if assignment[r.participant_id] == s], dtype=np.int64)
        parts[s] = SplitData(cfp[idx], faf[idx], labels[idx], [kept[i].record_id for i in idx])
    return Splits(**parts)


def run_rng(seed, tag):
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode("utf-8"))])


def _batches(data, batch_size, rng, augment, modalities):
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        c = data.cfp[idx] if "cfp" in modalities else None
        f = data.faf[idx] if "faf" in modalities else None
        if augment:
            for k in range(len(idx)):
                t = sample_transform(rng)
                if c is not None:
                    c[k] = apply_transform(c[k], t)
                if f is not None:
                    f[k] = apply_transform(f[k], t)
        yield c, f, data.labels[idx]


def _bce_sum(logits, y):
    """Sum (not mean) of per-record BCE, in float64, for validation accumulation."""
    z = logits.data.reshape(-1).astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, state):
    for p, arr in zip(params, state):
        p.data = arr.copy()


def _fit(stage, params, step_loss, val_losses, monitor, train, lr, max_epochs, patience, rng, batch_size, augment, modalities, logs, baseline=False):
    """Generic epoch loop with early stopping and best-epoch restore.

    ``step_loss(cfp, faf, y)`` returns ``(loss_tensor, {task: float})``;
    ``val_losses()`` returns ``{task: mean loss}``; ``monitor`` maps those to
    the early-stopping quantity. With ``baseline`` the untouched parameters
    compete as epoch 0, so the result is never worse on validation than the
    starting point.
    """
    opt = Adam(params, learning_rate=lr)
    stopper = EarlyStopping(patience)
    initial = _snapshot(params)
    if baseline:
        v = val_losses()
        logs.append(EpochLog(stage, 0, {}, v, monitor(v)))
        stopper.update(monitor(v), 0, lambda: initial)
    for epoch in range(1, max_epochs + 1):
        t0 = time.perf_counter()
        sums, count = {}, 0
        try:
            for c, f, y in _batches(train, batch_size, rng, augment, modalities):
                loss, parts = step_loss(c, f, y)
                backward(loss, params)
                opt.step()
                for k, val in parts.items():
                    sums[k] = sums.get(k, 0.0) + val * len(y)
                count += len(y)
            v = val_losses()
            if not all(np.isfinite(x) for x in v.values()):
                raise NonFiniteError(f"{stage}: non-finite validation loss {v}")
        except FloatingPointError as exc:
            good = stopper.best_state if stopper.best_state is not None else initial
            _restore(params, good)
            raise TrainingAborted(f"{stage} epoch {epoch}: {exc}", stage, epoch, good, logs) from exc
        tr = {k: s / max(count, 1) for k, s in sums.items()}
        m = monitor(v)
        logs.append(EpochLog(stage, epoch, tr, v, m, time.perf_counter() - t0))
        log.debug("%s epoch %d train %s val %s", stage, epoch, tr, v)
        if stopper.update(m, epoch, lambda: _snapshot(params)):
            break
    if stopper.best_state is not None:
        _restore(params, stopper.best_state)
    return stopper.best_epoch


def _val_single(model, scenario, data):
    def fn():
        total = 0.0
        with no_grad():
            for i in range(0, len(data), EVAL_BATCH):
                c = data.cfp[i : i + EVAL_BATCH] if scenario != "faf" else None
                f = data.faf[i : i + EVAL_BATCH] if scenario != "cfp" else None
                total += _bce_sum(model.logits(scenario, c, f), data.labels[i : i + EVAL_BATCH])
        return {scenario: total / max(len(data), 1)}

    return fn


def _modalities(scenario):
    return ("cfp", "faf") if scenario == "fused" else (scenario,)


def _require_labels(data, name):
    if len(data) == 0:
        raise ValueError(f"the {name} split is empty")
    if np.any(data.labels < 0):
        raise ValueError(f"the {name} split contains records without a label")


# ---------------------------------------------------------------- single-task (non-M3) training


def train_single(model, scenario, splits, config, tag=None):
    """Single-task BCE training of one scenario model with the baseline cap."""
    _require_labels(splits.train, "train")
    _require_labels(splits.val, "val")
    rng = run_rng(config.seed, tag or f"non_m3:{scenario}")
    params = model.parameters()
    logs = []

    def step(c, f, y):
        loss = bce_with_logits(model.logits(scenario, c, f), y)
        return loss, {scenario: float(loss.data)}

    _fit(
        f"single_{scenario}",
        params,
        step,
        _val_single(model, scenario, splits.val),
        lambda v: v[scenario],
        splits.train,
        config.learning_rate,
        config.non_m3_max_epochs,
        config.early_stop_patience,
        rng,
        config.batch_size,
        config.augment,
        _modalities(scenario),
        logs,
    )
    return model, logs


def train_non_m3(scenario, splits, config, backbone=None):
    """Baseline for one scenario: no attention, no sharing, no stage II."""
    model = build_non_m3(scenario, backbone, config.feature, config.seed)
    return train_single(model, scenario, splits, config)


# ---------------------------------------------------------------- M3 training


def train_multitask(model, splits, config):
    """Stage I: one Adam step per minibatch on the weighted sum of the three task losses."""
    _require_labels(splits.train, "train")
    _require_labels(splits.val, "val")
    w = dict(zip(SCENARIOS, config.multitask_weights))
    params = model.parameters()
    logs = []

    def step(c, f, y):
        out = model.forward_all(c, f)
        losses = {s: bce_with_logits(out[s], y) for s in SCENARIOS}
        total = None
        for s in SCENARIOS:
            term = mul(losses[s], w[s])
            total = term if total is None else add(total, term)
        return total, {s: float(losses[s].data) for s in SCENARIOS}

    def val():
        sums = dict.fromkeys(SCENARIOS, 0.0)
        data = splits.val
        with no_grad():
            for i in range(0, len(data), EVAL_BATCH):
                out = model.forward_all(data.cfp[i : i + EVAL_BATCH], data.faf[i : i + EVAL_BATCH])
                for s in SCENARIOS:
                    sums[s] += _bce_sum(out[s], data.labels[i : i + EVAL_BATCH])
        return {s: v / len(data) for s, v in sums.items()}

    _fit(
        "stage1",
        params,
        step,
        val,
        lambda v: sum(w[s] * v[s] for s in SCENARIOS),
        splits.train,
        config.learning_rate,
        config.max_epochs,
        config.early_stop_patience,
        run_rng(config.seed, "m3:stage1"),
        config.batch_size,
        config.augment,
        ("cfp", "faf"),
        logs,
    )
    return model, logs


def _frozen_features(model, cfp, faf):
    """Per-modality features feeding the fusion module, computed without a graph."""
    with no_grad():
        ec, pc, _ = model.encode("cfp", Tensor(cfp))
        ef, pf, _ = model.encode("faf", Tensor(faf))
    if model._no_attention:
        return Tensor(pc.data), Tensor(pf.data)
    return (
        AttentionOutput(Tensor(ec.distilled.data), Tensor(ec.pooled.data), ec.weights),
        AttentionOutput(Tensor(ef.distilled.data), Tensor(ef.pooled.data), ef.weights),
    )


def cascade_finetune(model, splits, config):
    """Stage II: fine-tune the CFP path, then the FAF path, then fusion on frozen features.

    Each step uses ``finetune_learning_rate`` and keeps its starting
    parameters as an epoch-0 candidate, so no step can end worse on its own
    validation loss than it began.
    """
    _require_labels(splits.train, "train")
    _require_labels(splits.val, "val")
    logs = []
    lr = config.finetune_learning_rate
    for scenario in ("cfp", "faf"):
        params = model.path_parameters(scenario)

        def step(c, f, y, s=scenario):
            loss = bce_with_logits(model.logits(s, c, f), y)
            return loss, {s: float(loss.data)}

        _fit(
            f"stage2_{scenario}",
            params,
            step,
            _val_single(model, scenario, splits.val),
            lambda v, s=scenario: v[s],
            splits.train,
            lr,
            config.finetune_max_epochs,
            config.early_stop_patience,
            run_rng(config.seed, f"m3:stage2:{scenario}"),
            config.batch_size,
            config.augment,
            (scenario,),
            logs,
            baseline=True,
        )

    # (c): backbones and self-attention are frozen; only fusion + fused head move
    params = model.path_parameters("fused")
    val = splits.val
    val_feats = [_frozen_features(model, val.cfp[i : i + EVAL_BATCH], val.faf[i : i + EVAL_BATCH]) for i in range(0, len(val), EVAL_BATCH)]

    def step(c, f, y):
        a, b = _frozen_features(model, c, f)
        loss = bce_with_logits(model.head_fused(model.fuse(a, b)), y)
        return loss, {"fused": float(loss.data)}

    def val_fused():
        total = 0.0
        with no_grad():
            for k, (a, b) in enumerate(val_feats):
                z = model.head_fused(model.fuse(a, b))
                total += _bce_sum(z, val.labels[k * EVAL_BATCH : (k + 1) * EVAL_BATCH])
        return {"fused": total / len(val)}

    _fit(
        "stage2_fused",
        params,
        step,
        val_fused,
        lambda v: v["fused"],
        splits.train,
        lr,
        config.finetune_max_epochs,
        config.early_stop_patience,
        run_rng(config.seed, "m3:stage2:fused"),
        config.batch_size,
        config.augment,
        ("cfp", "faf"),
        logs,
        baseline=True,
    )
    return model, logs


def train_m3(splits, config, backbone=None):
    """Full M3 procedure for one seed, honouring the ablation flags.

    With ``no_multitask`` the three scenario models are separate and each is
    trained by exactly the single-task procedure used for the baselines.
    """
    model = build_m3(backbone, config.feature, config.seed, config.no_attention, config.no_multitask)
    if config.no_multitask:
        logs = []
        for s in SCENARIOS:
            logs += train_single(model.model(s), s, splits, config)[1]
        return model, logs
    model, logs1 = train_multitask(model, splits, config)
    model, logs2 = cascade_finetune(model, splits, config)
    return model, logs1 + logs2


def train_baselines(splits, config, backbone=None):
    """The three non-M3 models of one seed, bundled for checkpointing."""
    model = SeparateModels(backbone, config.feature, config.seed, attention=False, kind="non_m3")
    logs = []
    for s in SCENARIOS:
        logs += train_single(model.model(s), s, splits, config)[1]
    return model, logs


# ---------------------------------------------------------------- artifacts


EPOCH_COLUMNS = ["stage", "epoch"] + [f"train_{s}" for s in SCENARIOS] + [f"val_{s}" for s in SCENARIOS] + ["monitored"]


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_epoch_logs(path, logs):
    """Loss trajectory; wall time is kept out so the file is reproducible bit for bit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for e in logs:
            w.writerow(
                [e.stage, e.epoch]
                + [_fmt(e.train_loss.get(s)) for s in SCENARIOS]
                + [_fmt(e.val_loss.get(s)) for s in SCENARIOS]
                + [_fmt(e.monitored)]
            )


def write_timings(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "wall_time_s"])
        for e in logs:
            w.writerow([e.stage, e.epoch, f"{e.wall_time:.3f}"])


def read_epoch_logs(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_model(path, model, config=None):
    meta = {"model": model.manifest()}
    if config is not None:
        meta["train"] = config.to_dict()
    ckpt.save(path, model.named_parameters(), meta)


def load_model(path):
    """Rebuild a model from a checkpoint written by :func:`save_model`."""
    from .models import build_from_manifest

    meta, arrays = ckpt.load(path)
    if "model" not in meta:
        raise ckpt.CheckpointError(f"{path}: checkpoint carries no model manifest")
    model = build_from_manifest(meta["model"])
    ckpt.assign(model, arrays)
    return model, meta


def split_predictions(model, data, scenarios=None):
    """``{scenario: probabilities}`` over a split."""
    out = {}
    for s in scenarios or scenarios_of(model):
        c = data.cfp if s != "faf" else None
        f = data.faf if s != "cfp" else None
        out[s] = predict_batch(model, s, c, f, EVAL_BATCH)[0]
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- ensembles


@dataclass
class RunOutcome:
    index: int
    seed: int
    directory: str = ""
    model: object = None
    logs: list = field(default_factory=list)
    probs: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    error: str = ""


def _train_kind(kind, splits, config, backbone, scenario):
    if kind == "m3":
        return train_m3(splits, config, backbone)
    if scenario is None or scenario == "all":
        return train_baselines(splits, config, backbone)
    return train_non_m3(scenario, splits, config, backbone)


def run_ensemble(kind, n_runs, splits, config, backbone=None, out_dir=None, scenario=None, threads=None):
    """Train ``n_runs`` models that differ only in seed (``config.seed + i``) on one split.

    Runs may execute on a thread pool (``threads`` or env ``M3_THREADS``);
    results are collected by run index, so scheduling does not affect them.
    A run that fails is reported and the ensemble is marked partial.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if n_runs < 2:
        raise ValueError(f"an ensemble needs at least 2 runs, got {n_runs}")
    if kind == "m3" and scenario not in (None, "all"):
        raise ValueError("M3 trains all three scenarios together; --scenario applies to non_m3 only")
    seeds = [config.seed + i for i in range(n_runs)]
    scen = SCENARIOS if scenario in (None, "all") else (scenario,)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    test = splits.test

    def one(i):
        res = RunOutcome(i, seeds[i])
        cfg = replace(config, seed=seeds[i])
        try:
            model, logs = _train_kind(kind, splits, cfg, backbone, scenario)
        except (TrainingAborted, FloatingPointError, ValueError) as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            log.warning("run %d (seed %d) failed: %s", i + 1, seeds[i], exc)
            return res
        res.model, res.logs = model, logs
        res.probs = split_predictions(model, test, scen)
        res.reports = {s: evaluation.panel(res.probs[s], test.labels, 0.5, s, cfg.feature) for s in scen}
        if out_dir is not None:
            res.directory = f"run_{i + 1:02d}"
            d = os.path.join(out_dir, res.directory)
            os.makedirs(d, exist_ok=True)
            save_model(os.path.join(d, "checkpoint.m3ck"), model, cfg)
            write_epoch_logs(os.path.join(d, "epochs.csv"), logs)
            write_timings(os.path.join(d, "timings.csv"), logs)
            _write_json(os.path.join(d, "config.json"), {"kind": kind, "train": cfg.to_dict(), "model": model.manifest()})
            pred = os.path.join(d, "predictions.csv")
            evaluation.write_predictions_csv(pred, [], "", [], [])
            for s in scen:
                evaluation.append_predictions_csv(pred, test.record_ids, s, res.probs[s], test.labels)
            _write_json(os.path.join(d, "metrics.json"), [res.reports[s].to_dict() for s in scen])
        return res

    n_threads = threads if threads is not None else int(os.environ.get("M3_THREADS", "1") or 1)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            outcomes = list(pool.map(one, range(n_runs)))
    else:
        outcomes = [one(i) for i in range(n_runs)]

    ok = [o for o in outcomes if not o.error]
    ens = evaluation.RunEnsemble(
        kind=kind,
        seeds=[o.seed for o in ok],
        reports={s: [o.reports[s] for o in ok] for s in scen},
        predictions={s: [o.probs[s] for o in ok] for s in scen},
        labels=test.labels,
        record_ids=list(test.record_ids),
        failed=[{"seed": o.seed, "error": o.error} for o in outcomes if o.error],
    )
    ens.outcomes = outcomes
    if out_dir is not None:
        _write_json(os.path.join(out_dir, "ensemble.json"), ensemble_summary(ens, outcomes, config))
    return ens


def ensemble_summary(ens, outcomes, config):
    return {
        "kind": ens.kind,
        "feature": config.feature,
        "seeds": [o.seed for o in outcomes],
        "scenarios": list(ens.reports),
        "partial": ens.partial,
        "failed": ens.failed,
        "runs": [{"seed": o.seed, "dir": o.directory, "status": "failed" if o.error else "ok"} for o in outcomes],
        "summary": {s: evaluation.aggregate(r) if r else {} for s, r in ens.reports.items()},
        "train": config.to_dict(),
    }


def load_ensemble_dir(path):
    """Read ``ensemble.json`` and every surviving run's checkpoint path."""
    with open(os.path.join(path, "ensemble.json")) as fh:
        meta = json.load(fh)
    runs = [(r["seed"], os.path.join(path, r["dir"], "checkpoint.m3ck")) for r in meta["runs"] if r["status"] == "ok"]
    return meta, runs
