"""Command-line entry point: ``m3rpd {synth,train,eval,saliency}``.

Settings come from an optional JSON config (``--config``) whose sections
mirror the module configs; command-line flags override it. Each command
writes the fully resolved config to ``config.json`` in its output directory,
and ``--config <that file> --out <new dir>`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import copy
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import evaluation, saliency
from .datasets import (
    FEATURES,
    ManifestError,
    SynthConfig,
    generate_synthetic,
    load_arrays,
    load_manifest,
    read_splits,
    select_feature,
    split_participants,
    write_splits,
)
from .models import SCENARIOS, BackboneConfig, scenarios_of
from .trainer import KINDS, TrainConfig, TrainingAborted, build_splits, load_ensemble_dir, load_model, run_ensemble, split_predictions, SplitData
from .tensor.checkpoint import CheckpointError

log = logging.getLogger("m3rpd")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _synth_defaults():
    d = SynthConfig().__dict__.copy()
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("feature")
    return d


DEFAULTS = {
    "feature": "rpd",
    "manifest": None,
    "synth": _synth_defaults(),
    "backbone": BackboneConfig().to_dict(),
    "split": {"seed": 0, "fractions": [0.7, 0.1, 0.2]},
    "train": _train_defaults(),
    "ensemble": {"kind": "m3", "runs": 10, "scenario": "all"},
    "eval": {
        "ensemble": None,
        "checkpoints": [],
        "split": "test",
        "scenario": "all",
        "threshold": 0.5,
        "compare": None,
        "differential": None,
        "iterations": 200,
        "bootstrap_seed": 0,
        "graders": None,
        "resize": False,
    },
    "saliency": {"checkpoint": None, "ids": [], "scenario": "fused", "alpha": 0.5},
}


def merge_config(base, override, where="config"):
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r} (allowed: {', '.join(sorted(base))})")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = merge_config(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(DEFAULTS, data)


def _set(cfg, dotted, value):
    if value is None:
        return
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def _tuples(d, keys):
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in d.items()}


def synth_config(cfg):
    return SynthConfig(**_tuples(cfg["synth"], {"lesion_count_range", "distractor_count_range"}))


def backbone_config(cfg):
    b = dict(cfg["backbone"])
    b["blocks"] = tuple(tuple(x) for x in b["blocks"])
    return BackboneConfig(**b)


def train_config(cfg):
    return TrainConfig(feature=cfg["feature"], **_tuples(cfg["train"], {"multitask_weights"}))


def write_echo(out_dir, cfg):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _records(cfg):
    path = cfg["manifest"]
    if not path:
        raise ConfigError("no manifest given (use --manifest or the config's 'manifest' key)")
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    return load_manifest(path)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg, out):
    sc = synth_config(cfg)
    records = generate_synthetic(sc, out)
    write_echo(out, cfg)
    labels = [r.labels.get(cfg["feature"]) for r in records] if records else []
    pos = sum(1 for v in labels if v == 1)
    n = sum(1 for v in labels if v is not None)
    print(f"wrote {len(records)} records to {out}; {cfg['feature']} positives {pos}/{n} (prevalence {pos / max(n, 1):.3f})")
    return EXIT_OK


def cmd_train(cfg, out):
    ens_cfg = cfg["ensemble"]
    if ens_cfg["kind"] not in KINDS:
        raise ConfigError(f"ensemble.kind must be one of {KINDS}, got {ens_cfg['kind']!r}")
    if ens_cfg["scenario"] not in SCENARIOS + ("all",):
        raise ConfigError(f"ensemble.scenario must be one of {SCENARIOS + ('all',)}, got {ens_cfg['scenario']!r}")
    if int(ens_cfg["runs"]) < 2:
        raise ConfigError(f"ensemble.runs must be >= 2, got {ens_cfg['runs']}")
    tc = train_config(cfg)
    bb = backbone_config(cfg)
    records = _records(cfg)
    assignment = split_participants(records, tuple(cfg["split"]["fractions"]), cfg["split"]["seed"])
    os.makedirs(out, exist_ok=True)
    write_echo(out, cfg)
    write_splits(os.path.join(out, "splits.csv"), assignment)
    splits = build_splits(records, assignment, bb, tc.feature)
    print(f"train/val/test records: {len(splits.train)}/{len(splits.val)}/{len(splits.test)}")
    ens = run_ensemble(ens_cfg["kind"], int(ens_cfg["runs"]), splits, tc, bb, out, ens_cfg["scenario"])
    for s, reps in ens.reports.items():
        if reps:
            agg = evaluation.aggregate(reps)
            au = agg["auroc"]["median"]
            print(f"{s}: median F1 {agg['f1']['median']:.4f}, median AUROC {au if au is None else round(au, 4)}")
    if ens.partial:
        for f in ens.failed:
            print(f"run with seed {f['seed']} failed: {f['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _image_size(path):
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def _check_sizes(records, bb, resize):
    if resize or not records:
        return
    h, w = _image_size(records[0].cfp_path)
    if (h, w) != (bb.input_size, bb.input_size):
        raise ConfigError(f"checkpoint expects {bb.input_size}x{bb.input_size} images, manifest images are {h}x{w}; set eval.resize to resample")


def _select_records(cfg, records, splits_path, split):
    if split == "all":
        return records
    if split not in ("train", "val", "test"):
        raise ConfigError(f"eval.split must be train, val, test or all, got {split!r}")
    if splits_path is None or not os.path.exists(splits_path):
        raise ConfigError(f"split {split!r} requested but no splits.csv is available; use eval.split 'all'")
    assignment = read_splits(splits_path)
    missing = sorted({r.participant_id for r in records} - set(assignment))
    if missing:
        raise ConfigError(f"{len(missing)} participant(s) of the manifest are not in {splits_path} (e.g. {missing[0]}); use split 'all'")
    return [r for r in records if assignment[r.participant_id] == split]


def _load_runs(source):
    """``(seeds, models, ensemble_meta)`` for an ensemble directory."""
    meta, runs = load_ensemble_dir(source)
    models = [load_model(p)[0] for _, p in runs]
    return [s for s, _ in runs], models, meta


def _predict_all(models, data, scenarios):
    return {s: [split_predictions(m, data, (s,))[s] for m in models] for s in scenarios}


def cmd_eval(cfg, out):
    ev = cfg["eval"]
    splits_path = None
    if ev["ensemble"]:
        if not os.path.exists(os.path.join(ev["ensemble"], "ensemble.json")):
            raise ConfigError(f"not an ensemble directory: {ev['ensemble']}")
        seeds, models, meta = _load_runs(ev["ensemble"])
        splits_path = os.path.join(ev["ensemble"], "splits.csv")
        if not cfg["manifest"]:
            with open(os.path.join(ev["ensemble"], "config.json")) as fh:
                cfg["manifest"] = json.load(fh)["manifest"]
    elif ev["checkpoints"]:
        models, seeds = [], []
        for p in ev["checkpoints"]:
            m, meta_ck = load_model(p)
            models.append(m)
            seeds.append(meta_ck.get("train", {}).get("seed"))
    else:
        raise ConfigError("eval needs eval.ensemble (--ensemble) or eval.checkpoints (--checkpoint)")
    if not models:
        raise ConfigError("no usable checkpoints to evaluate")
    feature = models[0].feature_flag
    bb = models[0].config
    records = select_feature(_records(cfg), feature)
    split = ev["split"] if splits_path else ("all" if ev["split"] == "test" else ev["split"])
    records = _select_records(cfg, records, splits_path, split)
    if not records:
        raise ConfigError("no records to evaluate")
    _check_sizes(records, bb, ev["resize"])
    cfp, faf, labels = load_arrays(records, bb.input_size, bb.cfp_channels, bb.faf_channels, feature)
    data = SplitData(cfp, faf, labels, [r.record_id for r in records])
    avail = set.intersection(*(set(scenarios_of(m)) for m in models))
    wanted = [s for s in SCENARIOS if s in avail] if ev["scenario"] == "all" else [ev["scenario"]]
    for s in wanted:
        if s not in avail:
            raise ConfigError(f"scenario {s!r} is not available from these checkpoints (have {sorted(avail)})")
    os.makedirs(out, exist_ok=True)
    write_echo(out, cfg)

    probs = _predict_all(models, data, wanted)
    th = float(ev["threshold"])
    reports = {s: [evaluation.panel(p, labels, th, s, feature) for p in probs[s]] for s in wanted}
    evaluation.write_predictions_csv(os.path.join(out, "predictions.csv"), [], "", [], [])
    for s in wanted:
        for k, p in enumerate(probs[s], start=1):
            evaluation.append_predictions_csv(os.path.join(out, "predictions.csv"), [f"run{k:02d}:{r}" for r in data.record_ids], s, p, labels)
    _write_json(os.path.join(out, "metrics.json"), [r.to_dict() for s in wanted for r in reports[s]])
    both = labels.min() != labels.max()
    for s in wanted:
        for k, p in enumerate(probs[s], start=1):
            if both:
                evaluation.write_roc_csv(os.path.join(out, f"roc_{s}_run{k:02d}.csv"), evaluation.roc_curve(p, labels))
            rows, _ = evaluation.calibration(p, labels)
            evaluation.write_calibration_csv(os.path.join(out, f"calibration_{s}_run{k:02d}.csv"), rows)
    summary = {
        "n_records": int(len(labels)),
        "split": split,
        "feature": feature,
        "seeds": seeds,
        "threshold": th,
        "scenarios": {s: evaluation.aggregate(reports[s]) for s in wanted},
    }

    other = ev["compare"] or ev["differential"]
    if other:
        o_seeds, o_models, _ = _load_runs(other) if os.path.isdir(other) else (None, None, None)
        if o_models is None:
            raise ConfigError(f"not an ensemble directory: {other}")
        o_avail = set.intersection(*(set(scenarios_of(m)) for m in o_models))
        o_probs = _predict_all(o_models, data, [s for s in wanted if s in o_avail])
        if ev["compare"]:
            summary["rank_sum_f1"] = {}
            for s, ps in o_probs.items():
                o_f1 = [evaluation.panel(p, labels, th).f1 for p in ps]
                u, p = evaluation.wilcoxon_rank_sum([r.f1 for r in reports[s]], o_f1)
                summary["rank_sum_f1"][s] = {"u": u, "p": p, "other": other, "other_seeds": o_seeds}
        if ev["differential"]:
            iters = int(ev["iterations"])
            for s, ps in o_probs.items():
                ca = np.array([(p >= th).astype(int) == labels for p in probs[s]])
                cb = np.array([(p >= th).astype(int) == labels for p in ps])
                d = evaluation.bootstrap_differential(ca, cb, labels, iters, int(ev["bootstrap_seed"]))
                evaluation.write_differential_csv(os.path.join(out, f"differential_{s}.csv"), d)
    if ev["graders"]:
        rows = evaluation.read_grader_csv(ev["graders"])
        lab = dict(zip(data.record_ids, labels.tolist()))
        summary["graders"] = {s: evaluation.compare_with_graders(probs[s], rows, lab, th, s, feature) for s in wanted}
    _write_json(os.path.join(out, "summary.json"), summary)
    for s in wanted:
        agg = summary["scenarios"][s]
        au = agg["auroc"]["median"]
        print(f"{s}: n={len(labels)} median F1 {agg['f1']['median']:.4f} median AUROC {'NA' if au is None else f'{au:.4f}'}")
    return EXIT_OK


def cmd_saliency(cfg, out):
    sc = cfg["saliency"]
    if not sc["checkpoint"]:
        raise ConfigError("saliency needs a checkpoint (--checkpoint)")
    if not os.path.exists(sc["checkpoint"]):
        raise ConfigError(f"checkpoint not found: {sc['checkpoint']}")
    if not sc["ids"]:
        raise ConfigError("saliency needs at least one record id (--ids)")
    model, _ = load_model(sc["checkpoint"])
    scenario = sc["scenario"]
    if scenario not in scenarios_of(model):
        raise ConfigError(f"checkpoint cannot run scenario {scenario!r} (has {list(scenarios_of(model))})")
    records = _records(cfg)
    by_id = {r.record_id: r for r in records}
    unknown = [i for i in sc["ids"] if i not in by_id]
    if unknown:
        known = sorted(by_id)
        shown = ", ".join(known[:50]) + (f", ... ({len(known)} total)" if len(known) > 50 else "")
        raise ConfigError(f"unknown record id(s): {', '.join(unknown)}; known ids: {shown}")
    chosen = [by_id[i] for i in sc["ids"]]
    bb = model.config
    cfp, faf, _ = load_arrays(chosen, bb.input_size, bb.cfp_channels, bb.faf_channels, model.feature_flag)
    os.makedirs(out, exist_ok=True)
    write_echo(out, cfg)
    items = [
        (r.record_id, cfp[k] if scenario != "faf" else None, faf[k] if scenario != "cfp" else None) for k, r in enumerate(chosen)
    ]
    written = saliency.export(model, scenario, items, out, float(sc["alpha"]))
    print(f"wrote {len(written)} heatmap(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parsing


def _common(p):
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--feature", choices=FEATURES)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="m3rpd", description="Multi-modal, multi-task RPD classification on paired fundus images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired CFP/FAF dataset")
    _common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-participants", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--prevalence", type=float)

    p = sub.add_parser("train", help="train an ensemble of M3 or non-M3 models")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--scenario", choices=SCENARIOS + ("all",))
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int, help="seed of the first run; run i uses seed + i")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--no-attention", action="store_true", default=None)
    p.add_argument("--no-multitask", action="store_true", default=None)
    p.add_argument("--no-augment", action="store_true", default=None)

    p = sub.add_parser("eval", help="evaluate checkpoints or an ensemble on a manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--ensemble", help="ensemble directory written by 'train'")
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--scenario", choices=SCENARIOS + ("all",))
    p.add_argument("--threshold", type=float)
    p.add_argument("--compare", help="second ensemble: add a rank-sum test of F1")
    p.add_argument("--differential", help="second ensemble: bootstrap differential analysis")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, help="bootstrap seed")
    p.add_argument("--graders", help="grader CSV (record_id,grader_id,seniority,call)")
    p.add_argument("--resize", action="store_true", default=None)

    p = sub.add_parser("saliency", help="export saliency heatmaps for chosen records")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--ids", nargs="+")
    p.add_argument("--scenario", choices=SCENARIOS)
    return parser


FLAG_MAP = {
    "synth": {"seed": "synth.seed", "n_participants": "synth.n_participants", "image_size": "synth.image_size", "prevalence": "synth.prevalence"},
    "train": {
        "manifest": "manifest",
        "kind": "ensemble.kind",
        "scenario": "ensemble.scenario",
        "runs": "ensemble.runs",
        "seed": "train.seed",
        "split_seed": "split.seed",
        "max_epochs": "train.max_epochs",
        "no_attention": "train.no_attention",
        "no_multitask": "train.no_multitask",
    },
    "eval": {
        "manifest": "manifest",
        "ensemble": "eval.ensemble",
        "checkpoint": "eval.checkpoints",
        "split": "eval.split",
        "scenario": "eval.scenario",
        "threshold": "eval.threshold",
        "compare": "eval.compare",
        "differential": "eval.differential",
        "iterations": "eval.iterations",
        "seed": "eval.bootstrap_seed",
        "graders": "eval.graders",
        "resize": "eval.resize",
    },
    "saliency": {"manifest": "manifest", "checkpoint": "saliency.checkpoint", "ids": "saliency.ids", "scenario": "saliency.scenario"},
}

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "saliency": cmd_saliency}


def resolve(args):
    cfg = load_config(args.config)
    _set(cfg, "feature", args.feature)
    for flag, dotted in FLAG_MAP[args.command].items():
        _set(cfg, dotted, getattr(args, flag, None))
    if getattr(args, "no_augment", None):
        cfg["train"]["augment"] = False
    if cfg["feature"] not in FEATURES:
        raise ConfigError(f"feature must be one of {FEATURES}, got {cfg['feature']!r}")
    for build in (synth_config, backbone_config, train_config):
        try:
            build(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if not args.out:
            raise ConfigError("--out is required")
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, ValueError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
