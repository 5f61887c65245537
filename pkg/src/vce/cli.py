"""Operator surface: `vce gen | train | sample | eval | sweep`.

Commands read a JSON config file; individual keys can be overridden with
repeated `--set section.key=value` flags. Every run writes a manifest
(config echo, master seed, package version, wall time) into its output
directory. Exit codes: 0 success, 2 config error, 3 numeric failure.

Run layout: runs/<name>/{manifest.json, checkpoints/, samples/, reports/}.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import dataset as ds
from . import metrics as mx
from . import phantom as ph
from .diffusion import NoiseSchedule, dm_sample
from .flowmatch import fm_sample
from .nets import UNetLite
from .posterior import aggregate
from .tensor import load_vct, save_vct
from .training import (DIFF_GAIN, INPUT_SHIFT, model_scale, pairs_to_arrays,
                       predict_e2e, train_model, warm_start_from)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "phantom": {
        "height": 64, "width": 64, "depth": 16,
        "tissue_count": 3, "tumor_count": 3, "tumor_radius": [6.0, 12.0],
        "enhancement_fraction": 0.42, "noise_sigma": 0.01,
        "modality": "T1", "volumes": 24,
    },
    "split": {"train": 20, "test": 2, "test_stride": 1},
    "model": {
        "role": "e2e",                # e2e | dm | fm
        "base_channels": 16, "levels": 3,
    },
    "optim": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "train": {"epochs": 50, "batch_size": 8, "lr_decay": "cosine",
              "warm_start": True},
    "schedule": {"steps": 2000, "lo": 1e-3, "hi": 5e-2},
    "sampler": {"mode": "fixed", "steps": 10, "dm_steps": 40,
                "ensemble": 50, "atol": 1e-5, "rtol": 1e-4},
    "metrics": {"thresholds": [1, 30], "ssim_window": 11},
}


def merge_config(base, override, path=""):
    """Deep merge rejecting keys absent from the defaults."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be a section")
            out[key] = merge_config(base[key], val, where)
        else:
            out[key] = val
    return out


def load_config(args):
    cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}")
    merged = merge_config(DEFAULT_CONFIG, cfg)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        section = merged
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in section or not isinstance(section[p], dict):
                raise ConfigError(f"unknown config section: {key}")
            section = section[p]
        if parts[-1] not in section:
            raise ConfigError(f"unknown config key: {key}")
        section[parts[-1]] = val
    return merged


def write_manifest(out_dir, command, cfg, started, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "version": _version(),
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _version():
    try:
        from importlib.metadata import version
        return version("vce")
    except Exception:
        return "unknown"


def _seeds(master, n):
    """Documented seed split: children of SeedSequence(master)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(master).spawn(n)]


def _recipe(cfg, seed):
    p = cfg["phantom"]
    return ph.PhantomRecipe(
        height=p["height"], width=p["width"], depth=p["depth"],
        tissue_count=p["tissue_count"], tumor_count=p["tumor_count"],
        tumor_radius=tuple(p["tumor_radius"]),
        enhancement_fraction=p["enhancement_fraction"],
        noise_sigma=p["noise_sigma"], modality=p["modality"], seed=seed,
    )


# ---------------------------------------------------------------------------
# commands

def cmd_gen(cfg):
    started = time.time()
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    n = cfg["phantom"]["volumes"]
    ss = np.random.SeedSequence(cfg["seed"])
    vol_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    files, vols = [], []
    for i, vseed in enumerate(vol_seeds):
        recipe = _recipe(cfg, vseed)
        vol = ph.generate(recipe)
        prefix = os.path.join(out, f"vol{i:04d}")
        ph.save_volume(vol, prefix, recipe)
        files.append(os.path.basename(prefix))
        vols.append(vol)
    split = ds.make_split(vols, cfg["split"]["train"], cfg["split"]["test"],
                          seed=cfg["seed"])
    ds.save_manifest(os.path.join(out, "dataset.json"), files, split, cfg["seed"])
    write_manifest(out, "gen", cfg, started, {"volumes": len(files)})
    print(f"gen: wrote {len(files)} volumes to {out}")
    return 0


def _load_dataset(cfg):
    out = cfg["out_dir"]
    path = os.path.join(out, "dataset.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    files, split, seed = ds.load_manifest(path)
    vols = [ph.load_volume(os.path.join(out, f)) for f in files]
    return vols, split


def cmd_train(cfg):
    started = time.time()
    out = cfg["out_dir"]
    vols, split = _load_dataset(cfg)
    pairs = []
    for vid in split.train_ids:
        pairs += [ds.normalize(p) for p in ds.extract_pairs(vols[vid], vid)]
    role = cfg["model"]["role"]
    in_channels = 7 if role == "e2e" else 8
    net = UNetLite(in_channels=in_channels,
                   base_channels=cfg["model"]["base_channels"],
                   levels=cfg["model"]["levels"],
                   time_conditioned=role != "e2e",
                   seed=cfg["seed"], role=role)
    schedule = NoiseSchedule(np.linspace(cfg["schedule"]["lo"], cfg["schedule"]["hi"],
                                         cfg["schedule"]["steps"])) if role == "dm" else None
    if role != "e2e" and cfg["train"]["warm_start"]:
        e2e_ckpt = os.path.join(out, "checkpoints", "e2e")
        if os.path.exists(os.path.join(e2e_ckpt, "header.json")):
            warm_start_from(net, UNetLite.load(e2e_ckpt))
            print(f"train[{role}]: warm start from {e2e_ckpt}")
    (rng,) = _seeds(cfg["seed"], 1)
    log = train_model(net, pairs, role, epochs=cfg["train"]["epochs"], rng=rng,
                      batch_size=cfg["train"]["batch_size"], lr=cfg["optim"]["lr"],
                      schedule=schedule, lr_decay=cfg["train"]["lr_decay"])
    ckpt = os.path.join(out, "checkpoints", role)
    net.save(ckpt)
    final_loss = log[-1]["loss"] if log else None
    if log:
        mx.write_report_csv(os.path.join(out, f"loss_{role}.csv"), log,
                            fieldnames=["epoch", "loss"])
    write_manifest(out, "train", cfg, started, {"checkpoint": ckpt,
                                                "final_loss": final_loss})
    print(f"train[{role}]: final loss {final_loss} -> {ckpt}")
    return 0


def _test_set(cfg, vols, split):
    return ds.test_pairs(vols, split, stride=cfg["split"]["test_stride"])


def cmd_sample(cfg, checkpoint=None):
    started = time.time()
    out = cfg["out_dir"]
    role = cfg["model"]["role"]
    if role == "e2e":
        raise ConfigError("sample applies to generative roles (dm, fm)")
    ckpt = checkpoint or os.path.join(out, "checkpoints", role)
    net = UNetLite.load(ckpt)
    vols, split = _load_dataset(cfg)
    test = _test_set(cfg, vols, split)
    schedule = NoiseSchedule(np.linspace(cfg["schedule"]["lo"], cfg["schedule"]["hi"],
                                         cfg["schedule"]["steps"]))
    n_ens = cfg["sampler"]["ensemble"]
    sample_dir = os.path.join(out, "samples", role)
    os.makedirs(sample_dir, exist_ok=True)
    scale = model_scale(test[0].modality)
    rngs = _seeds(cfg["seed"], len(test))
    for i, (pair, rng) in enumerate(zip(test, rngs)):
        y = np.transpose(pair.y, (2, 0, 1))[None].astype(np.float32) * scale - INPUT_SHIFT
        yb = np.repeat(y, n_ens, axis=0)
        if role == "dm":
            draws = dm_sample(net, yb, rng, schedule, steps=cfg["sampler"]["dm_steps"])
        else:
            draws = fm_sample(net, yb, rng, mode=cfg["sampler"]["mode"],
                              n_steps=cfg["sampler"]["steps"],
                              atol=cfg["sampler"]["atol"], rtol=cfg["sampler"]["rtol"])
        draws = draws[:, 0] / (DIFF_GAIN * scale)   # back to normalized diff units
        ens = aggregate(draws, model=role.upper(), condition_id=i)
        save_vct(os.path.join(sample_dir, f"cond{i:03d}.samples.vct"), ens.samples)
        save_vct(os.path.join(sample_dir, f"cond{i:03d}.mean.vct"), ens.mean)
        save_vct(os.path.join(sample_dir, f"cond{i:03d}.stddev.vct"), ens.stddev)
        ph.write_pgm(os.path.join(sample_dir, f"cond{i:03d}.mean.pgm"), ens.mean)
        ph.write_pgm(os.path.join(sample_dir, f"cond{i:03d}.stddev.pgm"), ens.stddev)
    write_manifest(out, "sample", cfg, started,
                   {"conditions": len(test), "ensemble": n_ens})
    print(f"sample[{role}]: {len(test)} conditions x {n_ens} draws -> {sample_dir}")
    return 0


def _prediction_for(cfg, role, vols, split, test):
    """Predicted difference images per test slice, in normalized units."""
    out = cfg["out_dir"]
    if role == "pre":
        return [np.zeros_like(p.diff) for p in test]
    if role == "e2e":
        net = UNetLite.load(os.path.join(out, "checkpoints", "e2e"))
        return predict_e2e(net, test)
    sample_dir = os.path.join(out, "samples", role)
    preds = []
    for i in range(len(test)):
        path = os.path.join(sample_dir, f"cond{i:03d}.mean.vct")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing samples for condition {i}: {path}")
        preds.append(load_vct(path))
    return preds


def cmd_eval(cfg, models=("pre", "e2e", "dm", "fm")):
    started = time.time()
    out = cfg["out_dir"]
    vols, split = _load_dataset(cfg)
    test = _test_set(cfg, vols, split)
    rows = []
    for role in models:
        try:
            preds = _prediction_for(cfg, role, vols, split, test)
        except FileNotFoundError:
            continue
        for i, (pair, diff_hat) in enumerate(zip(test, preds)):
            post_hat = pair.y[:, :, 3] + diff_hat
            rows.append({
                "slice": i, "model": role, "modality": pair.modality,
                "mae": mx.mae(post_hat, pair.x),
                "rmae": mx.mae(post_hat, pair.x, mask=pair.roi),
                "ssim": mx.ssim(post_hat, pair.x,
                                data_range=_data_range(pair)),
            })
        # uncertainty correlation for generative roles
        if role in ("dm", "fm"):
            stds, aes, res_, skips = [], [], [], []
            for i, (pair, diff_hat) in enumerate(zip(test, preds)):
                std = load_vct(os.path.join(out, "samples", role, f"cond{i:03d}.stddev.vct"))
                post_hat = pair.y[:, :, 3] + diff_hat
                ae = np.abs(post_hat - pair.x)
                re, skip = mx.relative_error(post_hat, pair.x, pair.y[:, :, 3])
                stds.append(std); aes.append(ae); res_.append(re); skips.append(skip)
            std_all = np.concatenate([s.ravel() for s in stds])
            ae_all = np.concatenate([a.ravel() for a in aes])
            re_all = np.concatenate([r.ravel() for r in res_])
            skip_all = np.concatenate([s.ravel() for s in skips])
            r_ae, p_ae = mx.pearson(std_all, ae_all)
            r_re, p_re = mx.pearson(std_all, re_all, skip_mask=skip_all)
            rows.append({"slice": -1, "model": f"{role}-corr-ae", "modality": test[0].modality,
                         "mae": r_ae, "rmae": p_ae, "ssim": ""})
            rows.append({"slice": -1, "model": f"{role}-corr-re", "modality": test[0].modality,
                         "mae": r_re, "rmae": p_re, "ssim": ""})
    if not rows:
        raise FileNotFoundError("no model outputs found to evaluate")
    report_dir = os.path.join(out, "reports")
    os.makedirs(report_dir, exist_ok=True)
    path = os.path.join(report_dir, "metrics.csv")
    mx.write_report_csv(path, rows, fieldnames=["slice", "model", "modality",
                                                "mae", "rmae", "ssim"])
    write_manifest(out, "eval", cfg, started, {"report": path})
    print(f"eval: wrote {path}")
    return 0


def _data_range(pair):
    # after normalization T1w sits in [0, ~1]; T1 keeps its physical span
    from .phantom import T1_MAX, T1_MIN
    return 1.0 if pair.modality == "T1w" else T1_MAX - T1_MIN


def cmd_sweep(cfg, models=("e2e", "dm", "fm")):
    started = time.time()
    out = cfg["out_dir"]
    vols, split = _load_dataset(cfg)
    test = _test_set(cfg, vols, split)
    lo, hi = cfg["metrics"]["thresholds"]
    thresholds = range(int(lo), int(hi) + 1)
    gt = [p.diff for p in test]
    rois = [p.roi for p in test]
    preds = {}
    for role in models:
        try:
            preds[role] = _prediction_for(cfg, role, vols, split, test)
        except FileNotFoundError:
            continue
    if not preds:
        raise FileNotFoundError("no model outputs found to sweep")
    rows = mx.sweep(gt, preds, rois, thresholds=thresholds)
    report_dir = os.path.join(out, "reports")
    os.makedirs(report_dir, exist_ok=True)
    csv_path = os.path.join(report_dir, "sweep.csv")
    mx.write_report_csv(csv_path, rows, fieldnames=["model", "threshold", "dice", "jaccard"])
    mx.plot_sweep_svg(os.path.join(report_dir, "sweep.svg"), rows)
    write_manifest(out, "sweep", cfg, started, {"report": csv_path})
    print(f"sweep: wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="vce", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "sample", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dot-separated path)")
        if name == "sample":
            p.add_argument("--checkpoint", help="checkpoint directory override")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            return cmd_sample(cfg, checkpoint=args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
