"""Batch command-line interface: synth, pretrain, finetune, hybrid, eval.

Exit codes: 0 success, 1 validation error (bad config, inputs or
preconditions), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunManifest, hash_inputs, now, parse_config, read_config
from .data import (DataError, ShardSet, VariableGroupSpec, apply_norm, compute_norm_stats,
                   ensure_dir_empty, load_sites, shard_write, split_random_kfold, split_regional_holdout)

VALIDATION_ERRORS = (ConfigError, DataError, ValueError, KeyError, FileNotFoundError)


class Fail(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _validate(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except VALIDATION_ERRORS as exc:
        raise Fail(1, str(exc)) from exc


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise Fail(1, f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, command, extra=None):
    ov = _overrides(args.set)
    ov.update({k: v for k, v in (extra or {}).items() if v is not None})
    if args.config:
        return _validate(read_config, args.config, command, ov)
    return _validate(parse_config, "", command, ov)


def _run_dir(path, resume=False):
    p = Path(path)
    if resume and p.exists():
        return p
    return _validate(ensure_dir_empty, p)


def _load_data(data_dir, target=None, exclude=()):
    d = Path(data_dir)
    groups_file = d / "groups.txt"
    if not groups_file.exists():
        raise Fail(1, f"{groups_file} not found (data directories come from 'synth' or follow its layout)")
    groups = _validate(VariableGroupSpec.read, groups_file)
    forcing_dir = d / "forcings"
    first = next(iter(sorted(forcing_dir.glob("*.csv"))), None)
    if first is None:
        raise Fail(1, f"no forcing CSV files in {forcing_dir}")
    header = first.read_text().split("\n", 1)[0].split(",")
    tcol = target if target and target in [h.strip() for h in header] else None
    sites = _validate(load_sites, forcing_dir, d / "static.csv", groups, tcol, None, exclude)
    return groups, sites, tcol


def parse_split(text, sites):
    """'kfold:K[:seed=N]' or 'regional:R1,R2' -> DatasetSplit."""
    parts = text.split(":")
    if parts[0] == "kfold":
        if len(parts) < 2:
            raise ConfigError(f"split {text!r}: expected kfold:K[:seed=N]")
        k = int(parts[1])
        seed = 0
        for p in parts[2:]:
            key, _, val = p.partition("=")
            if key != "seed":
                raise ConfigError(f"split {text!r}: unknown option {key!r}")
            seed = int(val)
        return split_random_kfold(sites, k, seed)
    if parts[0] == "regional":
        if len(parts) != 2 or not parts[1]:
            raise ConfigError(f"split {text!r}: expected regional:R1[,R2...]")
        return split_regional_holdout(sites, set(parts[1].split(",")))
    raise ConfigError(f"split {text!r}: mode must be 'kfold' or 'regional'")


# -- commands ------------------------------------------------------------------------

def cmd_synth(args):
    from .data import write_sites_csv
    from .synthetic import generate_synthetic
    if args.days < args.min_window:
        raise Fail(1, f"--days {args.days} is shorter than the minimum mask window {args.min_window}")
    if args.sites < 1:
        raise Fail(1, f"--sites must be >= 1, got {args.sites}")
    out = _run_dir(args.out)
    started = now()
    ds = _validate(generate_synthetic, args.sites, args.days, None, args.seed)
    write_sites_csv(ds.sites, out, ds.groups, ds.target_column)
    (out / "groups.txt").write_text(ds.groups.to_text())
    (out / "planted_map.txt").write_text(ds.manifest)
    cfg = {"sites": args.sites, "days": args.days, "seed": args.seed, "min_window": args.min_window}
    RunManifest("synth", cfg, args.seed, "", started, now(),
                ("forcings/", "static.csv", "groups.txt", "planted_map.txt")).write(out)
    print(f"wrote {args.sites} sites x {args.days} days to {out}")
    return 0


def pretrain_config_from(cfg):
    from .pretrain import PretrainConfig
    return _validate(PretrainConfig, seq_len=cfg["sequence_length"], d_model=cfg["model_dimension"],
                     n_heads=cfg["number_of_heads"], e_layers=cfg["encoder_layers"],
                     d_ff=cfg["feed_forward_dimension"], dropout=cfg["dropout"],
                     embed_hidden=cfg["embedding_hidden"], dec_lstm_layers=cfg["decoder_layers"],
                     batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                     weight_decay=cfg["weight_decay"], epochs=cfg["epochs"], clip=cfg["gradient_clipping"],
                     L_min=cfg["minimum_window_size"], L_max=cfg["maximum_window_size"],
                     p_mask=cfg["mask_probability"], ts_ratio=cfg["time_series_loss_ratio"],
                     static_ratio=cfg["static_loss_ratio"], seed=cfg["random_seed"],
                     optimizer=cfg["optimizer"],
                     loss_kind="nse" if cfg["loss_criterion"] == "MaskedNSE" else "mse",
                     windows_per_site=cfg["windows_per_site"], checkpoint_every=cfg["save_frequency"],
                     patience=cfg["patience"], early_stopping=cfg["early_stopping"])


def cmd_pretrain(args):
    from .pretrain import pretrain_run
    cfg = _config(args, "pretrain")
    pcfg = pretrain_config_from(cfg)
    exclude = [s for s in cfg["exclude_sites"].split(",") if s]
    groups, sites, _ = _load_data(args.data, cfg["target"], exclude)
    short = [s.site_id for s in sites if s.T < pcfg.seq_len]
    if short:
        raise Fail(1, f"sites {short[:5]} are shorter than sequence_length {pcfg.seq_len}")
    out = _run_dir(args.out, resume=args.resume)
    started = now()
    stats = compute_norm_stats(sites)
    np.savez(out / "norm_stats.npz", dyn_mean=stats.dyn_mean, dyn_std=stats.dyn_std,
             static_mean=stats.static_mean, static_std=stats.static_std)
    shard_dir = out / "shards"
    if (shard_dir / "manifest.txt").exists():
        shards = ShardSet.open(shard_dir, seed=pcfg.seed)
    else:
        shards = shard_write(apply_norm(sites, stats), cfg["shard_size"], shard_dir, pcfg.seed,
                             groups.dynamic_vars, groups.static_vars)
    ckpt, log, _ = pretrain_run(pcfg, shards, groups, out, resume=True,
                                log=lambda e: print(f"epoch {e.epoch}: loss {e.loss:.6g} ({e.seconds:.1f}s)"))
    RunManifest("pretrain", cfg, pcfg.seed, hash_inputs([args.data]), started, now(),
                (ckpt.name, "train_log.csv", "norm_stats.npz", "shards/")).write(out)
    print(f"checkpoint: {ckpt}")
    return 0


def _encoder(path):
    from .finetune import FrozenEncoderHandle
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.npz"
    if not p.exists():
        raise Fail(1, f"encoder checkpoint {p} not found")
    return _validate(FrozenEncoderHandle.from_checkpoint, p)


def _fold_sites(sites, split, fold):
    by_id = {s.site_id: s for s in sites}
    train = [by_id[i] for i in split.train_ids(fold)]
    test = [by_id[i] for i in split.test_ids(fold)]
    if not train or not test:
        raise Fail(1, f"fold {fold}: empty train or test set")
    return train, test


def cmd_finetune(args):
    from .finetune import FinetuneConfig, finetune_run
    from .metrics import evaluate, write_predictions, write_reports
    from .model import save_checkpoint
    cfg = _config(args, "finetune", {"variant": args.variant, "encoder": args.encoder, "split": args.split})
    groups, sites, tcol = _load_data(args.data, cfg["target"])
    if tcol is None:
        raise Fail(1, f"target column {cfg['target']!r} not found in the forcing CSVs")
    split = _validate(parse_split, cfg["split"], sites)
    model_cfg = {"d_model": cfg["model_dimension"], "n_heads": cfg["number_of_heads"],
                 "e_layers": cfg["encoder_layers"], "d_ff": cfg["feed_forward_dimension"],
                 "embed_hidden": cfg["embedding_hidden"], "dropout": 0.0}
    fcfg = _validate(FinetuneConfig, variant=cfg["variant"], hidden=cfg["hidden_size"], epochs=cfg["epochs"],
                     batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                     weight_decay=cfg["weight_decay"], optimizer=cfg["optimizer"],
                     clip=cfg["gradient_clipping"], seq_len=cfg["sequence_length"],
                     bottleneck=cfg["bottleneck_width"], adapter_scale=cfg["adapter_scale"],
                     seed=cfg["random_seed"], model=model_cfg)
    enc = None
    if fcfg.variant not in ("lstm_sl", "scratch"):
        if not cfg["encoder"]:
            raise Fail(1, f"variant {fcfg.variant!r} needs 'encoder' (a pretrain run directory or checkpoint)")
        enc = _encoder(cfg["encoder"])
        fcfg.seq_len = min(fcfg.seq_len, enc.model.cfg.seq_len)
    if any(s.T < fcfg.seq_len for s in sites):
        raise Fail(1, f"sequence_length {fcfg.seq_len} exceeds the shortest site series")
    out = _run_dir(args.out)
    started = now()
    rows = []
    for fold in range(split.n_folds if split.mode == "random_kfold" else 1):
        train, test = _fold_sites(sites, split, fold)
        stats = compute_norm_stats(train)
        res = finetune_run(fcfg, apply_norm(train, stats), apply_norm(test, stats), enc,
                           log=lambda e, f=fold: print(f"fold {f} epoch {e['epoch']}: loss {e['loss']:.5g}"))
        if enc is not None and res.encoder_digest_before != res.encoder_digest_after:
            raise Fail(2, "encoder parameters changed during fine-tuning")
        rows += [(sid, d, yp * stats.target_std + stats.target_mean, yo * stats.target_std + stats.target_mean)
                 for sid, d, yp, yo in res.predictions]
        save_checkpoint(out / f"head_fold{fold}.npz", res.head_params, {"finetune": cfg})
    write_predictions(out / "pred.csv", rows)
    write_reports(evaluate(rows), out)
    RunManifest("finetune", cfg, fcfg.seed, hash_inputs([args.data]), started, now(),
                ("pred.csv", "metrics_per_site.csv", "metrics_summary.csv")).write(out)
    print(f"predictions: {out / 'pred.csv'}")
    return 0


def cmd_hybrid(args):
    from .hybrid import HybridConfig, hybrid_train, physics_inputs
    from .metrics import evaluate, write_predictions, write_reports
    from .model import save_checkpoint
    cfg = _config(args, "hybrid", {"encoder": args.encoder, "split": args.split})
    groups, sites, tcol = _load_data(args.data, cfg["target"])
    if tcol is None:
        raise Fail(1, f"target column {cfg['target']!r} not found in the forcing CSVs")
    hcfg = _validate(HybridConfig, n_units=cfg["number_of_runs"], warmup=cfg["warm_up_period"],
                     routing=cfg["use_routing"], near_zero=cfg["near_zero_threshold"],
                     net=cfg["parameter_network"], hidden=cfg["hidden_size"], optimizer=cfg["optimizer"],
                     learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"],
                     epochs=cfg["epochs"], batch_size=cfg["batch_size"], clip=cfg["gradient_clipping"],
                     seed=cfg["random_seed"],
                     dynamic_params=tuple(p for p in cfg["dynamic_parameters"].split(",") if p))
    T = min(s.T for s in sites)
    if T <= hcfg.warmup:
        raise Fail(1, f"series length {T} must exceed warm_up_period {hcfg.warmup}")
    names = groups.dynamic_vars
    temps = [t for t in cfg["temperature"].split(",") if t]
    phys = {s.site_id: _validate(physics_inputs, s, names, cfg["precipitation"], temps,
                                 cfg["potential_evapotranspiration"]) for s in sites}
    split = _validate(parse_split, cfg["split"], sites)
    enc = None
    if hcfg.net == "resconn":
        if not cfg["encoder"]:
            raise Fail(1, "parameter_network = resconn needs 'encoder'")
        enc = _encoder(cfg["encoder"])
    out = _run_dir(args.out)
    started = now()
    rows = []
    for fold in range(split.n_folds if split.mode == "random_kfold" else 1):
        train, test = _fold_sites(sites, split, fold)
        stats = compute_norm_stats(train)

        def items(group):
            return [(n.forcings, n.static_attrs, phys[s.site_id], s.target, s.site_id, s.dates)
                    for s, n in zip(group, apply_norm(group, stats))]

        res = hybrid_train(items(train), items(test), hcfg, enc.model if enc else None,
                           log=lambda e, f=fold: print(f"fold {f} epoch {e['epoch']}: loss {e['loss']:.5g}"))
        if enc is not None and res.encoder_bytes_before != res.encoder_bytes_after:
            raise Fail(2, "encoder parameters changed during hybrid training")
        for sid, (dates, q, obs) in res.predictions.items():
            rows += [(sid, d, yp, yo) for d, yp, yo in zip(dates, q, obs)]
        save_checkpoint(out / f"hybrid_fold{fold}.npz", res.model.params, {"hybrid": cfg})
    write_predictions(out / "pred.csv", rows)
    write_reports(evaluate(rows), out)
    RunManifest("hybrid", cfg, hcfg.seed, hash_inputs([args.data]), started, now(),
                ("pred.csv", "metrics_per_site.csv", "metrics_summary.csv")).write(out)
    print(f"predictions: {out / 'pred.csv'}")
    return 0


def cmd_eval(args):
    from .metrics import (classification_metrics, evaluate, read_class_predictions, read_predictions,
                          write_class_report, write_reports)
    pred = Path(args.pred)
    if not pred.exists():
        raise Fail(1, f"prediction file {pred} not found")
    out = Path(args.out) if args.out else pred.parent
    head = pred.read_text().split("\n", 1)[0].strip()
    if head.startswith("sample_id"):
        _, p, y = _validate(read_class_predictions, pred)
        m = _validate(classification_metrics, p, y)
        path = write_class_report(m, out)
        print(f"summary: {path}")
        return 0
    rows = _validate(read_predictions, pred)
    if not rows:
        raise Fail(1, f"{pred} has no prediction rows")
    per_site, summary = write_reports(evaluate(rows), out)
    print(f"per-site: {per_site}\nsummary: {summary}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="landfm", description="Masked-autoencoder land foundation model tools")
    ap.add_argument("--version", action="version", version=f"landfm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--sites", type=int, default=64)
    p.add_argument("--days", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-window", type=int, default=30, help="minimum mask window the data must admit")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    for name, fn, helptext in (("pretrain", cmd_pretrain, "self-supervised pretraining"),
                               ("finetune", cmd_finetune, "train a task head on a frozen encoder"),
                               ("hybrid", cmd_hybrid, "train the physics hybrid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--data", required=True, help="dataset directory (synth layout)")
        p.add_argument("--out", required=True, help="run directory (must be new or empty)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name == "pretrain":
            p.add_argument("--resume", action="store_true", help="continue an existing run directory")
        if name == "finetune":
            p.add_argument("--variant")
        if name in ("finetune", "hybrid"):
            p.add_argument("--encoder")
            p.add_argument("--split")
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="compute metric reports from a prediction CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, (ConfigError, DataError)) else 2
    except Exception as exc:  # runtime failure: report without a traceback
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
