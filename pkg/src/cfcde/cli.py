"""Command-line entry point: simulate | train | eval | sweep.

Each run writes into its own directory (timestamp + seed under --out-dir or
$CFCDE_OUT_DIR) together with a manifest that reproduces it bit-exactly.
Exit codes: 0 success, 1 user or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, jsonlines
from .config import ConfigError, ExperimentConfig, describe_fields, load_config
from .data import (DatasetHeader, SimSettings, generate_patients, kappa_field,
                   read_dataset, write_dataset)
from .evaluation import (EvalReport, balancing_probe, horizon_eval,
                         mc_dropout_predict, oracle_horizon_eval, sparsification,
                         export_latents, treatment_selection)
from .model import ModelConfig, NumericError, TecdeParams
from .nets import TrainingError
from .observation import HawkesConfig
from .training import TrainConfig, encode_knot_latents, prepare_tensors, train

ENV_OUT_DIR = "CFCDE_OUT_DIR"
SPLITS = ("train", "val", "test")


class UserError(ValueError):
    pass


def _hawkes_config(cfg: ExperimentConfig) -> HawkesConfig:
    return HawkesConfig(
        kappa=cfg.get("sim.kappa"),
        kappa_policy="treatment" if cfg.get("sim.kappa_policy") == "treatment" else "constant",
        kappa_treated=cfg.get("sim.kappa_treated"),
        kappa_untreated=cfg.get("sim.kappa_untreated"),
    )


def _model_config(cfg: ExperimentConfig, dropout_active: bool) -> ModelConfig:
    return ModelConfig(
        latent_dim=cfg.get("model.latent_dim"),
        hidden_width=cfg.get("model.hidden_width"),
        max_step=cfg.get("model.max_step"),
        decoder_time_channel=cfg.get("model.decoder_time_channel"),
        linear_ablation=cfg.get("model.linear_ablation"),
        dropout_rate=cfg.get("model.dropout_rate") if dropout_active else 0.0,
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.get("train.epochs"),
        batch_size=cfg.get("train.batch"),
        lr=cfg.get("train.lr"),
        mu_mode=cfg.get("train.mu_mode"),
        seed=cfg.get("train.seed"),
        dropout=cfg.get("train.dropout"),
        decoder_horizon=cfg.get("train.decoder_horizon"),
        windows_per_patient=cfg.get("train.windows_per_patient"),
        knot_budget=cfg.get("train.knot_budget"),
    )


def make_run_dir(out_dir: str | None, seed: int, prefix: str) -> Path:
    base = Path(out_dir or os.environ.get(ENV_OUT_DIR, "runs"))
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = base / f"{stamp}-{prefix}-seed{seed}"
    suffix = 0
    while run.exists():
        suffix += 1
        run = base / f"{stamp}-{prefix}-seed{seed}.{suffix}"
    run.mkdir()
    return run


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "gamma", None) is not None:
        cfg.set("sim.gamma", args.gamma)
    if getattr(args, "kappa", None) is not None:
        cfg.set("sim.kappa", args.kappa)
    if getattr(args, "seed", None) is not None:
        cfg.set("sim.seed", args.seed)
        cfg.set("train.seed", args.seed)
        cfg.set("eval.seed", args.seed)
    if getattr(args, "scale", None) is not None:
        if args.scale <= 0:
            raise UserError("--scale must be positive")
        for key in ("sim.train_patients", "sim.val_patients", "sim.test_patients"):
            cfg.set(key, max(1, int(round(cfg.get(key) * args.scale))))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        cfg.set(key.strip(), val.strip())
    return cfg


def simulate_into(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Write train/val/test dataset files plus a summary; returns the summary."""
    hawkes = _hawkes_config(cfg)
    settings = SimSettings(
        gamma=cfg.get("sim.gamma"), hawkes=hawkes,
        horizon=cfg.get("sim.horizon"),
        cf_horizons=tuple(cfg.int_list("sim.cf_horizons")),
    )
    seed = cfg.get("sim.seed")
    counts = {
        "train": cfg.get("sim.train_patients"),
        "val": cfg.get("sim.val_patients"),
        "test": cfg.get("sim.test_patients"),
    }
    summary = {"patients": counts, "gamma": settings.gamma,
               "kappa": kappa_field(hawkes)}
    freq = np.zeros(2)
    days = 0
    obs_counts = []
    for split_idx, split in enumerate(SPLITS):
        records = generate_patients(
            settings, counts[split],
            np.random.SeedSequence([seed, split_idx]),
            first_id=split_idx * 10_000_000)
        header = DatasetHeader(
            gamma=settings.gamma, kappa=kappa_field(hawkes),
            horizon=float(settings.horizon), delta=cfg.get("sim.delta"),
            seed=seed, counts=counts[split])
        write_dataset(run_dir / f"{split}.jsonl", header, records)
        for rec in records:
            freq += rec.dense_a.sum(axis=0)
            days += rec.dense_a.shape[0]
            obs_counts.append(len(rec.obs))
    summary["treatment_frequency"] = {
        "chemo": freq[0] / days, "radio": freq[1] / days}
    summary["observations_per_patient_mean"] = float(np.mean(obs_counts))
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        fh.write(jsonlines.dumps(summary) + "\n")
    return summary


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = make_run_dir(args.out_dir, cfg.get("sim.seed"), "simulate")
    (run_dir / "manifest.txt").write_text(cfg.manifest("simulate"), encoding="utf-8")
    summary = simulate_into(cfg, run_dir)
    print(f"wrote {', '.join(s + '.jsonl' for s in SPLITS)} to {run_dir}")
    print(f"treatment frequency: chemo {summary['treatment_frequency']['chemo']:.3f} "
          f"radio {summary['treatment_frequency']['radio']:.3f}")
    return 0


def train_into(cfg: ExperimentConfig, data_dir: Path, run_dir: Path) -> Path:
    train_path = data_dir / "train.jsonl"
    val_path = data_dir / "val.jsonl"
    for p in (train_path, val_path):
        if not p.exists():
            raise UserError(f"dataset file not found: {p}")
    header, train_records = read_dataset(train_path)
    _, val_records = read_dataset(val_path)
    normalizer = header.normalizer()
    model_cfg = _model_config(cfg, cfg.get("train.dropout"))
    params = TecdeParams(model_cfg, np.random.default_rng(
        np.random.SeedSequence([cfg.get("train.seed"), 3])))
    ckpt = run_dir / "checkpoint.json"
    params, history = train(params, train_records, val_records,
                            _train_config(cfg), normalizer,
                            checkpoint_path=ckpt)
    with open(run_dir / "history.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "epoch", "mu", "train_ly", "train_la",
                         "val_ly", "is_best"])
        for row in history:
            writer.writerow([row.phase, row.epoch, f"{row.mu:.6g}",
                             f"{row.train_ly:.10g}",
                             "" if math.isnan(row.train_la) else f"{row.train_la:.10g}",
                             f"{row.val_ly:.10g}", int(row.is_best)])
    return ckpt


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = make_run_dir(args.out_dir, cfg.get("train.seed"), "train")
    (run_dir / "manifest.txt").write_text(
        cfg.manifest("train", {"data": args.data}), encoding="utf-8")
    ckpt = train_into(cfg, Path(args.data), run_dir)
    print(f"checkpoint written to {ckpt}")
    return 0


def evaluate_into(cfg: ExperimentConfig, data_dir: Path, checkpoint,
                  run_dir: Path, oracle: bool = False,
                  export: bool = False) -> EvalReport:
    test_path = data_dir / "test.jsonl"
    if not test_path.exists():
        raise UserError(f"dataset file not found: {test_path}")
    header, records = read_dataset(test_path)
    normalizer = header.normalizer()
    horizons = cfg.int_list("eval.horizons")
    sel_n = cfg.get("eval.selection_horizon")
    started = time.time()

    setting = {"gamma": header.gamma, "kappa": header.kappa,
               "patients": header.counts, "seed": header.seed,
               "oracle": bool(oracle)}
    metrics: dict = {}
    if oracle:
        for n in horizons:
            frag = oracle_horizon_eval(records, normalizer, n)
            for key, val in frag.items():
                if key != "horizon":
                    metrics[f"{key}_n{n}"] = val
        metrics["selection_accuracy"] = 1.0
    else:
        params = TecdeParams.load(checkpoint)
        tensors = prepare_tensors(records, normalizer)
        latents = encode_knot_latents(params, tensors)
        for n in horizons:
            frag = horizon_eval(params, records, normalizer, n,
                                tensors=tensors, latents=latents)
            for key, val in frag.items():
                if key != "horizon":
                    metrics[f"{key}_n{n}"] = val
        sel = treatment_selection(params, records, normalizer, sel_n,
                                  tensors=tensors, latents=latents)
        metrics["selection_accuracy"] = sel["accuracy"]
        metrics["selection_horizon"] = sel["horizon"]
        metrics["probe_accuracy"] = balancing_probe(params, records, normalizer,
                                                    tensors=tensors)
        if params.cfg.dropout_rate > 0.0:
            metrics.update(_uncertainty_metrics(params, records, normalizer, cfg))
        if export:
            times = cfg.float_list("eval.latent_times")
            export_latents(params, records, normalizer, times,
                           run_dir / "latents.csv", tensors=tensors)

    report = EvalReport(setting=setting, metrics=metrics,
                        runtime_seconds=time.time() - started)
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    row = report.csv_row()
    with open(run_dir / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    with open(run_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"runtime_seconds": report.runtime_seconds}, fh)
        fh.write("\n")
    return report


def _uncertainty_metrics(params, records, normalizer, cfg) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.get("eval.seed"), 11]))
    n_pat = cfg.get("eval.mc_patients")
    passes = cfg.get("eval.dropout_passes")
    uncertainties, errors = [], []
    for rec in records[:n_pat]:
        try:
            sample = mc_dropout_predict(params, rec, normalizer, passes, rng, n=1)
        except ValueError:
            continue
        m = len(rec.obs)
        from .data import plan_label
        truths = np.array([rec.cf_labels[plan_label(plan, 1)][k]
                           for k in range(m - 1) for plan in range(4)])
        err = float(np.sqrt(np.mean((sample.mean_prediction - truths) ** 2)))
        uncertainties.append(sample.uncertainty)
        errors.append(err)
    if len(errors) < 4:
        return {}
    curves = sparsification(np.asarray(uncertainties), np.asarray(errors))
    return {"ause": curves["ause"],
            "uncertainty_patients": len(errors),
            "exclusion_rmse_at_half": float(curves["model_curve"][len(curves["model_curve"]) // 2])}


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not args.oracle and not args.checkpoint:
        raise UserError("eval needs --checkpoint unless --oracle is given")
    run_dir = make_run_dir(args.out_dir, cfg.get("eval.seed"), "eval")
    (run_dir / "manifest.txt").write_text(
        cfg.manifest("eval", {"data": args.data, "checkpoint": args.checkpoint or "oracle"}),
        encoding="utf-8")
    report = evaluate_into(cfg, Path(args.data), args.checkpoint, run_dir,
                           oracle=args.oracle, export=args.export_latents)
    print(f"report written to {run_dir / 'report.json'}")
    for key in sorted(report.metrics):
        val = report.metrics[key]
        if isinstance(val, float):
            print(f"  {key} = {val:.4g}")
    return 0


def _sweep_cell(cell_cfg_items, cell_dir_str):
    """One isolated sweep cell: simulate, train, evaluate."""
    cfg = ExperimentConfig(dict(cell_cfg_items))
    cell_dir = Path(cell_dir_str)
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "manifest.txt").write_text(cfg.manifest("sweep-cell"),
                                           encoding="utf-8")
    simulate_into(cfg, cell_dir)
    ckpt = train_into(cfg, cell_dir, cell_dir)
    report = evaluate_into(cfg, cell_dir, ckpt, cell_dir)
    return report.setting, report.metrics


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    gammas = cfg.float_list("sweep.gammas")
    kappas = cfg.float_list("sweep.kappas")
    seeds = cfg.int_list("sweep.seeds")
    if not gammas or not kappas or not seeds:
        raise UserError("sweep grid is empty")
    run_dir = make_run_dir(args.out_dir, seeds[0], "sweep")
    (run_dir / "manifest.txt").write_text(cfg.manifest("sweep"), encoding="utf-8")

    cells = []
    for kappa in kappas:
        for gamma in gammas:
            for seed in seeds:
                cell = cfg.copy()
                cell.set("sim.gamma", gamma)
                cell.set("sim.kappa", kappa)
                cell.set("sim.seed", seed)
                cell.set("train.seed", seed)
                cell.set("eval.seed", seed)
                name = f"cell_k{kappa:g}_g{gamma:g}_s{seed}"
                cells.append((cell, run_dir / name))

    results = []
    if args.workers and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(_sweep_cell, dict(c.items()), str(d))
                       for c, d in cells]
            for (c, d), fut in zip(cells, futures):
                try:
                    results.append((d.name, *fut.result(), None))
                except Exception as exc:  # cell failures must not kill the sweep
                    results.append((d.name, None, None, str(exc)))
    else:
        for c, d in cells:
            try:
                results.append((d.name, *_sweep_cell(dict(c.items()), str(d)), None))
            except Exception as exc:
                results.append((d.name, None, None, str(exc)))

    rows = []
    for name, setting, metrics, error in results:
        row = {"cell": name, "status": "ok" if error is None else "failed"}
        if error is None:
            row.update({"gamma": setting["gamma"], "kappa": setting["kappa"],
                        "seed": setting["seed"]})
            row.update({k: v for k, v in metrics.items()
                        if isinstance(v, (int, float))})
        else:
            row["error"] = error
        rows.append(row)
    fieldnames = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(run_dir / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)

    summary = _sweep_trends(rows, gammas, kappas)
    with open(run_dir / "sweep_summary.json", "w", encoding="utf-8") as fh:
        fh.write(jsonlines.dumps(summary) + "\n")
    n_failed = sum(1 for r in rows if r["status"] == "failed")
    print(f"sweep complete: {len(rows) - n_failed}/{len(rows)} cells ok; "
          f"aggregate at {run_dir / 'aggregate.csv'}")
    return 0


def _sweep_trends(rows, gammas, kappas) -> dict:
    summary = {"cells": len(rows),
               "failed": sum(1 for r in rows if r["status"] == "failed")}
    for kappa in kappas:
        means = []
        for gamma in sorted(gammas):
            vals = [r.get("rmse_cf_n1") for r in rows
                    if r["status"] == "ok" and r.get("gamma") == gamma
                    and r.get("kappa") == kappa and r.get("rmse_cf_n1") is not None]
            if vals:
                means.append(float(np.mean(vals)))
        if len(means) == len(gammas) and len(means) > 1:
            summary[f"rmse_monotone_in_gamma_k{kappa:g}"] = bool(
                all(b >= a for a, b in zip(means, means[1:])))
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfcde",
        description="Continuous-time counterfactual tumor-growth experiments.",
        epilog="Configuration keys:\n" + describe_fields(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="override every seed")
        p.add_argument("--out-dir", help=f"output root (default $"
                       f"{ENV_OUT_DIR} or ./runs)")
        p.add_argument("--gamma", type=float, help="override sim.gamma")
        p.add_argument("--kappa", type=float, help="override sim.kappa")
        p.add_argument("--scale", type=float,
                       help="multiply every split size by this factor")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any configuration key")

    p_sim = sub.add_parser("simulate", help="generate train/val/test datasets")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train on an existing dataset")
    common(p_train)
    p_train.add_argument("--data", required=True,
                         help="directory holding train.jsonl and val.jsonl")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    common(p_eval)
    p_eval.add_argument("--data", required=True,
                        help="directory holding test.jsonl")
    p_eval.add_argument("--checkpoint", help="model checkpoint file")
    p_eval.add_argument("--oracle", action="store_true",
                        help="pipe ground truth through the evaluation")
    p_eval.add_argument("--export-latents", action="store_true",
                        help="also write latents.csv")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="grid of simulate+train+eval cells")
    common(p_sweep)
    p_sweep.add_argument("--workers", type=int, default=1,
                         help="parallel sweep cells")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UserError, ConfigError, jsonlines.FormatError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
