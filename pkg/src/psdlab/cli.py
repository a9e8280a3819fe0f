"""Command-line entry point: generate | train | eval | gradcheck | ablate.

Configuration precedence: built-in defaults < --config file < --set KEY=VALUE
< dedicated flags. Every command echoes its resolved configuration into the
output directory and is idempotent given identical inputs and seeds. Exit
codes: 0 success, otherwise the failing error class's code (see errors.py);
a failed gradcheck returns 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from .config import ExperimentConfig, echo_config, parse_config_text, set_key
from .data import generate, load_pairs, save_pairs
from .errors import ConfigError, PsdError
from .evaluation import histogram_csv, linear_probe, retrieval_eval, similarity_stats, zero_shot_top1
from .experiments import (
    ablation_table,
    class_prototypes,
    noise_experiment_config,
    run_matrix,
    split_clean_holdout,
)
from .numkit import RngState
from .trainer import encode_pairs, load_checkpoint, save_checkpoint, train

log = logging.getLogger("psdlab")


def _setup_logging(quiet: bool) -> None:
    level_name = os.environ.get("PSD_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"PSD_LOG_LEVEL must be one of {sorted(levels)}, got {level_name!r}")
    level = logging.ERROR if quiet else levels[level_name]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(level)


def _resolve_config(args, base: ExperimentConfig | None = None) -> tuple[ExperimentConfig, str | None]:
    cfg = base or ExperimentConfig()
    source_text = None
    if args.config:
        try:
            source_text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        cfg = parse_config_text(source_text, cfg)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    for flag in ("target_mode", "partition_mode", "alpha_schedule", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            set_key(cfg, flag, str(value))
    klist = getattr(args, "klist", None)
    if klist is not None:
        set_key(cfg, "k_list", klist)
    return cfg, source_text


def _load_or_generate(cfg: ExperimentConfig, dataset_arg: str | None):
    path = dataset_arg or cfg.dataset_path
    if path:
        log.info("loading dataset %s", path)
        return load_pairs(path)
    log.info("generating synthetic dataset (seed %d)", cfg.seed)
    return generate(cfg.synthetic_spec(), RngState(cfg.seed))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_generate(args) -> int:
    cfg, source = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, source)
    ds = generate(cfg.synthetic_spec(), RngState(cfg.seed))
    path = out / "dataset.psdd"
    save_pairs(ds, path)
    corrupted = int(ds.corrupted.sum())
    print(f"dataset: {path}")
    print(f"n: {ds.num_samples}  classes: {ds.num_classes}  "
          f"captions_per_image: {ds.captions_per_image}")
    print(f"eta: {cfg.mismatch_rate}  corrupted: {corrupted}")
    print(f"sha256: {_sha256(path)}")
    return 0


def cmd_train(args) -> int:
    cfg, source = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, source)
    ds = _load_or_generate(cfg, args.dataset)
    eval_ds = None
    if cfg.eval_every > 0:
        ds, eval_ds = split_clean_holdout(ds, cfg.eval_per_class)
        log.info("carved %d clean held-out pairs", eval_ds.num_samples)
    tc = cfg.train_config(image_input_dim=ds.image_features.shape[1],
                          text_input_dim=ds.text_features.shape[1])
    result = train(tc, ds, eval_ds=eval_ds, metrics_path=out / "metrics.jsonl")
    save_checkpoint(result, out / "checkpoint")
    last = result.step_records()[-1]
    print(f"steps: {last['step'] + 1}  final_loss: {last['loss']:.6f}  "
          f"final_scale: {last['scale']:.4f}")
    print(f"metrics: {out / 'metrics.jsonl'}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    cfg, source = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, source)
    image_params, text_params, temp, _state = load_checkpoint(args.checkpoint)
    ds = load_pairs(args.dataset)
    img, txt = encode_pairs(image_params, text_params, ds)
    i2t, t2i = retrieval_eval(img, txt, cfg.k_list)
    protos = class_prototypes(text_params, ds)
    zs = zero_shot_top1(img, protos, ds.class_labels)
    stats = similarity_stats(img, txt, cfg.histogram_bins)
    report = {
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "n": ds.num_samples,
        "temperature_scale": temp.scale,
        "image_to_text": i2t.to_dict(),
        "text_to_image": t2i.to_dict(),
        "zero_shot_top1": zs,
        "similarity": stats.to_dict(),
    }
    if cfg.probe:
        test_mask = (np.arange(ds.num_samples) % 5 == 0)
        probe = linear_probe(img[~test_mask], ds.class_labels[~test_mask],
                             img[test_mask], ds.class_labels[test_mask],
                             l2=cfg.probe_l2)
        report["linear_probe"] = probe.to_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (out / "histogram_positive.csv").write_text(histogram_csv(stats, "positive"), encoding="utf-8")
    (out / "histogram_negative.csv").write_text(histogram_csv(stats, "negative"), encoding="utf-8")
    ks = sorted(t2i.recall_at)
    print("  ".join([f"t2i_r{k}: {t2i.recall_at[k]:.2f}" for k in ks]))
    print("  ".join([f"i2t_r{k}: {i2t.recall_at[k]:.2f}" for k in ks]))
    print(f"t2i_mnr: {t2i.mean_rank:.3f}  i2t_mnr: {i2t.mean_rank:.3f}")
    print(f"zero_shot_top1: {zs:.2f}")
    if cfg.probe:
        print(f"linear_probe: {report['linear_probe']['accuracy']:.2f}")
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg, source = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, source)
    reports = gradcheck_mod.run_all(seed=cfg.seed, instances=args.seeds)
    width = max(len(r.name) for r in reports)
    all_ok = True
    for r in reports:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  instances: {r.instances:4d}  "
              f"worst_rel_err: {r.worst_rel_error:.3e}  {status}")
        all_ok &= r.passed
    (out / "gradcheck.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return 0 if all_ok else 1


def cmd_ablate(args) -> int:
    cfg, source = _resolve_config(args, base=noise_experiment_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, source)
    seeds = [cfg.seed + i for i in range(cfg.ablate_seeds)]

    def progress(outcome):
        k = min(outcome.t2i_recall)
        log.info("seed %d %s: t2i_r%d %.2f zero_shot %.2f",
                 outcome.seed, outcome.variant, k, outcome.t2i_recall[k], outcome.zero_shot)

    outcomes = run_matrix(cfg, seeds, progress=progress)
    table = ablation_table(outcomes)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    ks = sorted(int(k) for k in next(iter(table["rows"].values()))["t2i_r@k_mean"])
    header = ["variant".ljust(18)] + [f"t2i_r{k}" for k in ks] + ["zeroshot", "vs_base"]
    print("  ".join(header))
    for variant in ("baseline", "bootstrap_static", "swapped_static", "swapped_dynamic"):
        row = table["rows"][variant]
        vote = table["wins_vs_baseline"].get(variant)
        vote_txt = f"{vote['wins']}W/{vote['losses']}L" if vote else "-"
        cells = [variant.ljust(18)]
        cells += [f"{row['t2i_r@k_mean'][str(k)]:6.2f}" for k in ks]
        cells += [f"{row['zero_shot_mean']:8.2f}", vote_txt]
        print("  ".join(cells))
    print(f"table: {out / 'ablation.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psdlab",
        description="Desk-scale progressive self-distillation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="base RNG seed (u64)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true", help="errors only")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic PSDD dataset")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one run, write metrics + checkpoint")
    add_common(p)
    p.add_argument("--dataset", help="PSDD file (default: synthesize per config)")
    p.add_argument("--target-mode", dest="target_mode",
                   choices=("swapped", "bootstrap", "none"))
    p.add_argument("--partition-mode", dest="partition_mode",
                   choices=("dynamic", "static"))
    p.add_argument("--alpha-schedule", dest="alpha_schedule",
                   choices=("cosine", "linear"))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("checkpoint", help="checkpoint directory from train")
    p.add_argument("dataset", help="PSDD dataset file")
    p.add_argument("--klist", help="comma-separated recall cutoffs, e.g. 1,5,10")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(p)
    p.add_argument("--seeds", type=int, default=100,
                   help="random instances per check (default 100)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired-seed loss-variant comparison")
    add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging(args.quiet)
        return args.func(args)
    except PsdError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
