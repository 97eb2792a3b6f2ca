"""Command-line entry point: dataset generation, training, evaluation, sweeps.

Every command resolves a RunConfig (defaults, then --config file, then
command-line overrides), runs single-process, and writes a run manifest with
content hashes of its outputs so results can be verified on reload.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
import time

import numpy as np

from .backbone import Backbone, DivergenceError, read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import (
    SHAPE_NAMES,
    generate_dataset,
    load_manifest_arrays,
    read_manifest,
    subsample_manifest,
)
from .gradcheck import TOLERANCE, run_scope
from .pretrain import MaskTokens, Projector
from .train import (
    evaluate,
    linear_probe,
    pretrain_encoder,
    train_supervised,
)
from .validation import ConfigurationError

__all__ = ["main", "run_bench"]


class CliError(RuntimeError):
    pass


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir, command, cfg, seeds, started, outputs):
    manifest = {
        "command": command,
        "config": cfg.to_text(),
        "seeds": seeds,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": {os.path.basename(p): _sha256_file(p) for p in outputs
                    if os.path.exists(p)},
    }
    path = os.path.join(out_dir, "run.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _resolve_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        for key in ("data.seed", "pretrain.seed", "optim.seed"):
            cfg.set(key, args.seed)
    return cfg


def _load_split(data_dir, split, limit_percent=100.0, seed=0):
    path = os.path.join(data_dir, f"{split}_manifest.txt")
    if not os.path.exists(path):
        raise CliError(f"manifest not found: {path}")
    man = read_manifest(path)
    if split == "train" and limit_percent < 100.0:
        man = subsample_manifest(man, limit_percent, seed)
    return load_manifest_arrays(man)


def _check_checkpoint_config(cfg, ckpt, what):
    """Reject checkpoints whose model sections differ from the active config."""
    stored = RunConfig.from_text(ckpt["config_text"])
    diffs = stored.diff(cfg, sections=("backbone", "attention"))
    if diffs:
        lines = "; ".join(f"{k}: checkpoint={a!r} run={b!r}" for k, a, b in diffs)
        raise CliError(f"{what}: config mismatch with checkpoint — {lines}")


def _build_model(cfg, dtype, seed):
    return Backbone(cfg.backbone_config(), dtype=dtype, seed=seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    train_m, test_m = generate_dataset(
        out,
        n_points=cfg.get("data.n_points"),
        train_per_class=cfg.get("data.train_per_class"),
        test_per_class=cfg.get("data.test_per_class"),
        seed=cfg.get("data.seed"),
        classes=SHAPE_NAMES,
    )
    outputs = [train_m, test_m]
    limit = args.limit if args.limit is not None else cfg.get("data.limit_percent")
    if limit < 100.0:
        man = subsample_manifest(read_manifest(train_m), limit, cfg.get("data.seed"))
        from .data import write_manifest

        limited = os.path.join(out, f"train_manifest_p{limit:g}.txt")
        entries = [(os.path.relpath(p, out), lab) for p, lab in man.entries]
        write_manifest(limited, type(man)(split=man.split, class_names=man.class_names,
                                          entries=entries, seed=man.seed))
        outputs.append(limited)
        print(f"limited manifest: {limited} ({man.n_samples} samples)")
    _write_run_manifest(out, "gen-data", cfg, {"data": cfg.get("data.seed")},
                        started, outputs)
    print(f"dataset written to {out}")
    return 0


def cmd_pretrain(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    dtype = cfg.dtype(args.f64)
    coords, _ = _load_split(args.data, "train", cfg.get("data.limit_percent"),
                            cfg.get("data.seed"))
    model = _build_model(cfg, dtype, cfg.get("pretrain.seed"))
    layer_inputs = (3,) + tuple(model.config.layer_dims[:-1])
    tokens = MaskTokens(layer_inputs, dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence([0x9201, cfg.get("pretrain.seed")]))
    projector = Projector(model.config.emb_dim, cfg.get("pretrain.projector_dims"),
                          rng, dtype)
    spec = cfg.perturb_spec()
    history = pretrain_encoder(
        model, tokens, projector, coords, spec, cfg.ssl_loss_config(),
        epochs=cfg.get("pretrain.epochs"), batch_size=cfg.get("pretrain.batch_size"),
        lr=cfg.get("pretrain.lr"), weight_decay=cfg.get("pretrain.weight_decay"),
        out_dir=args.out, config_text=cfg.to_text(),
        log=lambda r: print(
            f"epoch {r['epoch']}: local {r['local_loss']:.4f} "
            f"global {r['global_loss']:.4f} total {r['total_loss']:.4f}"
        ),
    )
    ckpt = os.path.join(args.out, "checkpoint_pretrained.gfck")
    _write_run_manifest(args.out, "pretrain", cfg,
                        {"pretrain": cfg.get("pretrain.seed")}, started,
                        [ckpt, os.path.join(args.out, "pretrain_metrics.csv")])
    print(f"final_total_loss={history[-1]['total_loss']:.6f}")
    return 0


def _apply_ablation(cfg, ablate):
    pretrain_on = True
    if not ablate:
        return cfg, pretrain_on
    for item in ablate.split(","):
        name, _, value = item.partition("=")
        on = value.strip().lower() not in ("off", "false", "0")
        name = name.strip()
        if name == "extraction":
            cfg = cfg.replace(backbone__use_attention_aggregation=on)
            if not on:
                cfg = cfg.replace(backbone__use_fused_grouping=False)
        elif name == "grouping":
            cfg = cfg.replace(backbone__use_fused_grouping=on)
        elif name == "pretrain":
            pretrain_on = on
        else:
            raise CliError(f"unknown ablation flag {name!r}")
    return cfg, pretrain_on


def cmd_train(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    cfg, pretrain_on = _apply_ablation(cfg, args.ablate)
    dtype = cfg.dtype(args.f64)
    train_data = _load_split(args.data, "train", cfg.get("data.limit_percent"),
                             cfg.get("data.seed"))
    test_data = _load_split(args.data, "test")
    model = _build_model(cfg, dtype, cfg.get("optim.seed"))
    finetune = False
    if args.init and pretrain_on:
        ckpt = read_checkpoint(args.init)
        _check_checkpoint_config(cfg, ckpt, "train --init")
        model.load_param_values(
            {n: v for n, v in ckpt["params"].items() if n in model.params()})
        finetune = True
    history = train_supervised(
        model, train_data, test_data, cfg.optim_config(), out_dir=args.out,
        finetune=finetune, config_text=cfg.to_text(),
        log=lambda r: print(
            f"epoch {r['epoch']}: loss {r['train_loss']:.4f}"
            + (f" test_acc {r['test_accuracy']:.4f}" if "test_accuracy" in r else "")
        ),
    )
    _write_run_manifest(
        args.out, "train", cfg, {"optim": cfg.get("optim.seed")}, started,
        [os.path.join(args.out, "checkpoint_best.gfck"),
         os.path.join(args.out, "checkpoint_final.gfck"),
         os.path.join(args.out, "metrics.csv")],
    )
    final_acc = max((r.get("test_accuracy", 0.0) for r in history), default=0.0)
    print(f"accuracy={final_acc:.6f}")
    return 0


def cmd_probe(args, cfg):
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    dtype = cfg.dtype(args.f64)
    ckpt = read_checkpoint(args.checkpoint)
    if args.config:
        _check_checkpoint_config(cfg, ckpt, "probe")
    else:
        cfg = RunConfig.from_text(ckpt["config_text"])
    model = _build_model(cfg, dtype, cfg.get("optim.seed"))
    model.load_param_values(
        {n: v for n, v in ckpt["params"].items() if n in model.params()})
    train_data = _load_split(args.data, "train", cfg.get("data.limit_percent"),
                             cfg.get("data.seed"))
    test_data = _load_split(args.data, "test")
    acc, _ = linear_probe(model, train_data, test_data, seed=cfg.get("optim.seed"))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_run_manifest(args.out, "probe", cfg,
                            {"optim": cfg.get("optim.seed")}, started, [])
    print(f"accuracy={acc:.6f}")
    return 0


def cmd_eval(args, cfg):
    dtype = cfg.dtype(args.f64)
    ckpt = read_checkpoint(args.checkpoint)
    if args.config:
        _check_checkpoint_config(cfg, ckpt, "eval")
    else:
        cfg = RunConfig.from_text(ckpt["config_text"])
    model = _build_model(cfg, dtype, cfg.get("optim.seed"))
    model.load_param_values(
        {n: v for n, v in ckpt["params"].items() if n in model.params()})
    coords, labels = _load_split(args.data, args.split)
    overall, per_class = evaluate(model, coords, labels,
                                  cfg.get("optim.batch_size"))
    for c, a in enumerate(per_class):
        print(f"class_{c}_accuracy={a:.6f}")
    print(f"accuracy={overall:.6f}")
    return 0


def cmd_gradcheck(args, cfg):
    report = run_scope(args.scope)
    worst = max(report.values())
    for name in sorted(report, key=report.get, reverse=True):
        print(f"{name}: {report[name]:.3e}")
    print(f"worst={worst:.3e} tolerance={TOLERANCE:.0e}")
    if worst > TOLERANCE:
        print("error: gradient check failed", file=sys.stderr)
        return 1
    return 0


def run_bench(cfg, batches=50, batch_size=16, repeats=1, seed=0):
    """Forward latency per toggle/variant combination; returns row dicts."""
    rows = []
    combos = [
        ("baseline", False, False, "-"),
        ("attention", True, False, "independent"),
        ("attention+fused", True, True, "independent"),
        ("attention+fused", True, True, "consistent"),
    ]
    n = cfg.get("data.n_points")
    rng = np.random.default_rng(np.random.SeedSequence([0xBE7C, seed]))
    coords = rng.uniform(-1, 1, size=(batch_size, n, 3)).astype(np.float32)
    for label, extraction, grouping, variant in combos:
        run = cfg.replace(
            backbone__use_attention_aggregation=extraction,
            backbone__use_fused_grouping=grouping,
        )
        if variant != "-":
            run = run.replace(attention__proj_variant=variant)
        model = _build_model(run, np.float32, seed)
        means = []
        for _ in range(repeats):
            from .autodiff import no_grad

            with no_grad():
                model.forward(coords, training=False)  # warm caches
                t0 = time.perf_counter()
                for _b in range(batches):
                    model.forward(coords, training=False)
                took = time.perf_counter() - t0
            means.append(took / batches)
        mean = float(np.mean(means))
        spread = float((max(means) - min(means)) / mean) if repeats > 1 else 0.0
        rows.append({
            "config": label,
            "variant": variant,
            "batch_ms": mean * 1e3,
            "sample_ms": mean * 1e3 / batch_size,
            "repeat_spread": spread,
        })
    return rows


def cmd_bench(args, cfg):
    rows = run_bench(cfg, batches=args.batches, batch_size=args.batch_size,
                     repeats=args.repeats, seed=cfg.get("optim.seed"))
    print(f"{'config':<18} {'variant':<12} {'batch ms':>10} {'sample ms':>10}")
    for r in rows:
        print(f"{r['config']:<18} {r['variant']:<12} "
              f"{r['batch_ms']:>10.3f} {r['sample_ms']:>10.3f}")
    return 0


def cmd_sweep(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    rows = []
    if args.axis == "flags":
        combos = [("off", "off"), ("on", "off"), ("on", "on")]
        for ext, grp in combos:
            sub_args = argparse.Namespace(
                out=os.path.join(args.out, f"ext_{ext}_grp_{grp}"),
                data=args.data, init=None, f64=args.f64,
                ablate=f"extraction={ext},grouping={grp}")
            os.makedirs(sub_args.out, exist_ok=True)
            cmd_train(sub_args, cfg)
            rows.append((f"extraction={ext},grouping={grp}", sub_args.out))
    elif args.axis == "k":
        for k in (5, 10, 20, 40):
            run = cfg.replace(backbone__k=k)
            sub_args = argparse.Namespace(out=os.path.join(args.out, f"k{k}"),
                                          data=args.data, init=None,
                                          f64=args.f64, ablate=None)
            os.makedirs(sub_args.out, exist_ok=True)
            cmd_train(sub_args, run)
            rows.append((f"k={k}", sub_args.out))
    elif args.axis == "heads":
        for h in (1, 2, 3, 4):
            run = cfg.replace(attention__heads=h)
            sub_args = argparse.Namespace(out=os.path.join(args.out, f"h{h}"),
                                          data=args.data, init=None,
                                          f64=args.f64, ablate=None)
            os.makedirs(sub_args.out, exist_ok=True)
            cmd_train(sub_args, run)
            rows.append((f"heads={h}", sub_args.out))
    else:
        raise CliError(f"unknown sweep axis {args.axis!r}")
    summary = os.path.join(args.out, "sweep.csv")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("setting,out_dir\n")
        for setting, path in rows:
            fh.write(f"{setting},{path}\n")
    _write_run_manifest(args.out, f"sweep-{args.axis}", cfg,
                        {"optim": cfg.get("optim.seed")}, started, [summary])
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="groupattn",
        description="Point-cloud classification with attention-coordinated "
                    "grouping: dataset generation, pretraining, training, "
                    "evaluation, gradient checks, and benchmarks.",
    )
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override data/pretrain/optim seeds")
    parser.add_argument("--out", help="default output directory")
    parser.add_argument("--threads", type=int, default=0,
                        help="BLAS thread cap (0 = library default)")
    parser.add_argument("--f64", action="store_true",
                        help="run in float64 instead of float32")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    p.add_argument("--force", action="store_true")
    p.add_argument("--limit", type=float, default=None,
                   help="also write a limited train manifest (percent)")
    p.set_defaults(fn=cmd_gen_data, needs_out=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_pretrain, needs_out=True)

    p = sub.add_parser("train", help="supervised training")
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="pretrained checkpoint to fine-tune from")
    p.add_argument("--ablate", help="extraction=on|off,grouping=on|off,pretrain=on|off")
    p.set_defaults(fn=cmd_train, needs_out=True)

    p = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_probe, needs_out=False)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(fn=cmd_eval, needs_out=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", default="ops", choices=("ops", "layer", "full"))
    p.set_defaults(fn=cmd_gradcheck, needs_out=False)

    p = sub.add_parser("bench", help="forward-latency micro-benchmark")
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(fn=cmd_bench, needs_out=False)

    p = sub.add_parser("sweep", help="ablation sweeps (flags, k, heads)")
    p.add_argument("--axis", required=True, choices=("flags", "k", "heads"))
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_sweep, needs_out=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        cfg = _resolve_config(args)
        if args.threads and args.threads > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.fn(args, cfg)
        return args.fn(args, cfg)
    except (CliError, ConfigurationError, DivergenceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
