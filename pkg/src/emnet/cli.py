"""Command-line entry point: ``emnet {train,eval,ablate,audit,erf,synth}``.

``EMNET_THREADS`` sets the torch thread count; nothing else is read from
the environment.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import tensor_core as tc
from .errors import EmNetError

log = logging.getLogger("emnet")


def _run_config(args):
    from .train import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_map = {"attention": args.attention, "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
                "seed": args.seed, "train_manifest": args.train_manifest, "eval_manifest": args.eval_manifest,
                "synth_train": args.synth_train, "synth_eval": args.synth_eval, "image_size": args.image_size,
                "out_dir": args.out}
    overrides.update({k: str(v) for k, v in flag_map.items() if v is not None})
    if args.no_em:
        overrides["em"] = "false"
    if args.subsample:
        overrides["subsample"] = "true"
    return cfg.with_overrides(overrides)


def _add_run_flags(p):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--attention", choices=("gam", "none", "se", "cbam"))
    p.add_argument("--no-em", action="store_true", help="drop the EM module")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-manifest")
    p.add_argument("--eval-manifest")
    p.add_argument("--subsample", action="store_true", help="keep odd serial numbers of the training set")
    p.add_argument("--synth-train", type=int)
    p.add_argument("--synth-eval", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--out", help="output directory")


def _progress(row):
    log.info("epoch %d lr %.6g train_mae %.5f eval %.3f deg", row["epoch"], row["lr"], row["train_mae"],
             row["eval_angular_error_deg"])


def cmd_train(args) -> int:
    from .train import train_loop

    cfg = _run_config(args)
    res = train_loop(cfg, progress=_progress)
    print(f"checkpoint {res.checkpoint}")
    print(f"final train error {res.final_train_error:.4f} deg, eval error {res.final_eval_error:.4f} deg")
    return 0


def _eval_images(args, cfg):
    from .data import imageset_from_manifest, imageset_from_samples, load_manifest, synth_generate

    if args.manifest:
        return imageset_from_manifest(load_manifest(args.manifest))
    n = args.synth_n if args.synth_n is not None else cfg.synth_eval
    start = args.synth_start if args.synth_start is not None else cfg.synth_train + 1
    return imageset_from_samples(synth_generate(n, cfg.synth_seed, start, cfg.image_size))


def cmd_eval(args) -> int:
    from .train import RunConfig, dump_attention, dump_em_trace, evaluate, load_run, write_eval_csv, write_predictions

    model, cfg = load_run(args.checkpoint, RunConfig.load(args.config) if args.config else None)
    images = _eval_images(args, cfg)
    rows = evaluate(model, images, args.sigma or [], args.noise_seed)
    for s, e, n in rows:
        print(f"sigma {s:g}: mean angular error {e:.4f} deg over {n} samples")
    if args.out:
        write_eval_csv(args.out, rows)
    if args.predictions:
        write_predictions(args.predictions, model, images)
    if args.dump_attention:
        for p in dump_attention(model, images, args.dump_attention):
            print(f"attention {p}")
    if args.dump_em_trace:
        dump_em_trace(model, images, args.dump_em_trace)
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation_suite

    cfg = _run_config(args)
    rows = ablation_suite(cfg, progress=_progress)
    for r in rows:
        print(f"{r['variant']:<16} params {r['params']:>9}  eval {r['eval_angular_error_deg']:.4f} deg")
    print(f"table {Path(cfg.out_dir) / 'ablation.csv'}")
    return 0


def cmd_audit(args) -> int:
    from .train import audit, write_audit_csv

    rep = audit(args.attention, not args.no_em, args.image_size)
    sys.stdout.write(rep.to_text())
    if args.csv:
        write_audit_csv(args.csv, rep)
    return 0 if rep.ok else 1


def cmd_erf(args) -> int:
    from .erf import erf_area, model_erf_map, probe_models, write_csv, write_pgm

    if args.checkpoint:
        from .train import load_run

        model, cfg = load_run(args.checkpoint)
        size = cfg.image_size
    else:
        model = probe_models(args.seed, args.stage, (args.attention,), not args.no_em, args.image_size)[args.attention]
        size = args.image_size
    m = model_erf_map(model, args.stage, args.samples, args.seed, size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out.with_name(out.name + ".pgm"), m.heatmap)
    write_csv(out.with_name(out.name + ".csv"), m.heatmap)
    print(f"stage {args.stage} erf_area@{args.threshold:g} = {erf_area(m, args.threshold):.6f}")
    return 0


def cmd_synth(args) -> int:
    from .data import synth_generate, write_synth_dataset

    manifest = write_synth_dataset(args.out, synth_generate(args.n, args.seed, args.start, args.image_size),
                                   args.format)
    print(f"manifest {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emnet", description="Gaze estimation network: train, evaluate, probe.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write metrics.csv, final.csv, model.ckpt")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean angular error, clean and under Gaussian noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run configuration (default: run.cfg beside the checkpoint)")
    p.add_argument("--manifest", help="evaluation manifest (default: the run's synthetic held-out split)")
    p.add_argument("--synth-n", type=int)
    p.add_argument("--synth-start", type=int)
    p.add_argument("--sigma", type=float, action="append", help="noise standard deviation (repeatable)")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", help="metrics CSV (sigma, mean_angular_error_deg, n)")
    p.add_argument("--predictions", help="per-sample predictions CSV")
    p.add_argument("--dump-attention", metavar="DIR", help="write GAM attention matrices of the first sample")
    p.add_argument("--dump-em-trace", metavar="CSV", help="write the EM objective per iteration")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the GAM x EM grid and write ablation.csv")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("audit", help="parameter and MAC counts against the reference model size")
    p.add_argument("--attention", choices=("gam", "none", "se", "cbam"), default="gam")
    p.add_argument("--no-em", action="store_true")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--csv", help="per-layer CSV output")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("erf", help="effective receptive field heatmap (PGM + CSV)")
    p.add_argument("--stage", default="gam3")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.pgm and PREFIX.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attention", choices=("gam", "none", "se", "cbam"), default="gam")
    p.add_argument("--no-em", action="store_true")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--checkpoint", help="probe trained weights instead of random probe weights")
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("synth", help="write a synthetic face dataset (images/ + manifest.txt)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=1, help="first serial number")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--format", choices=("png", "npy"), default="png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    tc.configure_threads()
    try:
        return args.func(args)
    except (EmNetError, OSError, ValueError, KeyError) as e:
        print(f"emnet: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
