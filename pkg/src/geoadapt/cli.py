"""Command line entry points.

Subcommands: gen-data, train, pseudo-label, refine, eval, gradcheck,
report. Exit codes: 0 success, 1 validation/usage failure, 2 runtime
error.
"""

import argparse
import json
import sys
import time

from . import evaluation, gradsuite, scenegen, trainer


def _parse_override(value):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _apply_overrides(cfg_dict, overrides):
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().lstrip("-")
        if key not in cfg_dict:
            raise ValueError(f"unknown config key {key!r}")
        cfg_dict[key] = _parse_override(raw)
    return cfg_dict


def _load_train_config(args):
    if args.config:
        with open(args.config) as fh:
            cfg_dict = json.load(fh)
    else:
        cfg_dict = trainer.TrainConfig().to_json()
    _apply_overrides(cfg_dict, args.overrides)
    return trainer.TrainConfig.from_json(cfg_dict)


def _cmd_gen_data(args):
    t0 = time.time()
    for domain, seed in (("source", args.seed), ("target", args.seed + 100)):
        cfg = scenegen.default_domain_config(domain, seed)
        manifest = scenegen.make_dataset(cfg, args.sequences, args.frames, args.out)
        print(
            f"{domain}: {manifest['n_sequences']} sequences x {manifest['frames_per_seq']} frames"
            f" -> {manifest['n_samples']} triplets"
        )
    print(f"done in {time.time() - t0:.1f}s -> {args.out}")
    return 0


def _cmd_train(args):
    cfg = _load_train_config(args)
    ckpt, metrics = trainer.train(cfg, args.source, args.target, args.out)
    print(f"checkpoint: {ckpt}")
    print(f"metrics:    {metrics}")
    return 0


def _cmd_pseudo_label(args):
    n, coverage = trainer.generate_pseudo_labels(
        args.checkpoint, args.target, confidence=args.confidence
    )
    print(f"wrote pseudo labels for {n} frames (coverage {coverage:.4f})")
    return 0


def _cmd_refine(args):
    cfg = _load_train_config(args)
    ckpt, metrics = trainer.refine_with_pseudo_labels(
        cfg, args.checkpoint, args.source, args.target, args.out
    )
    print(f"checkpoint: {ckpt}")
    print(f"metrics:    {metrics}")
    return 0


def _cmd_eval(args):
    summary = evaluation.evaluate(args.checkpoint, args.target, args.out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _cmd_gradcheck(args):
    t0 = time.time()
    ok, results = gradsuite.run_gradient_suite(
        n_instances=args.instances, tol=args.tol, verbose=True
    )
    for name in sorted(results):
        rep = results[name]
        status = "ok  " if rep.passed else "FAIL"
        print(f"{status} {name:28s} max rel err {rep.max_rel_error:.3e}")
    print(f"gradient suite {'PASSED' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return 0 if ok else 1


def _cmd_report(args):
    path = evaluation.merge_reports(args.summaries, args.out)
    with open(path) as fh:
        print(fh.read())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="geoadapt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the two-domain corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--sequences", type=int, default=64)
    g.add_argument("--frames", type=int, default=10)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None, help="JSON file mirroring TrainConfig")
    t.add_argument("--source", required=True, help="corpus root holding source/")
    t.add_argument("--target", required=True, help="corpus root holding target/")
    t.add_argument("--out", required=True)
    t.add_argument("overrides", nargs="*", help="key=value config overrides")
    t.set_defaults(fn=_cmd_train)

    pl = sub.add_parser("pseudo-label", help="write confidence-gated pseudo labels")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--target", required=True)
    pl.add_argument("--confidence", type=float, default=0.9)
    pl.set_defaults(fn=_cmd_pseudo_label)

    r = sub.add_parser("refine", help="continue training with pseudo labels")
    r.add_argument("--config", default=None)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("overrides", nargs="*")
    r.set_defaults(fn=_cmd_refine)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out target labels")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=_cmd_eval)

    gc = sub.add_parser("gradcheck", help="run the finite-difference suite")
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=_cmd_gradcheck)

    rep = sub.add_parser("report", help="merge eval summaries into a comparison")
    rep.add_argument("summaries", nargs="+", help="summary.json files")
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=_cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
