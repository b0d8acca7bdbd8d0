"""Command-line interface: preprocess, train, evaluate, export-features, gradcheck.

Every trainer/evaluation flag mirrors an ExperimentConfig key (dashes in
flags, underscores in config files); ``--config FILE`` loads defaults that
individual flags override.  Exit code 0 on success; on error a single
machine-readable line ``error: <message>`` goes to stderr and the exit
code is 1.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import load_manifest, preprocess_manifest, make_folds, SampleBank
from .gradcheck import run_suite
from .harness import (
    ExperimentConfig,
    evaluate,
    export_features,
    load_config,
    population_std,
    run_experiment,
)
from .net import build_network, load_checkpoint


def _add_config_flags(parser):
    parser.add_argument("--config", help="config file of key = value lines")
    from dataclasses import fields

    for f in fields(ExperimentConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            metavar="V", help=argparse.SUPPRESS)


def _config_from_args(args):
    overrides = {}
    from dataclasses import fields

    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return load_config(args.config, overrides)


def _cmd_preprocess(args):
    config = _config_from_args(args)
    manifest = load_manifest(config.manifest, config.protocol)
    renditions = ("elr", "hr") if args.rendition == "both" else (args.rendition,)
    for rendition in renditions:
        n = preprocess_manifest(
            manifest, config.cache_dir, rendition,
            elr_shape=config.elr_shape if rendition == "elr" else None,
            temporal_length=config.temporal_length or None,
            force=args.force)
        print(f"{rendition}: preprocessed {n} videos "
              f"({len(manifest.entries) - n} already cached)")
    return 0


def _cmd_train(args):
    config = _config_from_args(args)
    summary = run_experiment(config)
    for fold_id, ccr in zip(summary["folds"], summary["ccrs"]):
        print(f"fold {fold_id}: ccr={ccr:.4f}")
    print(f"mean_ccr={summary['mean_ccr']:.4f} stdev={summary['stdev']:.4f} "
          f"params={summary['parameter_count']}")
    return 0


def _load_network(config, manifest, checkpoint):
    spec = config.network_spec(manifest.num_classes)
    net = build_network(spec, seed=0)
    load_checkpoint(net, checkpoint)
    return net


def _cmd_evaluate(args):
    config = _config_from_args(args)
    manifest = load_manifest(config.manifest, config.protocol)
    net = _load_network(config, manifest, args.checkpoint)
    rendition = "elr" if config.coupling_enabled else config.resolution
    bank = SampleBank(manifest, config.cache_dir, rendition)
    result = evaluate(net, bank, list(range(len(manifest.entries))),
                      config.test_stride, fold_id="all")
    print(f"videos={len(result.video_indices)} ccr={result.ccr:.4f}")
    if args.output:
        with open(args.output, "w") as f:
            f.write("video,label,prediction\n")
            for vid, label, pred in zip(result.video_indices, result.labels,
                                        result.predictions):
                f.write(f"{vid},{int(label)},{int(pred)}\n")
    return 0


def _cmd_export_features(args):
    config = _config_from_args(args)
    manifest = load_manifest(config.manifest, config.protocol)
    net = _load_network(config, manifest, args.checkpoint)
    rendition = "elr" if config.coupling_enabled else config.resolution
    bank = SampleBank(manifest, config.cache_dir, rendition)
    export_features(net, bank, list(range(len(manifest.entries))), args.output,
                    layer=args.layer, stride=config.test_stride)
    print(f"wrote {args.output}")
    return 0


def _cmd_gradcheck(args):
    results = run_suite(seed=args.seed, instances=args.instances)
    failed = 0
    for name, err, tol, passed in results:
        status = "ok" if passed else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e} tol={tol:.0e} {status}")
        failed += not passed
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="elrnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build the rendition cache for a manifest")
    _add_config_flags(p)
    p.add_argument("--rendition", choices=("elr", "hr", "both"), default="both")
    p.add_argument("--force", action="store_true", help="recompute existing cache files")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="run the full cross-validation experiment")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="per-video prediction CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("export-features", help="write per-video feature vectors")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--layer", default="fc5_input")
    p.set_defaults(func=_cmd_export_features)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
