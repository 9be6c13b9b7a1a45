"""``gmdg`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import (ConfigError, config_hash, load_config, profile, validate)

log = logging.getLogger("gmdg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _hash_paths(paths):
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(os.path.basename(p).encode())
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _dir_files(path):
    return sorted(f for f in glob.glob(os.path.join(path, "*")) if os.path.isfile(f))


def write_run_manifest(out_dir, command, cfg, seeds, inputs, argv):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "tool": "gmdg",
        "tool_version": __version__,
        "command": command,
        "argv": list(argv),
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": list(seeds),
        "inputs": {name: _hash_paths(paths) for name, paths in inputs.items()},
        "created_unix": int(time.time()),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _read_json(path, kind):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {kind} {path}: {exc}") from None


# ---------------------------------------------------------------- subcommands

def cmd_phantom(args, argv):
    from .data import PhantomSpec, generate_phantom_set, save_phantom_set

    spec_cfg = dict(profile("phantom-tiny")["dataset"]["phantom"]["spec"])
    if args.spec:
        spec_cfg.update(_read_json(args.spec, "phantom spec"))
    validate("phantom", spec_cfg)
    spec = PhantomSpec.from_dict(spec_cfg)
    pairs = generate_phantom_set(spec, args.count, args.start_seed)
    save_phantom_set(args.out, pairs)
    with open(os.path.join(args.out, "phantom_spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    seeds = list(range(args.start_seed, args.start_seed + args.count))
    inputs = {"spec": [args.spec]} if args.spec else {}
    write_run_manifest(args.out, "phantom", spec.to_dict(), seeds, inputs, argv)
    print(f"wrote {args.count} phantom cases to {args.out}")


def cmd_preprocess(args, argv):
    from .data import read_volume, write_volume
    from .gmr_core import N_BINS, PADDING_MODE, gmr_stack

    if args.format != "nifti":
        raise ConfigError("only --format nifti is supported")
    files = sorted(glob.glob(os.path.join(args.inp, "*.nii")) +
                   glob.glob(os.path.join(args.inp, "*.nii.gz")))
    if not files:
        raise ConfigError(f"no NIfTI files in {args.inp}")
    os.makedirs(args.out, exist_ok=True)
    converted = []
    for path in files:
        name = os.path.basename(path)
        vol, spacing = read_volume(path)
        stem = name[:-7] if name.endswith(".nii.gz") else name[:-4]
        if stem.endswith("_label"):
            write_volume(os.path.join(args.out, name), np.rint(vol).astype(np.int64), spacing)
            continue
        write_volume(os.path.join(args.out, name), gmr_stack(vol), spacing, dtype=np.float32)
        converted.append(name)
    mpath = os.path.join(args.inp, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as src, open(os.path.join(args.out, "manifest.json"), "w") as dst:
            dst.write(src.read())
    meta = {"representation": "gmr", "bins": N_BINS, "padding": PADDING_MODE,
            "per": "slice", "tool_version": __version__, "converted": converted}
    with open(os.path.join(args.out, "gmr_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    write_run_manifest(args.out, "preprocess", meta, [], {"data": files}, argv)
    print(f"converted {len(converted)} volumes to gradient maps in {args.out}")


def _load_slices(data_dir, modality, split, preprocess=None, source_modality=None,
                 require_labels=False):
    from .data import load_nifti_dataset

    recs = load_nifti_dataset(data_dir, modality, profile=preprocess,
                              source_modality=source_modality,
                              split=None if split == "all" else split,
                              require_labels=require_labels)
    precomputed = os.path.exists(os.path.join(data_dir, "gmr_meta.json"))
    return recs, precomputed


def cmd_train(args, argv):
    from .checkpoint import save_checkpoint
    from .estimators import check_masks, represent
    from .train import TrainConfig, train

    overrides = list(args.set or [])
    for key in ("modality", "representation", "seed", "iterations", "profile"):
        v = getattr(args, key, None)
        if v is not None:
            overrides.append((key, v))
    cfg = load_config("train", args.config, overrides)
    if not cfg.get("modality"):
        raise ConfigError("train needs a modality (config key or --modality)")
    recs, precomputed = _load_slices(args.data, cfg["modality"], cfg["split"], cfg.get("preprocess"),
                                     cfg.get("source_modality"), require_labels=True)
    X = np.concatenate([r.image for r in recs])
    y = check_masks(np.concatenate([r.label for r in recs]), X)
    inputs = X if precomputed else represent(X, cfg["representation"])
    rep = "gmr" if precomputed else cfg["representation"]
    tcfg = TrainConfig(**{k: cfg[k] for k in TrainConfig().to_dict()})
    metrics = open(args.metrics, "w") if args.metrics else sys.stdout

    def on_step(it, loss):
        metrics.write(json.dumps({"iteration": it, "loss": loss}) + "\n")

    try:
        ckpt = train(inputs, y, tcfg, num_classes=cfg.get("num_classes"), on_step=on_step,
                     metadata={"representation": rep, "modality": cfg["modality"],
                               "precomputed_input": precomputed})
    finally:
        if args.metrics:
            metrics.close()
    save_checkpoint(ckpt, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_run_manifest(out_dir, "train", cfg, [cfg["seed"]],
                       {"data": _dir_files(args.data)}, argv)
    print(f"saved checkpoint to {args.out}", file=sys.stderr)


def cmd_adapt(args, argv):
    from .checkpoint import load_checkpoint
    from .data import write_volume
    from .estimators import GMRSegmenter
    from .pitta import AdaptationConfig

    overrides = list(args.set or [])
    if args.modality:
        overrides.append(("modality", args.modality))
    cfg = load_config("adapt", args.config, overrides)
    if not cfg.get("modality"):
        raise ConfigError("adapt needs a modality (config key or --modality)")
    ckpt = load_checkpoint(args.model)
    recs, precomputed = _load_slices(args.data, cfg["modality"], cfg.get("split", "test"),
                                     cfg.get("preprocess"), cfg.get("source_modality"))
    acfg = AdaptationConfig(**{k: cfg[k] for k in AdaptationConfig().to_dict()})
    est = GMRSegmenter.from_checkpoint(ckpt)
    if precomputed:
        if est.representation != "gmr":
            raise ConfigError(f"{args.data} holds gradient maps but the model was trained on "
                              f"{est.representation!r} inputs")
        est.representation = "precomputed"
    est.adaptation = None if args.source_only else acfg
    os.makedirs(args.out, exist_ok=True)
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        for rec in recs:
            pred, traces = est.predict(rec.image, return_traces=True)
            write_volume(os.path.join(args.out, f"{rec.case_id}_label.nii.gz"), pred, rec.spacing)
            if trace_fh:
                for k, tr in enumerate(traces):
                    for r in tr.records:
                        trace_fh.write(json.dumps({"case_id": rec.case_id, "slice": k,
                                                   "fallback": tr.fallback, **r}) + "\n")
                    if not tr.records:
                        trace_fh.write(json.dumps({"case_id": rec.case_id, "slice": k,
                                                   "fallback": tr.fallback,
                                                   "q_final": tr.q_final}) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()
    write_run_manifest(args.out, "adapt", cfg, [], {"model": [args.model],
                                                   "data": _dir_files(args.data)}, argv)
    print(f"wrote {len(recs)} predictions to {args.out}", file=sys.stderr)


def cmd_evaluate(args, argv):
    from .data import read_volume
    from .evaluation import aggregate, case_scores, format_csv, format_table

    preds = sorted(glob.glob(os.path.join(args.pred, "*.nii*")))
    if not preds:
        raise ConfigError(f"no predictions in {args.pred}")
    P, T, ids = [], [], []
    for p in preds:
        name = os.path.basename(p)
        t = os.path.join(args.truth, name)
        if not os.path.exists(t):
            raise ConfigError(f"no ground truth {name} in {args.truth}")
        P.append(np.rint(read_volume(p)[0]).astype(np.int64))
        T.append(np.rint(read_volume(t)[0]).astype(np.int64))
        ids.append(name.split(".nii")[0])
    classes = args.classes or list(range(1, int(max(x.max() for x in P + T)) + 1)) or [1]
    scores = case_scores(P, T, classes, args.empty_nan)
    report = {"arms": [args.arm], "seeds": [0], "classes": classes,
              "rows": aggregate(args.arm, [scores], classes),
              "per_case": [{"arm": args.arm, "seed": 0, "case_id": cid,
                            "dice": {str(c): float(v) for c, v in zip(classes, row)}}
                           for cid, row in zip(ids, scores)]}
    out = args.out or os.path.join(args.pred, "report.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(format_csv(report))
    print(format_table(report), end="")
    write_run_manifest(os.path.dirname(os.path.abspath(out)), "evaluate",
                       {"classes": classes, "empty_nan": args.empty_nan, "arm": args.arm}, [],
                       {"pred": preds, "truth": [os.path.join(args.truth, os.path.basename(p))
                                                 for p in preds]}, argv)


def cmd_ablate(args, argv):
    from .evaluation import format_csv, format_table, run_experiment

    base = profile(args.profile) if args.profile else None
    if base is None and not args.config:
        raise ConfigError("ablate needs --profile or --config")
    cfg = load_config("experiment", args.config, args.set or [], base=base or {})
    if args.checkpoint_dir:
        cfg["checkpoint_dir"] = args.checkpoint_dir
    report = run_experiment(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    with open(os.path.join(args.out, "table.md"), "w") as fh:
        fh.write(format_table(report))
    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write(format_csv(report))
    print(format_table(report), end="")
    inputs = {"config": [args.config]} if args.config else {}
    write_run_manifest(args.out, "ablate", cfg, cfg.get("seeds", [0]), inputs, argv)


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="gmdg", description="Gradient-map guided cross-modal MRI segmentation.")
    p.add_argument("--version", action="version", version=f"gmdg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate synthetic two-modality phantoms")
    s.add_argument("--spec", help="phantom spec JSON (defaults to the phantom-tiny spec)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--start-seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="convert volumes to gradient maps slice by slice")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", default="nifti")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a source-modality model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--modality")
    s.add_argument("--representation", choices=["gmr", "raw"])
    s.add_argument("--profile", choices=["full", "tiny"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="JSON-lines metrics file (default: stdout)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt", help="adapt to and segment target-modality cases")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.add_argument("--modality")
    s.add_argument("--source-only", action="store_true", help="plain prediction, no adaptation")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("evaluate", help="volumetric Dice of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.add_argument("--csv")
    s.add_argument("--arm", default="pred")
    s.add_argument("--classes", type=int, nargs="+")
    s.add_argument("--empty-nan", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run the four-arm ablation study")
    s.add_argument("--profile")
    s.add_argument("--config")
    s.add_argument("--out", default="ablation")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("gmdg: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except (ConfigError, UsageError) as exc:
        print(f"gmdg {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"gmdg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
