"""Command-line entry point: ``encodermi <subcommand> --manifest run.json``.

Exit status: 0 on success (including "already complete"), 2 for invalid
manifests or missing assets, 3 when a stage was interrupted and can be
resumed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from . import experiment as X
from .data import InsufficientDataError, MissingLabelsError
from .evaluation import MissingAssetError, MissingCheckpointError

log = logging.getLogger("encodermi")

STUDY_AXES = X.Run.AXES


def _common(p):
    p.add_argument("--manifest", help="manifest JSON file")
    p.add_argument("--run", dest="run_dir", help="existing run directory (uses its manifest)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a manifest field, e.g. --set target.epochs=400")
    p.add_argument("--workers", type=int, default=1, help="parallel jobs (trials, grid cells)")
    p.add_argument("--resume", action="store_true",
                   help="continue partial stages instead of redoing them")
    p.add_argument("--knowledge", default=None,
                   help="knowledge settings: a tag like yyn, a comma list, 'all' or 'study' "
                        "(default: the manifest's)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="encodermi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a starting manifest")
    p.add_argument("--preset", default="desk", choices=["desk", "smoke"])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-o", "--output", help="file to write (default: stdout)")

    for name, help_ in [("prepare-data", "sample and save the splits"),
                        ("pretrain", "pre-train target and shadow encoders"),
                        ("extract", "cache membership features of the shadow data"),
                        ("train-attack", "train the inference classifiers"),
                        ("baselines", "run baselines A-E"),
                        ("evaluate", "score the inference classifiers on the target"),
                        ("report", "collate reports into CSV/JSON and draw plots")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "pretrain":
            p.add_argument("--only", choices=["target", "shadow"], default=None)
            p.add_argument("--stop-after-epochs", type=int, default=None,
                           help="end after this many epochs (time slicing; resume later)")

    p = sub.add_parser("study", help="ablations, grids, early stopping, overfitting monitor")
    _common(p)
    p.add_argument("--axis", required=True, choices=STUDY_AXES)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--methods", default=None, help="comma list of vector,set,threshold")
    p.add_argument("--trials", type=int, default=None)

    p = sub.add_parser("audit-remote", help="audit an encoder served over HTTP")
    _common(p)
    p.add_argument("--url", required=True)
    p.add_argument("--token", default=None)
    p.add_argument("--members", required=True, help="directory of suspected member images")
    p.add_argument("--nonmember-pool", required=True,
                   help="directory of images to pair into concatenated non-members")
    p.add_argument("--trial", type=int, default=0)
    return parser


def _open_run(args):
    if args.run_dir and not args.manifest:
        run = X.Run.from_dir(args.run_dir, workers=args.workers, resume=args.resume,
                             notify=print)
        if args.overrides:
            raise X.ManifestError("--set needs --manifest; a stored run manifest is fixed")
        return run
    if not args.manifest:
        raise X.ManifestError("manifest: pass --manifest FILE or --run DIR")
    m = X.load_manifest(args.manifest, args.overrides)
    return X.Run(m, workers=args.workers, resume=args.resume, notify=print,
                 run_dir=args.run_dir)


def _pretrain(run, args):
    specs = []
    if args.only in (None, "target"):
        specs.append(run.target_spec())
    if args.only in (None, "shadow"):
        for bk in run.knowledge_settings(args.knowledge):
            spec = run.shadow_spec(bk)
            if spec not in specs:
                specs.append(spec)
    # splits must exist before anything trains
    for spec in specs:
        run.splits(spec.split_file)
    errors = run.pmap(lambda s: _capture(run.pretrain, s, args.stop_after_epochs), specs)
    for exc in errors:
        if exc is not None:
            raise exc


def _capture(fn, *a):
    try:
        fn(*a)
    except Exception as exc:  # re-raised by the caller after all jobs finish
        return exc
    return None


def _extract(run, args):
    for bk in run.knowledge_settings(args.knowledge):
        def body(bk=bk):
            shapes = run.pmap(lambda t: len(run.inference_records(bk, t)),
                              range(run.m["trials"]))
            return {"records_per_trial": shapes}
        run.stage(f"extract-{bk.tag}", body)


def dispatch(args):
    if args.command == "init":
        m = X.validate(X.apply_overrides(X.preset(args.preset), args.overrides))
        text = json.dumps(m, indent=1)
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text + "\n")
        else:
            print(text)
        return 0
    run = _open_run(args)
    cmd = args.command
    if cmd == "prepare-data":
        run.prepare_data(args.knowledge)
    elif cmd == "pretrain":
        _pretrain(run, args)
    elif cmd == "extract":
        _extract(run, args)
    elif cmd == "train-attack":
        run.train_attack(args.knowledge)
    elif cmd == "baselines":
        run.run_baselines(args.knowledge)
    elif cmd == "evaluate":
        run.evaluate(args.knowledge)
    elif cmd == "study":
        values = args.values
        if args.axis == "knowledge" and values is None and args.knowledge:
            values = args.knowledge
        methods = args.methods.split(",") if args.methods else None
        run.study(args.axis, values, methods, args.trials)
    elif cmd == "report":
        run.report()
    elif cmd == "audit-remote":
        run.audit_remote(args.url, args.members, args.nonmember_pool, token=args.token,
                         knowledge=args.knowledge, trial=args.trial)
    left = X.orphans(run.dir)
    if left:
        log.warning("files not accounted for by any completion marker: %s", left[:10])
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        return dispatch(args)
    except (X.ManifestError, X.ManifestConflictError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingAssetError, MissingCheckpointError, MissingLabelsError,
            InsufficientDataError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: missing asset: {msg}", file=sys.stderr)
        return 2
    except X.InterruptedStage as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
