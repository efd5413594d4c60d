"""``scanpipe`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 validation/config error, 3 missing upstream
artifact, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ScanPipeError
from .pipeline import HOME_ENV, STAGES, Pipeline, RunConfig

log = logging.getLogger("scanpipe")


def _common(p: argparse.ArgumentParser, out_flag: str = "--out") -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    p.add_argument("--manifest", help="cohort manifest CSV")
    p.add_argument(out_flag, dest="out_dir", help=f"run directory (default: ${HOME_ENV}/scanpipe-run)")
    p.add_argument("--seed", type=int)
    p.add_argument("--modality", action="append", dest="modalities", help="repeatable; default: all in manifest")
    p.add_argument("--view", action="append", dest="views", help="repeatable; default: all three views")
    p.add_argument("--arch", action="append", dest="architectures", help="repeatable candidate architecture")
    p.add_argument("--workers", type=int, help="parallel bootstrap workers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config value, e.g. --set tune.R=9")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scanpipe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "validate a manifest and summarize it (or convert one DICOM series)",
        "split": "stratified train/val/test split, CV folds and standardization statistics",
        "tune": "Hyperband search per view and architecture (resumes from existing ledgers)",
        "cv": "k-fold stability cross-validation with each architecture's best trial",
        "select": "pick the lowest fold-AUC-spread architecture per view",
        "retrain": "re-train the selected architecture on the initial split",
        "evaluate": "ensemble, calibrate the threshold on val, report on test",
        "gradcam": "Grad-CAM overlay for one slice of one study",
        "pretrain": "domain pretraining on an external corpus",
        "synth": "generate a synthetic cohort with planted lesions",
    }
    for name in STAGES:
        p = sub.add_parser(name, help=helps[name])
        # gradcam's --out names the overlay image, so its run directory moves to --run-dir
        _common(p, "--run-dir" if name == "gradcam" else "--out")
        if name == "ingest":
            p.add_argument("--dicom", type=Path, help="DICOM series directory to convert")
            p.add_argument("--dicom-view")
            p.add_argument("--dicom-sequence-type")
            p.add_argument("--dicom-fat-sat", action="store_true")
            p.add_argument("--dicom-out", type=Path, help="output volume path (.f32)")
        elif name == "tune":
            p.add_argument("--fresh", action="store_true", help="discard existing ledgers instead of resuming")
        elif name == "gradcam":
            p.add_argument("--study", required=True)
            p.add_argument("--slice", type=int, required=True, dest="slice_index")
            p.add_argument("--sequence", type=int, default=None, help="index among the view's sequences")
            p.add_argument("--out", dest="image", type=Path,
                           help="overlay PNG path (a JSON sidecar is written next to it)")
        elif name == "pretrain":
            p.add_argument("--profile", type=Path, help="pretraining profile file")
        elif name == "synth":
            p.add_argument("--n-studies", type=int)
            p.add_argument("--positive-fraction", type=float)
            p.add_argument("--slices", type=int, dest="n_slices")
            p.add_argument("--synth-out", type=Path, help="directory for volumes and manifest.csv")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in ("manifest", "out_dir", "seed", "modalities", "views",
                                               "architectures", "workers")}
    sets = list(args.set)
    if args.command == "synth":
        for key in ("n_studies", "positive_fraction", "n_slices"):
            if getattr(args, key) is not None:
                sets.append(f"synth.{key}={getattr(args, key)}")
    return RunConfig.build(args.config, overrides, sets)


def _dicom(args) -> str:
    from .preprocess import read_dicom_series, write_volume

    if not (args.dicom_view and args.dicom_sequence_type and args.dicom_out):
        raise ScanPipeError("--dicom needs --dicom-view, --dicom-sequence-type and --dicom-out")
    v = read_dicom_series(args.dicom, args.dicom_view, args.dicom_sequence_type, args.dicom_fat_sat)
    return str(write_volume(v, args.dicom_out))


def dispatch(args: argparse.Namespace):
    if args.command == "ingest" and args.dicom is not None:
        return _dicom(args)
    pipe = Pipeline(_config(args))
    cmd = args.command
    if cmd == "tune":
        return pipe.run("tune", resume=not args.fresh)
    if cmd == "gradcam":
        # --view is shared with the other subcommands; here it names the single view to explain
        view = (args.views or [None])[-1]
        return pipe.run("gradcam", study=args.study, view=view, slice_index=args.slice_index,
                        out=args.image, sequence=args.sequence)
    if cmd == "pretrain":
        return pipe.run("pretrain", profile=args.profile)
    if cmd == "synth":
        m = pipe.run("synth", out_dir=args.synth_out)
        return f"{len(m)} studies ({m.positives()} positive) -> {m.root / 'manifest.csv'}"
    return pipe.run(cmd)


def _describe(result) -> str:
    if isinstance(result, (list, tuple)):
        return "\n".join(_describe(r) for r in result)
    if hasattr(result, "to_dict"):
        return json.dumps(result.to_dict(), sort_keys=True)
    return str(result)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = dispatch(args)
    except ScanPipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if result is not None:
        print(_describe(result))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
