"""Command-line entry point: ``rotoseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or contract
error (unreadable or malformed files, shape mismatches), 3 numerical failure
(non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import from_mapping, read_kv
from .errors import ConfigError, ContractError, DataError, NumericalError, ShapeError
from .io import Volume, read_volume, write_volume

log = logging.getLogger("rotoseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _thread_limit():
    """Honour ROTOSEG_THREADS (0 = serial) by capping BLAS/OpenMP pools."""
    raw = os.environ.get("ROTOSEG_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ROTOSEG_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("ROTOSEG_THREADS must be >= 0")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(n, 1))


# -- subcommands -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .trainer import PhantomSpec, generate_phantom
    values = read_kv(args.spec) if args.spec else {}
    spec = from_mapping(PhantomSpec, values)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.cases):
        case = replace(spec, seed=spec.seed + i)
        image, labels = generate_phantom(case)
        write_volume(out / f"{args.prefix}{i:03d}_image.rvl", image)
        write_volume(out / f"{args.prefix}{i:03d}_labels.rvl", labels)
        print(f"{args.prefix}{i:03d}\tseed={case.seed}\torgans={case.organs}\textents="
              + ",".join(map(str, case.extents)))
    return 0


def _load_stage(path, overrides: dict[str, str]):
    from .model import ModelConfig
    from .trainer import StageConfig
    values = read_kv(path) if path else {}
    values.update(overrides)
    model_vals = {k: v for k, v in values.items() if k.startswith("model.")}
    stage_vals = {k: v for k, v in values.items() if not k.startswith("model.")}
    return from_mapping(StageConfig, stage_vals), from_mapping(ModelConfig, model_vals, prefix="model.")


def _cases(images, labels):
    if labels is not None and len(labels) != len(images):
        raise UsageError(f"got {len(images)} images but {len(labels)} label volumes")
    cases = []
    for i, path in enumerate(images):
        img = read_volume(path)
        lab = read_volume(labels[i]) if labels is not None else None
        if lab is not None and lab.extents != img.extents:
            raise ShapeError(f"{path} and {labels[i]} have different extents")
        cases.append((img, lab))
    return cases


def _run_training(args, kind: str) -> int:
    from .trainer import CaseSource, run_stage
    overrides = {"stage_kind": kind}
    if kind == "finetune_seg":
        if (args.transfer_from is None) != (args.transfer_policy is None):
            raise UsageError("--transfer-from and --transfer-policy must be given together")
        if args.transfer_from is not None:
            overrides["transfer_from"] = str(args.transfer_from)
            overrides["transfer_policy"] = args.transfer_policy
    stage, model_cfg = _load_stage(args.config, overrides)
    if args.steps is not None:
        stage.epochs, stage.steps_per_epoch = 1, args.steps
    data = CaseSource(_cases(args.images, getattr(args, "labels", None)), stage.crop)
    result = run_stage(stage, data, model_cfg, args.out)
    if result.transfer is not None:
        text = result.transfer.format()
        if args.transfer_report:
            Path(args.transfer_report).write_text(text)
        else:
            sys.stdout.write(text)
    if result.losses:
        print(f"steps={len(result.losses)}\tfirst_loss={result.losses[0]:.6f}\tlast_loss={result.losses[-1]:.6f}")
    print(f"checkpoint\t{args.out}")
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, "pretrain_mim")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune_seg")


def cmd_infer(args) -> int:
    from .inference import argmax_labels, plan_windows, sliding_window_predict
    from .model import SegmentationModel
    from .preprocess import normalize_zscore
    from .trainer import load_model
    params, cfg, meta = load_model(args.model)
    image = read_volume(args.image)
    window = args.window
    if window is None:
        crop = meta.get("stage.crop", "none")
        window = image.extents if crop == "none" else _triple(crop)
    plan = plan_windows(image.extents, window, args.overlap, args.blend)
    vol = normalize_zscore(image).channel_first()
    logits = sliding_window_predict(vol, SegmentationModel(params, cfg), plan)
    labels = argmax_labels(logits)
    write_volume(args.out, Volume(labels, image.spacing))
    if args.logits:
        write_volume(args.logits, Volume(logits, image.spacing))
    print(f"windows={len(plan.origins)}\tout={args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_case, format_text, format_tsv, summarize
    if len(args.pred) != len(args.ref):
        raise UsageError(f"got {len(args.pred)} predictions but {len(args.ref)} references")
    names = {}
    if args.class_names:
        names = {i + 1: n for i, n in enumerate(args.class_names.split(","))}
    reports = []
    for p, r in zip(args.pred, args.ref):
        pred, ref = read_volume(p), read_volume(r)
        report = evaluate_case(pred.array, ref.array, ref.spacing, args.num_classes)
        for c, msg in report.errors.items():
            log.warning("%s class %d: %s", p, c, msg)
        reports.append(report)
    rows = summarize(reports, names)
    sys.stdout.write(format_text(rows))
    if args.tsv:
        Path(args.tsv).write_text(format_tsv(rows), encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(args.seeds, args.end_to_end_seeds, log=print if args.verbose else None)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.name} seed {r.seed}: max rel err {r.error:.3e} >= {r.tolerance:g}")
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise NumericalError(f"{len(failed)} gradient checks failed")
    return 0


def cmd_folds(args) -> int:
    from .trainer import make_folds
    if args.cases:
        ids = list(args.cases)
    elif args.count:
        ids = [f"case{i:03d}" for i in range(args.count)]
    else:
        raise UsageError("give case ids or --count")
    split = make_folds(ids, args.k, args.seed)
    lines = ["case\tfold"] + [f"{c}\t{f}" for c, f in split.assignment.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotoseg", description="Rotary 3D transformer segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", help="write synthetic image/label volumes")
    p.add_argument("--spec", help="key=value PhantomSpec file (defaults if omitted)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cases", type=int, default=1, help="number of phantoms; case i uses seed+i")
    p.add_argument("--prefix", default="case")
    p.set_defaults(func=cmd_phantom)

    for name, func, helptext in (("pretrain", cmd_pretrain, "masked image modeling stage"),
                                 ("finetune", cmd_finetune, "segmentation stage")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value stage file; model.* keys configure the network")
        p.add_argument("--images", nargs="+", required=True)
        if name == "finetune":
            p.add_argument("--labels", nargs="+", required=True)
            p.add_argument("--transfer-from")
            p.add_argument("--transfer-policy", choices=("encoder_only", "all_matching"))
            p.add_argument("--transfer-report", help="write the per-tensor transfer report here")
        p.add_argument("--steps", type=int, help="override epochs x steps_per_epoch with one epoch of N steps")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="sliding-window prediction to a label volume")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--logits", help="also write blended logits")
    p.add_argument("--window", type=_triple, help="D,H,W (default: training crop or whole volume)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--blend", choices=("gaussian", "uniform"), default="gaussian")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metrics table over prediction/reference pairs")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--num-classes", type=int, required=True, help="including background")
    p.add_argument("--class-names", help="comma-separated names for classes 1..K")
    p.add_argument("--tsv", help="write the tab-separated table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suites")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--end-to-end-seeds", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("folds", help="k-fold case assignment")
    p.add_argument("cases", nargs="*")
    p.add_argument("--count", type=int, help="generate ids case000..")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_folds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rotoseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"rotoseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, ShapeError, ContractError, OSError) as exc:
        print(f"rotoseg {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
