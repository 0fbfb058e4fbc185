"""Command-line entry point.

Every command is a thin wrapper over library calls; all results are written
as CSV files. Settings resolve as command-line flags, then the ``--config``
file (flat ``key = value`` lines, ``#`` comments), then built-in defaults.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import generate_dataset, load_dataset, save_dataset
from .evaluation import (
    DEFAULT_CHECKPOINTS,
    DEFAULT_LENGTHS,
    evaluate_model,
    fusion_ablation,
    variable_length_ablation,
)
from .serialization import FileFormatError
from .training import (
    TrainConfig,
    load_checkpoint,
    make_trainer,
    resume_trainer,
    select_lambda,
    write_report_csv,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.vack"

log = logging.getLogger("advrnn")


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# --- parser ---------------------------------------------------------------------

_TRAIN_FLAG = {"lam": "lambda"}
_TRAIN_HELP = {
    "epochs": "maximum training epochs",
    "lr": "learning rate",
    "patience": "epochs without validation improvement before stopping",
    "batch_size": "identity pairs per update",
    "lam": "weight of the cross-view regulariser",
    "fusion": "adversarial heads on every step (early) or the last step (late)",
    "seed": "seed for initialisation, splits and shuffling",
    "optimizer": "update rule",
    "train_fraction": "share of identities used for training",
    "feat_dim": "frame and latent feature width",
    "hidden_dim": "hidden width of the encoder, prior and decoder networks",
    "cell_dim": "LSTM cell width",
    "proj_dim": "LSTM recurrent projection width",
    "latent_dim": "latent (embedding) width",
    "num_layers": "stacked LSTM layers",
    "head_hidden": "hidden width of the classifier heads",
    "early_stop": "stop on validation plateau and keep the best epoch",
}


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training configuration")
    for f in fields(TrainConfig):
        flag = "--" + _TRAIN_FLAG.get(f.name, f.name).replace("_", "-")
        if f.type in (bool, "bool"):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=f.default, help=_TRAIN_HELP[f.name])
        else:
            kind = {"int": int, "float": float, "str": str}.get(f.type, f.type)
            extra = {"choices": ("early", "late")} if f.name == "fusion" else {}
            if f.name == "optimizer":
                extra = {"choices": ("adam", "sgd")}
            g.add_argument(flag, dest=f.name, type=kind, default=f.default,
                          help=_TRAIN_HELP[f.name], **extra)


def _add_data_flag(p, required=True):
    p.add_argument("--data", required=required, type=Path, help="dataset file (.vads)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    root = argparse.ArgumentParser(
        prog="advrnn", formatter_class=fmt,
        description="Adversarial variational recurrent sequence embedding. Settings "
                    "resolve as flags, then --config file, then defaults.",
        epilog="exit codes: 0 ok, 1 check failure, 2 usage error, 3 I/O error")
    root.add_argument("--config", type=Path, default=None,
                      help="flat key=value file; keys are flag names")
    root.add_argument("--log-level", default="WARNING",
                      choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging verbosity")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=fmt, help="generate a synthetic dataset")
    p.add_argument("--identities", type=int, default=32, help="number of identities")
    p.add_argument("--dim", type=int, default=32, help="frame dimension")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--min-len", type=int, default=8, help="shortest sequence")
    p.add_argument("--max-len", type=int, default=32, help="longest sequence")
    p.add_argument("--view-gap", type=float, default=0.5,
                   help="strength of the per-view affine distortion")
    p.add_argument("--noise", type=float, default=0.5, help="per-frame noise std")
    p.add_argument("--identity-offset", type=int, default=0,
                   help="first identity id; use a large value for held-out identities")
    p.add_argument("--out", type=Path, required=True, help="output dataset file")

    p = sub.add_parser("train", formatter_class=fmt, help="train a model")
    _add_data_flag(p)
    p.add_argument("--out-dir", type=Path, required=True, help="directory for outputs")
    p.add_argument("--heldout", type=Path, default=None,
                   help="extra dataset scored every epoch (not used for selection)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _add_train_flags(p)

    p = sub.add_parser("eval", formatter_class=fmt, help="score a checkpoint")
    _add_data_flag(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for outputs")
    p.add_argument("--probe-len", type=int, default=None, help="truncate probes to this prefix")
    p.add_argument("--gallery-len", type=int, default=None, help="truncate gallery to this prefix")
    p.add_argument("--cosine", action="store_true", help="cosine instead of dot-product scores")

    p = sub.add_parser("ablate", formatter_class=fmt, help="length grid or fusion comparison")
    p.add_argument("--mode", choices=("length", "fusion"), required=True, help="ablation kind")
    _add_data_flag(p)
    p.add_argument("--out-dir", type=Path, required=True, help="directory for outputs")
    p.add_argument("--checkpoint", type=Path, default=None, help="trained model (length mode)")
    p.add_argument("--lengths", type=_int_list, default=list(DEFAULT_LENGTHS),
                   help="prefix lengths, comma-separated (length mode)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="fusion mode")
    p.add_argument("--checkpoints", type=_int_list, default=list(DEFAULT_CHECKPOINTS),
                   help="epochs at which fusion mode scores rank-1")
    p.add_argument("--heldout", type=Path, default=None,
                   help="fusion mode: score on this dataset instead of the validation split")
    _add_train_flags(p)

    p = sub.add_parser("select-lambda", formatter_class=fmt,
                       help="reverse-validation choice of lambda")
    _add_data_flag(p)
    p.add_argument("--out-dir", type=Path, required=True, help="directory for outputs")
    p.add_argument("--grid", type=_float_list, default=None,
                   help="candidate values (default: 9 log-spaced in [0.01, 1])")
    p.add_argument("--reverse-epochs", type=int, default=20,
                   help="training epochs of the reverse classifier")
    _add_train_flags(p)

    p = sub.add_parser("grad-check", formatter_class=fmt,
                       help="finite-difference check of all backward passes")
    p.add_argument("--seed", type=int, default=0, help="seed for toy weights and inputs")
    p.add_argument("--eps", type=float, default=gradcheck.EPS, help="finite-difference step")
    p.add_argument("--tol", type=float, default=gradcheck.TOLERANCE,
                   help="maximum allowed relative error")
    p.add_argument("--quick", action="store_true", help="only the three core checks")
    p.add_argument("--inject-sign-error", metavar="PREFIX", default=None,
                   help="negative control: flip the analytic gradient of matching parameters")
    p.add_argument("--out", type=Path, default=None, help="also write the report as CSV")
    return root


def _read_config(path: Path) -> dict:
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _apply_config(parser, sub: argparse.ArgumentParser, argv, config: dict):
    """Install config values as defaults of the chosen subcommand, so explicit
    flags still win."""
    actions = {a.dest: a for a in sub._actions}
    by_flag = {}
    for a in sub._actions:
        for opt in a.option_strings:
            by_flag[opt.lstrip("-").replace("-", "_")] = a
    defaults = {}
    for key, raw in config.items():
        action = by_flag.get(key) or actions.get(key)
        if action is None or action.dest in ("help",):
            raise UsageError(f"unknown config key {key!r} for command {sub.prog.split()[-1]}")
        if isinstance(action, argparse.BooleanOptionalAction) or action.nargs == 0:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[action.dest] = low in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key!r}: {exc}")
        if action.choices and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[action.dest] = value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def parse_args(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    try:
        config = _read_config(known.config)
    except OSError as exc:
        raise OSError(f"cannot read config {known.config}: {exc}")
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return _apply_config(parser, subs.choices[command], argv, config)


def train_config_from(args) -> TrainConfig:
    try:
        return TrainConfig(**{f.name: getattr(args, f.name) for f in fields(TrainConfig)})
    except ValueError as exc:
        raise UsageError(str(exc))


# --- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        ds = generate_dataset(args.identities, (args.min_len, args.max_len), args.dim, args.seed,
                              args.view_gap, args.noise, args.identity_offset)
    except ValueError as exc:
        raise UsageError(str(exc))
    save_dataset(ds, args.out)
    s = ds.summary()
    print(f"identities={s['identities']} dim={s['dim']} length min={s['min_len']} "
          f"max={s['max_len']} mean={s['mean_len']:.2f} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    held = load_dataset(args.heldout) if args.heldout else None
    if args.resume:
        trainer = resume_trainer(ds, args.resume, held)
    else:
        trainer = make_trainer(ds, train_config_from(args), held)
    trainer.run()
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / CHECKPOINT_NAME)
    write_report_csv(trainer.report, out / "train_report.csv")
    rep = trainer.report
    print(f"epochs={rep.stopped_epoch} best_epoch={rep.best_epoch} -> {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint).selected_model()
    m = evaluate_model(model, ds.probe, ds.gallery, args.probe_len, args.gallery_len, args.cosine)
    keys = ["rank1", "rank5", "rank10", "rank20", "mAP", "kl"]
    _write_csv(args.out_dir / "metrics.csv", keys, [[m[k] for k in keys]])
    _write_csv(args.out_dir / "cmc.csv", ["rank", "rate"],
               [[r + 1, v] for r, v in enumerate(m["cmc"])])
    print(" ".join(f"{k}={m[k]:.4f}" for k in keys))
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    if args.mode == "length":
        if args.checkpoint is None:
            raise UsageError("--mode length needs --checkpoint")
        model = load_checkpoint(args.checkpoint).selected_model()
        grid = variable_length_ablation(model, ds.probe, ds.gallery, args.lengths)
        rows = []
        for i, a in enumerate(grid.lengths):
            for j, b in enumerate(grid.lengths):
                rows.append([a, b, grid.probe_effective[i], grid.gallery_effective[j],
                             grid.rank1[i, j]])
        _write_csv(args.out_dir / "length_grid.csv",
                   ["probe_len", "gallery_len", "probe_used", "gallery_used", "rank1"], rows)
        print(f"{len(rows)} cells -> {args.out_dir / 'length_grid.csv'}")
        return EXIT_OK
    held = load_dataset(args.heldout) if args.heldout else None
    try:
        res = fusion_ablation(ds, train_config_from(args), args.seeds, args.checkpoints, held)
    except ValueError as exc:
        raise UsageError(str(exc))
    _write_csv(args.out_dir / "fusion.csv", ["seed", "mode", "epoch", "rank1", "dataset_sha256"],
               [[r.seed, r.mode, r.epoch, r.rank1, r.dataset_digest] for r in res.rows])
    curve_rows = [[seed, mode, e + 1, v] for (seed, mode), curve in res.loss_curves.items()
                  for e, v in enumerate(curve)]
    _write_csv(args.out_dir / "fusion_loss.csv", ["seed", "mode", "epoch", "E_train"], curve_rows)
    print(f"{len(res.rows)} rows -> {args.out_dir / 'fusion.csv'}")
    return EXIT_OK


def cmd_select_lambda(args) -> int:
    ds = load_dataset(args.data)
    try:
        sel = select_lambda(ds, args.grid, train_config_from(args), args.reverse_epochs)
    except ValueError as exc:
        raise UsageError(str(exc))
    _write_csv(args.out_dir / "lambda_risk.csv", ["lambda", "risk"],
               list(zip(sel.grid, sel.risks)))
    print(f"lambda*={sel.best!r}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_suite(args.seed, args.eps, args.inject_sign_error, not args.quick)
    rows = []
    ok = True
    for res in results:
        passed = res.passed(args.tol)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {res.name} max_rel_err={res.max_error:.3e}")
        for group, err in sorted(res.group_errors.items()):
            print(f"    {group:32s} {err:.3e}")
            rows.append([res.name, group, err, "pass" if err < args.tol else "fail"])
    if args.out:
        _write_csv(args.out, ["check", "group", "max_rel_err", "status"], rows)
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "select-lambda": cmd_select_lambda,
            "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"advrnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"advrnn: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"advrnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FileFormatError) as exc:
        print(f"advrnn: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
