"""Command line: generate, train, eval, report.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .errors import MSRLError, UsageError
from .io import load_checkpoint, load_config, load_dataset, load_metrics, load_trace, parse_config, save_dataset
from .metrics import build_eval_set, candidate_scores, accuracy_from_scores, group_accuracy_from_correct, selection_cv
from .encoders import FeatureBank
from .experiment import make_world, run_dirs, run_training
from .rng import stream
from .trainer import VARIANTS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("window must look like START:END") from None
    if not 0 <= lo < hi:
        raise argparse.ArgumentTypeError("window needs 0 <= START < END")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msrl", description="Self-paced group-based triplet ranking on synthetic worlds.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset JSON")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")

    e = sub.add_parser("eval", help="per-group accuracy of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--K", type=int, default=10)

    r = sub.add_parser("report", help="merge run directories into one comparison table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--window", type=_window, help="iteration window START:END for selection CV (default: whole run)")
    return p


def _generate(args) -> None:
    config = load_config(args.config)
    save_dataset(make_world(config).catalog, args.out)


def _train(args) -> None:
    config = load_config(args.config).with_overrides(args.variant, args.seed)
    run_training(config, args.out, args.resume)


def _eval(args) -> None:
    state, config = load_checkpoint(args.ckpt)
    catalog = load_dataset(args.data)
    eval_set = build_eval_set(catalog, stream(config.seed, "evalset"), args.K)
    correct = accuracy_from_scores(candidate_scores(state.params, FeatureBank(catalog), eval_set), eval_set)
    ga = group_accuracy_from_correct(correct, eval_set)
    counts = eval_set.group_counts()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "label", "n_items", "acc"])
    for g, label in enumerate(catalog.group_labels):
        w.writerow([g, label, int(counts[g]), f"{ga.per_group[g]:.6f}"])
    w.writerow(["all", "", len(eval_set.items), f"{correct.mean():.6f}"])
    w.writerow(["AVE", "", "", f"{ga.ave:.6f}"])
    w.writerow(["STD", "", "", f"{ga.std:.6f}"])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")


def _report(args) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "variant", "seed", "final_iteration", "val_acc", "AVE", "STD", "window", "sel_mean", "sel_CV"])
    for d in run_dirs(args.runs):
        cfg = parse_config(json.loads((d / "config.json").read_text(encoding="utf-8")))
        last = load_metrics(d / "metrics.csv")[-1]
        acc = np.array(last.acc_per_group, dtype=float)
        acc = acc[~np.isnan(acc)]
        its, counts = load_trace(d / "trace.csv")
        lo, hi = args.window if args.window else (0, its[-1] if its else 0)
        sel = np.array([lo < i <= hi for i in its], dtype=bool)
        if sel.any() and counts[sel].sum() > 0:
            mean, cv = selection_cv(counts[sel].sum(axis=0))
            mean_s, cv_s = f"{mean:.6f}", f"{cv:.6f}"
        else:
            mean_s = cv_s = "nan"
        ave = f"{acc.mean():.6f}" if acc.size else "nan"
        std = f"{acc.std():.6f}" if acc.size else "nan"
        w.writerow([str(d), cfg.trainer.variant, cfg.seed, last.iteration, f"{last.val_acc:.6f}", ave, std, f"{lo}:{hi}", mean_s, cv_s])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")


COMMANDS = {"generate": _generate, "train": _train, "eval": _eval, "report": _report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        COMMANDS[args.command](args)
    except MSRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
