"""Command-line front end: ``score``, ``select-source``, ``toy``, ``convert``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import DIRECTIONS, DevConfig
from .feature_store import (
    load_labels,
    load_logit_matrix_csv,
    load_manifest,
    load_prob_matrix,
    load_prob_matrix_csv,
    write_logit_matrix,
    write_prob_matrix,
)
from .selection import CRITERIA, emit_report, score_manifest, select_source_domain, source_domain_scores
from .snd import DEFAULT_BLOCK_ROWS, DEFAULT_TEMPERATURE, SndConfig
from .toy.data import ToyConfig
from .toy.lab import EXPERIMENTS, run_experiment, write_experiment

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _criteria(text: str) -> list[str]:
    items = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in items if c not in CRITERIA]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown criteria {bad}; valid: {','.join(CRITERIA)}")
    return items


def _snd_config(args) -> SndConfig:
    return SndConfig(temperature=args.tau, block_rows=args.block_rows, rng_seed=args.seed)


def cmd_score(args) -> int:
    manifest = load_manifest(args.manifest)
    dev = DevConfig(
        val_per_class=args.val_per_class,
        discriminator_epochs=args.disc_epochs,
        discriminator_lr=args.disc_lr,
        l2_penalty=args.l2_penalty,
        rng_seed=args.seed,
        weight_clip=args.weight_clip,
    )
    oracle = load_labels(args.oracle_labels) if args.oracle_labels else None
    report = score_manifest(manifest, args.criteria, _snd_config(args), dev, oracle_labels=oracle)
    emit_report(report, args.out_json, args.out_csv)
    values = {(r.run_id, r.iteration, r.criterion): r.value for r in report.scores}
    print(f"{'criterion':<16}{'direction':<10}{'run_id':<24}{'iteration':>10}  value")
    for crit, w in report.winners.items():
        v = values[(w["run_id"], w["iteration"], crit)]
        print(f"{crit:<16}{DIRECTIONS[crit]:<10}{w['run_id']:<24}{w['iteration']:>10}  {v:.6f}")
    if report.oracle is not None:
        w = report.oracle["winner"]
        print(f"{'(oracle acc)':<16}{'max':<10}{w['run_id']:<24}{w['iteration']:>10}")
    return EXIT_OK


def _candidate(item: str) -> tuple[str, Path]:
    name, sep, path = item.partition("=")
    if not sep:
        return Path(item).stem, Path(item)
    return name, Path(path)


def cmd_select_source(args) -> int:
    if len(args.candidates) < 2:
        raise UsageError("select-source needs at least 2 candidate dumps")
    candidates = {}
    for item in args.candidates:
        name, path = _candidate(item)
        if name in candidates:
            raise UsageError(f"duplicate candidate name {name!r}")
        candidates[name] = load_prob_matrix(path)
    cfg = _snd_config(args)
    scores = source_domain_scores(candidates, cfg)
    best = select_source_domain(candidates, cfg)
    for name, v in scores.items():
        print(f"{name:<24}snd={v:.6f}{'  <- selected' if name == best else ''}")
    if args.out:
        doc = {"selected": best, "snd": scores}
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise UsageError(f"override {text!r} must look like key=value")
    fields = ToyConfig.__dataclass_fields__
    if key not in fields or key == "rng_seed":
        raise UsageError(f"unknown toy setting {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return key, value


def cmd_toy(args) -> int:
    if args.experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
    overrides = dict(_parse_override(o) for o in args.set)
    seeds = [args.seed + k for k in range(args.n_seeds)]
    result = run_experiment(args.experiment, overrides, seeds)
    csv_path = write_experiment(result, args.out_dir)
    print(f"{result.name}: {'PASS' if result.passed else 'FAIL'} - {result.summary}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if args.kind == "probs":
        write_prob_matrix(args.out, load_prob_matrix_csv(args.in_csv))
    else:
        write_logit_matrix(args.out, load_logit_matrix_csv(args.in_csv))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nbrselect", description="Unsupervised validation of domain-adapted models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def snd_flags(sp):
        sp.add_argument("--tau", type=float, default=DEFAULT_TEMPERATURE, help="SND temperature (default: %(default)s)")
        sp.add_argument("--block-rows", type=int, default=DEFAULT_BLOCK_ROWS, help="kernel tile height (default: %(default)s)")
        sp.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")

    s = sub.add_parser("score", help="score and rank checkpoints listed in a manifest")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--criteria", type=_criteria, default=["snd"], help="comma-separated, from: " + ",".join(CRITERIA))
    s.add_argument("--out-json", type=Path, default=Path("report.json"))
    s.add_argument("--out-csv", type=Path, default=Path("report.csv"))
    s.add_argument("--oracle-labels", type=Path, help="target labels (LBL1); reported only, never used to select")
    snd_flags(s)
    s.add_argument("--val-per-class", type=int, default=3, help="max source-validation rows used per class, 0 = all (default: %(default)s)")
    s.add_argument("--disc-epochs", type=int, default=200, help="domain discriminator epochs (default: %(default)s)")
    s.add_argument("--disc-lr", type=float, default=0.1, help="domain discriminator step size (default: %(default)s)")
    s.add_argument("--l2-penalty", type=float, default=1e-3, help="discriminator L2 penalty (default: %(default)s)")
    s.add_argument("--weight-clip", type=float, default=20.0, help="max importance weight (default: %(default)s)")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("select-source", help="pick the source domain whose model maximizes target SND")
    s.add_argument("candidates", nargs="*", help="PRB1/CSV dumps, optionally as name=path")
    s.add_argument("--out", type=Path)
    snd_flags(s)
    s.set_defaults(func=cmd_select_source)

    s = sub.add_parser("toy", help="run a synthetic Gaussian experiment")
    s.add_argument("--experiment", required=True, help="one of: " + ", ".join(EXPERIMENTS))
    s.add_argument("--seed", type=int, default=0, help="first seed (default: %(default)s)")
    s.add_argument("--n-seeds", type=int, default=3, help="number of consecutive seeds (default: %(default)s)")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a ToyConfig field")
    s.add_argument("--out-dir", type=Path, default=Path("toy_out"))
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("convert", help="convert a CSV table (header c0..c{C-1}) to a binary dump")
    s.add_argument("--in-csv", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--kind", choices=("probs", "logits"), default="probs")
    s.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nbrselect {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"nbrselect {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"nbrselect {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
